//! Closed-loop track centerlines in arc-length parameterization.

use crate::{Error, Result};

/// One centerline piece. Arcs carry a signed angle: positive turns left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Straight { length: f64 },
    Arc { radius: f64, angle: f64 },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match self {
            Segment::Straight { length } => *length,
            Segment::Arc { radius, angle } => radius * angle.abs(),
        }
    }

    pub fn curvature(&self) -> f64 {
        match self {
            Segment::Straight { .. } => 0.0,
            Segment::Arc { radius, angle } => angle.signum() / radius,
        }
    }
}

/// A closed centerline with piecewise-constant curvature.
///
/// Arc length `s` is measured from the start pose `(0, 0, heading 0)` and
/// wraps modulo the total length.
#[derive(Debug, Clone)]
pub struct Track {
    segments: Vec<Segment>,
    half_width: f64,
    /// Cumulative arc length at the start of each segment.
    seg_start_s: Vec<f64>,
    /// Pose `(x, y, heading)` at the start of each segment.
    seg_start_pose: Vec<(f64, f64, f64)>,
    length: f64,
}

impl Track {
    pub fn new(segments: Vec<Segment>, half_width: f64) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidProblem("track needs at least one segment".into()));
        }
        if half_width <= 0.0 {
            return Err(Error::InvalidProblem(format!(
                "track half width must be positive, got {half_width}"
            )));
        }
        for seg in &segments {
            match seg {
                Segment::Straight { length } if *length <= 0.0 => {
                    return Err(Error::InvalidProblem(format!(
                        "straight length must be positive, got {length}"
                    )));
                }
                Segment::Arc { radius, angle } if *radius <= 0.0 || *angle == 0.0 => {
                    return Err(Error::InvalidProblem(format!(
                        "arc needs positive radius and nonzero angle, got radius {radius}, angle {angle}"
                    )));
                }
                _ => {}
            }
        }

        let mut seg_start_s = Vec::with_capacity(segments.len());
        let mut seg_start_pose = Vec::with_capacity(segments.len());
        let mut s = 0.0;
        let mut pose = (0.0f64, 0.0f64, 0.0f64);
        for seg in &segments {
            seg_start_s.push(s);
            seg_start_pose.push(pose);
            pose = advance(pose, seg, seg.length());
            s += seg.length();
        }

        // Closure: the end pose must return to the start.
        let (xe, ye, he) = pose;
        let pos_gap = (xe * xe + ye * ye).sqrt();
        let heading_gap = (he.rem_euclid(2.0 * std::f64::consts::PI)).min(
            (2.0 * std::f64::consts::PI - he.rem_euclid(2.0 * std::f64::consts::PI)).abs(),
        );
        if pos_gap > 1e-9 || heading_gap > 1e-9 {
            return Err(Error::InvalidProblem(format!(
                "track is not closed: end position gap {pos_gap:.3e}, heading gap {heading_gap:.3e}"
            )));
        }

        Ok(Self {
            segments,
            half_width,
            seg_start_s,
            seg_start_pose,
            length: s,
        })
    }

    /// The default test loop: two 4 m straights joined by two 180-degree
    /// arcs of radius 1 m, half width 0.4 m.
    pub fn default_loop() -> Track {
        Track::new(
            vec![
                Segment::Straight { length: 4.0 },
                Segment::Arc {
                    radius: 1.0,
                    angle: std::f64::consts::PI,
                },
                Segment::Straight { length: 4.0 },
                Segment::Arc {
                    radius: 1.0,
                    angle: std::f64::consts::PI,
                },
            ],
            0.4,
        )
        .expect("default loop closes")
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Wrap an arc-length coordinate into `[0, L)`.
    pub fn wrap_position(&self, s: f64) -> f64 {
        s.rem_euclid(self.length)
    }

    /// Shortest signed arc-length difference, in `(-L/2, L/2]`.
    pub fn wrap_delta(&self, ds: f64) -> f64 {
        crate::barriers::wrap_signed(ds, self.length)
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = self.wrap_position(s);
        // Linear scan: tracks have a handful of segments.
        for i in (0..self.segments.len()).rev() {
            if s >= self.seg_start_s[i] {
                return (i, s - self.seg_start_s[i]);
            }
        }
        (0, s)
    }

    /// Piecewise-constant curvature at arc length `s` (wrapped).
    pub fn curvature_at(&self, s: f64) -> f64 {
        let (i, _) = self.segment_at(s);
        self.segments[i].curvature()
    }

    /// Global pose of the point at arc length `s`, offset `e_y` along the
    /// left normal of the centerline.
    pub fn curvilinear_to_global(&self, s: f64, e_y: f64) -> (f64, f64, f64) {
        let (i, ds) = self.segment_at(s);
        let (x, y, heading) = advance(self.seg_start_pose[i], &self.segments[i], ds);
        (
            x - e_y * heading.sin(),
            y + e_y * heading.cos(),
            heading,
        )
    }
}

/// Pose after traveling `ds` along a segment from `pose`.
fn advance(pose: (f64, f64, f64), seg: &Segment, ds: f64) -> (f64, f64, f64) {
    let (x, y, h) = pose;
    match seg {
        Segment::Straight { .. } => (x + ds * h.cos(), y + ds * h.sin(), h),
        Segment::Arc { .. } => {
            let kappa = seg.curvature();
            let (cx, cy) = (x - h.sin() / kappa, y + h.cos() / kappa);
            let turned = kappa * ds;
            let (dx, dy) = (x - cx, y - cy);
            (
                cx + dx * turned.cos() - dy * turned.sin(),
                cy + dx * turned.sin() + dy * turned.cos(),
                h + turned,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn default_loop_closes_and_measures() {
        let t = Track::default_loop();
        assert_abs_diff_eq!(t.length(), 8.0 + 2.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn curvature_piecewise_values() {
        let t = Track::default_loop();
        assert_eq!(t.curvature_at(1.0), 0.0);
        assert_eq!(t.curvature_at(4.0 + 0.5), 1.0);
        assert_eq!(t.curvature_at(4.0 + PI + 1.0), 0.0);
    }

    #[test]
    fn left_arc_of_radius_two_has_half_curvature() {
        let t = Track::new(
            vec![
                Segment::Straight { length: 1.0 },
                Segment::Arc { radius: 2.0, angle: PI },
                Segment::Straight { length: 1.0 },
                Segment::Arc { radius: 2.0, angle: PI },
            ],
            0.5,
        )
        .unwrap();
        assert_abs_diff_eq!(t.curvature_at(1.5), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn wraparound_matches_unwrapped() {
        let t = Track::default_loop();
        let l = t.length();
        assert_abs_diff_eq!(t.curvature_at(l + 0.3), t.curvature_at(0.3), epsilon = 1e-15);
        let a = t.curvilinear_to_global(l + 0.3, 0.0);
        let b = t.curvilinear_to_global(0.3, 0.0);
        assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-9);
    }

    #[test]
    fn origin_pose_and_left_offset() {
        let t = Track::default_loop();
        let (x, y, h) = t.curvilinear_to_global(0.0, 0.0);
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-12);
        // On the first straight (heading +x), positive e_y points to +y.
        let (_, y_off, _) = t.curvilinear_to_global(2.0, 0.1);
        assert_abs_diff_eq!(y_off, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn quarter_circle_endpoint_matches_hand_geometry() {
        // Quarter arc of radius 1 starting at the origin heading +x:
        // endpoint (1, 1), heading pi/2.
        let pose = advance((0.0, 0.0, 0.0), &Segment::Arc { radius: 1.0, angle: PI / 2.0 }, PI / 2.0);
        assert_abs_diff_eq!(pose.0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pose.1, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pose.2, PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn unclosed_track_is_rejected() {
        let err = Track::new(vec![Segment::Straight { length: 1.0 }], 0.4).unwrap_err();
        assert!(matches!(err, Error::InvalidProblem(_)));
    }
}
