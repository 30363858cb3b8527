//! Track geometry, opponents, and the competitive racing scenario.

mod race;
mod track;

pub use race::{
    identify, run_pid_laps, run_race, IdReport, OpponentCar, OvertakeEvent, PidLapData,
    RaceConfig, RaceResult, RaceStep, RaceTermination, RacingCost,
};
pub use track::{Segment, Track};
