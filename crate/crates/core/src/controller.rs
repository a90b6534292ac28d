//! Autonomous depth controller.
//!
//! One call to [`Controller::tick`] per tracked frame. In autonomous mode the
//! controller approaches the epithelium, detects contact, then advances in a
//! repeating ADVANCE, ADVANCE, ROTATE pattern until the needle sits
//! `target_gap_um` above DM, halving the step inside the slow zone. In teleop
//! mode only operator commands move the needle.

use serde::{Deserialize, Serialize};

use crate::dsp::needle_offset_optical;
use crate::error::{Error, Result};
use crate::robot::{command_to_motion, compensate, rotation, MotorCommand, RobotKinematics};
use crate::tracker::LayerEstimate;

pub const DEFAULT_CYCLE_PERIOD_S: f64 = 1.0 / 6.64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Attached,
    Contact,
    Running,
    TargetReached,
    Retracting,
    Error,
}

impl Phase {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        use Phase::*;
        [Idle, Attached, Contact, Running, TargetReached, Retracting, Error].get(code as usize).copied()
    }

    fn can_go(self, to: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, to),
            (Idle, Attached)
                | (Attached, Contact)
                | (Contact, Running)
                | (Running, TargetReached)
                | (Running | Attached | Contact, Error)
                | (TargetReached | Error, Retracting)
                | (Retracting, Idle)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmMode {
    #[default]
    Autonomous,
    Teleop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub target_gap_um: f64,
    pub step_size_um: f64,
    pub slow_zone_um: f64,
    pub mode: ArmMode,
    pub max_travel_um: f64,
    pub contact_tolerance_um: f64,
    /// Frames a missing DM trace may be bridged with the held estimate.
    pub hold_frames: u32,
    pub retract_clearance_um: f64,
    /// Housing revolutions per ROTATE primitive.
    pub rotate_revs: f64,
    pub cycle_period_s: f64,
    pub needle_offset_um: f64,
    pub n_s: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            target_gap_um: 100.0,
            step_size_um: 20.0,
            slow_zone_um: 100.0,
            mode: ArmMode::Autonomous,
            max_travel_um: 1500.0,
            contact_tolerance_um: 10.0,
            hold_frames: 3,
            retract_clearance_um: 200.0,
            rotate_revs: 0.25,
            cycle_period_s: DEFAULT_CYCLE_PERIOD_S,
            needle_offset_um: 500.0,
            n_s: 1.321,
        }
    }
}

pub const STEP_RANGE: (f64, f64) = (1.0, 150.0);

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(STEP_RANGE.0..=STEP_RANGE.1).contains(&self.step_size_um) {
            return Err(Error::OutOfRange { what: "step_size_um", value: self.step_size_um, min: STEP_RANGE.0, max: STEP_RANGE.1 });
        }
        let ok = self.target_gap_um >= 0.0
            && self.slow_zone_um >= 0.0
            && self.max_travel_um > 0.0
            && self.contact_tolerance_um >= 0.0
            && self.retract_clearance_um >= 0.0
            && self.rotate_revs.is_finite()
            && self.cycle_period_s > 0.0
            && self.needle_offset_um > 0.0
            && self.n_s >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid controller config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Advance { delta_um: f64 },
    Rotate,
}

/// Operator commands arriving from the console.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "value", rename_all = "snake_case")]
pub enum OperatorCommand {
    StepDown(f64),
    StepUp(f64),
    RotateOn,
    RotateOff,
    SetTarget(f64),
    SetStep(f64),
    StartAuto,
    Pause,
    Retract,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ControllerEvent {
    Phase { from: Phase, to: Phase },
    Approach { delta_um: f64, air_gap_um: f64 },
    Contact { epi_optical_um: f64, travel_um: f64 },
    SlowZone { gap_to_target_um: f64 },
    Advance { delta_um: f64, step_size_um: f64, gap_to_target_um: f64, travel_um: f64 },
    Rotate { revs: f64 },
    Hold { streak: u32 },
    TargetReached { gap_um: Option<f64>, travel_um: f64, at_limit: bool },
    Warning { message: String },
    Error { message: String },
    Retract { distance_um: f64, chunks: usize },
    Operator { command: OperatorCommand },
    Perforation { travel_um: f64 },
    SeqRegression { last: u64, got: u64 },
}

/// One log line: the tick, the frame it reacted to, and the event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub tick: u64,
    pub frame_seq: u64,
    #[serde(flatten)]
    pub event: ControllerEvent,
}

/// Contact when the fiber-to-epithelium optical distance is within
/// `tolerance_um` of the lumen length.
pub fn detect_contact(estimate: &LayerEstimate, needle_offset_optical_um: f64, tolerance_um: f64) -> bool {
    match (estimate.valid_epi, estimate.epi_optical_um) {
        (true, Some(d)) => d <= needle_offset_optical_um + tolerance_um,
        _ => false,
    }
}

/// Advance for one planning step: full step outside the slow zone, half
/// inside.
pub fn plan_step(step_size_um: f64, gap_to_target_um: f64, slow_zone_um: f64) -> f64 {
    if gap_to_target_um >= slow_zone_um {
        step_size_um
    } else {
        step_size_um / 2.0
    }
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub config: ControllerConfig,
    pub kin: RobotKinematics,
    phase: Phase,
    travel_um: f64,
    tick: u64,
    last_seq: Option<u64>,
    cycle: usize,
    invalid_streak: u32,
    in_slow_zone: bool,
    paused: bool,
    rotating: bool,
    quality_warned: bool,
    last_gap: Option<f64>,
    contact_tick: Option<u64>,
    target_tick: Option<u64>,
    log: Vec<LogRecord>,
}

impl Controller {
    pub fn new(config: ControllerConfig, kin: RobotKinematics) -> Result<Self> {
        config.validate()?;
        kin.validate()?;
        Ok(Self {
            config,
            kin,
            phase: Phase::Idle,
            travel_um: 0.0,
            tick: 0,
            last_seq: None,
            cycle: 0,
            invalid_streak: 0,
            in_slow_zone: false,
            paused: false,
            rotating: false,
            quality_warned: false,
            last_gap: None,
            contact_tick: None,
            target_tick: None,
            log: Vec::new(),
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Net commanded travel below the attach pose.
    pub fn travel_um(&self) -> f64 {
        self.travel_um
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    /// Refraction correction is applied from contact onward.
    pub fn correction_active(&self) -> bool {
        self.contact_tick.is_some()
    }

    pub fn contact_tick(&self) -> Option<u64> {
        self.contact_tick
    }

    pub fn target_tick(&self) -> Option<u64> {
        self.target_tick
    }

    /// Seconds from contact to target.
    pub fn completion_s(&self) -> Option<f64> {
        Some((self.target_tick? - self.contact_tick?) as f64 * self.config.cycle_period_s)
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<LogRecord> {
        std::mem::take(&mut self.log)
    }

    fn emit(&mut self, event: ControllerEvent) {
        let frame_seq = self.last_seq.unwrap_or(0);
        self.log.push(LogRecord { tick: self.tick, frame_seq, event });
    }

    fn go(&mut self, to: Phase) -> Result<()> {
        if !self.phase.can_go(to) {
            return Err(Error::Transition { from: format!("{:?}", self.phase), to: format!("{to:?}") });
        }
        self.emit(ControllerEvent::Phase { from: self.phase, to });
        self.phase = to;
        Ok(())
    }

    pub fn attach(&mut self) -> Result<()> {
        self.go(Phase::Attached)
    }

    /// Record a perforation reported by the simulator.
    pub fn note_perforation(&mut self) {
        self.emit(ControllerEvent::Perforation { travel_um: self.travel_um });
    }

    /// Compensated translation, checked against the travel limit and split
    /// into per-cycle commands.
    fn translate(&mut self, dz_um: f64) -> Result<Vec<MotorCommand>> {
        let cmd = compensate(&self.kin, dz_um)?;
        let dz = command_to_motion(&self.kin, &cmd)?.dz_um;
        let limit = self.config.max_travel_um.min(self.kin.max_travel_um);
        if self.travel_um + dz > limit {
            return Err(Error::TravelLimit { requested_um: self.travel_um + dz, limit_um: limit });
        }
        self.travel_um += dz;
        Ok(self.kin.chunk(MotorCommand { rotate: self.rotating, ..cmd }))
    }

    fn rotate(&mut self) -> MotorCommand {
        self.rotating = true;
        self.emit(ControllerEvent::Rotate { revs: self.config.rotate_revs });
        rotation(&self.kin, self.config.rotate_revs)
    }

    /// Operator input. Motion commands pass straight through in teleop mode;
    /// in autonomous mode they are refused except retraction.
    pub fn operator(&mut self, command: OperatorCommand) -> Result<Vec<MotorCommand>> {
        self.emit(ControllerEvent::Operator { command });
        match command {
            OperatorCommand::StepDown(um) | OperatorCommand::StepUp(um) => {
                if self.config.mode != ArmMode::Teleop {
                    return Err(Error::contract("manual steps are only accepted in teleop mode"));
                }
                if !(STEP_RANGE.0..=STEP_RANGE.1).contains(&um) {
                    return Err(Error::OutOfRange { what: "step", value: um, min: STEP_RANGE.0, max: STEP_RANGE.1 });
                }
                if !matches!(self.phase, Phase::Attached | Phase::Contact | Phase::Running) {
                    return Err(Error::contract(format!("cannot step in phase {:?}", self.phase)));
                }
                let dz = if matches!(command, OperatorCommand::StepDown(_)) { um } else { -um };
                self.translate(dz)
            }
            OperatorCommand::RotateOn => {
                if self.config.mode != ArmMode::Teleop {
                    return Err(Error::contract("manual rotation is only accepted in teleop mode"));
                }
                Ok(vec![self.rotate()])
            }
            OperatorCommand::RotateOff => {
                self.rotating = false;
                Ok(Vec::new())
            }
            OperatorCommand::SetTarget(um) => {
                if !(um >= 0.0) {
                    return Err(Error::OutOfRange { what: "target_gap_um", value: um, min: 0.0, max: f64::INFINITY });
                }
                self.config.target_gap_um = um;
                Ok(Vec::new())
            }
            OperatorCommand::SetStep(um) => {
                if !(STEP_RANGE.0..=STEP_RANGE.1).contains(&um) {
                    return Err(Error::OutOfRange { what: "step_size_um", value: um, min: STEP_RANGE.0, max: STEP_RANGE.1 });
                }
                self.config.step_size_um = um;
                Ok(Vec::new())
            }
            OperatorCommand::StartAuto => {
                self.config.mode = ArmMode::Autonomous;
                self.paused = false;
                Ok(Vec::new())
            }
            OperatorCommand::Pause => {
                self.paused = true;
                Ok(Vec::new())
            }
            OperatorCommand::Retract => {
                if self.phase == Phase::Running {
                    self.target_tick = Some(self.tick);
                    self.emit(ControllerEvent::TargetReached { gap_um: self.last_gap, travel_um: self.travel_um, at_limit: false });
                    self.go(Phase::TargetReached)?;
                } else if matches!(self.phase, Phase::Attached | Phase::Contact) {
                    self.go(Phase::Error)?;
                }
                self.retract()
            }
        }
    }

    /// React to one tracked frame.
    pub fn tick(&mut self, estimate: &LayerEstimate) -> Result<Vec<MotorCommand>> {
        self.tick += 1;
        if let Some(last) = self.last_seq {
            if estimate.frame_seq < last {
                self.emit(ControllerEvent::SeqRegression { last, got: estimate.frame_seq });
                return Ok(Vec::new());
            }
        }
        self.last_seq = Some(estimate.frame_seq);
        if estimate.quality_warning && !self.quality_warned {
            self.emit(ControllerEvent::Warning { message: "needle position disagrees with epithelium trace".into() });
        }
        self.quality_warned = estimate.quality_warning;
        self.last_gap = estimate.gap_above_dm_um.or(self.last_gap);
        match self.phase {
            Phase::Attached => self.tick_attached(estimate),
            Phase::Contact => {
                self.go(Phase::Running)?;
                self.tick_running(estimate)
            }
            Phase::Running => self.tick_running(estimate),
            _ => Ok(Vec::new()),
        }
    }

    fn lost_trace(&mut self, valid: bool) -> Result<bool> {
        if valid {
            self.invalid_streak = 0;
            return Ok(false);
        }
        self.invalid_streak += 1;
        if self.invalid_streak > self.config.hold_frames {
            self.emit(ControllerEvent::Error { message: format!("layer trace lost for {} frames", self.invalid_streak) });
            self.go(Phase::Error)?;
        } else {
            self.emit(ControllerEvent::Hold { streak: self.invalid_streak });
        }
        Ok(true)
    }

    fn tick_attached(&mut self, est: &LayerEstimate) -> Result<Vec<MotorCommand>> {
        let lumen = needle_offset_optical(self.config.needle_offset_um, self.config.n_s)?;
        if detect_contact(est, lumen, self.config.contact_tolerance_um) {
            self.invalid_streak = 0;
            self.contact_tick = Some(self.tick);
            self.emit(ControllerEvent::Contact {
                epi_optical_um: est.epi_optical_um.expect("contact needs a trace"),
                travel_um: self.travel_um,
            });
            self.go(Phase::Contact)?;
            return Ok(Vec::new());
        }
        if self.config.mode == ArmMode::Teleop || self.paused {
            return Ok(Vec::new());
        }
        let epi = if est.valid_epi { est.epi_optical_um } else { None };
        if self.lost_trace(epi.is_some())? {
            if !est.valid_epi && self.phase == Phase::Attached {
                self.emit(ControllerEvent::Warning { message: "no epithelium trace, contact cannot be evaluated".into() });
            }
            return Ok(Vec::new());
        }
        let air_gap = epi.expect("checked") - lumen;
        let delta = self.config.step_size_um.min(air_gap.max(0.0));
        if delta <= 0.0 {
            return Ok(Vec::new());
        }
        self.emit(ControllerEvent::Approach { delta_um: delta, air_gap_um: air_gap });
        match self.translate(delta) {
            Ok(cmds) => Ok(cmds),
            Err(Error::TravelLimit { .. }) => {
                self.emit(ControllerEvent::Error { message: "travel limit reached before contact".into() });
                self.go(Phase::Error)?;
                Ok(Vec::new())
            }
            Err(e) => Err(e),
        }
    }

    fn tick_running(&mut self, est: &LayerEstimate) -> Result<Vec<MotorCommand>> {
        if self.config.mode == ArmMode::Teleop || self.paused {
            return Ok(Vec::new());
        }
        if self.lost_trace(est.valid_dm)? {
            return Ok(Vec::new());
        }
        let Some(gap) = est.gap_above_dm_um else {
            return Ok(Vec::new());
        };
        let gap_to_target = gap - self.config.target_gap_um;
        let primitive = [Primitive::Advance { delta_um: 0.0 }, Primitive::Advance { delta_um: 0.0 }, Primitive::Rotate]
            [self.cycle % 3];
        let delta = plan_step(self.config.step_size_um, gap_to_target, self.config.slow_zone_um);
        if gap_to_target <= 0.0 || gap_to_target - delta < 0.0 {
            self.target_tick = Some(self.tick);
            self.emit(ControllerEvent::TargetReached { gap_um: Some(gap), travel_um: self.travel_um, at_limit: false });
            self.go(Phase::TargetReached)?;
            return Ok(Vec::new());
        }
        if gap_to_target < self.config.slow_zone_um && !self.in_slow_zone {
            self.in_slow_zone = true;
            self.emit(ControllerEvent::SlowZone { gap_to_target_um: gap_to_target });
        }
        self.cycle += 1;
        match primitive {
            Primitive::Rotate => Ok(vec![self.rotate()]),
            Primitive::Advance { .. } => {
                let limit = self.config.max_travel_um.min(self.kin.max_travel_um);
                if self.travel_um + delta > limit {
                    self.target_tick = Some(self.tick);
                    self.emit(ControllerEvent::TargetReached { gap_um: Some(gap), travel_um: self.travel_um, at_limit: true });
                    self.go(Phase::TargetReached)?;
                    return Ok(Vec::new());
                }
                let travel_before = self.travel_um;
                let cmds = self.translate(delta)?;
                self.emit(ControllerEvent::Advance {
                    delta_um: delta,
                    step_size_um: self.config.step_size_um,
                    gap_to_target_um: gap_to_target,
                    travel_um: travel_before,
                });
                Ok(cmds)
            }
        }
    }

    /// Withdraw by the net travel plus the clearance. Returns per-cycle
    /// commands; call [`Controller::finish_retract`] once they are executed.
    pub fn retract(&mut self) -> Result<Vec<MotorCommand>> {
        self.go(Phase::Retracting)?;
        let distance = self.travel_um + self.config.retract_clearance_um;
        self.rotating = false;
        let cmd = compensate(&self.kin, -distance)?;
        self.travel_um += command_to_motion(&self.kin, &cmd)?.dz_um;
        let chunks = self.kin.chunk(cmd);
        self.emit(ControllerEvent::Retract { distance_um: distance, chunks: chunks.len() });
        Ok(chunks)
    }

    pub fn finish_retract(&mut self) -> Result<()> {
        self.go(Phase::Idle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn estimate(seq: u64, epi_optical: Option<f64>, gap: Option<f64>) -> LayerEstimate {
        LayerEstimate {
            frame_seq: seq,
            epi_px: None,
            dm_px: None,
            epi_um: None,
            dm_um: gap.map(|g| g + 500.0),
            needle_tip_um: 500.0,
            gap_above_dm_um: gap,
            valid_epi: epi_optical.is_some(),
            valid_dm: gap.is_some(),
            epi_optical_um: epi_optical,
            correction_active: false,
            quality_warning: false,
        }
    }

    fn running(step: f64) -> Controller {
        let cfg = ControllerConfig { step_size_um: step, ..Default::default() };
        let mut c = Controller::new(cfg, RobotKinematics::default()).unwrap();
        c.attach().unwrap();
        c.tick(&estimate(0, Some(660.0), None)).unwrap();
        assert_eq!(c.phase(), Phase::Contact);
        c
    }

    fn advanced(cmds: &[MotorCommand], kin: &RobotKinematics) -> f64 {
        cmds.iter().map(|c| command_to_motion(kin, c).unwrap().dz_um).sum()
    }

    #[test]
    fn contact_examples() {
        assert!(detect_contact(&estimate(0, Some(660.0), None), 660.5, 10.0));
        assert!(!detect_contact(&estimate(0, Some(900.0), None), 660.5, 10.0));
        assert!(!detect_contact(&estimate(0, None, None), 660.5, 10.0));
    }

    #[test]
    fn step_planning() {
        assert_eq!(plan_step(40.0, 150.0, 100.0), 40.0);
        assert_eq!(plan_step(40.0, 80.0, 100.0), 20.0);
        let mut c = running(40.0);
        let kin = c.kin.clone();
        let cmds = c.tick(&estimate(1, None, Some(250.0))).unwrap();
        assert!((advanced(&cmds, &kin) - 40.0).abs() <= kin.step_quantum_um());
        let cmds = c.tick(&estimate(2, None, Some(180.0))).unwrap();
        assert!((advanced(&cmds, &kin) - 20.0).abs() <= kin.step_quantum_um());
        // third cycle rotates
        let cmds = c.tick(&estimate(3, None, Some(160.0))).unwrap();
        assert!(cmds.len() == 1 && cmds[0].is_pure_rotation());
        c.tick(&estimate(4, None, Some(100.0))).unwrap();
        assert_eq!(c.phase(), Phase::TargetReached);
    }

    #[test]
    fn hold_then_error() {
        let mut c = running(20.0);
        for seq in 1..=3 {
            assert!(c.tick(&estimate(seq, None, None)).unwrap().is_empty());
            assert_eq!(c.phase(), Phase::Running);
        }
        c.tick(&estimate(4, None, None)).unwrap();
        assert_eq!(c.phase(), Phase::Error);
    }

    #[test]
    fn retraction_distance() {
        let mut c = running(20.0);
        let kin = c.kin.clone();
        c.travel_um = 850.0;
        c.go(Phase::Running).unwrap();
        c.go(Phase::TargetReached).unwrap();
        let cmds = c.retract().unwrap();
        assert!((advanced(&cmds, &kin) + 1050.0).abs() <= kin.step_quantum_um());
        assert!(cmds.iter().all(|m| m.right_steps.abs() <= kin.max_steps_per_cycle));
        c.finish_retract().unwrap();
        assert_eq!(c.phase(), Phase::Idle);

        let mut c = running(20.0);
        c.go(Phase::Error).unwrap();
        let cmds = c.retract().unwrap();
        assert!((advanced(&cmds, &kin) + 200.0).abs() <= kin.step_quantum_um());
    }

    #[test]
    fn teleop_pass_through() {
        let cfg = ControllerConfig { mode: ArmMode::Teleop, ..Default::default() };
        let mut c = Controller::new(cfg, RobotKinematics::default()).unwrap();
        c.attach().unwrap();
        let cmds = c.operator(OperatorCommand::StepDown(50.0)).unwrap();
        assert_eq!(cmds.len(), 1);
        assert!(cmds[0].is_pure_translation());
        assert!((advanced(&cmds, &c.kin) - 50.0).abs() <= c.kin.step_quantum_um());
        assert!(c.tick(&estimate(0, Some(900.0), None)).unwrap().is_empty());
        assert!(c.operator(OperatorCommand::SetStep(200.0)).is_err());
    }

    #[test]
    fn illegal_transition_rejected() {
        let mut c = Controller::new(ControllerConfig::default(), RobotKinematics::default()).unwrap();
        assert!(c.retract().is_err());
        assert!(c.go(Phase::Running).is_err());
    }

    #[test]
    fn seq_regression_is_logged() {
        let mut c = running(20.0);
        c.tick(&estimate(5, None, Some(300.0))).unwrap();
        assert!(c.tick(&estimate(4, None, Some(300.0))).unwrap().is_empty());
        assert!(matches!(c.log().last().unwrap().event, ControllerEvent::SeqRegression { last: 5, got: 4 }));
    }

    #[test]
    fn phase_codes_round_trip() {
        for code in 0..7 {
            assert_eq!(Phase::from_code(code).unwrap().code(), code);
        }
        assert_eq!(Phase::from_code(7), None);
    }
}
