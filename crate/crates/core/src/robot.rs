//! Differential-screw needle drive and ISO 230-2 style positioning analytics.
//!
//! The right motor turns the lead-screw gear; the left motor turns the needle
//! housing. Their step difference translates the needle, the left motor alone
//! sets the rotation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotKinematics {
    pub screw_pitch_um: f64,
    pub steps_per_rev: u32,
    /// Measured travel per commanded travel.
    pub cal_scale: f64,
    pub max_travel_um: f64,
    pub max_thrust_n: f64,
    pub max_steps_per_cycle: i64,
}

impl Default for RobotKinematics {
    fn default() -> Self {
        Self {
            screw_pitch_um: 500.0,
            steps_per_rev: 3200,
            cal_scale: 0.96,
            max_travel_um: 1500.0,
            max_thrust_n: 5.0,
            max_steps_per_cycle: 1600,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MotorCommand {
    pub right_steps: i64,
    pub left_steps: i64,
    pub rotate: bool,
}

impl MotorCommand {
    pub fn is_pure_translation(&self) -> bool {
        self.left_steps == 0
    }

    pub fn is_pure_rotation(&self) -> bool {
        self.right_steps == self.left_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    /// Downward needle displacement.
    pub dz_um: f64,
    pub dtheta_rev: f64,
}

impl RobotKinematics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.screw_pitch_um > 0.0
            && self.steps_per_rev > 0
            && self.cal_scale > 0.0
            && self.cal_scale <= 1.2
            && self.max_travel_um > 0.0
            && self.max_steps_per_cycle > 0;
        if !ok {
            return Err(Error::config(format!("invalid kinematics {self:?}")));
        }
        Ok(())
    }

    /// Nominal screw advance of one step.
    pub fn nominal_step_um(&self) -> f64 {
        self.screw_pitch_um / self.steps_per_rev as f64
    }

    /// Actual travel of one step after calibration.
    pub fn step_quantum_um(&self) -> f64 {
        self.cal_scale * self.nominal_step_um()
    }

    /// Split a single large command into per-cycle commands.
    pub fn chunk(&self, cmd: MotorCommand) -> Vec<MotorCommand> {
        let limit = self.max_steps_per_cycle;
        let mut out = Vec::new();
        let (mut r, mut l) = (cmd.right_steps, cmd.left_steps);
        loop {
            let take_r = r.clamp(-limit, limit);
            let take_l = l.clamp(-limit, limit);
            out.push(MotorCommand { right_steps: take_r, left_steps: take_l, rotate: cmd.rotate });
            r -= take_r;
            l -= take_l;
            if r == 0 && l == 0 {
                break out;
            }
        }
    }
}

/// Needle motion produced by one motor command.
pub fn command_to_motion(kin: &RobotKinematics, cmd: &MotorCommand) -> Result<Motion> {
    let dz = kin.cal_scale * (cmd.right_steps - cmd.left_steps) as f64 * kin.nominal_step_um();
    if dz.abs() > kin.max_travel_um {
        return Err(Error::TravelLimit { requested_um: dz.abs(), limit_um: kin.max_travel_um });
    }
    Ok(Motion { dz_um: dz, dtheta_rev: cmd.left_steps as f64 / kin.steps_per_rev as f64 })
}

/// Motor command whose calibrated travel is closest to `target_dz`.
pub fn compensate(kin: &RobotKinematics, target_dz: f64) -> Result<MotorCommand> {
    if !target_dz.is_finite() || target_dz.abs() > kin.max_travel_um {
        return Err(Error::TravelLimit { requested_um: target_dz.abs(), limit_um: kin.max_travel_um });
    }
    let steps = (target_dz / kin.cal_scale / kin.nominal_step_um()).round() as i64;
    Ok(MotorCommand { right_steps: steps, left_steps: 0, rotate: false })
}

/// Pure rotation by `revs` housing revolutions.
pub fn rotation(kin: &RobotKinematics, revs: f64) -> MotorCommand {
    let steps = (revs * kin.steps_per_rev as f64).round() as i64;
    MotorCommand { right_steps: steps, left_steps: steps, rotate: true }
}

/// Per-command Gaussian actuation error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_um: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel { sigma_um: 0.0 };

    /// Gaussian whose mean absolute error equals `mean_abs_um`.
    pub fn from_mean_abs(mean_abs_um: f64) -> Self {
        Self { sigma_um: mean_abs_um / (2.0 / std::f64::consts::PI).sqrt() }
    }

    /// Calibrated to an average positional deviation of 3.88 µm.
    pub fn calibrated() -> Self {
        Self::from_mean_abs(3.88)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma_um == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, self.sigma_um).expect("finite sigma").sample(rng)
    }
}

/// Robot with net position accounting. Position is the downward displacement
/// from the attach pose and may never exceed `max_travel_um`.
#[derive(Debug, Clone)]
pub struct Robot {
    pub kin: RobotKinematics,
    position_um: f64,
    path_um: f64,
    rotating: bool,
}

impl Robot {
    pub fn new(kin: RobotKinematics) -> Self {
        Self { kin, position_um: 0.0, path_um: 0.0, rotating: false }
    }

    pub fn position_um(&self) -> f64 {
        self.position_um
    }

    pub fn path_um(&self) -> f64 {
        self.path_um
    }

    pub fn rotating(&self) -> bool {
        self.rotating
    }

    pub fn set_rotating(&mut self, on: bool) {
        self.rotating = on;
    }

    /// Apply a command, adding `actuation_error` to the realized travel.
    /// Commands that would cross the travel limit are refused whole.
    pub fn execute(&mut self, cmd: &MotorCommand, actuation_error: f64) -> Result<Motion> {
        let mut motion = command_to_motion(&self.kin, cmd)?;
        if cmd.right_steps.abs() > self.kin.max_steps_per_cycle || cmd.left_steps.abs() > self.kin.max_steps_per_cycle {
            return Err(Error::contract("motor command exceeds per-cycle step limit"));
        }
        if motion.dz_um != 0.0 {
            motion.dz_um += actuation_error;
        }
        let next = self.position_um + motion.dz_um;
        if next > self.kin.max_travel_um {
            return Err(Error::TravelLimit { requested_um: next, limit_um: self.kin.max_travel_um });
        }
        self.position_um = next;
        self.path_um += motion.dz_um.abs();
        if cmd.rotate {
            self.rotating = true;
        }
        Ok(motion)
    }
}

/// ISO target positions `p_i = (i - 1) p + r_i` with `|r_i| <= 0.3 p`.
/// The first offset is drawn non-negative so every target lies on the axis.
pub fn iso_targets(p: f64, seed: u64, max_travel_um: f64) -> Result<Vec<f64>> {
    if !(p > 0.0) {
        return Err(Error::contract(format!("interval {p} must be > 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<f64> = (1..=10)
        .map(|i| {
            let r = if i == 1 { rng.random_range(0.0..=0.3 * p) } else { rng.random_range(-0.3 * p..=0.3 * p) };
            iso_position(i, p, r)
        })
        .collect();
    if let Some(bad) = targets.iter().find(|&&t| t > max_travel_um) {
        return Err(Error::TravelLimit { requested_um: *bad, limit_um: max_travel_um });
    }
    Ok(targets)
}

pub fn iso_position(i: usize, p: f64, r: f64) -> f64 {
    (i as f64 - 1.0) * p + r
}

/// Measured positions for each target, per approach direction.
/// `forward[run][position]`, `backward[run][position]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoRuns {
    pub targets: Vec<f64>,
    pub forward: Vec<Vec<f64>>,
    pub backward: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoReport {
    pub targets: Vec<f64>,
    /// Mean signed deviation per position, both directions pooled.
    pub position_mean_deviation: Vec<f64>,
    /// Sample standard deviation per position and direction: `[forward, backward]`.
    pub position_sigma: Vec<[f64; 2]>,
    /// Mean absolute deviation over all approaches.
    pub average_deviation: f64,
    /// Mean signed deviation over all approaches.
    pub mean_deviation: f64,
    pub max_sigma: f64,
    /// `4 * max_sigma`.
    pub repeatability: f64,
    /// `|mean_deviation| + 2 * max_sigma`.
    pub accuracy: f64,
    /// `deviations[run][direction][position]`.
    pub deviations: Vec<[Vec<f64>; 2]>,
}

pub const MIN_ISO_RUNS: usize = 5;

pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn iso_metrics(runs: &IsoRuns) -> Result<IsoReport> {
    let n_pos = runs.targets.len();
    if runs.forward.len() < MIN_ISO_RUNS || runs.backward.len() < MIN_ISO_RUNS {
        return Err(Error::contract(format!(
            "need at least {MIN_ISO_RUNS} runs per direction, got {} / {}",
            runs.forward.len(),
            runs.backward.len()
        )));
    }
    if n_pos == 0 || runs.forward.iter().chain(&runs.backward).any(|r| r.len() != n_pos) {
        return Err(Error::contract("every run must measure every target"));
    }
    let dev = |run: &[f64]| -> Vec<f64> { run.iter().zip(&runs.targets).map(|(m, t)| m - t).collect() };
    let fwd: Vec<Vec<f64>> = runs.forward.iter().map(|r| dev(r)).collect();
    let bwd: Vec<Vec<f64>> = runs.backward.iter().map(|r| dev(r)).collect();

    let mut position_mean_deviation = Vec::with_capacity(n_pos);
    let mut position_sigma = Vec::with_capacity(n_pos);
    for j in 0..n_pos {
        let f: Vec<f64> = fwd.iter().map(|r| r[j]).collect();
        let b: Vec<f64> = bwd.iter().map(|r| r[j]).collect();
        let all: f64 = f.iter().chain(&b).sum();
        position_mean_deviation.push(all / (f.len() + b.len()) as f64);
        position_sigma.push([sample_std(&f), sample_std(&b)]);
    }
    let all: Vec<f64> = fwd.iter().chain(&bwd).flatten().copied().collect();
    let count = all.len() as f64;
    let mean_deviation = all.iter().sum::<f64>() / count;
    let average_deviation = all.iter().map(|v| v.abs()).sum::<f64>() / count;
    let max_sigma = position_sigma.iter().flat_map(|s| s.iter().copied()).fold(0.0, f64::max);
    let deviations = fwd.into_iter().zip(bwd).map(|(f, b)| [f, b]).collect();
    Ok(IsoReport {
        targets: runs.targets.clone(),
        position_mean_deviation,
        position_sigma,
        average_deviation,
        mean_deviation,
        max_sigma,
        repeatability: 4.0 * max_sigma,
        accuracy: mean_deviation.abs() + 2.0 * max_sigma,
        deviations,
    })
}

impl IsoReport {
    /// Tab-delimited table: one row per target then the summary triple.
    pub fn to_table(&self) -> String {
        let mut out = String::from("position\ttarget_um\tmean_dev_um\tsigma_fwd_um\tsigma_bwd_um\n");
        for (i, t) in self.targets.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
                i + 1,
                t,
                self.position_mean_deviation[i],
                self.position_sigma[i][0],
                self.position_sigma[i][1]
            );
        }
        out.push_str("deviation_um\trepeatability_um\taccuracy_um\n");
        let _ = writeln!(out, "{:.2}\t{:.2}\t{:.2}", self.average_deviation, self.repeatability, self.accuracy);
        out
    }
}
