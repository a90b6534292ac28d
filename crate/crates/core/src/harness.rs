//! Seeded end-to-end trials. A [`Trial`] owns one phantom, robot, tracker and
//! controller and advances them one tracked frame per [`Trial::step`].
//! Cohorts derive a seed per trial from a master seed.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::{ArmMode, Controller, ControllerConfig, LogRecord, OperatorCommand, Phase};
use crate::cornea::{
    advance_needle, ground_truth, pneumodissect, retract_needle, InteractionConfig, NeedleState, PneumoOutcome,
    TissueEvent, TissuePhantom,
};
use crate::dataset::render_mscan;
use crate::dsp::{DepthAxis, MScan, N_BINS};
use crate::error::{Error, Result};
use crate::robot::{
    command_to_motion, compensate, iso_metrics, iso_targets, sample_std, IsoReport, IsoRuns, MotorCommand, NoiseModel,
    Robot, RobotKinematics,
};
use crate::segnet::{io as net_io, NetParams};
use crate::tracker::{raw_depths, EdgeObservation, LayerEstimate, Tracker, TrackerConfig};

/// SplitMix64 output for `state`.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed `index` of `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

const STREAM_TRACK: u64 = 1;
const STREAM_OPERATOR: u64 = 2;
const STREAM_PNEUMO: u64 = 3;
const STREAM_IMAGING: u64 = 4;
const STREAM_PHANTOM: u64 = 5;
const STREAM_ACTUATION: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingKind {
    Neural,
    /// Ground-truth layer rows with Gaussian depth noise.
    #[default]
    OracleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub kind: TrackingKind,
    /// Per-frame noise on each layer depth, geometric µm.
    pub noise_sd_um: f64,
    pub tracker: TrackerConfig,
    /// Segmentation weights, required for the neural tracker.
    pub weights: Option<PathBuf>,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self { kind: TrackingKind::default(), noise_sd_um: 5.0, tracker: TrackerConfig::default(), weights: None }
    }
}

/// Stand-in for a human driving the robot from the console: reads the
/// displayed gap late and noisily, steps coarse then fine, and stops when the
/// reading says the target is reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorModel {
    /// Age of the reading the operator acts on, in frames.
    pub latency_ticks: usize,
    /// Frames between decisions.
    pub period_ticks: u64,
    pub reading_noise_um: f64,
    /// Per-trial judgement bias.
    pub bias_sd_um: f64,
    pub coarse_step_um: f64,
    pub fine_step_um: f64,
    /// Remaining distance below which fine steps are used.
    pub coarse_zone_um: f64,
}

impl Default for OperatorModel {
    fn default() -> Self {
        Self {
            latency_ticks: 2,
            period_ticks: 3,
            reading_noise_um: 20.0,
            bias_sd_um: 10.0,
            coarse_step_um: 50.0,
            fine_step_um: 10.0,
            coarse_zone_um: 150.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedCommand {
    pub tick: u64,
    pub command: OperatorCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub size: usize,
    pub thickness_mean_um: f64,
    pub thickness_sd_um: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self { size: 20, thickness_mean_um: 369.4, thickness_sd_um: 24.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsoBenchConfig {
    /// Nominal spacing `p` between the ten targets.
    pub interval_um: f64,
    pub runs: usize,
    pub noise: NoiseModel,
}

impl Default for IsoBenchConfig {
    fn default() -> Self {
        Self { interval_um: 140.0, runs: 5, noise: NoiseModel::calibrated() }
    }
}

fn default_max_ticks() -> u64 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub seed: u64,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
    /// Per-command actuation error applied by the robot.
    #[serde(default)]
    pub actuation_noise_um: f64,
    #[serde(default)]
    pub phantom: TissuePhantom,
    #[serde(default)]
    pub interaction: InteractionConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub kin: RobotKinematics,
    #[serde(default)]
    pub tracking: TrackingConfig,
    #[serde(default)]
    pub operator: OperatorModel,
    /// Timed operator commands; replaces the operator model when present.
    #[serde(default)]
    pub script: Vec<ScriptedCommand>,
    #[serde(default)]
    pub cohort: CohortConfig,
    #[serde(default)]
    pub iso: IsoBenchConfig,
    #[serde(default)]
    pub wire: crate::wire::Endpoint,
    #[serde(default = "default_gateway")]
    pub gateway: crate::wire::Endpoint,
    #[serde(default)]
    pub dataset: crate::dataset::DatasetConfig,
    #[serde(default)]
    pub train: crate::segnet::train::TrainConfig,
}

fn default_gateway() -> crate::wire::Endpoint {
    crate::wire::Endpoint { port: 8765, ..Default::default() }
}

impl TrialConfig {
    pub fn new(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("defaults parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.interaction.validate()?;
        self.controller.validate()?;
        self.kin.validate()?;
        if self.cohort.size == 0 {
            return Err(Error::config("cohort size must be at least 1"));
        }
        if !(self.tracking.noise_sd_um >= 0.0) || !(self.actuation_noise_um >= 0.0) {
            return Err(Error::config("noise levels must be >= 0"));
        }
        let op = &self.operator;
        if op.period_ticks == 0 || !(op.reading_noise_um >= 0.0) || !(op.bias_sd_um >= 0.0) {
            return Err(Error::config(format!("invalid operator model {op:?}")));
        }
        for step in [op.coarse_step_um, op.fine_step_um] {
            if !(1.0..=150.0).contains(&step) {
                return Err(Error::OutOfRange { what: "operator step", value: step, min: 1.0, max: 150.0 });
            }
        }
        self.dataset.validate()?;
        self.train.validate()?;
        if self.tracking.kind == TrackingKind::Neural && self.tracking.weights.is_none() {
            return Err(Error::config("the neural tracker needs tracking.weights"));
        }
        Ok(())
    }
}

/// One line of a trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Start {
        seed: u64,
        thickness_um: f64,
        z_epi_um: f64,
        mode: ArmMode,
        tracking: TrackingKind,
    },
    Estimate {
        tick: u64,
        frame_seq: u64,
        epi_um: Option<f64>,
        dm_um: Option<f64>,
        gap_um: Option<f64>,
        true_gap_um: f64,
        travel_um: f64,
    },
    Controller(LogRecord),
    Tissue {
        tick: u64,
        event: TissueEvent,
    },
    Rejected {
        tick: u64,
        command: OperatorCommand,
        reason: String,
    },
    Result(TrialResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub mode: ArmMode,
    pub thickness_um: f64,
    /// True DM depth minus tip depth when the insertion ended.
    pub final_gap_um: f64,
    pub perforated: bool,
    pub reached_target: bool,
    pub final_phase: Phase,
    pub completion_ticks: Option<u64>,
    pub completion_s: Option<f64>,
    pub pneumo: PneumoOutcome,
    pub ticks: u64,
    pub log_path: Option<PathBuf>,
}

/// What one step produced, for live consumers.
#[derive(Debug, Clone)]
pub struct TickReport {
    pub estimate: LayerEstimate,
    pub scan: Option<MScan>,
    pub axis: DepthAxis,
    pub motor: Vec<MotorCommand>,
}

struct OperatorState {
    bias: f64,
    readings: VecDeque<Option<f64>>,
    rotation_on: bool,
}

pub struct Trial {
    cfg: TrialConfig,
    phantom: TissuePhantom,
    needle: NeedleState,
    robot: Robot,
    controller: Controller,
    tracker: Tracker,
    base_axis: DepthAxis,
    net: Option<NetParams<f32>>,
    track_rng: ChaCha8Rng,
    operator_rng: ChaCha8Rng,
    pneumo_rng: ChaCha8Rng,
    imaging_rng: ChaCha8Rng,
    actuation_rng: ChaCha8Rng,
    operator: Option<OperatorState>,
    script_pos: usize,
    seq: u64,
    /// Render an M-scan every frame even when the tracker does not need one.
    pub render_scans: bool,
    log: Vec<LogEntry>,
    ended: Option<(f64, bool)>,
    result: Option<TrialResult>,
}

impl Trial {
    pub fn new(cfg: TrialConfig) -> Result<Self> {
        cfg.validate()?;
        let net = match (&cfg.tracking.kind, &cfg.tracking.weights) {
            (TrackingKind::Neural, Some(path)) => {
                Some(net_io::load(path).map_err(|e| Error::Aborted(format!("tracker startup failed: {e}")))?)
            }
            _ => None,
        };
        Self::with_net(cfg, net)
    }

    /// As [`Trial::new`] with preloaded weights.
    pub fn with_net(cfg: TrialConfig, net: Option<NetParams<f32>>) -> Result<Self> {
        if cfg.tracking.kind == TrackingKind::Neural && net.is_none() {
            return Err(Error::Aborted("tracker startup failed: no segmentation weights".into()));
        }
        let phantom = cfg.phantom.clone();
        phantom.validate()?;
        let needle = NeedleState::attached(&phantom);
        let mut controller = Controller::new(cfg.controller.clone(), cfg.kin.clone())?;
        controller.attach()?;
        let rng = |stream| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream));
        let mut operator_rng = rng(STREAM_OPERATOR);
        let operator = (cfg.controller.mode == ArmMode::Teleop && cfg.script.is_empty()).then(|| {
            let z: f64 = StandardNormal.sample(&mut operator_rng);
            OperatorState { bias: cfg.operator.bias_sd_um * z, readings: VecDeque::new(), rotation_on: false }
        });
        let base_axis = DepthAxis {
            n_s: cfg.controller.n_s,
            needle_offset_um: cfg.controller.needle_offset_um,
            ..DepthAxis::default()
        };
        let log = vec![LogEntry::Start {
            seed: cfg.seed,
            thickness_um: phantom.thickness,
            z_epi_um: phantom.z_epi,
            mode: cfg.controller.mode,
            tracking: cfg.tracking.kind,
        }];
        let mut trial = Self {
            robot: Robot::new(cfg.kin.clone()),
            tracker: Tracker::new(cfg.tracking.tracker),
            track_rng: rng(STREAM_TRACK),
            pneumo_rng: rng(STREAM_PNEUMO),
            imaging_rng: rng(STREAM_IMAGING),
            actuation_rng: rng(STREAM_ACTUATION),
            operator_rng,
            operator,
            phantom,
            needle,
            controller,
            base_axis,
            net,
            script_pos: 0,
            seq: 0,
            render_scans: false,
            log,
            ended: None,
            result: None,
            cfg,
        };
        trial.drain_controller_log();
        Ok(trial)
    }

    /// Hand teleoperation to external commands only.
    pub fn release_operator(&mut self) {
        self.operator = None;
    }

    pub fn config(&self) -> &TrialConfig {
        &self.cfg
    }

    pub fn phantom(&self) -> &TissuePhantom {
        &self.phantom
    }

    pub fn needle(&self) -> &NeedleState {
        &self.needle
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.result.is_some()
    }

    pub fn result(&self) -> Option<&TrialResult> {
        self.result.as_ref()
    }

    /// True DM depth minus tip depth.
    pub fn true_gap_um(&self) -> f64 {
        self.phantom.dm_depth() - self.needle.tip_depth
    }

    fn drain_controller_log(&mut self) {
        self.log.extend(self.controller.take_log().into_iter().map(LogEntry::Controller));
    }

    fn axis(&self) -> DepthAxis {
        DepthAxis { correction_active: self.controller.correction_active(), ..self.base_axis }
    }

    fn observe(&mut self, axis: &DepthAxis) -> Result<(LayerEstimate, Option<MScan>)> {
        let travel = self.controller.travel_um();
        let scan = if self.render_scans || self.net.is_some() {
            let first_seq = self.seq * (crate::dsp::LINES_PER_MSCAN * crate::dsp::FRAMES_PER_ALINE) as u64;
            let mut scan =
                render_mscan(&self.phantom, &self.needle, &self.cfg.interaction, axis.dz_air, &mut self.imaging_rng, first_seq)?;
            scan.first_seq = self.seq;
            Some(scan)
        } else {
            None
        };
        let estimate = match (&self.net, &scan) {
            (Some(net), Some(scan)) => {
                let mask = net.segment(scan)?;
                self.tracker.observe_mask(&mask, axis, travel, self.seq)
            }
            _ => {
                let gt = ground_truth(&self.phantom, &self.needle, axis);
                let sd = self.cfg.tracking.noise_sd_um;
                let z1: f64 = StandardNormal.sample(&mut self.track_rng);
                let z2: f64 = StandardNormal.sample(&mut self.track_rng);
                let depth_limit = axis.row_to_optical(N_BINS as f64 - 1.0);
                let epi = gt.epi_optical_um + sd * z1;
                let post = gt.endo_optical_um + sd * axis.n_s * z2;
                let edges = EdgeObservation {
                    epi_px: (epi <= depth_limit).then(|| axis.optical_to_row(epi)),
                    dm_px: (post <= depth_limit && epi <= depth_limit).then(|| axis.optical_to_row(post)),
                };
                let raw = raw_depths(&edges, axis, travel, self.tracker.config.dm_offset_um);
                self.tracker.update(&edges, &raw, axis, travel, self.seq)
            }
        };
        Ok((estimate, scan))
    }

    fn apply(&mut self, cmds: &[MotorCommand]) -> Result<()> {
        let tick = self.controller.ticks();
        let noise = NoiseModel { sigma_um: self.cfg.actuation_noise_um };
        for cmd in cmds {
            self.needle.rotating = cmd.rotate;
            let err = noise.sample(&mut self.actuation_rng);
            let motion = self.robot.execute(cmd, err)?;
            let events = if motion.dz_um > 0.0 {
                advance_needle(&mut self.phantom, &mut self.needle, motion.dz_um, &self.cfg.interaction)?
            } else {
                if motion.dz_um < 0.0 {
                    retract_needle(&mut self.phantom, &mut self.needle, -motion.dz_um)?;
                }
                Vec::new()
            };
            for event in events {
                if matches!(event, TissueEvent::Perforation { .. }) {
                    self.controller.note_perforation();
                    self.drain_controller_log();
                }
                self.log.push(LogEntry::Tissue { tick, event });
            }
        }
        Ok(())
    }

    fn operator_commands(&mut self, estimate: &LayerEstimate) -> Vec<OperatorCommand> {
        let tick = self.controller.ticks();
        let mut out = Vec::new();
        while let Some(s) = self.cfg.script.get(self.script_pos) {
            if s.tick > tick {
                break;
            }
            out.push(s.command);
            self.script_pos += 1;
        }
        let model = self.cfg.operator.clone();
        let target = self.controller.config.target_gap_um;
        let phase = self.controller.phase();
        let Some(op) = self.operator.as_mut() else {
            return out;
        };
        op.readings.push_back(estimate.gap_above_dm_um);
        if op.readings.len() > model.latency_ticks + 1 {
            op.readings.pop_front();
        }
        if !matches!(phase, Phase::Attached | Phase::Contact | Phase::Running) || tick % model.period_ticks != 0 {
            return out;
        }
        if phase != Phase::Attached && !op.rotation_on {
            op.rotation_on = true;
            out.push(OperatorCommand::RotateOn);
        }
        let Some(Some(seen)) = op.readings.front().copied() else {
            return out;
        };
        let z: f64 = StandardNormal.sample(&mut self.operator_rng);
        let to_go = seen + op.bias + model.reading_noise_um * z - target;
        if phase == Phase::Running && to_go <= model.fine_step_um / 2.0 {
            out.push(OperatorCommand::Retract);
        } else if to_go > model.coarse_zone_um {
            out.push(OperatorCommand::StepDown(model.coarse_step_um));
        } else if to_go > model.fine_step_um / 2.0 || phase != Phase::Running {
            out.push(OperatorCommand::StepDown(model.fine_step_um));
        }
        out
    }

    fn mark_end(&mut self, reached: bool) {
        if self.ended.is_none() {
            self.ended = Some((self.true_gap_um(), reached));
        }
    }

    /// Advance one frame. `external` carries operator commands from outside
    /// (the console); they are applied after the controller reacts.
    pub fn step(&mut self, external: &[OperatorCommand]) -> Result<TickReport> {
        if self.result.is_some() {
            return Err(Error::contract("trial already finished"));
        }
        self.seq += 1;
        let axis = self.axis();
        let (estimate, scan) = self.observe(&axis)?;
        let tick = self.controller.ticks() + 1;
        self.log.push(LogEntry::Estimate {
            tick,
            frame_seq: estimate.frame_seq,
            epi_um: estimate.epi_um,
            dm_um: estimate.dm_um,
            gap_um: estimate.gap_above_dm_um,
            true_gap_um: self.true_gap_um(),
            travel_um: self.controller.travel_um(),
        });
        let mut motor = self.controller.tick(&estimate)?;
        self.drain_controller_log();
        if self.controller.phase() == Phase::TargetReached {
            self.mark_end(true);
        }
        self.apply(&motor)?;

        let mut commands = external.to_vec();
        commands.extend(self.operator_commands(&estimate));
        for command in commands {
            if command == OperatorCommand::Retract {
                // a retract while running ends the insertion at the target
                self.mark_end(self.controller.phase() == Phase::Running);
            }
            match self.controller.operator(command) {
                Ok(cmds) => {
                    self.drain_controller_log();
                    self.apply(&cmds)?;
                    motor.extend(cmds);
                }
                Err(e @ (Error::OutOfRange { .. } | Error::Contract(_) | Error::TravelLimit { .. } | Error::Transition { .. })) => {
                    self.drain_controller_log();
                    self.log.push(LogEntry::Rejected { tick, command, reason: e.to_string() });
                }
                Err(e) => return Err(e),
            }
        }

        match self.controller.phase() {
            Phase::TargetReached | Phase::Error => {
                self.mark_end(self.controller.phase() == Phase::TargetReached);
                let cmds = self.controller.retract()?;
                self.drain_controller_log();
                self.apply(&cmds)?;
                motor.extend(cmds);
                self.finish()?;
            }
            Phase::Retracting => self.finish()?,
            _ if tick >= self.cfg.max_ticks => {
                self.mark_end(false);
                self.finish()?;
            }
            _ => {}
        }
        Ok(TickReport { estimate, scan, axis, motor })
    }

    fn finish(&mut self) -> Result<()> {
        if self.controller.phase() == Phase::Retracting {
            self.controller.finish_retract()?;
            self.drain_controller_log();
        }
        let (gap, reached) = self.ended.expect("end marked before finish");
        let pneumo = if self.phantom.perforated {
            PneumoOutcome { perforated: true, demarcation_depth_um: None, type1_bubble: false }
        } else if reached {
            pneumodissect(&self.cfg.interaction, gap, &mut self.pneumo_rng)
        } else {
            PneumoOutcome { perforated: false, demarcation_depth_um: None, type1_bubble: false }
        };
        let completion_ticks = match (self.controller.contact_tick(), self.controller.target_tick()) {
            (Some(c), Some(t)) => Some(t - c),
            _ => None,
        };
        let result = TrialResult {
            seed: self.cfg.seed,
            mode: self.cfg.controller.mode,
            thickness_um: self.phantom.thickness,
            final_gap_um: gap,
            perforated: self.phantom.perforated || pneumo.perforated,
            reached_target: reached,
            final_phase: self.controller.phase(),
            completion_ticks,
            completion_s: self.controller.completion_s(),
            pneumo,
            ticks: self.controller.ticks(),
            log_path: None,
        };
        self.log.push(LogEntry::Result(result.clone()));
        self.result = Some(result);
        Ok(())
    }

    /// Step to completion.
    pub fn run(&mut self) -> Result<TrialResult> {
        while self.result.is_none() {
            self.step(&[])?;
        }
        Ok(self.result.clone().expect("finished"))
    }
}

pub struct TrialOutcome {
    pub result: TrialResult,
    pub log: Vec<LogEntry>,
}

pub fn run_trial(cfg: &TrialConfig) -> Result<TrialOutcome> {
    let mut trial = Trial::new(cfg.clone())?;
    let result = trial.run()?;
    Ok(TrialOutcome { result, log: trial.log })
}

/// JSON lines, one entry per line.
pub fn encode_log(log: &[LogEntry]) -> Result<String> {
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(entry)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(encode_log(log)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// The trial configuration for member `index` of a cohort: its own seed,
/// a thickness drawn from the cohort distribution and a fresh speckle layout.
pub fn cohort_member(cfg: &TrialConfig, index: usize) -> TrialConfig {
    let seed = derive_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PHANTOM));
    let mut member = cfg.clone();
    member.seed = seed;
    let c = &cfg.cohort;
    if c.thickness_sd_um > 0.0 {
        let draw = Normal::new(c.thickness_mean_um, c.thickness_sd_um).expect("finite").sample(&mut rng);
        member.phantom.thickness = draw.max(member.phantom.dm_offset + 100.0);
    } else {
        member.phantom.thickness = c.thickness_mean_um;
    }
    member.phantom.speckle_seed = splitmix64(seed);
    member
}

/// Mean and sample standard deviation; the deviation is absent for N < 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = (values.len() >= 2).then(|| sample_std(values));
        Some(Self { n: values.len(), mean, std })
    }

    fn cell(summary: Option<Self>, unit: &str) -> String {
        match summary {
            None => "-".into(),
            Some(Self { mean, std: Some(sd), .. }) => format!("{mean:.1} ± {sd:.1} {unit}"),
            Some(Self { mean, std: None, .. }) => format!("{mean:.1} {unit}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n: usize,
    pub perforations: usize,
    pub perforation_pct: f64,
    /// Over non-perforated trials.
    pub needle_depth: Option<Summary>,
    /// Over trials with a demarcation plane.
    pub pneumo_depth: Option<Summary>,
    /// Over non-perforated trials.
    pub type1_pct: Option<f64>,
    pub completion_s: Option<Summary>,
}

pub const TABLE_HEADER: &str =
    "App.\tN\tPerforation n\tPerforation %\tNeedle Depth\tPneumodissection Depth\tIncident of Type 1 BB\tCompletion Time";

impl CohortStats {
    pub fn from_results(results: &[TrialResult]) -> Self {
        let intact: Vec<&TrialResult> = results.iter().filter(|r| !r.perforated).collect();
        let gaps: Vec<f64> = intact.iter().map(|r| r.final_gap_um).collect();
        let pneumo: Vec<f64> = intact.iter().filter_map(|r| r.pneumo.demarcation_depth_um).collect();
        let times: Vec<f64> = results.iter().filter_map(|r| r.completion_s).collect();
        let perforations = results.len() - intact.len();
        let type1 = intact.iter().filter(|r| r.pneumo.type1_bubble).count();
        Self {
            n: results.len(),
            perforations,
            perforation_pct: if results.is_empty() { 0.0 } else { 100.0 * perforations as f64 / results.len() as f64 },
            needle_depth: Summary::of(&gaps),
            pneumo_depth: Summary::of(&pneumo),
            type1_pct: (!intact.is_empty()).then(|| 100.0 * type1 as f64 / intact.len() as f64),
            completion_s: Summary::of(&times),
        }
    }

    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{label}\t{}\t{}\t{:.1}%\t{}\t{}\t{}\t{}",
            self.n,
            self.perforations,
            self.perforation_pct,
            Summary::cell(self.needle_depth, "μm"),
            Summary::cell(self.pneumo_depth, "μm"),
            self.type1_pct.map_or("-".into(), |p| format!("{p:.1}%")),
            Summary::cell(self.completion_s, "s"),
        )
    }
}

pub struct CohortReport {
    pub results: Vec<TrialResult>,
    pub stats: CohortStats,
    pub logs: Vec<Vec<LogEntry>>,
}

impl CohortReport {
    pub fn label(&self) -> &'static str {
        match self.results.first().map(|r| r.mode) {
            Some(ArmMode::Teleop) => "TR",
            _ => "AR",
        }
    }

    pub fn table(&self) -> String {
        format!("{TABLE_HEADER}\n{}\n", self.stats.table_row(self.label()))
    }

    /// One row per trial.
    pub fn trials_table(&self) -> String {
        let mut out = String::from("trial\tseed\tthickness_um\tfinal_gap_um\tperforated\treached\tcompletion_s\tpneumo_depth_um\ttype1\n");
        for (i, r) in self.results.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i}\t{}\t{:.2}\t{:.3}\t{}\t{}\t{}\t{}\t{}",
                r.seed,
                r.thickness_um,
                r.final_gap_um,
                r.perforated,
                r.reached_target,
                r.completion_s.map_or("-".into(), |s| format!("{s:.2}")),
                r.pneumo.demarcation_depth_um.map_or("-".into(), |d| format!("{d:.2}")),
                r.pneumo.type1_bubble,
            );
        }
        out
    }
}

pub fn trial_log_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("trial_{index:03}.jsonl"))
}

/// Run `cfg.cohort.size` trials in index order. With `out`, every trial log
/// is written there.
pub fn run_cohort(cfg: &TrialConfig, out: Option<&Path>) -> Result<CohortReport> {
    cfg.validate()?;
    let net = match (&cfg.tracking.kind, &cfg.tracking.weights) {
        (TrackingKind::Neural, Some(path)) => Some(net_io::load(path)?),
        _ => None,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut results = Vec::with_capacity(cfg.cohort.size);
    let mut logs = Vec::with_capacity(cfg.cohort.size);
    for i in 0..cfg.cohort.size {
        let mut trial = Trial::with_net(cohort_member(cfg, i), net.clone())?;
        let mut result = trial.run()?;
        if let Some(dir) = out {
            let path = trial_log_path(dir, i);
            write_log(&path, &trial.log)?;
            result.log_path = Some(path);
        }
        results.push(result);
        logs.push(trial.log);
    }
    let stats = CohortStats::from_results(&results);
    Ok(CohortReport { results, stats, logs })
}

/// Trial results recovered from the logs in `dir`, in trial order.
pub fn results_from_logs(dir: &Path) -> Result<Vec<TrialResult>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("trial_") && n.ends_with(".jsonl")))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let result = read_log(&path)?
            .into_iter()
            .rev()
            .find_map(|e| match e {
                LogEntry::Result(r) => Some(r),
                _ => None,
            })
            .ok_or_else(|| Error::Format(format!("{} has no result line", path.display())))?;
        out.push(result);
    }
    Ok(out)
}

/// Every ADVANCE event in a log as `(delta_um, step_size_um, gap_to_target_um)`.
pub fn advances(log: &[LogEntry]) -> Vec<(f64, f64, f64)> {
    log.iter()
        .filter_map(|e| match e {
            LogEntry::Controller(LogRecord {
                event: crate::controller::ControllerEvent::Advance { delta_um, step_size_um, gap_to_target_um, .. },
                ..
            }) => Some((*delta_um, *step_size_um, *gap_to_target_um)),
            _ => None,
        })
        .collect()
}

/// Ten targets approached five times from each side. Targets are snapped to
/// positions the drive can reach exactly; each approach lands with an
/// independent error drawn from `cfg.noise`.
pub fn run_iso_bench(kin: &RobotKinematics, cfg: &IsoBenchConfig, seed: u64) -> Result<IsoReport> {
    kin.validate()?;
    let raw = iso_targets(cfg.interval_um, seed, kin.max_travel_um)?;
    let targets = raw
        .iter()
        .map(|&t| Ok(command_to_motion(kin, &compensate(kin, t)?)?.dz_um))
        .collect::<Result<Vec<f64>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_ACTUATION));
    let mut forward = Vec::with_capacity(cfg.runs);
    let mut backward = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        forward.push(targets.iter().map(|&t| t + cfg.noise.sample(&mut rng)).collect::<Vec<f64>>());
        let mut back: Vec<f64> = targets.iter().rev().map(|&t| t + cfg.noise.sample(&mut rng)).collect();
        back.reverse();
        backward.push(back);
    }
    iso_metrics(&IsoRuns { targets, forward, backward })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_seed() {
        assert!(TrialConfig::from_toml("max_ticks = 5").is_err());
        let cfg = TrialConfig::from_toml("seed = 3\n[controller]\nstep_size_um = 30.0").unwrap();
        assert_eq!(cfg.controller.step_size_um, 30.0);
        assert_eq!(TrialConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrialConfig::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(TrialConfig::from_toml("seed = 1\n[tracking]\nkind = \"neural\"").is_err());
    }

    #[test]
    fn noise_free_trial_lands_within_half_step() {
        let mut cfg = TrialConfig::new(5);
        cfg.tracking.noise_sd_um = 0.0;
        let out = run_trial(&cfg).unwrap();
        let r = out.result;
        assert!(r.reached_target, "{r:?}");
        assert!(!r.perforated);
        let half = cfg.controller.step_size_um / 2.0;
        assert!(r.final_gap_um >= 100.0 - 1.0 && r.final_gap_um < 100.0 + half + 1.0, "gap {}", r.final_gap_um);
        assert!(r.completion_s.unwrap() > 0.0);
    }

    #[test]
    fn summary_needs_two_for_std() {
        let s = Summary::of(&[4.0]).unwrap();
        assert_eq!(s.std, None);
        let s = Summary::of(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn seeds_differ_per_member() {
        let cfg = TrialConfig::new(1);
        let a = cohort_member(&cfg, 0);
        let b = cohort_member(&cfg, 1);
        assert_ne!(a.seed, b.seed);
        assert_ne!(a.phantom.thickness, b.phantom.thickness);
        assert_eq!(cohort_member(&cfg, 1), b);
    }
}
