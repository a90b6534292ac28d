//! Labelled M-scan sequences from random phantoms, and DM tracking error of a
//! segmentation net on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cornea::{advance_needle, ground_truth, InteractionConfig, NeedleState, SpectrumSource, TissuePhantom};
use crate::dsp::{
    assemble_mscan, ALineAccumulator, DepthAxis, MScan, SpectralFrame, Window, FRAMES_PER_ALINE, LINES_PER_MSCAN,
    LINE_PERIOD_MS, N_SAMPLES,
};
use crate::error::{Error, Result};
use crate::harness::derive_seed;
use crate::segnet::{self, FoldMetrics, NetParams, Sample, TrainConfig};
use crate::tracker::{Tracker, TrackerConfig};

/// Full imaging chain for a static pose: 48 A-lines of 256 averaged frames.
pub fn render_mscan<R: Rng + ?Sized>(
    phantom: &TissuePhantom,
    needle: &NeedleState,
    cfg: &InteractionConfig,
    dz_air: f64,
    rng: &mut R,
    first_seq: u64,
) -> Result<MScan> {
    let source = SpectrumSource::new(phantom, needle, cfg, dz_air);
    let background = SpectralFrame::zeros(0);
    let mut buf = vec![0.0; N_SAMPLES];
    let first_line = first_seq / FRAMES_PER_ALINE as u64;
    let mut lines = Vec::with_capacity(LINES_PER_MSCAN);
    for l in 0..LINES_PER_MSCAN {
        let mut acc = ALineAccumulator::new(Window::default(), &background);
        for _ in 0..FRAMES_PER_ALINE {
            source.fill(rng, &mut buf);
            acc.push_samples(&buf);
        }
        lines.push(acc.finish(LINE_PERIOD_MS * (first_line + l as u64) as f64));
    }
    assemble_mscan(&lines, first_seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub phantoms: usize,
    pub frames_per_phantom: usize,
    pub thickness_mean_um: f64,
    pub thickness_sd_um: f64,
    /// Range of the attach-time fiber-to-epithelium distance.
    pub z_epi_um: (f64, f64),
    /// Range of the spectral white-noise level.
    pub noise_floor: (f64, f64),
    /// Relative spread of layer reflectivities between phantoms.
    pub reflectivity_jitter: f64,
    /// Frames per sequence with the needle still above the surface.
    pub air_frames: usize,
    /// Deepest pose, as a gap above DM.
    pub min_gap_um: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantoms: 12,
            frames_per_phantom: 20,
            thickness_mean_um: 369.4,
            thickness_sd_um: 24.2,
            z_epi_um: (700.0, 1100.0),
            noise_floor: (0.01, 0.04),
            reflectivity_jitter: 0.25,
            air_frames: 2,
            min_gap_um: 60.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if self.phantoms == 0 || self.frames_per_phantom <= self.air_frames {
            return Err(Error::config("dataset needs phantoms and tissue frames"));
        }
        if !(self.thickness_mean_um > 0.0) || !(self.thickness_sd_um >= 0.0) || !(self.min_gap_um >= 0.0) {
            return Err(Error::config("invalid dataset thickness or gap"));
        }
        if !ordered(self.z_epi_um) || !(self.z_epi_um.0 > 0.0) || !ordered(self.noise_floor) || !(self.noise_floor.0 >= 0.0) {
            return Err(Error::config("dataset ranges must be ordered and positive"));
        }
        if !(0.0..1.0).contains(&self.reflectivity_jitter) {
            return Err(Error::config("reflectivity_jitter must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One rendered frame with its labels.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub phantom_id: u32,
    pub scan: MScan,
    /// Ground-truth tissue mask, 1024x48.
    pub mask: Vec<u8>,
    pub axis: DepthAxis,
    /// Net travel below the attach pose.
    pub travel_um: f64,
    /// DM depth below the attach-time fiber position, geometric µm.
    pub true_dm_um: f64,
}

impl LabeledFrame {
    pub fn sample(&self) -> Sample {
        Sample { phantom_id: self.phantom_id, image: segnet::preprocess(&self.scan), mask: self.mask.clone() }
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, v: f64, rel: f64) -> f64 {
    if rel == 0.0 {
        v
    } else {
        v * rng.random_range(1.0 - rel..=1.0 + rel)
    }
}

/// Phantom `id` of a dataset.
pub fn dataset_phantom(cfg: &DatasetConfig, id: u32) -> (TissuePhantom, InteractionConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, id as u64));
    let mut phantom = TissuePhantom::default();
    if cfg.thickness_sd_um > 0.0 {
        let t = Normal::new(cfg.thickness_mean_um, cfg.thickness_sd_um).expect("finite").sample(&mut rng);
        phantom.thickness = t.max(phantom.dm_offset + 100.0);
    } else {
        phantom.thickness = cfg.thickness_mean_um;
    }
    phantom.z_epi = rng.random_range(cfg.z_epi_um.0..=cfg.z_epi_um.1);
    phantom.speckle_seed = rng.random();
    let r = &mut phantom.reflectivity;
    r.epithelium = jitter(&mut rng, r.epithelium, cfg.reflectivity_jitter);
    r.stroma = jitter(&mut rng, r.stroma, cfg.reflectivity_jitter);
    r.dm = jitter(&mut rng, r.dm, cfg.reflectivity_jitter);
    r.endothelium = jitter(&mut rng, r.endothelium, cfg.reflectivity_jitter);
    let interaction = InteractionConfig {
        noise_floor: rng.random_range(cfg.noise_floor.0..=cfg.noise_floor.1),
        ..InteractionConfig::default()
    };
    (phantom, interaction)
}

/// A descent per phantom: `air_frames` frames approaching the surface, then
/// evenly spaced poses from the surface down to `min_gap_um` above DM.
pub fn generate(cfg: &DatasetConfig) -> Result<Vec<LabeledFrame>> {
    if cfg.frames_per_phantom <= cfg.air_frames || cfg.phantoms == 0 {
        return Err(Error::config("dataset needs phantoms and tissue frames"));
    }
    let mut out = Vec::with_capacity(cfg.phantoms * cfg.frames_per_phantom);
    for id in 0..cfg.phantoms as u32 {
        let (mut phantom, interaction) = dataset_phantom(cfg, id);
        phantom.validate()?;
        let mut needle = NeedleState::attached(&phantom);
        let fiber0 = needle.fiber_depth();
        let tip0 = needle.tip_depth;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0xDA7A, id as u64));
        let tissue_frames = cfg.frames_per_phantom - cfg.air_frames;
        let deepest = phantom.dm_depth() - cfg.min_gap_um;
        let mut seq = 0u64;
        for f in 0..cfg.frames_per_phantom {
            let target_tip = if f < cfg.air_frames {
                tip0 * (1.0 - (f + 1) as f64 / (cfg.air_frames + 1) as f64)
            } else {
                deepest * (f - cfg.air_frames) as f64 / (tissue_frames - 1).max(1) as f64
            };
            // puncture once past the first tissue frame so the rest sit in
            // undeformed stroma
            if f > cfg.air_frames && !phantom.punctured {
                phantom.punctured = true;
                phantom.deform = 0.0;
            }
            let delta = target_tip - needle.tip_depth;
            if delta > 0.0 {
                needle.rotating = true;
                advance_needle(&mut phantom, &mut needle, delta, &interaction)?;
            }
            let axis = DepthAxis { correction_active: f >= cfg.air_frames, ..DepthAxis::default() };
            let gt = ground_truth(&phantom, &needle, &axis);
            let scan = render_mscan(&phantom, &needle, &interaction, axis.dz_air, &mut rng, seq)?;
            seq += (LINES_PER_MSCAN * FRAMES_PER_ALINE) as u64;
            out.push(LabeledFrame {
                phantom_id: id,
                scan,
                mask: gt.mask,
                axis,
                travel_um: needle.tip_depth - tip0,
                true_dm_um: phantom.dm_depth() - fiber0,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingEval {
    /// |estimated - true| DM depth for every tissue frame with an estimate.
    pub errors_um: Vec<f64>,
    /// Tissue frames without a DM estimate.
    pub missing: usize,
    pub mean_um: f64,
    pub std_um: f64,
}

impl TrackingEval {
    fn from_errors(errors_um: Vec<f64>, missing: usize) -> Self {
        let n = errors_um.len().max(1) as f64;
        let mean_um = errors_um.iter().sum::<f64>() / n;
        let std_um = crate::robot::sample_std(&errors_um);
        Self { errors_um, missing, mean_um, std_um }
    }
}

/// Track each phantom's sequence in order with a fresh tracker and compare
/// the DM estimate to the truth on frames with refraction correction active.
pub fn eval_tracking(frames: &[LabeledFrame], net: &NetParams<f32>, tracker: &TrackerConfig) -> Result<TrackingEval> {
    let mut errors = Vec::new();
    let mut missing = 0;
    let mut ids: Vec<u32> = frames.iter().map(|f| f.phantom_id).collect();
    ids.dedup();
    for id in ids {
        let mut t = Tracker::new(*tracker);
        for (k, f) in frames.iter().filter(|f| f.phantom_id == id).enumerate() {
            let mask = net.segment(&f.scan)?;
            let est = t.observe_mask(&mask, &f.axis, f.travel_um, k as u64);
            if !f.axis.correction_active {
                continue;
            }
            match est.dm_um {
                Some(dm) if est.valid_dm => errors.push((dm - f.true_dm_um).abs()),
                _ => missing += 1,
            }
        }
    }
    Ok(TrackingEval::from_errors(errors, missing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldMetrics>,
    pub fold_tracking: Vec<TrackingEval>,
    pub pooled: TrackingEval,
}

impl CrossValidation {
    pub fn table(&self) -> String {
        let mut out = String::from("fold\ttest_phantoms\tn_train\tn_test\tdice\tpixel_acc\tfinal_loss\tdm_err_um\tmissing\n");
        for (m, t) in self.folds.iter().zip(&self.fold_tracking) {
            out.push_str(&format!(
                "{}\t{:?}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\t{}\n",
                m.fold, m.test_phantoms, m.n_train, m.n_test, m.dice, m.pixel_accuracy, m.final_loss, t.mean_um, t.missing
            ));
        }
        out.push_str(&format!(
            "pooled\t-\t-\t{}\t-\t-\t-\t{:.2} ± {:.2}\t{}\n",
            self.pooled.errors_um.len() + self.pooled.missing,
            self.pooled.mean_um,
            self.pooled.std_um,
            self.pooled.missing
        ));
        out
    }
}

/// Phantom-grouped k-fold training and held-out DM tracking.
pub fn cross_validate_tracking(frames: &[LabeledFrame], train: &TrainConfig, tracker: &TrackerConfig) -> Result<CrossValidation> {
    let samples: Vec<Sample> = frames.iter().map(LabeledFrame::sample).collect();
    let results = segnet::cross_validate(&samples, train)?;
    let mut folds = Vec::new();
    let mut fold_tracking = Vec::new();
    let (mut pooled, mut missing) = (Vec::new(), 0);
    for r in results {
        let test: Vec<LabeledFrame> =
            frames.iter().filter(|f| r.metrics.test_phantoms.contains(&f.phantom_id)).cloned().collect();
        let eval = eval_tracking(&test, &r.net, tracker)?;
        pooled.extend_from_slice(&eval.errors_um);
        missing += eval.missing;
        folds.push(r.metrics);
        fold_tracking.push(eval);
    }
    Ok(CrossValidation { folds, fold_tracking, pooled: TrackingEval::from_errors(pooled, missing) })
}
