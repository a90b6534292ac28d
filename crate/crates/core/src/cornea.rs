//! Layered cornea phantom with needle indentation, puncture and perforation,
//! plus a synthetic common-path interferogram generator.
//!
//! Depths are geometric µm measured downward from the undeformed epithelial
//! surface. The fiber sits `fiber_offset` above the needle tip; the lumen
//! between them is fluid filled and uses the tissue index.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{
    DepthAxis, SpectralFrame, DEFAULT_N_S, DEFAULT_NEEDLE_OFFSET_UM, FFT_LEN, LINES_PER_MSCAN,
    N_BINS, N_SAMPLES,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Reflectivity {
    pub epithelium: f64,
    /// Amplitude of each stromal speckle scatterer.
    pub stroma: f64,
    /// Speckle scatterers per µm of stroma.
    pub speckle_density: f64,
    pub dm: f64,
    pub endothelium: f64,
    pub iris: Option<f64>,
    /// Back-reflection from the needle tip.
    pub needle: f64,
}

impl Default for Reflectivity {
    fn default() -> Self {
        Self {
            epithelium: 1.0,
            stroma: 0.06,
            speckle_density: 0.3,
            dm: 0.45,
            endothelium: 0.6,
            iris: None,
            needle: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissuePhantom {
    /// Geometric fiber-to-epithelium distance at attach time.
    pub z_epi: f64,
    /// Epithelium to endothelium.
    pub thickness: f64,
    /// Descemet's membrane height above the endothelium.
    pub dm_offset: f64,
    pub n_s: f64,
    pub reflectivity: Reflectivity,
    /// Depth of the iris below the endothelium, when an iris is modeled.
    pub iris_gap: f64,
    /// Seeds the stromal speckle layout so it is fixed for a phantom.
    pub speckle_seed: u64,
    /// Current surface indentation.
    pub deform: f64,
    pub punctured: bool,
    pub perforated: bool,
}

impl Default for TissuePhantom {
    fn default() -> Self {
        Self {
            z_epi: 1000.0,
            thickness: 369.4,
            dm_offset: 15.0,
            n_s: DEFAULT_N_S,
            reflectivity: Reflectivity::default(),
            iris_gap: 1500.0,
            speckle_seed: 0,
            deform: 0.0,
            punctured: false,
            perforated: false,
        }
    }
}

impl TissuePhantom {
    pub fn validate(&self) -> Result<()> {
        let ok = self.thickness > 0.0
            && self.dm_offset > 0.0
            && self.dm_offset < self.thickness
            && self.n_s >= 1.0
            && self.deform >= 0.0
            && self.deform < self.thickness
            && self.z_epi.is_finite();
        if !ok {
            return Err(Error::config(format!("invalid phantom {self:?}")));
        }
        Ok(())
    }

    /// Absolute depth of a point of the undeformed stack after indentation.
    /// The stroma compresses linearly with the endothelium held fixed.
    fn displaced(&self, y: f64) -> f64 {
        if y >= self.thickness {
            y
        } else {
            y + self.deform * (1.0 - y / self.thickness)
        }
    }

    pub fn epi_depth(&self) -> f64 {
        self.displaced(0.0)
    }

    pub fn dm_depth(&self) -> f64 {
        self.displaced(self.thickness - self.dm_offset)
    }

    pub fn endo_depth(&self) -> f64 {
        self.thickness
    }

    fn speckle(&self) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.speckle_seed);
        let stroma = self.thickness - self.dm_offset;
        let n = (self.reflectivity.speckle_density * stroma).round() as usize;
        (0..n)
            .map(|_| {
                // keep clear of the boundaries by a couple of resolution cells
                let y = rng.random_range(12.0..(stroma - 8.0).max(12.5));
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let amp = self.reflectivity.stroma * (a * a + b * b).sqrt() / 2f64.sqrt();
                (y, amp)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleState {
    /// Geometric tip depth below the undeformed surface; negative in air.
    pub tip_depth: f64,
    pub fiber_offset: f64,
    pub rotating: bool,
    /// Path length driven so far, both directions.
    pub cumulative_travel: f64,
}

impl NeedleState {
    /// Needle at attach time for a phantom: fiber `z_epi` above the surface.
    pub fn attached(phantom: &TissuePhantom) -> Self {
        Self {
            tip_depth: -(phantom.z_epi - DEFAULT_NEEDLE_OFFSET_UM),
            fiber_offset: DEFAULT_NEEDLE_OFFSET_UM,
            rotating: false,
            cumulative_travel: 0.0,
        }
    }

    pub fn fiber_depth(&self) -> f64 {
        self.tip_depth - self.fiber_offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteractionConfig {
    pub puncture_threshold_rotating: f64,
    pub puncture_threshold_static: f64,
    /// Indentation beyond this fraction of the thickness always punctures.
    pub max_indentation_fraction: f64,
    pub perforation_gap: f64,
    pub pneumo_offset_mean: f64,
    pub pneumo_offset_sd: f64,
    /// Chance of perforating when pneumodissecting closer than `perforation_gap`.
    pub perforation_probability: f64,
    pub type1_rate: f64,
    /// White-noise standard deviation per spectral sample.
    pub noise_floor: f64,
    /// Amplitude attenuation per µm of tissue traversed.
    pub snr_decay: f64,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            puncture_threshold_rotating: 150.0,
            puncture_threshold_static: 400.0,
            max_indentation_fraction: 0.9,
            perforation_gap: 44.6,
            pneumo_offset_mean: 46.7,
            pneumo_offset_sd: 8.0,
            perforation_probability: 0.5,
            type1_rate: 0.75,
            noise_floor: 0.02,
            snr_decay: 0.002,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.puncture_threshold_rotating > 0.0
            && self.puncture_threshold_static >= self.puncture_threshold_rotating
            && self.perforation_gap > 0.0
            && self.pneumo_offset_mean > 0.0
            && self.pneumo_offset_sd >= 0.0
            && (0.0..=1.0).contains(&self.perforation_probability)
            && (0.0..=1.0).contains(&self.type1_rate)
            && self.noise_floor >= 0.0
            && self.snr_decay >= 0.0
            && self.max_indentation_fraction > 0.0
            && self.max_indentation_fraction < 1.0;
        if !ok {
            return Err(Error::config(format!("invalid interaction config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TissueEvent {
    Contact { travel: f64 },
    Puncture { travel: f64, deform: f64 },
    Perforation { travel: f64, tip_depth: f64 },
}

/// Drive the needle `delta` µm deeper.
pub fn advance_needle(
    phantom: &mut TissuePhantom,
    needle: &mut NeedleState,
    delta: f64,
    cfg: &InteractionConfig,
) -> Result<Vec<TissueEvent>> {
    if !(delta >= 0.0) {
        return Err(Error::contract(format!("advance delta {delta} must be >= 0")));
    }
    let mut events = Vec::new();
    let mut remaining = delta;
    needle.cumulative_travel += delta;

    if !phantom.punctured {
        let surface = phantom.epi_depth();
        if needle.tip_depth < surface {
            let step = remaining.min(surface - needle.tip_depth);
            needle.tip_depth += step;
            remaining -= step;
            if remaining > 0.0 || needle.tip_depth >= surface {
                events.push(TissueEvent::Contact { travel: needle.cumulative_travel - remaining });
            }
        }
        if remaining > 0.0 {
            phantom.deform += remaining;
            needle.tip_depth += remaining;
            remaining = 0.0;
            let threshold = if needle.rotating {
                cfg.puncture_threshold_rotating
            } else {
                cfg.puncture_threshold_static
            }
            .min(cfg.max_indentation_fraction * phantom.thickness);
            if phantom.deform > threshold {
                events.push(TissueEvent::Puncture {
                    travel: needle.cumulative_travel,
                    deform: phantom.deform,
                });
                phantom.punctured = true;
                phantom.deform = 0.0;
            }
        }
    }
    needle.tip_depth += remaining;

    if phantom.punctured && !phantom.perforated && needle.tip_depth >= phantom.dm_depth() {
        phantom.perforated = true;
        events.push(TissueEvent::Perforation {
            travel: needle.cumulative_travel,
            tip_depth: needle.tip_depth,
        });
    }
    Ok(events)
}

/// Withdraw the needle `delta` µm. Any indentation relaxes with the tip.
pub fn retract_needle(phantom: &mut TissuePhantom, needle: &mut NeedleState, delta: f64) -> Result<()> {
    if !(delta >= 0.0) {
        return Err(Error::contract(format!("retract delta {delta} must be >= 0")));
    }
    needle.cumulative_travel += delta;
    needle.tip_depth -= delta;
    if !phantom.punctured && phantom.deform > 0.0 {
        phantom.deform = needle.tip_depth.clamp(0.0, phantom.deform);
    }
    Ok(())
}

/// Optical distance from the fiber to an absolute geometric depth.
pub fn optical_distance(phantom: &TissuePhantom, needle: &NeedleState, y: f64) -> f64 {
    let fiber = needle.fiber_depth();
    let tip = needle.tip_depth;
    let surface = phantom.epi_depth();
    let lumen = (y.min(tip) - fiber).max(0.0) * phantom.n_s;
    if y <= tip {
        return lumen;
    }
    let air = (y.min(surface) - tip).max(0.0);
    let tissue = (y - tip.max(surface)).max(0.0) * phantom.n_s;
    lumen + air + tissue
}

fn tissue_path(phantom: &TissuePhantom, needle: &NeedleState, y: f64) -> f64 {
    (y - needle.tip_depth.max(phantom.epi_depth())).max(0.0)
}

/// A point reflector seen by the fiber.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reflector {
    pub optical_depth: f64,
    pub amplitude: f64,
}

/// Noise-free interferogram of a set of reflectors.
///
/// Depth `z` maps to `z / dz_air` cycles per 2048 samples, so after zero-padded
/// FFT the reflector lands on bin `round(z / dz_air)`. Phase is referenced to
/// the sweep center.
pub fn interferogram(reflectors: &[Reflector], dz_air: f64) -> Vec<f64> {
    let mut out = vec![0.0; N_SAMPLES];
    let center = N_SAMPLES as f64 / 2.0;
    for r in reflectors {
        let bin = r.optical_depth / dz_air;
        if !(0.0..N_BINS as f64).contains(&bin) || r.amplitude == 0.0 {
            continue;
        }
        let omega = 2.0 * PI * bin / FFT_LEN as f64;
        // rotate a phasor instead of calling cos per sample
        let (s, c) = omega.sin_cos();
        let (mut re, mut im) = ((omega * -center).cos(), (omega * -center).sin());
        for v in out.iter_mut() {
            *v += r.amplitude * re;
            let nre = re * c - im * s;
            im = re * s + im * c;
            re = nre;
        }
    }
    out
}

/// Every reflector the fiber currently sees, attenuated by tissue path.
pub fn reflectors(phantom: &TissuePhantom, needle: &NeedleState, cfg: &InteractionConfig) -> Vec<Reflector> {
    let refl = &phantom.reflectivity;
    let mut out = Vec::new();
    let mut push = |y: f64, amp: f64| {
        let att = (-cfg.snr_decay * tissue_path(phantom, needle, y)).exp();
        out.push(Reflector {
            optical_depth: optical_distance(phantom, needle, y),
            amplitude: amp * att,
        });
    };
    push(phantom.epi_depth(), refl.epithelium);
    let epi0 = phantom.epi_depth();
    for (y, amp) in phantom.speckle() {
        push(phantom.displaced(y).max(epi0), amp);
    }
    push(phantom.dm_depth(), refl.dm);
    push(phantom.endo_depth(), refl.endothelium);
    if let Some(iris) = refl.iris {
        push(phantom.endo_depth() + phantom.iris_gap, iris);
    }
    if refl.needle > 0.0 {
        out.push(Reflector {
            optical_depth: optical_distance(phantom, needle, needle.tip_depth),
            amplitude: refl.needle,
        });
    }
    out
}

/// Deterministic part of the spectrum for one needle pose plus a noise source.
pub struct SpectrumSource {
    clean: Vec<f64>,
    noise: Normal<f64>,
}

impl SpectrumSource {
    pub fn new(phantom: &TissuePhantom, needle: &NeedleState, cfg: &InteractionConfig, dz_air: f64) -> Self {
        Self::from_reflectors(&reflectors(phantom, needle, cfg), cfg.noise_floor, dz_air)
    }

    pub fn from_reflectors(reflectors: &[Reflector], noise_floor: f64, dz_air: f64) -> Self {
        Self {
            clean: interferogram(reflectors, dz_air),
            noise: Normal::new(0.0, noise_floor.max(0.0)).expect("finite noise"),
        }
    }

    pub fn clean(&self) -> &[f64] {
        &self.clean
    }

    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        if self.noise.std_dev() == 0.0 {
            out.copy_from_slice(&self.clean);
            return;
        }
        for (o, c) in out.iter_mut().zip(&self.clean) {
            *o = c + self.noise.sample(rng);
        }
    }

    pub fn frame<R: Rng + ?Sized>(&self, rng: &mut R, seq: u64) -> SpectralFrame {
        let mut samples = vec![0.0; N_SAMPLES];
        self.fill(rng, &mut samples);
        SpectralFrame::new(samples, seq).expect("fixed length")
    }
}

/// One synthetic spectral frame for the current pose.
pub fn synth_spectrum(
    phantom: &TissuePhantom,
    needle: &NeedleState,
    cfg: &InteractionConfig,
    n_samples: usize,
    dz_air: f64,
    rng_seed: u64,
) -> Result<SpectralFrame> {
    if n_samples != N_SAMPLES {
        return Err(Error::contract(format!("frame size fixed at {N_SAMPLES}, got {n_samples}")));
    }
    phantom.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(SpectrumSource::new(phantom, needle, cfg, dz_air).frame(&mut rng, 0))
}

/// White-noise level giving the requested DM amplitude-to-noise ratio.
pub fn noise_for_snr_db(phantom: &TissuePhantom, needle: &NeedleState, cfg: &InteractionConfig, snr_db: f64) -> f64 {
    let dm = phantom.dm_depth();
    let amp = phantom.reflectivity.dm * (-cfg.snr_decay * tissue_path(phantom, needle, dm)).exp();
    amp / 10f64.powf(snr_db / 20.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLayers {
    pub epi_row: Vec<usize>,
    pub dm_row: Vec<usize>,
    pub endo_row: Vec<usize>,
    /// 1024x48 row-major; 1 between epithelium and endothelium inclusive.
    pub mask: Vec<u8>,
    pub epi_optical_um: f64,
    pub dm_optical_um: f64,
    pub endo_optical_um: f64,
    /// Geometric fiber distances.
    pub epi_from_fiber_um: f64,
    pub dm_from_fiber_um: f64,
    /// Geometric DM depth minus tip depth.
    pub gap_above_dm_um: f64,
}

pub fn ground_truth(phantom: &TissuePhantom, needle: &NeedleState, axis: &DepthAxis) -> GroundTruthLayers {
    let row = |l: f64| (axis.optical_to_row(l).round().max(0.0) as usize).min(N_BINS - 1);
    let epi_l = optical_distance(phantom, needle, phantom.epi_depth());
    let dm_l = optical_distance(phantom, needle, phantom.dm_depth());
    let endo_l = optical_distance(phantom, needle, phantom.endo_depth());
    let (e, d, n) = (row(epi_l), row(dm_l), row(endo_l));
    let mut mask = vec![0u8; N_BINS * LINES_PER_MSCAN];
    for r in e..=n {
        mask[r * LINES_PER_MSCAN..(r + 1) * LINES_PER_MSCAN].fill(1);
    }
    let fiber = needle.fiber_depth();
    GroundTruthLayers {
        epi_row: vec![e; LINES_PER_MSCAN],
        dm_row: vec![d; LINES_PER_MSCAN],
        endo_row: vec![n; LINES_PER_MSCAN],
        mask,
        epi_optical_um: epi_l,
        dm_optical_um: dm_l,
        endo_optical_um: endo_l,
        epi_from_fiber_um: phantom.epi_depth() - fiber,
        dm_from_fiber_um: phantom.dm_depth() - fiber,
        gap_above_dm_um: phantom.dm_depth() - needle.tip_depth,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PneumoOutcome {
    pub perforated: bool,
    /// Height of the demarcation plane above DM.
    pub demarcation_depth_um: Option<f64>,
    pub type1_bubble: bool,
}

/// Air injection at the final needle position.
pub fn pneumodissect<R: Rng + ?Sized>(cfg: &InteractionConfig, needle_gap_above_dm: f64, rng: &mut R) -> PneumoOutcome {
    let perforation = PneumoOutcome { perforated: true, demarcation_depth_um: None, type1_bubble: false };
    if needle_gap_above_dm < 0.0 {
        return perforation;
    }
    if needle_gap_above_dm < cfg.perforation_gap && rng.random_bool(cfg.perforation_probability) {
        return perforation;
    }
    let z: f64 = StandardNormal.sample(rng);
    let offset = cfg.pneumo_offset_mean + cfg.pneumo_offset_sd * z;
    let type1 = rng.random_bool(cfg.type1_rate);
    demarcation(needle_gap_above_dm, offset, type1)
}

/// Outcome for a known pneumodissection offset.
pub fn demarcation(needle_gap_above_dm: f64, offset: f64, type1: bool) -> PneumoOutcome {
    PneumoOutcome {
        perforated: false,
        demarcation_depth_um: Some((needle_gap_above_dm - offset).max(0.0)),
        type1_bubble: type1,
    }
}

/// Phantom configuration file contents (TOML). The seed is mandatory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    #[serde(default)]
    pub phantom: TissuePhantom,
    #[serde(default)]
    pub interaction: InteractionConfig,
}

impl PhantomConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.phantom.validate()?;
        cfg.interaction.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable")
    }
}
