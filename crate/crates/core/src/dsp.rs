//! A-line reconstruction, M-scan assembly and depth-axis conversions.
//!
//! The imaging chain mirrors a swept-source common-path OCT: each spectral
//! frame has the background removed, is tapered, zero-padded to twice its
//! length and Fourier transformed. 256 magnitude spectra are averaged into one
//! A-line; 48 A-lines form an M-scan.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real samples per spectral frame.
pub const N_SAMPLES: usize = 1024;
/// FFT length after zero-padding.
pub const FFT_LEN: usize = 2 * N_SAMPLES;
/// Depth bins kept per A-line.
pub const N_BINS: usize = 1024;
/// Spectral frames averaged into one A-line.
pub const FRAMES_PER_ALINE: usize = 256;
/// A-lines per M-scan.
pub const LINES_PER_MSCAN: usize = 48;
/// Integration time of one averaged A-line.
pub const LINE_PERIOD_MS: f64 = 2.56;
/// Optical sensing depth in air spanned by the 1024 bins.
pub const SENSING_DEPTH_AIR_UM: f64 = 3700.0;
pub const DEFAULT_DZ_AIR: f64 = SENSING_DEPTH_AIR_UM / N_BINS as f64;
pub const DEFAULT_N_S: f64 = 1.321;
/// Geometric distance from the fiber face to the needle tip.
pub const DEFAULT_NEEDLE_OFFSET_UM: f64 = 500.0;

/// Geometric length from an optical length: `l_o / n_s`.
pub fn refract_correct(optical_um: f64, n_s: f64) -> Result<f64> {
    if !(n_s >= 1.0) {
        return Err(Error::contract(format!("refractive index {n_s} < 1")));
    }
    if !(optical_um >= 0.0) {
        return Err(Error::contract(format!("optical length {optical_um} < 0")));
    }
    Ok(optical_um / n_s)
}

/// Optical length of the geometric fiber-to-tip offset.
pub fn needle_offset_optical(offset_geo_um: f64, n_s: f64) -> Result<f64> {
    if !(offset_geo_um > 0.0) {
        return Err(Error::contract(format!("needle offset {offset_geo_um} must be > 0")));
    }
    if !(n_s >= 1.0) {
        return Err(Error::contract(format!("refractive index {n_s} < 1")));
    }
    Ok(offset_geo_um * n_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Window {
    Rect,
    Hann,
    /// Flat top with cosine tapers over `alpha` of the frame.
    Tukey { alpha: f64 },
}

impl Default for Window {
    fn default() -> Self {
        Window::Tukey { alpha: 0.25 }
    }
}

impl Window {
    /// Periodic window coefficients of length `n`.
    pub fn coefficients(&self, n: usize) -> Vec<f64> {
        let nf = n as f64;
        match *self {
            Window::Rect => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / nf).cos())
                .collect(),
            Window::Tukey { alpha } => {
                if alpha <= 0.0 {
                    return vec![1.0; n];
                }
                let alpha = alpha.min(1.0);
                let edge = alpha * nf / 2.0;
                (0..n)
                    .map(|k| {
                        let x = k as f64;
                        if x < edge {
                            0.5 * (1.0 - (PI * x / edge).cos())
                        } else if x > nf - edge {
                            0.5 * (1.0 - (PI * (nf - x) / edge).cos())
                        } else {
                            1.0
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame {
    samples: Vec<f64>,
    pub seq: u64,
}

impl SpectralFrame {
    pub fn new(samples: Vec<f64>, seq: u64) -> Result<Self> {
        if samples.len() != N_SAMPLES {
            return Err(Error::Shape {
                expected: format!("{N_SAMPLES} samples"),
                got: format!("{} samples", samples.len()),
            });
        }
        Ok(Self { samples, seq })
    }

    pub fn zeros(seq: u64) -> Self {
        Self { samples: vec![0.0; N_SAMPLES], seq }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ALine {
    pub intensity: Vec<f64>,
    pub timestamp_ms: f64,
}

impl ALine {
    pub fn argmax(&self) -> usize {
        self.intensity
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

/// Depth-by-time intensity image, row-major: `pixels[row * cols + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MScan {
    pixels: Vec<f32>,
    pub first_seq: u64,
    pub duration_ms: f64,
}

impl MScan {
    pub const ROWS: usize = N_BINS;
    pub const COLS: usize = LINES_PER_MSCAN;

    pub fn from_pixels(pixels: Vec<f32>, first_seq: u64) -> Result<Self> {
        if pixels.len() != Self::ROWS * Self::COLS {
            return Err(Error::Shape {
                expected: format!("{}x{}", Self::ROWS, Self::COLS),
                got: format!("{} pixels", pixels.len()),
            });
        }
        Ok(Self {
            pixels,
            first_seq,
            duration_ms: LINES_PER_MSCAN as f64 * LINE_PERIOD_MS,
        })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * Self::COLS + col]
    }

    pub fn column(&self, col: usize) -> Vec<f32> {
        (0..Self::ROWS).map(|r| self.at(r, col)).collect()
    }
}

/// Pixel-to-micron conversion along the A-line.
///
/// The optical path from the fiber runs first through the needle lumen
/// (`needle_offset_um` geometric, tissue index), then through air until the
/// epithelium, then through tissue. Tissue below the epithelium is corrected by
/// `n_s` only while `correction_active` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthAxis {
    pub dz_air: f64,
    pub n_s: f64,
    pub correction_active: bool,
    pub needle_offset_um: f64,
}

impl Default for DepthAxis {
    fn default() -> Self {
        Self {
            dz_air: DEFAULT_DZ_AIR,
            n_s: DEFAULT_N_S,
            correction_active: false,
            needle_offset_um: DEFAULT_NEEDLE_OFFSET_UM,
        }
    }
}

impl DepthAxis {
    pub fn validate(&self) -> Result<()> {
        if !(self.dz_air > 0.0) || !(self.n_s >= 1.0) || !(self.needle_offset_um > 0.0) {
            return Err(Error::config(format!("invalid depth axis {self:?}")));
        }
        Ok(())
    }

    pub fn row_to_optical(&self, row: f64) -> f64 {
        row * self.dz_air
    }

    pub fn optical_to_row(&self, optical_um: f64) -> f64 {
        optical_um / self.dz_air
    }

    /// Optical extent of the fiber-to-tip lumen.
    pub fn lumen_optical(&self) -> f64 {
        self.needle_offset_um * self.n_s
    }

    /// Geometric distance from the fiber for an optical distance, given where
    /// the epithelium sits optically (if known).
    pub fn to_geometric(&self, optical_um: f64, epi_optical_um: Option<f64>) -> f64 {
        let lumen = self.lumen_optical();
        if optical_um <= lumen {
            return optical_um / self.n_s;
        }
        let tissue_start = epi_optical_um.map_or(f64::INFINITY, |e| e.max(lumen));
        let air = (optical_um.min(tissue_start) - lumen).max(0.0);
        let tissue = (optical_um - tissue_start).max(0.0);
        let tissue_index = if self.correction_active { self.n_s } else { 1.0 };
        self.needle_offset_um + air + tissue / tissue_index
    }

    /// Geometric tissue thickness spanned by `rows` depth bins.
    pub fn tissue_rows_to_um(&self, rows: f64) -> f64 {
        rows * self.dz_air / self.n_s
    }

    pub fn tissue_um_to_rows(&self, um: f64) -> f64 {
        um * self.n_s / self.dz_air
    }
}

/// Streaming form of [`reconstruct_aline`]: frames are pushed one at a time.
///
/// Frames are transformed two at a time by packing one into the imaginary part
/// of a single complex FFT and separating the spectra by conjugate symmetry.
pub struct ALineAccumulator {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    background: Vec<f64>,
    /// The real half of `buf` holds a frame waiting for its partner.
    pending: bool,
    sum: Vec<f64>,
    count: usize,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

fn shared_fft() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(FFT_LEN)).clone()
}

impl ALineAccumulator {
    pub fn new(window: Window, background: &SpectralFrame) -> Self {
        let fft = shared_fft();
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Self {
            fft,
            window: window.coefficients(N_SAMPLES),
            background: background.samples.clone(),
            pending: false,
            sum: vec![0.0; N_BINS],
            count: 0,
            buf: vec![Complex::default(); FFT_LEN],
            scratch,
        }
    }

    pub fn push(&mut self, frame: &SpectralFrame) {
        self.push_samples(&frame.samples);
    }

    pub(crate) fn push_samples(&mut self, samples: &[f64]) {
        debug_assert_eq!(samples.len(), N_SAMPLES);
        let prepared = samples.iter().zip(&self.background).zip(&self.window).map(|((s, b), w)| (s - b) * w);
        if self.pending {
            for (slot, v) in self.buf.iter_mut().zip(prepared) {
                slot.im = v;
            }
            self.transform_pair(true);
        } else {
            for (slot, v) in self.buf.iter_mut().zip(prepared) {
                *slot = Complex::new(v, 0.0);
            }
            self.buf[N_SAMPLES..].fill(Complex::default());
            self.pending = true;
        }
        self.count += 1;
    }

    fn transform_pair(&mut self, paired: bool) {
        self.pending = false;
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        // bin k pairs with bin FFT_LEN - k; bin 0 pairs with itself
        let (lo, hi) = self.buf.split_at(N_BINS);
        let mirror = std::iter::once(&lo[0]).chain(hi[1..].iter().rev());
        for ((sum, x), r) in self.sum.iter_mut().zip(lo).zip(mirror) {
            let (ar, ai) = (0.5 * (x.re + r.re), 0.5 * (x.im - r.im));
            *sum += (ar * ar + ai * ai).sqrt();
            if paired {
                // (x - conj(r)) / 2i
                let (br, bi) = (0.5 * (x.im + r.im), 0.5 * (r.re - x.re));
                *sum += (br * br + bi * bi).sqrt();
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Averaged magnitude over all pushed frames.
    pub fn finish(mut self, timestamp_ms: f64) -> ALine {
        if self.pending {
            self.transform_pair(false);
        }
        let n = self.count.max(1) as f64;
        ALine {
            intensity: self.sum.into_iter().map(|v| v / n).collect(),
            timestamp_ms,
        }
    }
}

/// Average the magnitude spectra of 256 background-subtracted frames.
pub fn reconstruct_aline(
    frames: &[SpectralFrame],
    background: &SpectralFrame,
    window: Window,
) -> Result<ALine> {
    if frames.len() != FRAMES_PER_ALINE {
        return Err(Error::contract(format!(
            "expected {FRAMES_PER_ALINE} frames, got {}",
            frames.len()
        )));
    }
    let mut acc = ALineAccumulator::new(window, background);
    for f in frames {
        acc.push(f);
    }
    let line_index = frames[0].seq / FRAMES_PER_ALINE as u64;
    Ok(acc.finish(LINE_PERIOD_MS * line_index as f64))
}

/// Stack 48 time-ordered A-lines as the columns of an M-scan.
pub fn assemble_mscan(alines: &[ALine], first_seq: u64) -> Result<MScan> {
    if alines.len() != LINES_PER_MSCAN {
        return Err(Error::contract(format!(
            "expected {LINES_PER_MSCAN} A-lines, got {}",
            alines.len()
        )));
    }
    if alines.windows(2).any(|w| w[1].timestamp_ms < w[0].timestamp_ms) {
        return Err(Error::contract("A-lines are not time ordered"));
    }
    let mut pixels = vec![0.0f32; N_BINS * LINES_PER_MSCAN];
    for (col, line) in alines.iter().enumerate() {
        if line.intensity.len() != N_BINS {
            return Err(Error::Shape {
                expected: format!("{N_BINS} bins"),
                got: format!("{} bins", line.intensity.len()),
            });
        }
        for (row, &v) in line.intensity.iter().enumerate() {
            pixels[row * LINES_PER_MSCAN + col] = v as f32;
        }
    }
    let mut scan = MScan::from_pixels(pixels, first_seq)?;
    scan.duration_ms = LINES_PER_MSCAN as f64 * LINE_PERIOD_MS;
    Ok(scan)
}

/// Cumulative-histogram equalization to 256 display levels.
///
/// Each pixel maps to `floor(255 * cdf(v))` where `cdf(v)` is the fraction of
/// pixels `<= v`. A constant image carries no contrast and is passed through
/// (clamped to the display range).
pub fn hist_equalize(scan: &MScan) -> Vec<u8> {
    equalize_values(scan.pixels())
}

pub(crate) fn equalize_values(values: &[f32]) -> Vec<u8> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return values.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0u8; n];
    let mut i = 0;
    while i < n {
        let v = values[order[i]];
        let mut j = i;
        while j < n && values[order[j]] == v {
            j += 1;
        }
        // j pixels are <= v
        let level = (255.0 * j as f64 / n as f64).floor() as u8;
        for &idx in &order[i..j] {
            out[idx] = level;
        }
        i = j;
    }
    out
}

/// Log-compressed copy for display (`10 log10(1 + v)`).
pub fn log_display(scan: &MScan) -> Vec<f32> {
    scan.pixels().iter().map(|&v| 10.0 * (1.0 + v.max(0.0)).log10()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tone(bin: f64, amp: f64) -> Vec<f64> {
        (0..N_SAMPLES)
            .map(|k| {
                let f = bin / FFT_LEN as f64;
                amp * (2.0 * PI * f * (k as f64 - N_SAMPLES as f64 / 2.0)).cos()
            })
            .collect()
    }

    fn frames_of(samples: &[f64]) -> Vec<SpectralFrame> {
        (0..FRAMES_PER_ALINE)
            .map(|i| SpectralFrame::new(samples.to_vec(), i as u64).unwrap())
            .collect()
    }

    #[test]
    fn refraction_examples() {
        assert_relative_eq!(refract_correct(3700.0, 1.321).unwrap(), 2800.9084, epsilon = 1e-3);
        assert_eq!(refract_correct(123.0, 1.0).unwrap(), 123.0);
        assert_relative_eq!(refract_correct(1376.0, 1.376).unwrap(), 1000.0, epsilon = 1e-12);
        assert!(refract_correct(10.0, 0.99).is_err());
        assert_relative_eq!(needle_offset_optical(500.0, 1.321).unwrap(), 660.5, epsilon = 1e-12);
        assert_eq!(needle_offset_optical(500.0, 1.0).unwrap(), 500.0);
        assert!(needle_offset_optical(0.0, 1.3).is_err());
    }

    #[test]
    fn zero_frames_give_zero_aline() {
        let frames = frames_of(&vec![0.0; N_SAMPLES]);
        let line = reconstruct_aline(&frames, &SpectralFrame::zeros(0), Window::default()).unwrap();
        assert!(line.intensity.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn background_cancels_exactly() {
        let s = tone(77.0, 3.0);
        let frames = frames_of(&s);
        let bg = SpectralFrame::new(s, 0).unwrap();
        let line = reconstruct_aline(&frames, &bg, Window::Hann).unwrap();
        assert!(line.intensity.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_tone_peaks_at_its_bin() {
        for window in [Window::Hann, Window::default(), Window::Rect] {
            let frames = frames_of(&tone(100.0, 1.0));
            let line = reconstruct_aline(&frames, &SpectralFrame::zeros(0), window).unwrap();
            assert_eq!(line.argmax(), 100, "{window:?}");
        }
    }

    #[test]
    fn paired_fft_matches_single_frame_path() {
        // odd frame count exercises the unpaired tail
        let a = tone(40.0, 1.0);
        let b = tone(300.5, 0.5);
        let bg = SpectralFrame::zeros(0);
        let mut acc = ALineAccumulator::new(Window::Hann, &bg);
        acc.push_samples(&a);
        acc.push_samples(&b);
        acc.push_samples(&a);
        let paired = acc.finish(0.0);
        let single = |s: &[f64]| {
            let mut acc = ALineAccumulator::new(Window::Hann, &bg);
            acc.push_samples(s);
            acc.finish(0.0).intensity
        };
        let (sa, sb) = (single(&a), single(&b));
        for k in 0..N_BINS {
            let expect = (2.0 * sa[k] + sb[k]) / 3.0;
            assert!((paired.intensity[k] - expect).abs() < 1e-9 * (1.0 + expect));
        }
    }

    #[test]
    fn wrong_counts_rejected() {
        let frames = frames_of(&vec![0.0; N_SAMPLES]);
        assert!(reconstruct_aline(&frames[..255], &SpectralFrame::zeros(0), Window::Hann).is_err());
        assert!(SpectralFrame::new(vec![0.0; 1000], 0).is_err());
        let line = ALine { intensity: vec![0.0; N_BINS], timestamp_ms: 0.0 };
        assert!(assemble_mscan(&vec![line; 47], 0).is_err());
    }

    #[test]
    fn aline_timestamp_follows_line_index() {
        let frames: Vec<_> = (0..FRAMES_PER_ALINE)
            .map(|i| SpectralFrame::new(vec![0.0; N_SAMPLES], 512 + i as u64).unwrap())
            .collect();
        let line = reconstruct_aline(&frames, &SpectralFrame::zeros(0), Window::Hann).unwrap();
        assert_relative_eq!(line.timestamp_ms, 2.0 * 2.56);
    }

    #[test]
    fn mscan_columns_are_inputs_in_order() {
        let lines: Vec<ALine> = (0..LINES_PER_MSCAN)
            .map(|c| ALine {
                intensity: (0..N_BINS).map(|r| (r * 100 + c) as f64).collect(),
                timestamp_ms: c as f64 * LINE_PERIOD_MS,
            })
            .collect();
        let scan = assemble_mscan(&lines, 7).unwrap();
        assert_relative_eq!(scan.duration_ms, 122.88, epsilon = 1e-9);
        for c in 0..LINES_PER_MSCAN {
            let col = scan.column(c);
            for r in 0..N_BINS {
                assert_eq!(col[r] as f64, lines[c].intensity[r]);
            }
        }
    }

    #[test]
    fn equalize_four_levels() {
        let values: Vec<f32> = (0..LINES_PER_MSCAN * N_BINS).map(|i| (i % 4) as f32 * 10.0).collect();
        let scan = MScan::from_pixels(values.clone(), 0).unwrap();
        let out = hist_equalize(&scan);
        for (v, o) in values.iter().zip(&out) {
            let expect = match *v as u32 {
                0 => 63,
                10 => 127,
                20 => 191,
                _ => 255,
            };
            assert_eq!(*o, expect);
        }
    }

    #[test]
    fn equalize_constant_passthrough() {
        let scan = MScan::from_pixels(vec![42.0; N_BINS * LINES_PER_MSCAN], 0).unwrap();
        assert!(hist_equalize(&scan).iter().all(|&v| v == 42));
    }

    #[test]
    fn depth_axis_piecewise() {
        let mut axis = DepthAxis::default();
        // inside lumen
        assert_relative_eq!(axis.to_geometric(660.5, Some(900.0)), 500.0, epsilon = 1e-9);
        // air gap of 100 then 132.1 optical of tissue, uncorrected
        assert_relative_eq!(axis.to_geometric(892.6, Some(760.5)), 732.1, epsilon = 1e-9);
        axis.correction_active = true;
        assert_relative_eq!(axis.to_geometric(892.6, Some(760.5)), 700.0, epsilon = 1e-9);
        // after contact the whole path is tissue-index
        assert_relative_eq!(axis.to_geometric(1321.0, Some(600.0)), 1000.0, epsilon = 1e-9);
    }
}
