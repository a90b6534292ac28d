//! Layer tracking: mask edges to smoothed epithelium / DM depths.
//!
//! Depths are tracked in a frame fixed to the fiber position at attach time,
//! so a stationary layer stays stationary while the needle advances. The raw
//! fiber-relative measurement is shifted by the commanded travel before
//! filtering.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dsp::{DepthAxis, MScan};
use crate::error::Result;
use crate::segnet::{NetParams, SegMask};

pub const KALMAN_Q: f64 = 1e-5;
pub const KALMAN_R: f64 = 1.0;
pub const WINDOW_CAPACITY: usize = 100;
pub const WINDOW_HALF: usize = 50;

/// Scalar Kalman filter with F = H = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub x_hat: f64,
    pub p: f64,
    pub q: f64,
    pub r: f64,
}

impl KalmanState {
    pub fn new(x0: f64) -> Self {
        Self { x_hat: x0, p: 1.0, q: KALMAN_Q, r: KALMAN_R }
    }

    /// One predict/update step. Returns the gain used.
    pub fn update(&mut self, obs: f64) -> f64 {
        let p_pred = self.p + self.q;
        let k = p_pred / (p_pred + self.r);
        self.x_hat += k * (obs - self.x_hat);
        self.p = (1.0 - k) * p_pred;
        k
    }
}

/// Last 100 raw observations, blended 0.7 / 0.3 between the latest 50 and the
/// ones before.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationWindow {
    buf: VecDeque<f64>,
    count: u64,
}

impl ObservationWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.buf.iter()
    }

    /// Push `z` and return the observation to feed the filter.
    pub fn push(&mut self, z: f64) -> f64 {
        if self.buf.len() == WINDOW_CAPACITY {
            self.buf.pop_front();
        }
        self.buf.push_back(z);
        self.count += 1;
        let n = self.buf.len();
        if n <= WINDOW_HALF {
            return z;
        }
        let split = n - WINDOW_HALF;
        let mean = |it: std::collections::vec_deque::Iter<'_, f64>, len: usize| it.sum::<f64>() / len as f64;
        let recent = mean(self.buf.range(split..), WINDOW_HALF);
        let before = mean(self.buf.range(..split), split);
        0.7 * recent + 0.3 * before
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueMode {
    InVivo,
    #[default]
    ExVivo,
}

impl TissueMode {
    /// Allowed epithelium-to-posterior-edge distance, geometric µm.
    pub fn window_um(self) -> (f64, f64) {
        match self {
            TissueMode::InVivo => (0.0, 400.0),
            TissueMode::ExVivo => (0.0, 1100.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeConfig {
    pub grad_threshold: f32,
    /// Largest row jump between edge points in neighbouring columns that
    /// still continues a polyline.
    pub link_rows: usize,
    /// Fraction of columns a polyline must cover to be a candidate.
    pub min_coverage: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self { grad_threshold: 0.5, link_rows: 6, min_coverage: 0.5 }
    }
}

/// A connected run of same-polarity edge points across columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    /// `(column, row)` pairs in column order.
    pub points: Vec<(usize, usize)>,
}

impl Polyline {
    pub fn mean_row(&self) -> f64 {
        self.points.iter().map(|p| p.1 as f64).sum::<f64>() / self.points.len() as f64
    }

    /// Cross-column standard deviation of the row (population form).
    pub fn std_rows(&self) -> f64 {
        let m = self.mean_row();
        (self.points.iter().map(|p| (p.1 as f64 - m).powi(2)).sum::<f64>() / self.points.len() as f64).sqrt()
    }
}

/// Raw per-frame edge rows. `dm_px` is the posterior edge of the mask.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeObservation {
    pub epi_px: Option<f64>,
    pub dm_px: Option<f64>,
}

/// Edge rows of one column of a thresholded mask: rows of the first
/// foreground pixel of each rising run and the last of each falling run.
fn column_edges(mask: &SegMask, col: usize, threshold: f32) -> (Vec<usize>, Vec<usize>) {
    let rows = mask.rows;
    let bin = |r: usize| if mask.at(r, col) >= 0.5 { 1.0f32 } else { 0.0 };
    let (mut top, mut bottom) = (Vec::new(), Vec::new());
    // derivative kernel (-1, 0, +1) with replicated border
    let grad = |r: usize| bin((r + 1).min(rows - 1)) - bin(r.saturating_sub(1));
    let mut r = 0;
    while r < rows {
        let g = grad(r);
        if g.abs() >= threshold {
            let start = r;
            while r + 1 < rows && grad(r + 1).signum() == g.signum() && grad(r + 1).abs() >= threshold {
                r += 1;
            }
            if g > 0.0 {
                // last row of the run is the first foreground row
                top.push(if bin(r) > 0.0 { r } else { (r + 1).min(rows - 1) });
            } else {
                bottom.push(if bin(start) > 0.0 { start } else { start.saturating_sub(1) });
            }
        }
        r += 1;
    }
    (top, bottom)
}

/// Link edge points into polylines: each point continues the polyline whose
/// last point is nearest in row among those ending in the previous column,
/// within `link_rows`.
pub fn link_polylines(columns: &[Vec<usize>], link_rows: usize) -> Vec<Polyline> {
    let mut lines: Vec<Polyline> = Vec::new();
    for (col, rows) in columns.iter().enumerate() {
        let mut taken = vec![false; lines.len()];
        for &row in rows {
            let best = lines
                .iter()
                .enumerate()
                .filter(|(i, l)| {
                    let last = l.points.last().expect("non-empty");
                    taken.get(*i) == Some(&false) && last.0 + 1 == col && last.1.abs_diff(row) <= link_rows
                })
                .min_by_key(|(_, l)| l.points.last().expect("non-empty").1.abs_diff(row))
                .map(|(i, _)| i);
            match best {
                Some(i) => {
                    lines[i].points.push((col, row));
                    taken[i] = true;
                }
                None => lines.push(Polyline { points: vec![(col, row)] }),
            }
        }
    }
    lines
}

/// Epithelium and posterior edge rows of a segmentation mask.
///
/// The epithelium is the top-edge polyline with the smallest row spread; the
/// posterior edge is the deepest bottom-edge polyline whose distance below the
/// epithelium falls inside the tissue mode's window.
pub fn extract_edges(mask: &SegMask, mode: TissueMode, axis: &DepthAxis, cfg: &EdgeConfig) -> EdgeObservation {
    let mut tops = Vec::with_capacity(mask.cols);
    let mut bottoms = Vec::with_capacity(mask.cols);
    for c in 0..mask.cols {
        let (t, b) = column_edges(mask, c, cfg.grad_threshold);
        tops.push(t);
        bottoms.push(b);
    }
    let min_len = ((cfg.min_coverage * mask.cols as f64).ceil() as usize).max(1);
    let candidates = |cols: &[Vec<usize>]| -> Vec<Polyline> {
        link_polylines(cols, cfg.link_rows).into_iter().filter(|l| l.points.len() >= min_len).collect()
    };
    let epi = candidates(&tops).into_iter().min_by(|a, b| {
        a.std_rows().total_cmp(&b.std_rows()).then(a.mean_row().total_cmp(&b.mean_row()))
    });
    let Some(epi) = epi else {
        return EdgeObservation::default();
    };
    let epi_px = epi.mean_row();
    let (lo, hi) = mode.window_um();
    let dm_px = candidates(&bottoms)
        .into_iter()
        .map(|l| l.mean_row())
        .filter(|&row| {
            let d = axis.tissue_rows_to_um(row - epi_px);
            row > epi_px && d >= lo && d <= hi
        })
        .max_by(|a, b| a.total_cmp(b));
    EdgeObservation { epi_px: Some(epi_px), dm_px }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub mode: TissueMode,
    /// DM height above the posterior edge of the mask, geometric µm.
    pub dm_offset_um: f64,
    /// Largest tip-versus-epithelium disagreement tolerated before contact.
    pub quality_tolerance_um: f64,
    pub edges: EdgeConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { mode: TissueMode::default(), dm_offset_um: 15.0, quality_tolerance_um: 20.0, edges: EdgeConfig::default() }
    }
}

/// Raw layer depths below the attach-time fiber position, geometric µm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RawDepths {
    pub epi_um: Option<f64>,
    pub dm_um: Option<f64>,
}

/// Convert edge rows to depths in the tracking frame.
pub fn raw_depths(edges: &EdgeObservation, axis: &DepthAxis, travel_um: f64, dm_offset_um: f64) -> RawDepths {
    let Some(epi_px) = edges.epi_px else {
        return RawDepths::default();
    };
    let epi_opt = axis.row_to_optical(epi_px);
    let epi = travel_um + axis.to_geometric(epi_opt, Some(epi_opt));
    let dm = edges.dm_px.map(|row| {
        let post = travel_um + axis.to_geometric(axis.row_to_optical(row), Some(epi_opt));
        let offset = if axis.correction_active { dm_offset_um } else { dm_offset_um * axis.n_s };
        post - offset
    });
    RawDepths { epi_um: Some(epi), dm_um: dm }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct LayerFilter {
    window: ObservationWindow,
    kalman: Option<KalmanState>,
}

impl LayerFilter {
    fn observe(&mut self, z: f64) {
        let obs = self.window.push(z);
        match &mut self.kalman {
            Some(k) => {
                k.update(obs);
            }
            None => self.kalman = Some(KalmanState::new(obs)),
        }
    }

    fn value(&self) -> Option<f64> {
        self.kalman.map(|k| k.x_hat)
    }
}

/// One tracked frame. Depths are geometric µm below the attach-time fiber
/// position; `epi_px` / `dm_px` are the raw mask rows of this frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerEstimate {
    pub frame_seq: u64,
    pub epi_px: Option<f64>,
    pub dm_px: Option<f64>,
    pub epi_um: Option<f64>,
    pub dm_um: Option<f64>,
    pub needle_tip_um: f64,
    pub gap_above_dm_um: Option<f64>,
    pub valid_epi: bool,
    pub valid_dm: bool,
    /// Raw fiber-to-epithelium optical distance of this frame.
    pub epi_optical_um: Option<f64>,
    pub correction_active: bool,
    pub quality_warning: bool,
}

/// Windowed Kalman tracking of both layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracker {
    pub config: TrackerConfig,
    epi: LayerFilter,
    dm: LayerFilter,
    correction_active: Option<bool>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self { config, epi: LayerFilter::default(), dm: LayerFilter::default(), correction_active: None }
    }

    pub fn reset(&mut self) {
        self.epi = LayerFilter::default();
        self.dm = LayerFilter::default();
    }

    pub fn epi_state(&self) -> Option<KalmanState> {
        self.epi.kalman
    }

    pub fn dm_state(&self) -> Option<KalmanState> {
        self.dm.kalman
    }

    /// Feed one frame of raw depths. Filters restart whenever the refraction
    /// correction is switched, since depths before and after are not on the
    /// same scale. Invalid layers keep their previous state.
    pub fn update(
        &mut self,
        edges: &EdgeObservation,
        raw: &RawDepths,
        axis: &DepthAxis,
        travel_um: f64,
        frame_seq: u64,
    ) -> LayerEstimate {
        if self.correction_active.is_some_and(|c| c != axis.correction_active) {
            self.reset();
        }
        self.correction_active = Some(axis.correction_active);
        if let Some(z) = raw.epi_um {
            self.epi.observe(z);
        }
        if let Some(z) = raw.dm_um {
            self.dm.observe(z);
        }
        let tip = travel_um + axis.needle_offset_um;
        let dm_um = self.dm.value();
        let epi_um = self.epi.value();
        let quality_warning = !axis.correction_active
            && raw.epi_um.is_some_and(|e| tip - e > self.config.quality_tolerance_um);
        LayerEstimate {
            frame_seq,
            epi_px: edges.epi_px,
            dm_px: edges.dm_px,
            epi_um,
            dm_um,
            needle_tip_um: tip,
            gap_above_dm_um: dm_um.map(|d| d - tip),
            valid_epi: raw.epi_um.is_some(),
            valid_dm: raw.dm_um.is_some(),
            epi_optical_um: edges.epi_px.map(|r| axis.row_to_optical(r)),
            correction_active: axis.correction_active,
            quality_warning,
        }
    }

    /// Edges of a mask through to an estimate.
    pub fn observe_mask(&mut self, mask: &SegMask, axis: &DepthAxis, travel_um: f64, frame_seq: u64) -> LayerEstimate {
        let edges = extract_edges(mask, self.config.mode, axis, &self.config.edges);
        let raw = raw_depths(&edges, axis, travel_um, self.config.dm_offset_um);
        self.update(&edges, &raw, axis, travel_um, frame_seq)
    }
}

/// Segment one M-scan with `net` and track it.
pub fn track(
    scan: &MScan,
    net: &NetParams<f32>,
    axis: &DepthAxis,
    travel_um: f64,
    tracker: &mut Tracker,
) -> Result<LayerEstimate> {
    let mask = net.segment(scan)?;
    Ok(tracker.observe_mask(&mask, axis, travel_um, scan.first_seq))
}
