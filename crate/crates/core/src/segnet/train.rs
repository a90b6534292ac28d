//! Momentum SGD on random row crops, and phantom-grouped cross-validation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Scalar, Tensor};
use super::loss::{loss, LossParts, RegionMap, SAMPLES_PER_SECTOR};
use super::{Mode, NetParams, NetSpec, SegMask, PAD};
use crate::error::{Error, Result};

/// One labelled frame. `image` is already preprocessed and padded.
#[derive(Debug, Clone)]
pub struct Sample {
    pub phantom_id: u32,
    pub image: Tensor<f32>,
    /// Foreground labels, `rows x cols` (image size minus padding).
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn rows(&self) -> usize {
        self.image.h - 2 * PAD
    }

    pub fn cols(&self) -> usize {
        self.image.w - 2 * PAD
    }

    fn check(&self) -> Result<()> {
        if self.image.c != 1 || self.image.h <= 2 * PAD || self.image.w <= 2 * PAD || self.mask.len() != self.rows() * self.cols() {
            return Err(Error::Shape {
                expected: "padded image with matching mask".into(),
                got: format!("{}x{}x{} / {}", self.image.c, self.image.h, self.image.w, self.mask.len()),
            });
        }
        Ok(())
    }

    /// Rows `y0..y0+h` of the label grid with their padded context.
    pub fn crop_rows(&self, y0: usize, h: usize) -> Sample {
        self.crop(y0, 0, h, self.cols())
    }

    /// Label window `h x w` at `(y0, x0)` with its padded context.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Sample {
        let cols = self.cols();
        let mask = (y0..y0 + h).flat_map(|r| self.mask[r * cols + x0..r * cols + x0 + w].iter().copied()).collect();
        Sample { phantom_id: self.phantom_id, image: self.image.crop(y0, x0, h + 2 * PAD, w + 2 * PAD), mask }
    }
}

/// Top-left corner of a training crop. With probability `fg_fraction` the
/// window is placed to contain a random foreground pixel.
fn crop_origin<R: Rng>(rng: &mut R, s: &Sample, h: usize, w: usize, fg_fraction: f64) -> (usize, usize) {
    let (rows, cols) = (s.rows(), s.cols());
    let fg = s.mask.iter().filter(|&&m| m != 0).count();
    if fg > 0 && rng.random_bool(fg_fraction) {
        let k = rng.random_range(0..fg);
        let idx = s.mask.iter().enumerate().filter(|(_, &m)| m != 0).nth(k).map(|(i, _)| i).expect("k < fg");
        let (r, c) = (idx / cols, idx % cols);
        let y0 = r.saturating_sub(rng.random_range(0..h)).min(rows - h);
        let x0 = c.saturating_sub(rng.random_range(0..w)).min(cols - w);
        (y0, x0)
    } else {
        (rng.random_range(0..=rows - h), rng.random_range(0..=cols - w))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub crop_rows: usize,
    pub crop_cols: usize,
    /// Share of crops placed over labelled tissue.
    pub foreground_crop_fraction: f64,
    pub rays_per_sector: usize,
    pub grad_clip: f64,
    /// Updates over which the learning rate ramps up linearly from zero.
    pub warmup_steps: usize,
    pub folds: usize,
    pub seed: u64,
    pub c1: usize,
    pub c2: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.12,
            dropout: 0.5,
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 10,
            batch: 4,
            crop_rows: 160,
            crop_cols: 16,
            foreground_crop_fraction: 0.75,
            rays_per_sector: SAMPLES_PER_SECTOR,
            grad_clip: 1.0,
            warmup_steps: 30,
            folds: 5,
            seed: 0,
            c1: 8,
            c2: 16,
        }
    }
}

impl TrainConfig {
    pub fn spec(&self) -> NetSpec {
        NetSpec { c1: self.c1, c2: self.c2 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && (0.0..1.0).contains(&self.dropout)
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.crop_rows > 0
            && self.crop_cols > 0
            && (0.0..=1.0).contains(&self.foreground_crop_fraction)
            && self.batch > 0
            && self.grad_clip > 0.0
            && self.folds >= 2
            && self.c1 > 0
            && self.c2 > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid training config {self:?}")))
        }
    }
}

/// Loss and gradient of one sample.
pub fn sample_gradient<T: Scalar>(
    net: &NetParams<T>,
    sample: &Sample,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(LossParts, NetParams<T>)> {
    let regions = RegionMap::new(&sample.mask, sample.rows(), sample.cols(), cfg.rays_per_sector)?;
    let acts = net.forward_cached(&sample.image.cast(), mode)?;
    let (parts, ddiff) = loss(&acts.diff, &sample.mask, &regions, cfg.alpha, cfg.beta)?;
    Ok((parts, net.backward(&acts, &ddiff)))
}

/// Train from Kaiming initialisation with one random crop per sample per
/// epoch. Returns the net and the mean loss of every epoch.
pub fn train(samples: &[Sample], cfg: &TrainConfig) -> Result<(NetParams<f32>, Vec<f64>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::config("no training samples"));
    }
    for s in samples {
        s.check()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = NetParams::<f32>::kaiming(cfg.spec(), rng.random());
    net.dropout = cfg.dropout;
    let mut velocity = NetParams::<f32>::zeros(cfg.spec());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut grad = NetParams::<f32>::zeros(cfg.spec());
            for &i in chunk {
                let s = &samples[i];
                let (h, w) = (cfg.crop_rows.min(s.rows()), cfg.crop_cols.min(s.cols()));
                let (y0, x0) = crop_origin(&mut rng, s, h, w, cfg.foreground_crop_fraction);
                let (parts, g) = sample_gradient(&net, &s.crop(y0, x0, h, w), cfg, Mode::Train { seed: rng.random() })?;
                epoch_loss += parts.total;
                for (acc, gi) in grad.convs.iter_mut().zip(&g.convs) {
                    for (a, b) in acc.weight.iter_mut().chain(acc.bias.iter_mut()).zip(gi.weight.iter().chain(&gi.bias)) {
                        *a += *b / chunk.len() as f32;
                    }
                }
            }
            let norm = grad
                .convs
                .iter()
                .flat_map(|c| c.weight.iter().chain(&c.bias))
                .map(|&g| (g as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = if norm > cfg.grad_clip { (cfg.grad_clip / norm) as f32 } else { 1.0 };
            step += 1;
            let ramp = if cfg.warmup_steps == 0 { 1.0 } else { (step as f64 / cfg.warmup_steps as f64).min(1.0) };
            let (lr, mu) = ((cfg.learning_rate * ramp) as f32, cfg.momentum as f32);
            for ((p, v), g) in net.convs.iter_mut().zip(&mut velocity.convs).zip(&grad.convs) {
                let weights = p.weight.iter_mut().zip(&mut v.weight).zip(&g.weight);
                let biases = p.bias.iter_mut().zip(&mut v.bias).zip(&g.bias);
                for ((w, vel), gw) in weights.chain(biases) {
                    *vel = mu * *vel - lr * *gw * scale;
                    *w += *vel;
                }
            }
            if !net.is_finite() {
                return Err(Error::Aborted("training diverged".into()));
            }
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    Ok((net, history))
}

/// Phantom IDs split into `k` groups after a seeded shuffle. No phantom
/// appears in more than one group.
pub fn split_folds(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut ids: Vec<u32> = samples.iter().map(|s| s.phantom_id).collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < k {
        return Err(Error::config(format!("{} phantoms cannot fill {k} folds", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub test_phantoms: Vec<u32>,
    pub n_train: usize,
    pub n_test: usize,
    pub dice: f64,
    pub pixel_accuracy: f64,
    pub final_loss: f64,
}

pub struct FoldResult {
    pub metrics: FoldMetrics,
    pub net: NetParams<f32>,
}

pub fn dice(pred: &SegMask, truth: &[u8]) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.prob.iter().zip(truth) {
        let p = p >= 0.5;
        let t = t != 0;
        inter += usize::from(p && t);
        a += usize::from(p);
        b += usize::from(t);
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Train one net per fold, holding out that fold's phantoms.
pub fn cross_validate(samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<FoldResult>> {
    let folds = split_folds(samples, cfg.folds, cfg.seed)?;
    let mut out = Vec::with_capacity(folds.len());
    for (k, test_ids) in folds.iter().enumerate() {
        let (test, train_set): (Vec<Sample>, Vec<Sample>) =
            samples.iter().cloned().partition(|s| test_ids.contains(&s.phantom_id));
        let fold_cfg = TrainConfig { seed: cfg.seed.wrapping_add(k as u64 + 1), ..cfg.clone() };
        let (net, history) = train(&train_set, &fold_cfg)?;
        let (mut dsum, mut asum) = (0.0, 0.0);
        for s in &test {
            let pred = net.forward(&s.image, Mode::Eval)?;
            dsum += dice(&pred, &s.mask);
            let hits = pred.threshold().iter().zip(&s.mask).filter(|(p, t)| (**p != 0) == (**t != 0)).count();
            asum += hits as f64 / s.mask.len() as f64;
        }
        let final_loss = history.last().copied().unwrap_or(f64::NAN);
        out.push(FoldResult {
            metrics: FoldMetrics {
                fold: k,
                test_phantoms: test_ids.clone(),
                n_train: train_set.len(),
                n_test: test.len(),
                dice: dsum / test.len().max(1) as f64,
                pixel_accuracy: asum / test.len().max(1) as f64,
                final_loss,
            },
            net,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(id: u32) -> Sample {
        let (rows, cols) = (24, 12);
        let mask: Vec<u8> = (0..rows * cols).map(|i| u8::from((8..16).contains(&(i / cols)))).collect();
        let pix: Vec<f32> = mask.iter().map(|&m| if m != 0 { 1.0 } else { 0.1 }).collect();
        Sample { phantom_id: id, image: super::super::preprocess_values(&pix, rows, cols), mask }
    }

    #[test]
    fn folds_are_disjoint_and_complete() {
        let samples: Vec<Sample> = (0..12).flat_map(|i| [toy(i), toy(i)]).collect();
        let folds = split_folds(&samples, 5, 3).unwrap();
        let mut all: Vec<u32> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| !f.is_empty()));
        assert!(split_folds(&samples[..4], 5, 0).is_err());
    }

    #[test]
    fn crop_keeps_alignment() {
        let s = toy(0);
        let c = s.crop_rows(5, 10);
        assert_eq!(c.rows(), 10);
        assert_eq!(c.image.at(0, 8, 8), s.image.at(0, 13, 8));
        assert_eq!(c.mask[..12], s.mask[60..72]);
        let c = s.crop(5, 3, 10, 4);
        assert_eq!((c.rows(), c.cols()), (10, 4));
        assert_eq!(c.image.at(0, 8, 8), s.image.at(0, 13, 11));
        assert_eq!(c.mask[4..8], s.mask[6 * 12 + 3..6 * 12 + 7]);
    }

    #[test]
    fn foreground_crops_hit_tissue() {
        let s = toy(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (y0, x0) = crop_origin(&mut rng, &s, 4, 4, 1.0);
            assert!(s.crop(y0, x0, 4, 4).mask.iter().any(|&m| m != 0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { folds: 1, ..Default::default() }.validate().is_err());
    }
}
