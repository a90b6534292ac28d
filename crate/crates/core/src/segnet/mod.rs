//! Compact topology-preserving, shape-regularized U-Net.
//!
//! Two-level encoder (two 3x3 convs per level, 2x2 max-pool), a bottleneck
//! conv with dropout, a mirrored decoder using nearest-neighbour upsampling and
//! skip concatenation, and a 1x1 head producing cornea/background logits.
//! Inputs are standardized M-scans with an 8-pixel symmetric border that is
//! cropped off the output.
//!
//! The network's stated 7x3 per-stream neighbourhood is documentation only:
//! the effective receptive field here is larger.

pub mod io;
pub mod layers;
pub mod loss;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::MScan;
use crate::error::{Error, Result};
use layers::{concat, lit, maxpool2, maxpool2_backward, relu, relu_backward, split, upsample2, upsample2_backward, Conv, Scalar, Tensor};

pub use loss::{loss, RegionMap};
pub use train::{cross_validate, train, FoldMetrics, Sample, TrainConfig};

/// Symmetric border added by [`preprocess`].
pub const PAD: usize = 8;
pub const PADDED_ROWS: usize = MScan::ROWS + 2 * PAD;
pub const PADDED_COLS: usize = MScan::COLS + 2 * PAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetSpec {
    pub c1: usize,
    pub c2: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self { c1: 8, c2: 16 }
    }
}

impl NetSpec {
    /// `(cin, cout, k)` of every conv in forward order.
    pub fn layer_shapes(&self) -> [(usize, usize, usize); 8] {
        let (c1, c2) = (self.c1, self.c2);
        [
            (1, c1, 3),      // enc1a
            (c1, c1, 3),     // enc1b
            (c1, c2, 3),     // enc2a
            (c2, c2, 3),     // enc2b
            (c2, c2, 3),     // bottleneck
            (2 * c2, c1, 3), // dec2 (upsampled bottleneck ++ enc2)
            (2 * c1, c1, 3), // dec1 (upsampled dec2 ++ enc1)
            (c1, 2, 1),      // head
        ]
    }
}

const ENC1A: usize = 0;
const ENC1B: usize = 1;
const ENC2A: usize = 2;
const ENC2B: usize = 3;
const BOTT: usize = 4;
const DEC2: usize = 5;
const DEC1: usize = 6;
const HEAD: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active with a mask drawn from `seed`.
    Train { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub spec: NetSpec,
    pub convs: Vec<Conv<T>>,
    pub dropout: f64,
}

/// Foreground probabilities, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    pub rows: usize,
    pub cols: usize,
    pub prob: Vec<f32>,
}

impl SegMask {
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.prob[r * self.cols + c]
    }

    pub fn threshold(&self) -> Vec<u8> {
        self.prob.iter().map(|&p| u8::from(p >= 0.5)).collect()
    }
}

/// Intermediate activations kept for the backward pass.
pub struct Activations<T> {
    input: Tensor<T>,
    e1a: Tensor<T>,
    e1b: Tensor<T>,
    p1: Tensor<T>,
    arg1: Vec<u32>,
    e2a: Tensor<T>,
    e2b: Tensor<T>,
    p2: Tensor<T>,
    arg2: Vec<u32>,
    bott: Tensor<T>,
    drop: Option<Vec<T>>,
    bott_out: Tensor<T>,
    cat2: Tensor<T>,
    d2: Tensor<T>,
    cat1: Tensor<T>,
    d1: Tensor<T>,
    /// Logit difference `fg - bg`, full padded size.
    pub diff: Tensor<T>,
}

impl<T: Scalar> NetParams<T> {
    pub fn zeros(spec: NetSpec) -> Self {
        let convs = spec.layer_shapes().iter().map(|&(i, o, k)| Conv::zeros(i, o, k)).collect();
        Self { spec, convs, dropout: 0.5 }
    }

    /// Kaiming-normal weights (fan-in, ReLU gain), zero biases.
    pub fn kaiming(spec: NetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(spec);
        for conv in &mut p.convs {
            let std = (2.0 / (conv.cin * conv.k * conv.k) as f64).sqrt();
            for w in &mut conv.weight {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = lit(z * std);
            }
        }
        p
    }

    pub fn n_params(&self) -> usize {
        self.convs.iter().map(Conv::n_params).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.convs.iter().all(|c| c.weight.iter().chain(&c.bias).all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> NetParams<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::from(*x).expect("cast")).collect();
        NetParams {
            spec: self.spec,
            dropout: self.dropout,
            convs: self
                .convs
                .iter()
                .map(|c| Conv { cin: c.cin, cout: c.cout, k: c.k, weight: cv(&c.weight), bias: cv(&c.bias) })
                .collect(),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let expect = self.spec.layer_shapes();
        if self.convs.len() != expect.len() {
            return Err(Error::Shape { expected: format!("{} layers", expect.len()), got: format!("{}", self.convs.len()) });
        }
        for (c, &(i, o, k)) in self.convs.iter().zip(&expect) {
            if (c.cin, c.cout, c.k) != (i, o, k) || c.weight.len() != i * o * k * k || c.bias.len() != o {
                return Err(Error::Shape {
                    expected: format!("conv {i}->{o} k{k}"),
                    got: format!("conv {}->{} k{}", c.cin, c.cout, c.k),
                });
            }
        }
        Ok(())
    }

    /// Full forward pass keeping activations.
    pub fn forward_cached(&self, input: &Tensor<T>, mode: Mode) -> Result<Activations<T>> {
        self.check_shapes()?;
        if input.c != 1 || input.h < 2 * PAD + 1 || input.w < 2 * PAD + 1 {
            return Err(Error::Shape { expected: "1-channel padded image".into(), got: format!("{}x{}x{}", input.c, input.h, input.w) });
        }
        let cv = &self.convs;
        let mut e1a = cv[ENC1A].forward(input);
        relu(&mut e1a);
        let mut e1b = cv[ENC1B].forward(&e1a);
        relu(&mut e1b);
        let (p1, arg1) = maxpool2(&e1b);
        let mut e2a = cv[ENC2A].forward(&p1);
        relu(&mut e2a);
        let mut e2b = cv[ENC2B].forward(&e2a);
        relu(&mut e2b);
        let (p2, arg2) = maxpool2(&e2b);
        let mut bott = cv[BOTT].forward(&p2);
        relu(&mut bott);
        let (drop, bott_out) = match mode {
            Mode::Eval => (None, bott.clone()),
            Mode::Train { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 - self.dropout;
                let scale: T = lit(if keep > 0.0 { 1.0 / keep } else { 0.0 });
                let mask: Vec<T> = (0..bott.data.len())
                    .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                let mut out = bott.clone();
                for (v, m) in out.data.iter_mut().zip(&mask) {
                    *v *= *m;
                }
                (Some(mask), out)
            }
        };
        let u2 = upsample2(&bott_out, e2b.h, e2b.w);
        let cat2 = concat(&u2, &e2b);
        let mut d2 = cv[DEC2].forward(&cat2);
        relu(&mut d2);
        let u1 = upsample2(&d2, e1b.h, e1b.w);
        let cat1 = concat(&u1, &e1b);
        let mut d1 = cv[DEC1].forward(&cat1);
        relu(&mut d1);
        let logits = cv[HEAD].forward(&d1);
        let mut diff = Tensor::zeros(1, logits.h, logits.w);
        for (d, (fg, bg)) in diff.data.iter_mut().zip(logits.plane(1).iter().zip(logits.plane(0))) {
            *d = *fg - *bg;
        }
        Ok(Activations {
            input: input.clone(),
            e1a,
            e1b,
            p1,
            arg1,
            e2a,
            e2b,
            p2,
            arg2,
            bott,
            drop,
            bott_out,
            cat2,
            d2,
            cat1,
            d1,
            diff,
        })
    }

    /// Parameter gradients given d(loss)/d(logit difference) on the padded grid.
    pub fn backward(&self, acts: &Activations<T>, ddiff: &Tensor<T>) -> NetParams<T> {
        let cv = &self.convs;
        let mut g = Self::zeros(self.spec);
        let mut dlogits = Tensor::zeros(2, ddiff.h, ddiff.w);
        for (i, &d) in ddiff.data.iter().enumerate() {
            dlogits.data[i] = -d;
            dlogits.data[ddiff.data.len() + i] = d;
        }
        let mut dd1 = cv[HEAD].backward(&acts.d1, &dlogits, &mut g.convs[HEAD]);
        relu_backward(&acts.d1, &mut dd1);
        let dcat1 = cv[DEC1].backward(&acts.cat1, &dd1, &mut g.convs[DEC1]);
        let (du1, de1b_skip) = split(&dcat1, acts.d2.c);
        let mut dd2 = upsample2_backward(&du1, acts.d2.h, acts.d2.w);
        relu_backward(&acts.d2, &mut dd2);
        let dcat2 = cv[DEC2].backward(&acts.cat2, &dd2, &mut g.convs[DEC2]);
        let (du2, de2b_skip) = split(&dcat2, acts.bott_out.c);
        let mut dbott = upsample2_backward(&du2, acts.bott.h, acts.bott.w);
        if let Some(mask) = &acts.drop {
            for (v, m) in dbott.data.iter_mut().zip(mask) {
                *v *= *m;
            }
        }
        relu_backward(&acts.bott, &mut dbott);
        let dp2 = cv[BOTT].backward(&acts.p2, &dbott, &mut g.convs[BOTT]);
        let mut de2b = maxpool2_backward(&dp2, &acts.arg2, acts.e2b.h, acts.e2b.w);
        for (a, b) in de2b.data.iter_mut().zip(&de2b_skip.data) {
            *a += *b;
        }
        relu_backward(&acts.e2b, &mut de2b);
        let mut de2a = cv[ENC2B].backward(&acts.e2a, &de2b, &mut g.convs[ENC2B]);
        relu_backward(&acts.e2a, &mut de2a);
        let dp1 = cv[ENC2A].backward(&acts.p1, &de2a, &mut g.convs[ENC2A]);
        let mut de1b = maxpool2_backward(&dp1, &acts.arg1, acts.e1b.h, acts.e1b.w);
        for (a, b) in de1b.data.iter_mut().zip(&de1b_skip.data) {
            *a += *b;
        }
        relu_backward(&acts.e1b, &mut de1b);
        let mut de1a = cv[ENC1B].backward(&acts.e1a, &de1b, &mut g.convs[ENC1B]);
        relu_backward(&acts.e1a, &mut de1a);
        let _ = cv[ENC1A].backward(&acts.input, &de1a, &mut g.convs[ENC1A]);
        g
    }

    /// Foreground probabilities with the padding border removed.
    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<SegMask> {
        let acts = self.forward_cached(input, mode)?;
        Ok(crop_probabilities(&acts.diff))
    }

    /// Segment one M-scan.
    pub fn segment(&self, scan: &MScan) -> Result<SegMask> {
        let input: Tensor<T> = preprocess(scan).cast();
        self.forward(&input, Mode::Eval)
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Two-class softmax foreground channel, border cropped.
pub fn crop_probabilities<T: Scalar>(diff: &Tensor<T>) -> SegMask {
    let (rows, cols) = (diff.h - 2 * PAD, diff.w - 2 * PAD);
    let mut prob = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            prob.push(sigmoid(diff.at(0, r + PAD, c + PAD)).to_f32().unwrap_or(0.5));
        }
    }
    SegMask { rows, cols, prob }
}

/// Mirror index for symmetric padding (edge sample repeated).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Standardize, clip to [-3, 4], rescale to [0, 1] and pad symmetrically.
pub fn preprocess(scan: &MScan) -> Tensor<f32> {
    preprocess_values(scan.pixels(), MScan::ROWS, MScan::COLS)
}

pub fn preprocess_values(pixels: &[f32], rows: usize, cols: usize) -> Tensor<f32> {
    let n = pixels.len() as f64;
    let mean = pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scaled: Vec<f32> = if std == 0.0 || !std.is_finite() {
        vec![0.5; pixels.len()]
    } else {
        pixels.iter().map(|&v| scale_standardized((v as f64 - mean) / std) as f32).collect()
    };
    let (h, w) = (rows + 2 * PAD, cols + 2 * PAD);
    let mut out = Tensor::zeros(1, h, w);
    for y in 0..h {
        let sy = mirror(y as isize - PAD as isize, rows);
        for x in 0..w {
            let sx = mirror(x as isize - PAD as isize, cols);
            out.data[y * w + x] = scaled[sy * cols + sx];
        }
    }
    out
}

/// Linear map of a standardized value from [-3, 4] onto [0, 1].
pub fn scale_standardized(z: f64) -> f64 {
    (z.clamp(-3.0, 4.0) + 3.0) / 7.0
}
