//! Pixel-wise cross-entropy plus a star-shape consistency term.
//!
//! The shape term samples interior pixels of the labelled region, walks the
//! straight segment from the region centre to each, and penalizes any point on
//! the way whose foreground probability falls below the endpoint's.

use std::f64::consts::PI;

use super::layers::{lit, Scalar, Tensor};
use super::{sigmoid, PAD};
use crate::error::{Error, Result};

pub const SECTORS: usize = 8;
pub const SAMPLES_PER_SECTOR: usize = 4;

/// Sampled segments for the shape term.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub rows: usize,
    pub cols: usize,
    pub center: (usize, usize),
    /// Pixel indices along each segment, centre first, sampled pixel last.
    pub rays: Vec<Vec<usize>>,
    /// Sector index (0..8) of each segment.
    pub sector: Vec<usize>,
}

impl RegionMap {
    /// Centre of the foreground and up to `per_sector` evenly spread interior
    /// pixels in each of eight angular sectors around it. The centre is the
    /// foreground centroid, or the foreground pixel nearest to it when the
    /// centroid itself is background. An empty mask gives no segments.
    pub fn new(mask: &[u8], rows: usize, cols: usize, per_sector: usize) -> Result<Self> {
        if mask.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::Shape { expected: format!("{}", rows * cols), got: format!("{}", mask.len()) });
        }
        let fg: Vec<(usize, usize)> =
            mask.iter().enumerate().filter(|(_, &m)| m != 0).map(|(i, _)| (i / cols, i % cols)).collect();
        if fg.is_empty() {
            return Ok(Self { rows, cols, center: (rows / 2, cols / 2), rays: Vec::new(), sector: Vec::new() });
        }
        let n = fg.len() as f64;
        let cy = fg.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cx = fg.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let mut center = (cy.round() as usize, cx.round() as usize);
        if mask[center.0 * cols + center.1] == 0 {
            let d2 = |p: &(usize, usize)| (p.0 as f64 - cy).powi(2) + (p.1 as f64 - cx).powi(2);
            center = *fg.iter().min_by(|a, b| d2(a).total_cmp(&d2(b))).expect("non-empty");
        }
        Self::with_center(mask, rows, cols, center, per_sector)
    }

    /// As [`RegionMap::new`] with an explicit centre, which must be foreground.
    pub fn with_center(mask: &[u8], rows: usize, cols: usize, center: (usize, usize), per_sector: usize) -> Result<Self> {
        if mask.len() != rows * cols || center.0 >= rows || center.1 >= cols {
            return Err(Error::Shape { expected: format!("{rows}x{cols} with centre inside"), got: format!("{} / {center:?}", mask.len()) });
        }
        if mask[center.0 * cols + center.1] == 0 {
            return Err(Error::contract("region centre lies outside the labelled foreground"));
        }
        let fg = mask.iter().enumerate().filter(|(_, &m)| m != 0).map(|(i, _)| (i / cols, i % cols));
        let mut by_sector: Vec<Vec<(usize, usize)>> = vec![Vec::new(); SECTORS];
        for p in fg {
            if p != center {
                by_sector[sector_of(center, p)].push(p);
            }
        }
        let mut rays = Vec::new();
        let mut sector = Vec::new();
        for (s, pts) in by_sector.iter().enumerate() {
            let take = per_sector.min(pts.len());
            for j in 0..take {
                // midpoints of `take` equal strata
                let p = pts[(2 * j + 1) * pts.len() / (2 * take)];
                rays.push(dda(center, p).into_iter().map(|(y, x)| y * cols + x).collect());
                sector.push(s);
            }
        }
        Ok(Self { rows, cols, center, rays, sector })
    }
}

pub fn sector_of(center: (usize, usize), p: (usize, usize)) -> usize {
    let dy = p.0 as f64 - center.0 as f64;
    let dx = p.1 as f64 - center.1 as f64;
    let theta = dy.atan2(dx) + PI;
    ((theta / (2.0 * PI / SECTORS as f64)) as usize).min(SECTORS - 1)
}

/// Digital differential analyser line from `a` to `b`, both inclusive.
pub fn dda(a: (usize, usize), b: (usize, usize)) -> Vec<(usize, usize)> {
    let dy = b.0 as f64 - a.0 as f64;
    let dx = b.1 as f64 - a.1 as f64;
    let steps = dy.abs().max(dx.abs()) as usize;
    if steps == 0 {
        return vec![a];
    }
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let p = ((a.0 as f64 + t * dy).round() as usize, (a.1 as f64 + t * dx).round() as usize);
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub shape: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss on the cropped region of a padded logit-difference map, and its
/// gradient with respect to that map (zero on the border).
pub fn loss<T: Scalar>(
    diff: &Tensor<T>,
    mask: &[u8],
    regions: &RegionMap,
    alpha: f64,
    beta: f64,
) -> Result<(LossParts, Tensor<T>)> {
    let (rows, cols) = (regions.rows, regions.cols);
    if diff.c != 1 || diff.h != rows + 2 * PAD || diff.w != cols + 2 * PAD || mask.len() != rows * cols {
        return Err(Error::Shape {
            expected: format!("1x{}x{}", rows + 2 * PAD, cols + 2 * PAD),
            got: format!("{}x{}x{}", diff.c, diff.h, diff.w),
        });
    }
    let n = (rows * cols) as f64;
    let mut d = vec![T::zero(); rows * cols];
    let mut p = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = diff.at(0, r + PAD, c + PAD);
            d[r * cols + c] = v;
            p[r * cols + c] = sigmoid(v);
        }
    }
    let mut gp = vec![T::zero(); rows * cols];
    let mut gd = vec![T::zero(); rows * cols];
    let mut ce = 0.0;
    for i in 0..rows * cols {
        let di = d[i].to_f64().unwrap_or(0.0);
        let y = if mask[i] != 0 { 1.0 } else { 0.0 };
        ce += if y > 0.0 { softplus(-di) } else { softplus(di) };
        gd[i] = lit::<T>(alpha / n) * (p[i] - lit(y));
    }
    ce /= n;

    if !regions.rays.is_empty() && mask[regions.center.0 * cols + regions.center.1] == 0 {
        return Err(Error::contract("region centre lies outside the labelled foreground"));
    }
    let mut shape = 0.0;
    let n_rays = regions.rays.len();
    for ray in &regions.rays {
        let (&end, path) = ray.split_last().expect("segments are non-empty");
        let seg = ray.len() as f64;
        let w = beta / (n_rays as f64 * seg);
        let mut acc = 0.0;
        for &q in path {
            let dip = p[end] - p[q];
            if dip > T::zero() {
                acc += dip.to_f64().unwrap_or(0.0);
                gp[end] += lit(w);
                gp[q] -= lit(w);
            }
        }
        shape += acc / seg;
    }
    if n_rays > 0 {
        shape /= n_rays as f64;
    }
    for i in 0..rows * cols {
        gd[i] += gp[i] * p[i] * (T::one() - p[i]);
    }
    let mut grad = Tensor::zeros(1, diff.h, diff.w);
    for r in 0..rows {
        let dst = (r + PAD) * diff.w + PAD;
        grad.data[dst..dst + cols].copy_from_slice(&gd[r * cols..(r + 1) * cols]);
    }
    Ok((LossParts { total: alpha * ce + beta * shape, ce, shape }, grad))
}
