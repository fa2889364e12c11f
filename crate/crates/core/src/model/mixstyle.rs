//! Class-conditional, cross-device MixStyle over the frequency axis.
//!
//! Token features are viewed as a `(freq rows, time cols, channels)` grid using
//! the frequency-major patch order. Per-instance statistics are taken over the
//! frequency rows for every `(time col, channel)` slice, and an item's
//! statistics are interpolated towards those of a partner that shares its
//! binary label but was recorded on the other device.

use ndarray::{Array2, Zip};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::{MixStyleConfig, Real};
use crate::datasets::BinaryLabel;
use crate::signal::DeviceDomain;

/// Token batch with the metadata needed to choose mixing partners.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFeatures<T> {
    /// One `(1 + rows*cols) × D` matrix per item; row 0 is the class token.
    pub tokens: Vec<Array2<T>>,
    pub labels: Vec<BinaryLabel>,
    pub domains: Vec<DeviceDomain>,
    pub grid: (usize, usize),
}

impl<T> BatchFeatures<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Partner and mixing weight for each item; `None` passes the item through.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub entries: Vec<Option<(usize, f64)>>,
}

impl MixPlan {
    pub fn identity(n: usize) -> Self {
        Self {
            entries: vec![None; n],
        }
    }

    pub fn mixed_count(&self) -> usize {
        self.entries.iter().flatten().count()
    }
}

/// Chooses, for every item, a uniformly random partner with the same label
/// and a different device, preferring partners not yet used by an earlier
/// item. Items without any valid partner are left unmixed.
pub fn plan_mixing<R: Rng + ?Sized>(
    labels: &[BinaryLabel],
    domains: &[DeviceDomain],
    alpha: f64,
    rng: &mut R,
) -> MixPlan {
    assert_eq!(labels.len(), domains.len(), "labels and domains must align");
    let beta = Beta::new(alpha, alpha).expect("alpha must be positive");
    let n = labels.len();
    let mut used = vec![false; n];
    let entries = (0..n)
        .map(|i| {
            let valid: Vec<usize> = (0..n)
                .filter(|&j| labels[j] == labels[i] && domains[j] != domains[i])
                .collect();
            let fresh: Vec<usize> = valid.iter().copied().filter(|&j| !used[j]).collect();
            let pool = if fresh.is_empty() { &valid } else { &fresh };
            let &j = pool.choose(rng)?;
            used[j] = true;
            let lambda: f64 = beta.sample(rng);
            Some((j, lambda))
        })
        .collect();
    MixPlan { entries }
}

/// Mean and standard deviation per `(time col, channel)`, reduced over frequency rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStats<T> {
    pub mean: Array2<T>,
    pub std: Array2<T>,
}

fn token_row(grid: (usize, usize), r: usize, c: usize) -> usize {
    1 + r * grid.1 + c
}

/// Population statistics over the frequency rows; `std = sqrt(var + eps)`.
pub fn frequency_stats<T: Real>(x: &Array2<T>, grid: (usize, usize), eps: f64) -> SliceStats<T> {
    let (rows, cols) = grid;
    let d = x.ncols();
    let n = T::of(rows as f64);
    let mut mean = Array2::<T>::zeros((cols, d));
    let mut var = Array2::<T>::zeros((cols, d));
    for c in 0..cols {
        let mut m = mean.row_mut(c);
        for r in 0..rows {
            m += &x.row(token_row(grid, r, c));
        }
        m.mapv_inplace(|v| v / n);
        let mut v = var.row_mut(c);
        for r in 0..rows {
            Zip::from(&mut v)
                .and(&x.row(token_row(grid, r, c)))
                .and(&m)
                .for_each(|acc, &xv, &mv| *acc = *acc + (xv - mv) * (xv - mv));
        }
    }
    let e = T::of(eps);
    let std = var.mapv(|v| (v / n + e).sqrt());
    SliceStats { mean, std }
}

pub(crate) struct MixCache<T> {
    plan: MixPlan,
    stats: Vec<SliceStats<T>>,
    xhat: Vec<Array2<T>>,
    grid: (usize, usize),
}

fn normalized<T: Real>(x: &Array2<T>, st: &SliceStats<T>, grid: (usize, usize)) -> Array2<T> {
    let mut xhat = Array2::zeros(x.raw_dim());
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let row = token_row(grid, r, c);
            Zip::from(xhat.row_mut(row))
                .and(&x.row(row))
                .and(&st.mean.row(c))
                .and(&st.std.row(c))
                .for_each(|o, &xv, &m, &s| *o = (xv - m) / s);
        }
    }
    xhat
}

/// Applies a fixed plan. The class token (row 0) is never touched.
pub fn mix_with_plan<T: Real>(
    tokens: &[Array2<T>],
    grid: (usize, usize),
    plan: &MixPlan,
    eps: f64,
) -> Vec<Array2<T>> {
    mix_forward(tokens, grid, plan, eps).0
}

pub(crate) fn mix_forward<T: Real>(
    tokens: &[Array2<T>],
    grid: (usize, usize),
    plan: &MixPlan,
    eps: f64,
) -> (Vec<Array2<T>>, MixCache<T>) {
    assert_eq!(tokens.len(), plan.entries.len(), "plan does not match batch");
    let stats: Vec<SliceStats<T>> = tokens.iter().map(|x| frequency_stats(x, grid, eps)).collect();
    let xhat: Vec<Array2<T>> = tokens
        .iter()
        .zip(&stats)
        .map(|(x, st)| normalized(x, st, grid))
        .collect();
    let out = tokens
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let Some((j, lambda)) = plan.entries[i] else {
                return x.clone();
            };
            let lam = T::of(lambda);
            let rest = T::one() - lam;
            let (si, sj) = (&stats[i], &stats[j]);
            let mix_std = &si.std * lam + &sj.std * rest;
            let mix_mean = &si.mean * lam + &sj.mean * rest;
            let mut y = x.clone();
            for r in 0..grid.0 {
                for c in 0..grid.1 {
                    let row = token_row(grid, r, c);
                    Zip::from(y.row_mut(row))
                        .and(&xhat[i].row(row))
                        .and(&mix_std.row(c))
                        .and(&mix_mean.row(c))
                        .for_each(|o, &xh, &s, &m| *o = s * xh + m);
                }
            }
            y
        })
        .collect();
    (
        out,
        MixCache {
            plan: plan.clone(),
            stats,
            xhat,
            grid,
        },
    )
}

/// Exact gradient of [`mix_forward`], including the paths through both the
/// item's own statistics and its partner's.
pub(crate) fn mix_backward<T: Real>(dout: &[Array2<T>], cache: &MixCache<T>) -> Vec<Array2<T>> {
    let grid = cache.grid;
    let rows = T::of(grid.0 as f64);
    let mut dx: Vec<Array2<T>> = dout
        .iter()
        .zip(&cache.plan.entries)
        .map(|(g, e)| {
            if e.is_some() {
                let mut z = Array2::zeros(g.raw_dim());
                z.row_mut(0).assign(&g.row(0));
                z
            } else {
                g.clone()
            }
        })
        .collect();
    for (i, entry) in cache.plan.entries.iter().enumerate() {
        let Some((j, lambda)) = *entry else { continue };
        let lam = T::of(lambda);
        let rest = T::one() - lam;
        let (si, sj) = (&cache.stats[i], &cache.stats[j]);
        let (xi, xj) = (&cache.xhat[i], &cache.xhat[j]);
        let g = &dout[i];
        for c in 0..grid.1 {
            for d in 0..g.ncols() {
                let s_mix = lam * si.std[(c, d)] + rest * sj.std[(c, d)];
                let mut g_s = T::zero();
                let mut g_m = T::zero();
                let mut mean_gx = T::zero();
                let mut mean_gxx = T::zero();
                for r in 0..grid.0 {
                    let row = token_row(grid, r, c);
                    let gv = g[(row, d)];
                    g_s = g_s + gv * xi[(row, d)];
                    g_m = g_m + gv;
                    mean_gx = mean_gx + gv * s_mix;
                    mean_gxx = mean_gxx + gv * s_mix * xi[(row, d)];
                }
                mean_gx = mean_gx / rows;
                mean_gxx = mean_gxx / rows;
                let inv = T::one() / si.std[(c, d)];
                for r in 0..grid.0 {
                    let row = token_row(grid, r, c);
                    let xh = xi[(row, d)];
                    let through_norm = inv * (g[(row, d)] * s_mix - mean_gx - xh * mean_gxx);
                    let through_own = lam * (g_s * xh + g_m) / rows;
                    dx[i][(row, d)] = dx[i][(row, d)] + through_norm + through_own;
                    let through_partner = rest * (g_s * xj[(row, d)] + g_m) / rows;
                    dx[j][(row, d)] = dx[j][(row, d)] + through_partner;
                }
            }
        }
    }
    dx
}

/// Stochastic MixStyle: identity in eval mode or when the activation draw
/// (probability `cfg.p`) fails; otherwise a fresh plan is drawn and applied.
pub fn mixstyle_apply<T: Real, R: Rng + ?Sized>(
    feats: &BatchFeatures<T>,
    cfg: &MixStyleConfig,
    rng: &mut R,
    training: bool,
) -> BatchFeatures<T> {
    if !training || cfg.p <= 0.0 || rng.random::<f64>() >= cfg.p {
        return feats.clone();
    }
    let plan = plan_mixing(&feats.labels, &feats.domains, cfg.alpha, rng);
    BatchFeatures {
        tokens: mix_with_plan(&feats.tokens, feats.grid, &plan, cfg.epsilon),
        ..feats.clone()
    }
}

/// Spectrogram-level variant: statistics per frame over mel bins, applied in place.
pub fn mixstyle_spectrograms(specs: &mut [Array2<f32>], plan: &MixPlan, eps: f64) {
    assert_eq!(specs.len(), plan.entries.len(), "plan does not match batch");
    let stats: Vec<(Vec<f64>, Vec<f64>)> = specs
        .iter()
        .map(|s| {
            let f = s.nrows() as f64;
            s.columns()
                .into_iter()
                .map(|col| {
                    let m = col.iter().map(|&v| v as f64).sum::<f64>() / f;
                    let v = col.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / f;
                    (m, (v + eps).sqrt())
                })
                .unzip()
        })
        .collect();
    for (i, spec) in specs.iter_mut().enumerate() {
        let Some((j, lam)) = plan.entries[i] else { continue };
        for (t, mut col) in spec.columns_mut().into_iter().enumerate() {
            let (mi, si) = (stats[i].0[t], stats[i].1[t]);
            let m = lam * mi + (1.0 - lam) * stats[j].0[t];
            let s = lam * si + (1.0 - lam) * stats[j].1[t];
            col.mapv_inplace(|v| (s * (v as f64 - mi) / si + m) as f32);
        }
    }
}
