use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mixstyle::{mix_backward, mix_forward, plan_mixing, BatchFeatures, MixCache, MixPlan};
use super::ops::{
    attention, attention_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, AttnCache, LnCache,
};
use super::params::{Block, Weights};
use super::{MixLevel, ModelConfig, Real};
use crate::datasets::BinaryLabel;
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::signal::DeviceDomain;

/// Per-call switches for a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub training: bool,
    /// Current epoch, for epoch-gated mixing.
    pub epoch: usize,
    /// Seeds the mixing activation draws, partner choice and dropout masks.
    pub seed: u64,
    pub exec: ExecMode,
    /// Plans pinned per insertion index; these bypass the activation draw.
    pub frozen_plans: Vec<(usize, MixPlan)>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(epoch: usize, seed: u64) -> Self {
        Self {
            training: true,
            epoch,
            seed,
            ..Self::default()
        }
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }
}

/// Class probabilities for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    pub probs: Vec<f64>,
    pub prediction: BinaryLabel,
}

impl ClassProbs {
    pub fn p_abnormal(&self) -> f64 {
        self.probs[BinaryLabel::Abnormal.index()]
    }

    pub fn p_normal(&self) -> f64 {
        self.probs[BinaryLabel::Normal.index()]
    }
}

/// Numerically stable softmax over two logits, computed in `f64`.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// Softmax probabilities and an argmax decision; ties go to abnormal.
pub fn classify(logits: &[f64]) -> ClassProbs {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let probs: Vec<f64> = e.iter().map(|v| v / z).collect();
    let prediction = if probs[BinaryLabel::Abnormal.index()] >= probs[BinaryLabel::Normal.index()] {
        BinaryLabel::Abnormal
    } else {
        BinaryLabel::Normal
    };
    ClassProbs { probs, prediction }
}

/// Weighted mean cross-entropy and its gradient with respect to the logits.
///
/// With `class_weights = None` every item weighs one.
pub fn cross_entropy(
    logits: &[Vec<f64>],
    labels: &[BinaryLabel],
    class_weights: Option<[f64; 2]>,
) -> (f64, Vec<Vec<f64>>) {
    let w = |y: BinaryLabel| class_weights.map_or(1.0, |cw| cw[y.index()]);
    let total: f64 = labels.iter().map(|&y| w(y)).sum();
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let p = classify(z).probs;
            let wi = w(y) / total;
            loss -= wi * p[y.index()].max(1e-300).ln();
            p.iter()
                .enumerate()
                .map(|(k, &pk)| wi * (pk - if k == y.index() { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    (loss, grads)
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub logits: Vec<Vec<f64>>,
    /// Number of mixing insertions that fired.
    pub mix_events: usize,
}

struct BlockCache<T> {
    u: Array2<T>,
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    mask1: Option<Array2<T>>,
    v: Array2<T>,
    ln2: LnCache<T>,
    f1: Array2<T>,
    act: Array2<T>,
    mask2: Option<Array2<T>>,
}

struct ForwardTrace<T> {
    blocks: Vec<Vec<BlockCache<T>>>,
    /// `(layer, cache)` in application order.
    mixes: Vec<(usize, MixCache<T>)>,
    final_ln: Vec<LnCache<T>>,
    final_row: Vec<Array2<T>>,
}

fn dropout_mask<T: Real>(shape: (usize, usize), p: f64, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::of(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

fn mask_seed(seed: u64, layer: usize, item: usize, which: u64) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [layer as u64, item as u64, which] {
        h = (h ^ v).wrapping_mul(0x100_0000_01B3).rotate_left(23);
    }
    h
}

/// The full classifier: patch embedding, encoder stack and linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub cfg: ModelConfig,
    pub weights: Weights<T>,
}

impl<T: Real> Transformer<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = Weights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        Ok(Self { cfg, weights })
    }

    pub fn from_weights(cfg: ModelConfig, weights: Weights<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = Weights::<T>::zeros(&cfg);
        let shapes_match = expected
            .tensors()
            .iter()
            .zip(weights.tensors().iter())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
            && expected.blocks.len() == weights.blocks.len();
        if !shapes_match {
            return Err(Error::config("weight shapes do not match the model config"));
        }
        Ok(Self { cfg, weights })
    }

    /// Linear patch projection, learned positions, class token prepended.
    pub fn embed(
        &self,
        patches: &[ArrayView2<'_, T>],
        labels: &[BinaryLabel],
        domains: &[DeviceDomain],
    ) -> Result<BatchFeatures<T>> {
        if patches.len() != labels.len() || patches.len() != domains.len() {
            return Err(Error::config("patches, labels and domains differ in length"));
        }
        let n = self.cfg.num_patches();
        let w = &self.weights;
        let tokens = patches
            .iter()
            .map(|p| {
                if p.dim() != (n, self.cfg.patch_dim) {
                    return Err(Error::config(format!(
                        "patch matrix {:?}, model expects ({n}, {})",
                        p.dim(),
                        self.cfg.patch_dim
                    )));
                }
                let mut x = Array2::zeros((n + 1, self.cfg.embed_dim));
                x.row_mut(0).assign(&w.cls);
                x.slice_mut(s![1.., ..]).assign(&linear(p, &w.patch));
                x += &w.pos;
                Ok(x)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchFeatures {
            tokens,
            labels: labels.to_vec(),
            domains: domains.to_vec(),
            grid: self.cfg.grid,
        })
    }

    fn block_forward(
        &self,
        x: &Array2<T>,
        blk: &Block<T>,
        drop_seed: Option<(u64, usize, usize)>,
    ) -> (Array2<T>, BlockCache<T>) {
        let p = self.cfg.dropout;
        let mask = |which| {
            drop_seed
                .filter(|_| p > 0.0)
                .map(|(seed, l, i)| dropout_mask::<T>(x.dim(), p, mask_seed(seed, l, i, which)))
        };
        let (u, ln1) = layer_norm(&x.view(), &blk.ln1);
        let (mut a, attn) = attention(&u.view(), &blk.qkv, &blk.proj, self.cfg.num_heads);
        let mask1 = mask(1);
        if let Some(m) = &mask1 {
            a *= m;
        }
        let h = x + &a;
        let (v, ln2) = layer_norm(&h.view(), &blk.ln2);
        let f1 = linear(&v.view(), &blk.fc1);
        let act = gelu(&f1);
        let mut m = linear(&act.view(), &blk.fc2);
        let mask2 = mask(2);
        if let Some(mk) = &mask2 {
            m *= mk;
        }
        let y = h + &m;
        (
            y,
            BlockCache {
                u,
                ln1,
                attn,
                mask1,
                v,
                ln2,
                f1,
                act,
                mask2,
            },
        )
    }

    fn block_backward(
        &self,
        dy: &Array2<T>,
        blk: &Block<T>,
        c: &BlockCache<T>,
        g: &mut Block<T>,
    ) -> Array2<T> {
        let dm = match &c.mask2 {
            Some(m) => dy * m,
            None => dy.clone(),
        };
        let dact = linear_backward(&c.act.view(), &dm.view(), &blk.fc2, &mut g.fc2);
        let df1 = gelu_backward(&c.f1, &dact);
        let dv = linear_backward(&c.v.view(), &df1.view(), &blk.fc1, &mut g.fc1);
        let dh = dy + &layer_norm_backward(&dv.view(), &c.ln2, &blk.ln2, &mut g.ln2);
        let da = match &c.mask1 {
            Some(m) => &dh * m,
            None => dh.clone(),
        };
        let du = attention_backward(
            &c.u.view(),
            &da.view(),
            &c.attn,
            &blk.qkv,
            &blk.proj,
            &mut g.qkv,
            &mut g.proj,
            self.cfg.num_heads,
        );
        dh + &layer_norm_backward(&du.view(), &c.ln1, &blk.ln1, &mut g.ln1)
    }

    /// Plans for the insertions that fire at `layer` this pass.
    fn plans_at(
        &self,
        layer: usize,
        feats: &BatchFeatures<T>,
        opts: &ForwardOptions,
        rng: &mut ChaCha8Rng,
    ) -> Vec<MixPlan> {
        let m = &self.cfg.mixstyle;
        if !opts.training || m.level != MixLevel::Tokens {
            return Vec::new();
        }
        m.active_at(layer, opts.epoch)
            .filter_map(|k| {
                if let Some((_, plan)) = opts.frozen_plans.iter().find(|(idx, _)| *idx == k) {
                    return Some(plan.clone());
                }
                if m.p <= 0.0 || rng.random::<f64>() >= m.p {
                    return None;
                }
                Some(plan_mixing(&feats.labels, &feats.domains, m.alpha, rng))
            })
            .filter(|plan| plan.mixed_count() > 0)
            .collect()
    }

    fn run(&self, mut feats: BatchFeatures<T>, opts: &ForwardOptions, keep: bool) -> Result<(BatchFeatures<T>, Option<ForwardTrace<T>>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut trace = ForwardTrace {
            blocks: Vec::new(),
            mixes: Vec::new(),
            final_ln: Vec::new(),
            final_row: Vec::new(),
        };
        let mut mix_events = 0;
        for (l, blk) in self.weights.blocks.iter().enumerate() {
            for plan in self.plans_at(l, &feats, opts, &mut rng) {
                let (mixed, cache) = mix_forward(&feats.tokens, feats.grid, &plan, self.cfg.mixstyle.epsilon);
                feats.tokens = mixed;
                mix_events += 1;
                if keep {
                    trace.mixes.push((l, cache));
                }
            }
            let drop = opts.training && self.cfg.dropout > 0.0;
            let outs = par::map_indexed(opts.exec, feats.tokens.len(), |i| {
                self.block_forward(&feats.tokens[i], blk, drop.then_some((opts.seed, l, i)))
            });
            let mut caches = Vec::with_capacity(outs.len());
            for (i, (y, c)) in outs.into_iter().enumerate() {
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite activation after encoder layer {l}, batch item {i}"
                    )));
                }
                feats.tokens[i] = y;
                caches.push(c);
            }
            if keep {
                trace.blocks.push(caches);
            }
        }
        Ok((feats, keep.then_some(trace), mix_events))
    }

    /// Runs the encoder stack (with mixing at the configured depths when training).
    pub fn encoder_forward(&self, feats: BatchFeatures<T>, opts: &ForwardOptions) -> Result<BatchFeatures<T>> {
        Ok(self.run(feats, opts, false)?.0)
    }

    /// Head logits from final-layer class tokens.
    pub fn head_logits(&self, feats: &BatchFeatures<T>) -> Vec<Vec<f64>> {
        feats
            .tokens
            .iter()
            .map(|x| {
                let (z, _) = layer_norm(&x.slice(s![0..1, ..]), &self.weights.norm);
                linear(&z.view(), &self.weights.head)
                    .row(0)
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN))
                    .collect()
            })
            .collect()
    }

    /// Probabilities and decisions for already-encoded features.
    pub fn classify(&self, feats: &BatchFeatures<T>) -> Vec<ClassProbs> {
        self.head_logits(feats).iter().map(|z| classify(z)).collect()
    }

    /// Embed, encode and classify in one call.
    pub fn forward(
        &self,
        patches: &[ArrayView2<'_, T>],
        labels: &[BinaryLabel],
        domains: &[DeviceDomain],
        opts: &ForwardOptions,
    ) -> Result<BatchOutput> {
        let feats = self.embed(patches, labels, domains)?;
        let (enc, _, mix_events) = self.run(feats, opts, false)?;
        Ok(BatchOutput {
            logits: self.head_logits(&enc),
            mix_events,
        })
    }

    /// Inference on unlabeled patches (labels and domains are irrelevant in eval mode).
    pub fn predict(&self, patches: &[ArrayView2<'_, T>], exec: ExecMode) -> Result<Vec<ClassProbs>> {
        let n = patches.len();
        let out = self.forward(
            patches,
            &vec![BinaryLabel::Normal; n],
            &vec![DeviceDomain::Smartphone; n],
            &ForwardOptions::eval().with_exec(exec),
        )?;
        Ok(out.logits.iter().map(|z| classify(z)).collect())
    }

    /// Cross-entropy loss and exact parameter gradients for one batch.
    pub fn loss_and_grad(
        &self,
        patches: &[ArrayView2<'_, T>],
        labels: &[BinaryLabel],
        domains: &[DeviceDomain],
        class_weights: Option<[f64; 2]>,
        opts: &ForwardOptions,
    ) -> Result<(f64, Weights<T>, BatchOutput)> {
        let feats = self.embed(patches, labels, domains)?;
        let (enc, trace, mix_events) = self.run(feats, opts, true)?;
        let mut trace = trace.expect("trace kept");
        let w = &self.weights;

        // Head on the class token.
        let mut logits = Vec::with_capacity(enc.len());
        for x in &enc.tokens {
            let row = x.slice(s![0..1, ..]).to_owned();
            let (z, c) = layer_norm(&row.view(), &w.norm);
            let out = linear(&z.view(), &w.head);
            logits.push(out.row(0).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect::<Vec<f64>>());
            trace.final_ln.push(c);
            trace.final_row.push(z);
        }
        let (loss, dlogits) = cross_entropy(&logits, labels, class_weights);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss; logits {:?}",
                &logits[..logits.len().min(4)]
            )));
        }

        let b = enc.len();
        let n_tok = self.cfg.num_patches() + 1;
        let mut grads: Vec<Weights<T>> = (0..b).map(|_| Weights::zeros(&self.cfg)).collect();
        let mut dx: Vec<Array2<T>> = (0..b)
            .map(|i| {
                let g = &mut grads[i];
                let dz = Array2::from_shape_fn((1, self.cfg.num_classes), |(_, k)| T::of(dlogits[i][k]));
                let dn = linear_backward(&trace.final_row[i].view(), &dz.view(), &w.head, &mut g.head);
                let drow = layer_norm_backward(&dn.view(), &trace.final_ln[i], &w.norm, &mut g.norm);
                let mut d = Array2::zeros((n_tok, self.cfg.embed_dim));
                d.row_mut(0).assign(&drow.row(0));
                d
            })
            .collect();

        for l in (0..self.cfg.num_layers).rev() {
            let caches = &trace.blocks[l];
            let blk = &w.blocks[l];
            let mut work: Vec<(Array2<T>, &mut Weights<T>)> =
                dx.drain(..).zip(grads.iter_mut()).collect();
            par::for_each_mut(opts.exec, &mut work, |i, (d, g)| {
                *d = self.block_backward(d, blk, &caches[i], &mut g.blocks[l]);
            });
            dx = work.into_iter().map(|(d, _)| d).collect();
            while trace.mixes.last().is_some_and(|(ml, _)| *ml == l) {
                let (_, cache) = trace.mixes.pop().expect("checked");
                dx = mix_backward(&dx, &cache);
            }
        }

        let mut work: Vec<(&Array2<T>, &mut Weights<T>)> = dx.iter().zip(grads.iter_mut()).collect();
        par::for_each_mut(opts.exec, &mut work, |i, (d, g)| {
            g.pos += *d;
            g.cls += &d.row(0);
            let dp = d.slice(s![1.., ..]);
            ndarray::linalg::general_mat_mul(T::one(), &patches[i].t(), &dp, T::one(), &mut g.patch.w);
            g.patch.b += &dp.sum_axis(Axis(0));
        });

        // Ordered reduction keeps the result independent of thread scheduling.
        let mut total = Weights::zeros(&self.cfg);
        for g in &grads {
            total.add_assign(g);
        }
        Ok((
            loss,
            total,
            BatchOutput {
                logits,
                mix_events,
            },
        ))
    }
}
