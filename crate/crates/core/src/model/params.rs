use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`.
    pub w: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

/// Pre-norm encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Every trainable tensor. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub patch: Linear<T>,
    pub cls: Array1<T>,
    /// `(1 + num_patches) × embed_dim`, row 0 belongs to the class token.
    pub pos: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

fn trunc_normal<T: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

impl<T: Real> Linear<T> {
    fn zeros(i: usize, o: usize) -> Self {
        Self {
            w: Array2::zeros((i, o)),
            b: Array1::zeros(o),
        }
    }

    fn init(rng: &mut ChaCha8Rng, i: usize, o: usize, std: f64) -> Self {
        Self {
            w: trunc_normal(rng, (i, o), std),
            b: Array1::zeros(o),
        }
    }
}

impl<T: Real> LayerNorm<T> {
    fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    fn identity(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }
}

impl<T: Real> Weights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        Self {
            patch: Linear::zeros(cfg.patch_dim, d),
            cls: Array1::zeros(d),
            pos: Array2::zeros((cfg.num_patches() + 1, d)),
            blocks: (0..cfg.num_layers)
                .map(|_| Block {
                    ln1: LayerNorm::zeros(d),
                    qkv: Linear::zeros(d, 3 * d),
                    proj: Linear::zeros(d, d),
                    ln2: LayerNorm::zeros(d),
                    fc1: Linear::zeros(d, h),
                    fc2: Linear::zeros(h, d),
                })
                .collect(),
            norm: LayerNorm::zeros(d),
            head: Linear::zeros(d, cfg.num_classes),
        }
    }

    /// Truncated-normal initialization; residual output projections are shrunk by
    /// `1/sqrt(2 * num_layers)`.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        let std = cfg.init_std;
        let resid_std = std / (2.0 * cfg.num_layers as f64).sqrt();
        let patch = Linear::init(rng, cfg.patch_dim, d, std);
        let cls = trunc_normal(rng, (1, d), std).row(0).to_owned();
        let pos = trunc_normal(rng, (cfg.num_patches() + 1, d), std);
        let blocks = (0..cfg.num_layers)
            .map(|_| Block {
                ln1: LayerNorm::identity(d),
                qkv: Linear::init(rng, d, 3 * d, std),
                proj: Linear::init(rng, d, d, resid_std),
                ln2: LayerNorm::identity(d),
                fc1: Linear::init(rng, d, h, std),
                fc2: Linear::init(rng, h, d, resid_std),
            })
            .collect();
        let head = Linear::init(rng, d, cfg.num_classes, std);
        Self {
            patch,
            cls,
            pos,
            blocks,
            norm: LayerNorm::identity(d),
            head,
        }
    }

    /// Named views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("patch.w".to_string(), self.patch.w.view().into_dyn()),
            ("patch.b".to_string(), self.patch.b.view().into_dyn()),
            ("cls".to_string(), self.cls.view().into_dyn()),
            ("pos".to_string(), self.pos.view().into_dyn()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("ln1.gamma"), b.ln1.gamma.view().into_dyn()),
                (p("ln1.beta"), b.ln1.beta.view().into_dyn()),
                (p("qkv.w"), b.qkv.w.view().into_dyn()),
                (p("qkv.b"), b.qkv.b.view().into_dyn()),
                (p("proj.w"), b.proj.w.view().into_dyn()),
                (p("proj.b"), b.proj.b.view().into_dyn()),
                (p("ln2.gamma"), b.ln2.gamma.view().into_dyn()),
                (p("ln2.beta"), b.ln2.beta.view().into_dyn()),
                (p("fc1.w"), b.fc1.w.view().into_dyn()),
                (p("fc1.b"), b.fc1.b.view().into_dyn()),
                (p("fc2.w"), b.fc2.w.view().into_dyn()),
                (p("fc2.b"), b.fc2.b.view().into_dyn()),
            ]);
        }
        out.extend([
            ("norm.gamma".to_string(), self.norm.gamma.view().into_dyn()),
            ("norm.beta".to_string(), self.norm.beta.view().into_dyn()),
            ("head.w".to_string(), self.head.w.view().into_dyn()),
            ("head.b".to_string(), self.head.b.view().into_dyn()),
        ]);
        out
    }

    /// Mutable views in the same order as [`Weights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut out = vec![
            self.patch.w.view_mut().into_dyn(),
            self.patch.b.view_mut().into_dyn(),
            self.cls.view_mut().into_dyn(),
            self.pos.view_mut().into_dyn(),
        ];
        for b in &mut self.blocks {
            out.extend([
                b.ln1.gamma.view_mut().into_dyn(),
                b.ln1.beta.view_mut().into_dyn(),
                b.qkv.w.view_mut().into_dyn(),
                b.qkv.b.view_mut().into_dyn(),
                b.proj.w.view_mut().into_dyn(),
                b.proj.b.view_mut().into_dyn(),
                b.ln2.gamma.view_mut().into_dyn(),
                b.ln2.beta.view_mut().into_dyn(),
                b.fc1.w.view_mut().into_dyn(),
                b.fc1.b.view_mut().into_dyn(),
                b.fc2.w.view_mut().into_dyn(),
                b.fc2.b.view_mut().into_dyn(),
            ]);
        }
        out.extend([
            self.norm.gamma.view_mut().into_dyn(),
            self.norm.beta.view_mut().into_dyn(),
            self.head.w.view_mut().into_dyn(),
            self.head.b.view_mut().into_dyn(),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        for (mut dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst += &s;
        }
    }

    pub fn scale(&mut self, k: T) {
        for mut t in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn fill_zero(&mut self) {
        for mut t in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)))
            .sum()
    }

    /// Flattened copy of every value in [`Weights::tensors`] order.
    pub fn to_flat(&self) -> Vec<T> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    /// Converts element type, e.g. `f32` training weights to `f64` for checking.
    pub fn cast<U: Real>(&self, cfg: &ModelConfig) -> Weights<U> {
        let mut out = Weights::<U>::zeros(cfg);
        let src = self.tensors();
        for (mut dst, (_, s)) in out.tensors_mut().into_iter().zip(src) {
            Zip::from(&mut dst)
                .and(&s)
                .for_each(|d, v| *d = U::of(v.to_f64().unwrap_or(f64::NAN)));
        }
        out
    }
}
