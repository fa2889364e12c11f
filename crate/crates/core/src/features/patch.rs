use ndarray::{s, Array2};

use super::{FeatureConfig, Spectrogram};
use crate::error::{Error, Result};

/// Spectrogram cut into (possibly overlapping) rectangular patches.
///
/// Patches are ordered frequency-major: patch `r * cols + c` covers mel rows
/// `r*stride_f..r*stride_f+patch_h` and frames `c*stride_t..c*stride_t+patch_w`.
/// Each patch is flattened row-major (frequency, then time).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Array2<f32>,
    pub grid_shape: (usize, usize),
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_f: usize,
    pub stride_t: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }
}

pub fn patchify(spec: &Spectrogram, cfg: &FeatureConfig) -> Result<PatchGrid> {
    let (f, t) = spec.values.dim();
    let (ph, pw, sf, st) = (cfg.patch_h, cfg.patch_w, cfg.stride_f, cfg.stride_t);
    if ph == 0 || pw == 0 || sf == 0 || st == 0 {
        return Err(Error::config("patch sizes and strides must be positive"));
    }
    if f < ph || t < pw {
        return Err(Error::invalid(format!(
            "spectrogram {f}x{t} smaller than one {ph}x{pw} patch"
        )));
    }
    let rows = (f - ph) / sf + 1;
    let cols = (t - pw) / st + 1;
    let mut patches = Array2::<f32>::zeros((rows * cols, ph * pw));
    for r in 0..rows {
        for c in 0..cols {
            let block = spec.values.slice(s![r * sf..r * sf + ph, c * st..c * st + pw]);
            let mut dst = patches.row_mut(r * cols + c);
            for (d, v) in dst.iter_mut().zip(block.iter()) {
                *d = *v;
            }
        }
    }
    Ok(PatchGrid {
        patches,
        grid_shape: (rows, cols),
        patch_h: ph,
        patch_w: pw,
        stride_f: sf,
        stride_t: st,
    })
}

/// Inverse of [`patchify`] for non-overlapping grids: rebuilds the covered region.
pub fn unpatchify(grid: &PatchGrid) -> Result<Array2<f32>> {
    if grid.stride_f != grid.patch_h || grid.stride_t != grid.patch_w {
        return Err(Error::invalid("unpatchify requires stride equal to patch size"));
    }
    let (rows, cols) = grid.grid_shape;
    let (ph, pw) = (grid.patch_h, grid.patch_w);
    let mut out = Array2::<f32>::zeros((rows * ph, cols * pw));
    for r in 0..rows {
        for c in 0..cols {
            let src = grid.patches.row(r * cols + c);
            let mut block = out.slice_mut(s![r * ph..(r + 1) * ph, c * pw..(c + 1) * pw]);
            for (d, v) in block.iter_mut().zip(src.iter()) {
                *d = *v;
            }
        }
    }
    Ok(out)
}
