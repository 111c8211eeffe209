//! Patching of a window into overlapping tokens and the linear patch
//! embedding.
//!
//! The window is end-padded by repeating its last value `S` times, which
//! makes the patch count `N = ⌊(L − L_P)/S⌋ + 2` exact for every valid
//! `(L, L_P, S)`.

use ndarray::{Array1, Array2};

use crate::error::{invalid, shape_err, Result};

/// `⌊(L − L_P)/S⌋ + 2`.
pub fn patch_count(len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    check(len, patch_len, stride)?;
    Ok((len - patch_len) / stride + 2)
}

fn check(len: usize, patch_len: usize, stride: usize) -> Result<()> {
    if patch_len == 0 || patch_len > len || stride == 0 {
        return Err(invalid!(
            "invalid patching: window {len}, patch length {patch_len}, stride {stride}"
        ));
    }
    Ok(())
}

/// `N × L_P` matrix of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Array2<f64>,
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchGrid {
    pub fn count(&self) -> usize {
        self.patches.nrows()
    }
}

/// Index into the unpadded window that feeds padded position `pos`.
#[inline]
pub(crate) fn padded_source(pos: usize, len: usize) -> usize {
    pos.min(len - 1)
}

pub fn patchify(window: &[f64], patch_len: usize, stride: usize) -> Result<PatchGrid> {
    let n = patch_count(window.len(), patch_len, stride)?;
    let len = window.len();
    let patches = Array2::from_shape_fn((n, patch_len), |(i, j)| {
        window[padded_source(i * stride + j, len)]
    });
    Ok(PatchGrid {
        patches,
        patch_len,
        stride,
    })
}

/// Token matrix produced by [`embed_patches`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedding {
    pub tokens: Array2<f64>,
}

/// Row-wise affine map `tokens = patches · W_e + b_e`.
pub fn embed_patches(grid: &PatchGrid, w_e: &Array2<f64>, b_e: &Array1<f64>) -> Result<PatchEmbedding> {
    if w_e.nrows() != grid.patch_len || w_e.ncols() != b_e.len() {
        return Err(shape_err!(
            "embedding weight {:?} / bias {} incompatible with patch length {}",
            w_e.dim(),
            b_e.len(),
            grid.patch_len
        ));
    }
    Ok(PatchEmbedding {
        tokens: grid.patches.dot(w_e) + b_e,
    })
}
