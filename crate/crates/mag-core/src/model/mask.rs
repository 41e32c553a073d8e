//! Attention visibility masks.
//!
//! Three kinds exist in the system. Inference masks are all-visible — causal
//! structure during streaming comes from what the cache contains, not from
//! masking. Memory-training masks implement the encode-decode layout over a
//! concatenated [noise | clean] sequence: the clean half acts as encoder
//! (full intra-block attention plus retained last-frame tokens of earlier
//! blocks) and the noise half as decoder (itself plus retained last-frame
//! tokens of its own and earlier blocks). A validator checks the exact
//! visible set of every row.

use crate::error::{MagError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    InferenceBlockCausal,
    MemoryTraining,
    Bidirectional,
}

#[derive(Clone)]
pub struct AttentionMask {
    nq: usize,
    nk: usize,
    visible: Vec<bool>,
    additive: Vec<f32>,
    pub kind: MaskKind,
}

const HIDDEN: f32 = -1e9;

impl AttentionMask {
    fn from_visible(nq: usize, nk: usize, visible: Vec<bool>, kind: MaskKind) -> Self {
        debug_assert_eq!(visible.len(), nq * nk);
        let additive = visible.iter().map(|&v| if v { 0.0 } else { HIDDEN }).collect();
        AttentionMask {
            nq,
            nk,
            visible,
            additive,
            kind,
        }
    }

    /// Every query sees every key.
    pub fn bidirectional(nq: usize, nk: usize) -> Self {
        Self::from_visible(nq, nk, vec![true; nq * nk], MaskKind::Bidirectional)
    }

    /// Streaming-generation mask: the current block attends to the whole
    /// cache and to itself, shape (block_tokens, cache_len + block_tokens).
    pub fn inference(cache_len: usize, block_tokens: usize) -> Self {
        let nk = cache_len + block_tokens;
        Self::from_visible(
            block_tokens,
            nk,
            vec![true; block_tokens * nk],
            MaskKind::InferenceBlockCausal,
        )
    }

    /// Encode-decode training mask over [noise blocks 1..n | clean blocks 1..n].
    ///
    /// `b` frames per block, `f` tokens per frame. Retained tokens of block j
    /// are the clean tokens of its final frame.
    pub fn memory_training(n_blocks: usize, b: usize, f: usize) -> Self {
        assert!(n_blocks >= 1 && b >= 1 && f >= 1);
        let half = n_blocks * b * f;
        let total = 2 * half;
        let mut visible = vec![false; total * total];
        let block_tok = b * f;
        let clean_base = half;
        let retained_start = |j: usize| clean_base + j * block_tok + (b - 1) * f;
        for j in 0..n_blocks {
            let noise_start = j * block_tok;
            let clean_start = clean_base + j * block_tok;
            for q in 0..block_tok {
                // Decoder rows: own noise block + retained clean of blocks <= j.
                let qrow = (noise_start + q) * total;
                for c in 0..block_tok {
                    visible[qrow + noise_start + c] = true;
                }
                for r in 0..=j {
                    let rs = retained_start(r);
                    for c in 0..f {
                        visible[qrow + rs + c] = true;
                    }
                }
                // Encoder rows: own clean block + retained clean of blocks < j.
                let qrow = (clean_start + q) * total;
                for c in 0..block_tok {
                    visible[qrow + clean_start + c] = true;
                }
                for r in 0..j {
                    let rs = retained_start(r);
                    for c in 0..f {
                        visible[qrow + rs + c] = true;
                    }
                }
            }
        }
        Self::from_visible(total, total, visible, MaskKind::MemoryTraining)
    }

    pub fn nq(&self) -> usize {
        self.nq
    }

    pub fn nk(&self) -> usize {
        self.nk
    }

    pub fn is_visible(&self, q: usize, k: usize) -> bool {
        self.visible[q * self.nk + k]
    }

    /// Additive form (0 visible / -1e9 hidden) consumed by the attention kernel.
    pub fn additive(&self) -> &[f32] {
        &self.additive
    }

    pub fn visible_count(&self, q: usize) -> usize {
        self.visible[q * self.nk..(q + 1) * self.nk]
            .iter()
            .filter(|&&v| v)
            .count()
    }

    pub fn ensure_no_hidden_rows(&self) -> Result<()> {
        for q in 0..self.nq {
            if !self.visible[q * self.nk..(q + 1) * self.nk].iter().any(|&v| v) {
                return Err(MagError::Mask(format!(
                    "query row {q} has no visible keys ({:?} mask {}x{})",
                    self.kind, self.nq, self.nk
                )));
            }
        }
        Ok(())
    }

    /// Validate the exact encode-decode structure. Decoder rows of block j
    /// (1-indexed) must see exactly b*f + j*f keys; encoder rows b*f + (j-1)*f.
    pub fn validate_memory_structure(&self, n_blocks: usize, b: usize, f: usize) -> Result<()> {
        let half = n_blocks * b * f;
        if self.nq != 2 * half || self.nk != 2 * half {
            return Err(MagError::Mask(format!(
                "memory mask is {}x{}, expected {}x{}",
                self.nq,
                self.nk,
                2 * half,
                2 * half
            )));
        }
        self.ensure_no_hidden_rows()?;
        let block_tok = b * f;
        let retained_start = |j: usize| half + j * block_tok + (b - 1) * f;
        for j in 0..n_blocks {
            for q in 0..block_tok {
                let noise_q = j * block_tok + q;
                let expected = block_tok + (j + 1) * f;
                let got = self.visible_count(noise_q);
                if got != expected {
                    return Err(MagError::Mask(format!(
                        "decoder row {noise_q} (block {}) sees {got} keys, expected {expected}",
                        j + 1
                    )));
                }
                // Exact set: own noise block plus retained prefixes.
                for k in 0..self.nk {
                    let in_own = (j * block_tok..(j + 1) * block_tok).contains(&k);
                    let in_retained = (0..=j).any(|r| {
                        let rs = retained_start(r);
                        (rs..rs + f).contains(&k)
                    });
                    if self.is_visible(noise_q, k) != (in_own || in_retained) {
                        return Err(MagError::Mask(format!(
                            "decoder row {noise_q} visibility of key {k} violates the encode-decode layout"
                        )));
                    }
                }
                let clean_q = half + j * block_tok + q;
                let expected = block_tok + j * f;
                let got = self.visible_count(clean_q);
                if got != expected {
                    return Err(MagError::Mask(format!(
                        "encoder row {clean_q} (block {}) sees {got} keys, expected {expected}",
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Arbitrary visibility, mainly for tests and oracles.
    pub fn from_fn(nq: usize, nk: usize, kind: MaskKind, vis: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = vec![false; nq * nk];
        for q in 0..nq {
            for k in 0..nk {
                visible[q * nk + k] = vis(q, k);
            }
        }
        Self::from_visible(nq, nk, visible, kind)
    }

    /// Square sub-mask starting at (offset, offset); used to take the
    /// encoder (clean-on-clean) quadrant of a training mask.
    pub fn from_visible_region(full: &AttentionMask, offset: usize, size: usize) -> AttentionMask {
        assert!(offset + size <= full.nq && offset + size <= full.nk);
        let mut visible = vec![false; size * size];
        for q in 0..size {
            for k in 0..size {
                visible[q * size + k] = full.is_visible(offset + q, offset + k);
            }
        }
        Self::from_visible(size, size, visible, full.kind)
    }

    #[cfg(test)]
    pub fn hide_row_for_test(&mut self, q: usize) {
        for k in 0..self.nk {
            self.visible[q * self.nk + k] = false;
            self.additive[q * self.nk + k] = HIDDEN;
        }
    }

    #[cfg(test)]
    pub fn identity_for_test(n: usize) -> Self {
        let mut visible = vec![false; n * n];
        for i in 0..n {
            visible[i * n + i] = true;
        }
        Self::from_visible(n, n, visible, MaskKind::Bidirectional)
    }
}

/// Mask for the current generation block: sees all cache entries and all of
/// its own tokens.
pub fn build_inference_mask(cache_len: usize, block_tokens: usize) -> AttentionMask {
    AttentionMask::inference(cache_len, block_tokens)
}

/// Encode-decode training mask; see [`AttentionMask::memory_training`].
pub fn build_memory_mask(n_blocks: usize, b: usize, f: usize) -> AttentionMask {
    AttentionMask::memory_training(n_blocks, b, f)
}
