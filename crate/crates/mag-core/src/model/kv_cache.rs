//! Per-layer key/value retention with frame and position metadata.
//!
//! The cache is the system's memory. Retention policies decide what survives
//! a block append: everything, only the final frame (the compressed mode),
//! or a sliding window of recent frames. Byte accounting is exact:
//! `entries * 2 * d_model * 4`.

use crate::error::{MagError, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetentionPolicy {
    All,
    LastFrame,
    /// Keep entries from the most recent `w` frames.
    Window(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntryMeta {
    pub pos: u32,
    pub frame: u32,
    pub block: u32,
}

/// K/V of one forward pass at one layer, one row per token.
#[derive(Clone, Debug)]
pub struct LayerKv {
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Default)]
struct LayerCache {
    keys: Vec<f32>,
    values: Vec<f32>,
}

#[derive(Clone)]
pub struct KvCache {
    layers: usize,
    d_model: usize,
    policy: RetentionPolicy,
    per_layer: Vec<LayerCache>,
    meta: Vec<EntryMeta>,
}

impl KvCache {
    pub fn new(layers: usize, d_model: usize, policy: RetentionPolicy) -> Self {
        KvCache {
            layers,
            d_model,
            policy,
            per_layer: vec![LayerCache::default(); layers],
            meta: Vec::new(),
        }
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Retained entries per layer (identical across layers).
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[EntryMeta] {
        &self.meta
    }

    pub fn max_pos(&self) -> Option<u32> {
        self.meta.iter().map(|m| m.pos).max()
    }

    pub fn max_frame(&self) -> Option<u32> {
        self.meta.iter().map(|m| m.frame).max()
    }

    pub fn max_block(&self) -> Option<u32> {
        self.meta.iter().map(|m| m.block).max()
    }

    pub fn bytes_per_layer(&self) -> usize {
        self.len() * 2 * self.d_model * 4
    }

    pub fn total_bytes(&self) -> usize {
        self.bytes_per_layer() * self.layers
    }

    /// Retained keys of one layer as a (entries, d_model) tensor.
    pub fn keys_tensor(&self, layer: usize) -> Tensor {
        Tensor::new(vec![self.len(), self.d_model], self.per_layer[layer].keys.clone())
    }

    pub fn values_tensor(&self, layer: usize) -> Tensor {
        Tensor::new(vec![self.len(), self.d_model], self.per_layer[layer].values.clone())
    }

    /// Append one block's K/V under the retention policy.
    ///
    /// `meta` carries one entry per token row of `block_kv`. New positions
    /// must lie strictly after everything already retained.
    pub fn append_block(&mut self, block_kv: &[LayerKv], meta: &[EntryMeta]) -> Result<()> {
        if block_kv.len() != self.layers {
            return Err(MagError::Cache(format!(
                "block has {} layers, cache has {}",
                block_kv.len(),
                self.layers
            )));
        }
        let tokens = meta.len();
        for (l, kv) in block_kv.iter().enumerate() {
            if kv.k.rows() != tokens || kv.v.rows() != tokens || kv.k.cols() != self.d_model {
                return Err(MagError::Cache(format!(
                    "layer {l} kv shape {:?}/{:?} does not match {tokens} tokens x d{}",
                    kv.k.shape(),
                    kv.v.shape(),
                    self.d_model
                )));
            }
        }
        if let (Some(max), Some(first)) = (self.max_pos(), meta.first()) {
            if first.pos <= max {
                return Err(MagError::Cache(format!(
                    "position collision: appending pos {} but cache already holds {max}",
                    first.pos
                )));
            }
        }

        let keep: Vec<usize> = match self.policy {
            RetentionPolicy::All | RetentionPolicy::Window(_) => (0..tokens).collect(),
            RetentionPolicy::LastFrame => {
                let last = meta.iter().map(|m| m.frame).max().unwrap_or(0);
                (0..tokens).filter(|&i| meta[i].frame == last).collect()
            }
        };
        for i in &keep {
            self.meta.push(meta[*i]);
        }
        for (l, kv) in block_kv.iter().enumerate() {
            let lc = &mut self.per_layer[l];
            for i in &keep {
                lc.keys.extend_from_slice(kv.k.row(*i));
                lc.values.extend_from_slice(kv.v.row(*i));
            }
        }

        if let RetentionPolicy::Window(w) = self.policy {
            let newest = self.max_frame().unwrap_or(0);
            let cutoff = newest.saturating_sub(w.saturating_sub(1));
            self.evict_before_frame(cutoff);
        }
        Ok(())
    }

    fn evict_before_frame(&mut self, cutoff: u32) {
        let keep: Vec<usize> = (0..self.meta.len())
            .filter(|&i| self.meta[i].frame >= cutoff)
            .collect();
        if keep.len() == self.meta.len() {
            return;
        }
        self.meta = keep.iter().map(|&i| self.meta[i]).collect();
        let d = self.d_model;
        for lc in &mut self.per_layer {
            let mut keys = Vec::with_capacity(keep.len() * d);
            let mut values = Vec::with_capacity(keep.len() * d);
            for &i in &keep {
                keys.extend_from_slice(&lc.keys[i * d..(i + 1) * d]);
                values.extend_from_slice(&lc.values[i * d..(i + 1) * d]);
            }
            lc.keys = keys;
            lc.values = values;
        }
    }
}

/// Append under an explicit policy, returning the updated cache.
pub fn cache_append(
    mut cache: KvCache,
    block_kv: &[LayerKv],
    meta: &[EntryMeta],
    policy: RetentionPolicy,
) -> Result<KvCache> {
    cache.policy = policy;
    cache.append_block(block_kv, meta)?;
    Ok(cache)
}
