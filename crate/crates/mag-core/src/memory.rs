//! Stage-1 training: compress each block into its final frame's KV cache and
//! reconstruct every frame of the block from the retained cache.
//!
//! Training runs the encoder and decoder in parallel over one concatenated
//! [noise | clean] sequence under the encode-decode mask: the clean half
//! computes full intra-block attention (the encoder whose K/V become the
//! cache), the noise half must denoise each block while seeing only the
//! retained last-frame tokens. The loss covers the noise half only; gradient
//! flow through the retained keys is what teaches the encoder to compress.
//! The positions of the clean segment start at a random offset each batch,
//! so compression cannot key on absolute time.

use serde::{Deserialize, Serialize};

use crate::error::{MagError, Result};
use crate::flow::{draw_t, few_step_sample, flow_sample};
use crate::metrics;
use crate::model::mask::build_memory_mask;
use crate::model::{
    build_inference_mask, patchify, token_positions, unpatchify, EntryMeta, ForwardInput, KvCache,
    LayerKv, Model, ModelConfig, RetentionPolicy, TokenInput,
};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::rng::{derive_seed, derive_seed_idx, Rng};
use crate::runcfg::{MetricRecord, MetricSink};
use crate::synthworld::{SceneCondition, VideoClip};

pub struct MemoryBatch {
    /// [noise blocks | clean blocks], (2N, patch_dim).
    pub tokens: Tensor,
    pub t_tokens: Vec<f32>,
    pub positions: Vec<u32>,
    pub n_blocks: usize,
    /// Velocity targets for the noise half, (N, patch_dim).
    pub noise_targets: Tensor,
    /// Per-block interpolant times.
    pub block_t: Vec<f32>,
}

/// Assemble one encode-decode training sequence from a clip.
pub fn build_memory_batch(
    clip: &VideoClip,
    cfg: &ModelConfig,
    start_offset: u32,
    rng: &mut Rng,
) -> Result<MemoryBatch> {
    let b = cfg.block_frames;
    if !clip.t.is_multiple_of(b) {
        return Err(MagError::Shape(format!(
            "clip length {} not divisible by block size {b}",
            clip.t
        )));
    }
    if clip.h != cfg.frame_h || clip.w != cfg.frame_w || clip.c != cfg.channels {
        return Err(MagError::Shape(format!(
            "clip {}x{}x{} does not match model frames {}x{}x{}",
            clip.h, clip.w, clip.c, cfg.frame_h, cfg.frame_w, cfg.channels
        )));
    }
    let n_blocks = clip.t / b;
    let f = cfg.frame_tokens();
    let block_tokens = cfg.block_tokens();
    let clean = patchify(&clip.frames, clip.t, cfg);

    let mut noised_parts = Vec::with_capacity(n_blocks);
    let mut target_parts = Vec::with_capacity(n_blocks);
    let mut block_t = Vec::with_capacity(n_blocks);
    for blk in 0..n_blocks {
        let x1 = clean.slice_rows(blk * block_tokens, block_tokens);
        let t = draw_t(rng);
        let s = flow_sample(&x1, t, rng);
        noised_parts.push(s.xt);
        target_parts.push(s.v_target);
        block_t.push(t);
    }
    let noise_half = Tensor::concat_rows(&noised_parts.iter().collect::<Vec<_>>());
    let noise_targets = Tensor::concat_rows(&target_parts.iter().collect::<Vec<_>>());
    let tokens = Tensor::concat_rows(&[&noise_half, &clean]);

    // Clean positions start at the random offset; the noise half mirrors them.
    let clean_pos = token_positions(start_offset, 0, clip.t, f);
    let mut positions = clean_pos.clone();
    positions.extend_from_slice(&clean_pos);

    let mut t_tokens = Vec::with_capacity(2 * clip.t * f);
    for &bt_val in block_t.iter() {
        t_tokens.extend(std::iter::repeat_n(bt_val, block_tokens));
    }
    t_tokens.extend(std::iter::repeat_n(1.0, clip.t * f));

    Ok(MemoryBatch {
        tokens,
        t_tokens,
        positions,
        n_blocks,
        noise_targets,
        block_t,
    })
}

/// Loss of one memory batch, with gradients when `trainable`.
pub fn memory_batch_loss(
    model: &Model,
    batch: &MemoryBatch,
    trainable: bool,
) -> Result<(f32, crate::nn::GradMap)> {
    let cfg = &model.cfg;
    let mask = build_memory_mask(batch.n_blocks, cfg.block_frames, cfg.frame_tokens());
    let n_half = batch.noise_targets.rows();
    let mut g = if trainable { Graph::new() } else { Graph::inference() };
    let bound = model.bind(&mut g, trainable);
    let out = model.forward(
        &mut g,
        &bound,
        &ForwardInput {
            tokens: TokenInput::Const(batch.tokens.clone()),
            t_tokens: batch.t_tokens.clone(),
            positions: batch.positions.clone(),
            cond: SceneCondition::null(),
            cache: None,
            mask: &mask,
        },
    )?;
    let noise_out = g.slice_rows(out.velocity, 0, n_half);
    let loss = g.mean_sq_diff(noise_out, batch.noise_targets.clone());
    let loss_val = g.value(loss).scalar();
    if !loss_val.is_finite() {
        return Err(MagError::Numeric("memory loss is non-finite".into()));
    }
    if !trainable {
        return Ok((loss_val, crate::nn::GradMap::new()));
    }
    let grads = g.backward(loss);
    Ok((loss_val, model.collect_grads(&bound, &grads)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemoryTrainConfig {
    pub steps: usize,
    pub lr: f32,
    /// Most blocks per training sample; each step draws 1..=max uniformly so
    /// the decoder sees caches of varying depth, which is what lets a model
    /// trained on short windows serve long-horizon reconstruction.
    pub max_blocks_per_sample: usize,
    /// Random RoPE start offsets are drawn from [0, start_offset_max].
    pub start_offset_max: u32,
    pub log_every: usize,
}

impl Default for MemoryTrainConfig {
    fn default() -> Self {
        MemoryTrainConfig {
            steps: 2000,
            lr: 1e-4,
            max_blocks_per_sample: 4,
            start_offset_max: 4096,
            log_every: 25,
        }
    }
}

/// Crop a training window of `n_blocks * b` frames out of a clip.
fn crop_blocks(clip: &VideoClip, b: usize, n_blocks: usize, rng: &mut Rng) -> VideoClip {
    let want = (n_blocks * b).min(clip.t / b * b);
    let max_start = clip.t - want;
    let start = if max_start == 0 { 0 } else { rng.next_below(max_start + 1) };
    clip.slice_frames(start, want)
}

/// Train the memory model on a clip dataset; the condition is always empty.
/// Divergence (loss above 10x the initial level for 100 consecutive steps)
/// aborts with a training-failure report.
pub fn train_memory(
    model: &mut Model,
    dataset: &[VideoClip],
    cfg: &MemoryTrainConfig,
    seed: u64,
    sink: &mut dyn MetricSink,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(MagError::Config("memory training needs a non-empty dataset".into()));
    }
    let mut rng = Rng::new(derive_seed(seed, "train-memory"));
    let mut opt = Adam::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut initial_loss: Option<f32> = None;
    let mut high_streak = 0usize;
    for step in 0..cfg.steps {
        let clip = &dataset[rng.next_below(dataset.len())];
        let n_blocks = 1 + rng.next_below(cfg.max_blocks_per_sample);
        let cropped = crop_blocks(clip, model.cfg.block_frames, n_blocks, &mut rng);
        let start = rng.next_below(cfg.start_offset_max as usize + 1) as u32;
        let batch = build_memory_batch(&cropped, &model.cfg, start, &mut rng)?;
        let (loss, grads) = memory_batch_loss(model, &batch, true)?;
        opt.step(&mut model.params, &grads);

        let init = *initial_loss.get_or_insert(loss);
        if loss > 10.0 * init {
            high_streak += 1;
            if high_streak >= 100 {
                return Err(MagError::Training(format!(
                    "memory training diverged: loss {loss:.4} above 10x initial {init:.4} for 100 steps"
                )));
            }
        } else {
            high_streak = 0;
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            sink.record(&MetricRecord {
                step: step as u64,
                loss_name: "memory_fm".into(),
                value: loss as f64,
                lambda_draw: None,
                i: None,
                t: Some(batch.block_t[0]),
            });
        }
    }
    Ok(())
}

/// Run the encoder over clean frames conditioned on the current cache,
/// returning per-layer K/V for the block's tokens.
pub fn encode_block(
    model: &Model,
    block_tokens: &Tensor,
    positions: &[u32],
    cache: &KvCache,
) -> Result<Vec<LayerKv>> {
    let n = positions.len();
    let mask = build_inference_mask(cache.len(), n);
    let mut g = Graph::inference();
    let bound = model.bind(&mut g, false);
    let out = model.forward(
        &mut g,
        &bound,
        &ForwardInput {
            tokens: TokenInput::Const(block_tokens.clone()),
            t_tokens: vec![1.0; n],
            positions: positions.to_vec(),
            cond: SceneCondition::null(),
            cache: Some(cache),
            mask: &mask,
        },
    )?;
    Ok(out.layer_kv)
}

/// Metadata rows for one block of frames.
pub fn block_meta(cfg: &ModelConfig, start_offset: u32, first_frame: u32, block_idx: u32) -> Vec<EntryMeta> {
    let f = cfg.frame_tokens();
    let mut meta = Vec::with_capacity(cfg.block_tokens());
    for fr in 0..cfg.block_frames as u32 {
        for j in 0..f as u32 {
            meta.push(EntryMeta {
                pos: start_offset + (first_frame + fr) * f as u32 + j,
                frame: first_frame + fr,
                block: block_idx,
            });
        }
    }
    meta
}

/// Encode a whole clip block-by-block into a fresh cache under the given
/// retention policy. Returns the cache and the per-block token slices.
pub fn encode_clip_cache(
    model: &Model,
    clip: &VideoClip,
    policy: RetentionPolicy,
    start_offset: u32,
) -> Result<(KvCache, Vec<Tensor>)> {
    let cfg = &model.cfg;
    let b = cfg.block_frames;
    if !clip.t.is_multiple_of(b) {
        return Err(MagError::Shape(format!(
            "clip length {} not divisible by block size {b}",
            clip.t
        )));
    }
    let f = cfg.frame_tokens();
    let tokens = patchify(&clip.frames, clip.t, cfg);
    let mut cache = KvCache::new(cfg.layers, cfg.d_model, policy);
    let mut blocks = Vec::new();
    for blk in 0..clip.t / b {
        let bt = tokens.slice_rows(blk * cfg.block_tokens(), cfg.block_tokens());
        let positions = token_positions(start_offset, (blk * b) as u32, b, f);
        let kv = encode_block(model, &bt, &positions, &cache)?;
        let meta = block_meta(cfg, start_offset, (blk * b) as u32, blk as u32);
        cache.append_block(&kv, &meta)?;
        blocks.push(bt);
    }
    Ok((cache, blocks))
}

/// Denoise one block from fresh noise, attending only to the retained cache
/// (which must include the block's own compressed entries) and itself.
pub fn reconstruct_block(
    model: &Model,
    retained: &KvCache,
    block_noise: &Tensor,
    positions: &[u32],
    steps: usize,
) -> Result<Tensor> {
    if retained.is_empty() {
        return Err(MagError::Cache(
            "reconstruction needs a non-empty retained cache".into(),
        ));
    }
    few_step_sample(
        model,
        block_noise,
        SceneCondition::null(),
        Some(retained),
        positions,
        steps,
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub b: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mse_x100: f64,
    pub n_clips: usize,
}

/// Compression-fidelity evaluation: encode each test clip under last-frame
/// retention, then rebuild every block from the cache and score it against
/// the original pixels. Runs without any generator.
pub fn eval_reconstruction(
    model: &Model,
    testset: &[VideoClip],
    steps: usize,
    seed: u64,
) -> Result<ReconstructionReport> {
    let cfg = &model.cfg;
    let b = cfg.block_frames;
    let f = cfg.frame_tokens();
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    let mut sum_mse = 0.0;
    let mut n_blocks_total = 0usize;
    for (ci, clip) in testset.iter().enumerate() {
        let usable = clip.t / b * b;
        let clip = clip.slice_frames(0, usable);
        let tokens = patchify(&clip.frames, clip.t, cfg);
        // Build the full compressed cache once, then reconstruct each block
        // from the prefix that includes its own retained frame.
        let (cache, _) = encode_clip_cache(model, &clip, RetentionPolicy::LastFrame, 0)?;
        let mut prefix = KvCache::new(cfg.layers, cfg.d_model, RetentionPolicy::All);
        let mut entry = 0usize;
        for blk in 0..clip.t / b {
            // Advance the prefix cache to cover blocks 0..=blk.
            let upto = (blk + 1) * f;
            let kv: Vec<LayerKv> = (0..cfg.layers)
                .map(|l| LayerKv {
                    k: cache.keys_tensor(l).slice_rows(entry, upto - entry),
                    v: cache.values_tensor(l).slice_rows(entry, upto - entry),
                })
                .collect();
            let meta: Vec<EntryMeta> = cache.meta()[entry..upto].to_vec();
            prefix.append_block(&kv, &meta)?;
            entry = upto;

            let mut rng = Rng::new(derive_seed_idx(derive_seed_idx(seed, ci as u64), blk as u64));
            let noise = Tensor::randn(vec![cfg.block_tokens(), cfg.patch_dim()], 1.0, &mut rng);
            let positions = token_positions(0, (blk * b) as u32, b, f);
            let recon = reconstruct_block(model, &prefix, &noise, &positions, steps)?;
            let recon_frames: Vec<f32> = unpatchify(&recon, b, cfg)
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            let truth = unpatchify(&tokens.slice_rows(blk * cfg.block_tokens(), cfg.block_tokens()), b, cfg);
            let m = metrics::mse(&recon_frames, &truth);
            sum_mse += m;
            sum_psnr += metrics::psnr_from_mse(m);
            let mut s = 0.0;
            for fr in 0..b {
                let fv = cfg.frame_values();
                s += metrics::ssim(
                    &recon_frames[fr * fv..(fr + 1) * fv],
                    &truth[fr * fv..(fr + 1) * fv],
                    cfg.frame_h,
                    cfg.frame_w,
                    cfg.channels,
                );
            }
            sum_ssim += s / b as f64;
            n_blocks_total += 1;
        }
    }
    if n_blocks_total == 0 {
        return Err(MagError::Config("reconstruction eval got no usable blocks".into()));
    }
    let n = n_blocks_total as f64;
    Ok(ReconstructionReport {
        b,
        psnr: sum_psnr / n,
        ssim: sum_ssim / n,
        mse_x100: 100.0 * sum_mse / n,
        n_clips: testset.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runcfg::NullSink;
    use crate::synthworld::{make_dataset, DatasetConfig};

    fn tiny_model(b: usize) -> Model {
        let mut cfg = ModelConfig::tiny(1, 16, 2, 12, b);
        cfg.frame_h = 24;
        cfg.frame_w = 24;
        Model::new(cfg, 3).unwrap()
    }

    fn tiny_clip(t: usize) -> VideoClip {
        let cfg = DatasetConfig {
            clip_len: t,
            ..DatasetConfig::default()
        };
        make_dataset(11, 1, &cfg).unwrap().remove(0)
    }

    #[test]
    fn batch_shapes_and_positions_mirror() {
        let model = tiny_model(3);
        let clip = tiny_clip(6);
        let mut rng = Rng::new(1);
        let batch = build_memory_batch(&clip, &model.cfg, 40, &mut rng).unwrap();
        let f = model.cfg.frame_tokens();
        let n = 6 * f;
        assert_eq!(batch.tokens.rows(), 2 * n);
        assert_eq!(batch.n_blocks, 2);
        assert_eq!(batch.noise_targets.rows(), n);
        // Noise half mirrors the clean half's positions.
        assert_eq!(batch.positions[0..n], batch.positions[n..2 * n]);
        assert_eq!(batch.positions[0], 40);
        // Clean half is at t=1.
        assert!(batch.t_tokens[n..].iter().all(|&t| t == 1.0));
    }

    #[test]
    fn indivisible_clip_rejected() {
        let model = tiny_model(3);
        let clip = tiny_clip(7);
        let mut rng = Rng::new(1);
        assert!(matches!(
            build_memory_batch(&clip, &model.cfg, 0, &mut rng),
            Err(MagError::Shape(_))
        ));
    }

    #[test]
    fn same_rng_same_batch() {
        let model = tiny_model(3);
        let clip = tiny_clip(6);
        let a = build_memory_batch(&clip, &model.cfg, 7, &mut Rng::new(5)).unwrap();
        let b = build_memory_batch(&clip, &model.cfg, 7, &mut Rng::new(5)).unwrap();
        assert_eq!(a.tokens.data(), b.tokens.data());
    }

    #[test]
    fn empty_cache_reconstruction_rejected() {
        let model = tiny_model(1);
        let cache = KvCache::new(model.cfg.layers, model.cfg.d_model, RetentionPolicy::LastFrame);
        let noise = Tensor::zeros(vec![model.cfg.block_tokens(), model.cfg.patch_dim()]);
        let positions = token_positions(0, 1, 1, model.cfg.frame_tokens());
        assert!(matches!(
            reconstruct_block(&model, &cache, &noise, &positions, 2),
            Err(MagError::Cache(_))
        ));
    }

    #[test]
    fn short_training_reduces_loss() {
        let mut model = tiny_model(1);
        let data = make_dataset(21, 4, &DatasetConfig { clip_len: 4, ..DatasetConfig::default() }).unwrap();
        let probe = build_memory_batch(&data[0].slice_frames(0, 2), &model.cfg, 0, &mut Rng::new(9)).unwrap();
        let (before, _) = memory_batch_loss(&model, &probe, false).unwrap();
        let cfg = MemoryTrainConfig {
            steps: 60,
            lr: 3e-3,
            max_blocks_per_sample: 4,
            start_offset_max: 64,
            log_every: 1000,
        };
        train_memory(&mut model, &data, &cfg, 7, &mut NullSink).unwrap();
        let (after, _) = memory_batch_loss(&model, &probe, false).unwrap();
        assert!(after < before, "loss {before} -> {after}");
    }
}
