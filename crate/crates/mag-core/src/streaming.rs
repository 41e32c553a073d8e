//! Block-by-block streaming inference.
//!
//! A session owns one cache. Per generated block: the generator denoises b
//! frames in a few Euler steps conditioned on the cache, the frames are
//! emitted, and the frozen memory model re-encodes the clean block into the
//! cache under the session's retention mode. History ingestion runs the same
//! encode path over supplied frames without emitting anything. Wall time and
//! cache size are recorded per block.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{MagError, Result};
use crate::flow::few_step_sample;
use crate::generator::block_noise;
use crate::memory::{block_meta, encode_block};
use crate::model::mask::AttentionMask;
use crate::model::{patchify, token_positions, unpatchify, ForwardInput, KvCache, LayerKv, Model, RetentionPolicy, TokenInput};
use crate::nn::{Graph, Tensor};
use crate::rng::derive_seed;
use crate::synthworld::{SceneCondition, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheMode {
    /// Compressed full history: last-frame retention.
    Mag,
    /// Retain every token of every block.
    Full,
    /// Keep only the most recent W blocks.
    WindowBlocks(u32),
}

impl CacheMode {
    /// Accepts "mag", "full", "window:W".
    pub fn parse(text: &str) -> Result<CacheMode> {
        let t = text.trim();
        match t {
            "mag" => Ok(CacheMode::Mag),
            "full" | "full_cache" => Ok(CacheMode::Full),
            _ => {
                if let Some(w) = t.strip_prefix("window:") {
                    let w: u32 = w
                        .parse()
                        .map_err(|_| MagError::Config(format!("bad window size in '{text}'")))?;
                    if w == 0 {
                        return Err(MagError::Config("window must be >= 1 block".into()));
                    }
                    Ok(CacheMode::WindowBlocks(w))
                } else {
                    Err(MagError::Config(format!(
                        "unknown cache mode '{text}' (expected mag|full|window:W)"
                    )))
                }
            }
        }
    }

    pub fn policy(&self, block_frames: usize) -> RetentionPolicy {
        match self {
            CacheMode::Mag => RetentionPolicy::LastFrame,
            CacheMode::Full => RetentionPolicy::All,
            CacheMode::WindowBlocks(w) => RetentionPolicy::Window(w * block_frames as u32),
        }
    }
}

impl std::fmt::Display for CacheMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CacheMode::Mag => write!(f, "mag"),
            CacheMode::Full => write!(f, "full"),
            CacheMode::WindowBlocks(w) => write!(f, "window:{w}"),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PerfReport {
    /// Wall seconds per generated block.
    pub block_wall_s: Vec<f64>,
    pub frames_emitted: u64,
    /// Cache entries per layer after each block.
    pub cache_entries: Vec<usize>,
    /// Total cache bytes (all layers) after each block.
    pub cache_bytes: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerfSummary {
    /// Frames per wall second, first (warmup) block excluded.
    pub steady_fps: f64,
    /// Mean cache growth per block over the steady segment, total bytes.
    pub cache_slope_bytes_per_block: f64,
    pub median_block_wall_s: f64,
    pub blocks: usize,
}

/// Summarize a report; needs at least two recorded blocks so a warmup block
/// can be excluded.
pub fn perf_summary(report: &PerfReport, block_frames: usize) -> Result<PerfSummary> {
    let n = report.block_wall_s.len();
    if n < 2 {
        return Err(MagError::Config("perf summary needs >= 2 recorded blocks".into()));
    }
    let steady: f64 = report.block_wall_s[1..].iter().sum();
    let frames = (n - 1) * block_frames;
    let mut sorted = report.block_wall_s[1..].to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let slope = if report.cache_bytes.len() >= 2 {
        (report.cache_bytes[n - 1] as f64 - report.cache_bytes[0] as f64) / (n - 1) as f64
    } else {
        0.0
    };
    Ok(PerfSummary {
        steady_fps: frames as f64 / steady.max(1e-12),
        cache_slope_bytes_per_block: slope,
        median_block_wall_s: median,
        blocks: n,
    })
}

pub struct StreamSession<'a> {
    generator: &'a Model,
    memory: &'a Model,
    pub mode: CacheMode,
    cache: KvCache,
    sample_steps: usize,
    next_frame: u32,
    next_block: u32,
    perf: PerfReport,
}

impl<'a> StreamSession<'a> {
    pub fn new(generator: &'a Model, memory: &'a Model, mode: CacheMode, sample_steps: usize) -> Result<Self> {
        if !generator.cfg.same_shape(&memory.cfg) {
            return Err(MagError::Config(
                "generator and memory model configurations differ".into(),
            ));
        }
        let cfg = &generator.cfg;
        Ok(StreamSession {
            generator,
            memory,
            mode,
            cache: KvCache::new(cfg.layers, cfg.d_model, mode.policy(cfg.block_frames)),
            sample_steps,
            next_frame: 0,
            next_block: 0,
            perf: PerfReport::default(),
        })
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn perf(&self) -> &PerfReport {
        &self.perf
    }

    pub fn frames_generated(&self) -> u32 {
        self.next_frame
    }

    fn encode_and_append(&mut self, tokens: &Tensor, positions: &[u32]) -> Result<()> {
        let kv = encode_block(self.memory, tokens, positions, &self.cache)?;
        let meta = block_meta(&self.generator.cfg, 0, self.next_frame, self.next_block);
        self.cache.append_block(&kv, &meta)?;
        self.next_frame += self.generator.cfg.block_frames as u32;
        self.next_block += 1;
        Ok(())
    }

    /// Feed clean history frames into the cache (memorize phase); emits
    /// nothing. Frame count must be divisible by the block size.
    pub fn ingest_history(&mut self, clip: &VideoClip) -> Result<()> {
        let cfg = &self.generator.cfg;
        if !clip.t.is_multiple_of(cfg.block_frames) {
            return Err(MagError::Shape(format!(
                "history length {} not divisible by block size {}",
                clip.t, cfg.block_frames
            )));
        }
        if clip.h != cfg.frame_h || clip.w != cfg.frame_w || clip.c != cfg.channels {
            return Err(MagError::Shape("history frame geometry does not match the model".into()));
        }
        let tokens = patchify(&clip.frames, clip.t, cfg);
        for blk in 0..clip.t / cfg.block_frames {
            let bt = tokens.slice_rows(blk * cfg.block_tokens(), cfg.block_tokens());
            let positions = token_positions(0, self.next_frame, cfg.block_frames, cfg.frame_tokens());
            self.encode_and_append(&bt, &positions)?;
        }
        Ok(())
    }

    fn generate_block_inner(&mut self, cond: SceneCondition, seed: u64, append: bool) -> Result<Vec<f32>> {
        let cfg = &self.generator.cfg;
        let start = Instant::now();
        let positions = token_positions(0, self.next_frame, cfg.block_frames, cfg.frame_tokens());
        let noise = block_noise(
            derive_seed(seed, "stream"),
            self.next_block as u64,
            cfg.block_tokens(),
            cfg.patch_dim(),
        );
        let tokens = few_step_sample(
            self.generator,
            &noise,
            cond,
            Some(&self.cache),
            &positions,
            self.sample_steps,
        )?;
        if append {
            self.encode_and_append(&tokens, &positions)?;
        }
        let frames: Vec<f32> = unpatchify(&tokens, cfg.block_frames, cfg)
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        self.perf.block_wall_s.push(start.elapsed().as_secs_f64());
        self.perf.frames_emitted += cfg.block_frames as u64;
        self.perf.cache_entries.push(self.cache.len());
        self.perf.cache_bytes.push(self.cache.total_bytes());
        Ok(frames)
    }

    /// Generate one block and write it into the cache.
    pub fn generate_block(&mut self, cond: SceneCondition, seed: u64) -> Result<Vec<f32>> {
        self.generate_block_inner(cond, seed, true)
    }

    /// Generate one block without updating the cache; used when the caller
    /// will ingest ground-truth frames instead (teacher-forced evaluation).
    pub fn generate_block_peek(&mut self, cond: SceneCondition, seed: u64) -> Result<Vec<f32>> {
        self.generate_block_inner(cond, seed, false)
    }
}

/// Generate `n_blocks` blocks and return the emitted clip plus performance
/// counters. Deterministic in (models, cond, seed).
pub fn stream_generate(
    session: &mut StreamSession<'_>,
    cond: SceneCondition,
    n_blocks: usize,
    seed: u64,
) -> Result<VideoClip> {
    if n_blocks == 0 {
        return Err(MagError::Config("stream_generate needs n_blocks >= 1".into()));
    }
    let cfg = &session.generator.cfg;
    let mut frames = Vec::with_capacity(n_blocks * cfg.block_frames * cfg.frame_values());
    for _ in 0..n_blocks {
        frames.extend(session.generate_block(cond, seed)?);
    }
    Ok(VideoClip {
        frames,
        t: n_blocks * cfg.block_frames,
        h: cfg.frame_h,
        w: cfg.frame_w,
        c: cfg.channels,
        condition: cond,
        trajectory: None,
    })
}

/// Offline oracle for the incremental stream: before every block it rebuilds
/// the retained cache from scratch with one parallel forward of the memory
/// model over all previously emitted clean frames, under a block-causal
/// encoder mask. Only meaningful for [`CacheMode::Mag`].
pub fn stream_generate_recompute(
    generator: &Model,
    memory: &Model,
    cond: SceneCondition,
    n_blocks: usize,
    seed: u64,
    sample_steps: usize,
) -> Result<VideoClip> {
    if n_blocks == 0 {
        return Err(MagError::Config("stream_generate needs n_blocks >= 1".into()));
    }
    let cfg = &generator.cfg;
    let (b, f) = (cfg.block_frames, cfg.frame_tokens());
    let mut history_tokens: Vec<Tensor> = Vec::new();
    let mut frames = Vec::new();
    for blk in 0..n_blocks {
        let cache = rebuild_cache_parallel(memory, &history_tokens)?;
        let positions = token_positions(0, (blk * b) as u32, b, f);
        let noise = block_noise(
            derive_seed(seed, "stream"),
            blk as u64,
            cfg.block_tokens(),
            cfg.patch_dim(),
        );
        let tokens = few_step_sample(generator, &noise, cond, Some(&cache), &positions, sample_steps)?;
        frames.extend(
            unpatchify(&tokens, b, cfg)
                .iter()
                .map(|v| v.clamp(0.0, 1.0)),
        );
        history_tokens.push(tokens);
    }
    Ok(VideoClip {
        frames,
        t: n_blocks * b,
        h: cfg.frame_h,
        w: cfg.frame_w,
        c: cfg.channels,
        condition: cond,
        trajectory: None,
    })
}

/// One parallel encoder forward over all past blocks: block j sees its own
/// tokens plus the retained final-frame tokens of blocks < j, exactly what
/// the incremental encode passes saw. Returns the last-frame cache.
fn rebuild_cache_parallel(memory: &Model, history: &[Tensor]) -> Result<KvCache> {
    let cfg = &memory.cfg;
    let (b, f) = (cfg.block_frames, cfg.frame_tokens());
    let mut cache = KvCache::new(cfg.layers, cfg.d_model, RetentionPolicy::LastFrame);
    if history.is_empty() {
        return Ok(cache);
    }
    let n_blocks = history.len();
    let block_tok = cfg.block_tokens();
    let all = Tensor::concat_rows(&history.iter().collect::<Vec<_>>());
    let n = all.rows();
    let mask = encoder_causal_mask(n_blocks, b, f);
    let positions = token_positions(0, 0, n_blocks * b, f);
    let mut g = Graph::inference();
    let bound = memory.bind(&mut g, false);
    let out = memory.forward(
        &mut g,
        &bound,
        &ForwardInput {
            tokens: TokenInput::Const(all),
            t_tokens: vec![1.0; n],
            positions,
            cond: SceneCondition::null(),
            cache: None,
            mask: &mask,
        },
    )?;
    for blk in 0..n_blocks {
        let kv: Vec<LayerKv> = out
            .layer_kv
            .iter()
            .map(|l| LayerKv {
                k: l.k.slice_rows(blk * block_tok, block_tok),
                v: l.v.slice_rows(blk * block_tok, block_tok),
            })
            .collect();
        let meta = block_meta(cfg, 0, (blk * b) as u32, blk as u32);
        cache.append_block(&kv, &meta)?;
    }
    Ok(cache)
}

/// Encoder half of the training mask: clean block j sees itself plus the
/// final-frame tokens of blocks < j.
fn encoder_causal_mask(n_blocks: usize, b: usize, f: usize) -> AttentionMask {
    let full = crate::model::build_memory_mask(n_blocks, b, f);
    let half = n_blocks * b * f;
    AttentionMask::from_visible_region(&full, half, half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthworld::{make_dataset, DatasetConfig};

    fn tiny_models() -> (Model, Model) {
        let mut cfg = ModelConfig::tiny(2, 16, 2, 12, 2);
        cfg.frame_h = 24;
        cfg.frame_w = 24;
        (Model::new(cfg.clone(), 1).unwrap(), Model::new(cfg, 2).unwrap())
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(CacheMode::parse("mag").unwrap(), CacheMode::Mag);
        assert_eq!(CacheMode::parse("full").unwrap(), CacheMode::Full);
        assert_eq!(CacheMode::parse("window:2").unwrap(), CacheMode::WindowBlocks(2));
        assert!(CacheMode::parse("window:0").is_err());
        assert!(CacheMode::parse("bogus").is_err());
    }

    #[test]
    fn zero_blocks_rejected() {
        let (gen, mem) = tiny_models();
        let mut s = StreamSession::new(&gen, &mem, CacheMode::Mag, 2).unwrap();
        assert!(stream_generate(&mut s, SceneCondition::null(), 0, 1).is_err());
    }

    #[test]
    fn identical_seeds_identical_streams() {
        let (gen, mem) = tiny_models();
        let run = || {
            let mut s = StreamSession::new(&gen, &mem, CacheMode::Mag, 2).unwrap();
            stream_generate(&mut s, SceneCondition::new(0, 0), 3, 77).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn ingest_grows_cache_by_frame_tokens_per_block() {
        let (gen, mem) = tiny_models();
        let cfg = &gen.cfg;
        let data = make_dataset(
            5,
            1,
            &DatasetConfig {
                clip_len: 12,
                ..DatasetConfig::default()
            },
        )
        .unwrap();
        let mut s = StreamSession::new(&gen, &mem, CacheMode::Mag, 2).unwrap();
        s.ingest_history(&data[0]).unwrap();
        // 6 blocks of 2 frames, last-frame retention.
        assert_eq!(s.cache().len(), 6 * cfg.frame_tokens());
        // Window mode: only the last 2 blocks' tokens remain.
        let mut s = StreamSession::new(&gen, &mem, CacheMode::WindowBlocks(2), 2).unwrap();
        s.ingest_history(&data[0]).unwrap();
        assert_eq!(s.cache().len(), 2 * cfg.block_tokens());
    }

    #[test]
    fn indivisible_history_rejected() {
        let (gen, mem) = tiny_models();
        let data = make_dataset(
            5,
            1,
            &DatasetConfig {
                clip_len: 5,
                ..DatasetConfig::default()
            },
        )
        .unwrap();
        let mut s = StreamSession::new(&gen, &mem, CacheMode::Mag, 2).unwrap();
        assert!(matches!(s.ingest_history(&data[0]), Err(MagError::Shape(_))));
    }

    #[test]
    fn ingest_changes_generation() {
        let (gen, mem) = tiny_models();
        let data = make_dataset(
            5,
            1,
            &DatasetConfig {
                clip_len: 4,
                ..DatasetConfig::default()
            },
        )
        .unwrap();
        let fresh = {
            let mut s = StreamSession::new(&gen, &mem, CacheMode::Mag, 2).unwrap();
            stream_generate(&mut s, SceneCondition::new(0, 0), 1, 5).unwrap()
        };
        let with_history = {
            let mut s = StreamSession::new(&gen, &mem, CacheMode::Mag, 2).unwrap();
            s.ingest_history(&data[0]).unwrap();
            // Same seed stream but the cache now conditions the block; the
            // noise differs too since the block index advanced, so compare
            // against the same block index by reseeding.
            let mut frames = Vec::new();
            frames.extend(s.generate_block(SceneCondition::new(0, 0), 5).unwrap());
            VideoClip {
                frames,
                t: gen.cfg.block_frames,
                h: gen.cfg.frame_h,
                w: gen.cfg.frame_w,
                c: 1,
                condition: SceneCondition::new(0, 0),
                trajectory: None,
            }
        };
        assert_ne!(fresh.frames[..with_history.frames.len()], with_history.frames[..]);
    }

    #[test]
    fn mag_slope_matches_closed_form() {
        let (gen, mem) = tiny_models();
        let cfg = &gen.cfg;
        let mut s = StreamSession::new(&gen, &mem, CacheMode::Mag, 2).unwrap();
        stream_generate(&mut s, SceneCondition::new(0, 0), 5, 3).unwrap();
        let summary = perf_summary(s.perf(), cfg.block_frames).unwrap();
        let expect = (cfg.frame_tokens() * cfg.layers * 2 * cfg.d_model * 4) as f64;
        assert_eq!(summary.cache_slope_bytes_per_block, expect);
        // Window mode stops growing once the window is full.
        let mut s = StreamSession::new(&gen, &mem, CacheMode::WindowBlocks(2), 2).unwrap();
        stream_generate(&mut s, SceneCondition::new(0, 0), 6, 3).unwrap();
        let bytes = &s.perf().cache_bytes;
        assert_eq!(bytes[bytes.len() - 1], bytes[bytes.len() - 2]);
    }

    #[test]
    fn perf_summary_needs_two_blocks() {
        let r = PerfReport {
            block_wall_s: vec![1.0],
            ..PerfReport::default()
        };
        assert!(perf_summary(&r, 3).is_err());
        let r = PerfReport {
            block_wall_s: vec![1.0, 1.0, 1.0, 1.0],
            frames_emitted: 12,
            cache_entries: vec![3, 6, 9, 12],
            cache_bytes: vec![100, 200, 300, 400],
        };
        let s = perf_summary(&r, 3).unwrap();
        assert!((s.steady_fps - 3.0).abs() < 1e-9);
        assert!((s.cache_slope_bytes_per_block - 100.0).abs() < 1e-9);
    }
}
