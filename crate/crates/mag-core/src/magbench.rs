//! Leave-and-return historical-consistency benchmark.
//!
//! Cases are built by reverse playback: a one-way camera segment is the
//! memorize leg and its exact reversal is the ground-truth return leg, so a
//! generator that truly remembers the scene can in principle score
//! perfectly. Evaluation ingests the memorize leg into the cache, then
//! continues block-by-block either from the model's own predictions
//! (history_context) or from ground-truth frames (ground_truth), and scores
//! predictions with best-match metrics: each predicted frame is matched to
//! its most similar ground-truth frame before PSNR/SSIM/MSE, tolerating
//! small camera-speed misalignment.

use serde::{Deserialize, Serialize};

use crate::error::{MagError, Result};
use crate::metrics;
use crate::model::Model;
use crate::rng::{derive_seed, derive_seed_idx, Rng};
use crate::streaming::{CacheMode, StreamSession};
use crate::synthworld::{build_world, render_clip, CameraTrajectory, SceneCondition, TrajectoryKind, VideoClip, WorldConfig};

#[derive(Clone, Debug)]
pub struct BenchCase {
    pub case_id: u64,
    pub world_seed: u64,
    /// Frames fed to the cache before generation starts.
    pub memorize: VideoClip,
    /// Ground-truth return leg: exactly the reversed memorize leg.
    pub target: VideoClip,
    pub condition: SceneCondition,
    pub switch_time: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchCaseMeta {
    pub case_id: u64,
    pub world_seed: u64,
    pub switch_time: usize,
    pub memorize_len: usize,
    pub target_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchBuildConfig {
    pub n_cases: usize,
    /// Frames per leg; must be divisible by the model's block size.
    pub leg_frames: usize,
    /// Minimum camera travel, so the away leg genuinely leaves short windows.
    pub min_offset: usize,
    pub world: WorldConfig,
}

impl Default for BenchBuildConfig {
    fn default() -> Self {
        BenchBuildConfig {
            n_cases: 176,
            leg_frames: 12,
            min_offset: 24,
            world: WorldConfig::default(),
        }
    }
}

/// Deterministic case construction via reverse playback.
pub fn build_bench(seed: u64, cfg: &BenchBuildConfig) -> Result<Vec<BenchCase>> {
    if cfg.n_cases < 1 {
        return Err(MagError::Config("bench needs n_cases >= 1".into()));
    }
    cfg.world.validate()?;
    let span = cfg.world.world_w - cfg.world.frame_w;
    let max_travel = (cfg.leg_frames - 1) * cfg.world.max_step;
    if cfg.min_offset > max_travel.min(span) {
        return Err(MagError::Config(format!(
            "min_offset {} unreachable with {} frames at step {} (span {span})",
            cfg.min_offset, cfg.leg_frames, cfg.world.max_step
        )));
    }
    let mut cases = Vec::with_capacity(cfg.n_cases);
    for case_id in 0..cfg.n_cases as u64 {
        let world_seed = derive_seed_idx(derive_seed(seed, "bench"), case_id);
        let world = build_world(world_seed, &cfg.world)?;
        let mut rng = Rng::new(derive_seed_idx(world_seed, 0xBE));
        // Mixed speeds: travel between min_offset and the reachable maximum.
        let lo = cfg.min_offset;
        let hi = max_travel.min(span);
        let travel = lo + rng.next_below(hi - lo + 1);
        let leg = cfg.leg_frames;
        let offsets: Vec<usize> = (0..leg).map(|i| i * travel / (leg - 1).max(1)).collect();
        let cond = SceneCondition::new(cfg.world.family_of(world_seed), 1);
        let out_traj = CameraTrajectory {
            offsets,
            switch_time: None,
            kind: TrajectoryKind::LeaveReturn,
        };
        let memorize = render_clip(&world, &out_traj, cfg.world.frame_w, cond)?;
        let target = memorize.reversed();
        cases.push(BenchCase {
            case_id,
            world_seed,
            memorize,
            target,
            condition: cond,
            switch_time: leg,
        });
    }
    Ok(cases)
}

/// The memorize and target legs must form a palindrome: target frames are
/// the memorize frames in reverse order, bit-exact.
pub fn validate_case(case: &BenchCase) -> Result<()> {
    if case.memorize.t != case.target.t {
        return Err(MagError::Shape("memorize and target lengths differ".into()));
    }
    let rev = case.memorize.reversed();
    if rev.frames != case.target.frames {
        return Err(MagError::Shape(format!(
            "case {} target is not the reversed memorize segment",
            case.case_id
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Best-match alignment
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMetric {
    /// Mean squared error in pixel space (the default; all acceptance
    /// numbers use it).
    PixelMse,
    /// L2 distance of fixed-seed random-projection features.
    RandomProjection,
}

fn frame_distance(metric: FrameMetric, a: &[f32], b: &[f32], proj: Option<&[f32]>) -> f64 {
    match metric {
        FrameMetric::PixelMse => metrics::mse(a, b),
        FrameMetric::RandomProjection => {
            let proj = proj.expect("projection matrix");
            let dim = 32;
            let n = a.len();
            let mut dist = 0.0f64;
            for j in 0..dim {
                let row = &proj[j * n..(j + 1) * n];
                let mut fa = 0.0f64;
                let mut fb = 0.0f64;
                for i in 0..n {
                    fa += (a[i] * row[i]) as f64;
                    fb += (b[i] * row[i]) as f64;
                }
                dist += (fa - fb) * (fa - fb);
            }
            dist / dim as f64
        }
    }
}

fn projection_matrix(frame_values: usize) -> Vec<f32> {
    let mut rng = Rng::new(0x9A7C); // fixed seed: the feature space is part of the metric definition
    let mut m = vec![0.0f32; 32 * frame_values];
    rng.fill_normal(&mut m, 1.0 / (frame_values as f32).sqrt());
    m
}

/// For every predicted frame, the index of the closest ground-truth frame
/// and that distance. Indices may repeat.
pub fn best_match_align(
    pred: &VideoClip,
    gt: &VideoClip,
    metric: FrameMetric,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if pred.t == 0 || gt.t == 0 {
        return Err(MagError::Config("best-match alignment needs non-empty clips".into()));
    }
    if pred.frame_values() != gt.frame_values() {
        return Err(MagError::Shape("frame geometry mismatch in alignment".into()));
    }
    let proj = matches!(metric, FrameMetric::RandomProjection).then(|| projection_matrix(pred.frame_values()));
    let mut matching = Vec::with_capacity(pred.t);
    let mut distances = Vec::with_capacity(pred.t);
    for i in 0..pred.t {
        let pf = pred.frame(i);
        let mut best = (0usize, f64::MAX);
        for j in 0..gt.t {
            let d = frame_distance(metric, pf, gt.frame(j), proj.as_deref());
            if d < best.1 {
                best = (j, d);
            }
        }
        matching.push(best.0);
        distances.push(best.1);
    }
    Ok((matching, distances))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Continue from the model's own predictions (autoregressive, harder).
    HistoryContext,
    /// Continue each block from ground-truth previous frames.
    GroundTruth,
}

/// What produces the continuation blocks.
pub enum Continuer<'a> {
    Model {
        generator: &'a Model,
        mode: CacheMode,
        sample_steps: usize,
        /// Generate under the empty condition: continuation must come from
        /// the cache alone, which is the purest memory-retention probe.
        null_condition: bool,
    },
    /// Replays the reversed memorize segment; scores perfectly by
    /// construction and calibrates the metric ceiling.
    ReplayOracle,
    /// Emits fresh noise; calibrates the metric floor.
    NoiseOracle,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub best_match_mse: f64,
    pub index_aligned_mse: f64,
    pub failed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    pub best_match_mse: f64,
    pub index_aligned_mse: f64,
    pub cases: Vec<CaseResult>,
    pub failed_cases: usize,
}

fn score_case(case: &BenchCase, pred: &VideoClip, metric: FrameMetric) -> Result<CaseResult> {
    let (matching, distances) = best_match_align(pred, &case.target, metric)?;
    let best_match_mse = distances.iter().sum::<f64>() / distances.len() as f64;
    let mut aligned = 0.0;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (i, &m) in matching.iter().enumerate() {
        aligned += metrics::mse(pred.frame(i), case.target.frame(i));
        let gt = case.target.frame(m);
        psnr_sum += metrics::psnr(pred.frame(i), gt);
        ssim_sum += metrics::ssim(pred.frame(i), gt, pred.h, pred.w, pred.c);
    }
    Ok(CaseResult {
        case_id: case.case_id,
        psnr: psnr_sum / pred.t as f64,
        ssim: ssim_sum / pred.t as f64,
        best_match_mse,
        index_aligned_mse: aligned / pred.t as f64,
        failed: false,
    })
}

fn predict_case(
    continuer: &Continuer<'_>,
    memory: &Model,
    case: &BenchCase,
    mode: EvalMode,
    seed: u64,
) -> Result<VideoClip> {
    match continuer {
        Continuer::ReplayOracle => Ok(case.memorize.reversed()),
        Continuer::NoiseOracle => {
            let mut rng = Rng::new(derive_seed_idx(seed, case.case_id));
            let mut frames = vec![0.0f32; case.target.frames.len()];
            for v in frames.iter_mut() {
                *v = rng.normal().clamp(0.0, 1.0);
            }
            Ok(VideoClip {
                frames,
                t: case.target.t,
                h: case.target.h,
                w: case.target.w,
                c: case.target.c,
                condition: case.condition,
                trajectory: None,
            })
        }
        Continuer::Model {
            generator,
            mode: cache_mode,
            sample_steps,
            null_condition,
        } => {
            let cfg = &generator.cfg;
            let b = cfg.block_frames;
            if !case.target.t.is_multiple_of(b) {
                return Err(MagError::Shape(format!(
                    "target length {} not divisible by block size {b}",
                    case.target.t
                )));
            }
            let cond = if *null_condition {
                SceneCondition::null()
            } else {
                case.condition
            };
            let mut session = StreamSession::new(generator, memory, *cache_mode, *sample_steps)?;
            session.ingest_history(&case.memorize)?;
            let case_seed = derive_seed_idx(seed, case.case_id);
            let mut frames = Vec::with_capacity(case.target.frames.len());
            for blk in 0..case.target.t / b {
                match mode {
                    EvalMode::HistoryContext => {
                        frames.extend(session.generate_block(cond, case_seed)?);
                    }
                    EvalMode::GroundTruth => {
                        frames.extend(session.generate_block_peek(cond, case_seed)?);
                        session.ingest_history(&case.target.slice_frames(blk * b, b))?;
                    }
                }
            }
            Ok(VideoClip {
                frames,
                t: case.target.t,
                h: case.target.h,
                w: case.target.w,
                c: case.target.c,
                condition: case.condition,
                trajectory: None,
            })
        }
    }
}

/// Evaluate a continuer over the bench. Failed cases are excluded from the
/// aggregates but counted.
pub fn evaluate_model(
    continuer: &Continuer<'_>,
    memory: &Model,
    bench: &[BenchCase],
    mode: EvalMode,
    metric: FrameMetric,
    label: &str,
    seed: u64,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if bench.is_empty() {
        return Err(MagError::Config("bench is empty".into()));
    }
    let results: Vec<CaseResult> = bench
        .par_iter()
        .map(|case| match predict_case(continuer, memory, case, mode, seed) {
            Ok(pred) => score_case(case, &pred, metric).unwrap_or(CaseResult {
                case_id: case.case_id,
                psnr: 0.0,
                ssim: 0.0,
                best_match_mse: f64::MAX,
                index_aligned_mse: f64::MAX,
                failed: true,
            }),
            Err(_) => CaseResult {
                case_id: case.case_id,
                psnr: 0.0,
                ssim: 0.0,
                best_match_mse: f64::MAX,
                index_aligned_mse: f64::MAX,
                failed: true,
            },
        })
        .collect();
    let ok: Vec<&CaseResult> = results.iter().filter(|r| !r.failed).collect();
    if ok.is_empty() {
        return Err(MagError::Training(format!(
            "every bench case failed for '{label}'"
        )));
    }
    let n = ok.len() as f64;
    Ok(EvalReport {
        mode,
        label: label.to_string(),
        psnr: ok.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: ok.iter().map(|r| r.ssim).sum::<f64>() / n,
        best_match_mse: ok.iter().map(|r| r.best_match_mse).sum::<f64>() / n,
        index_aligned_mse: ok.iter().map(|r| r.index_aligned_mse).sum::<f64>() / n,
        failed_cases: results.len() - ok.len(),
        cases: results,
    })
}

// ---------------------------------------------------------------------------
// Comparison table
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    /// (label, psnr, ssim, best_match_mse), best first.
    pub rows: Vec<(String, f64, f64, f64)>,
}

/// Rank reports by PSNR, ties broken by SSIM then best-match MSE.
pub fn compare(reports: &[EvalReport]) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(MagError::Config("comparison needs >= 2 reports".into()));
    }
    let mut rows: Vec<(String, f64, f64, f64)> = reports
        .iter()
        .map(|r| (r.label.clone(), r.psnr, r.ssim, r.best_match_mse))
        .collect();
    rows.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(b.2.partial_cmp(&a.2).unwrap())
            .then(a.3.partial_cmp(&b.3).unwrap())
    });
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,psnr,ssim,best_match_mse\n");
        for (label, p, s, m) in &self.rows {
            out.push_str(&format!("{label},{p:.4},{s:.4},{m:.6}\n"));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<28} {:>8} {:>8} {:>14}\n",
            "label", "PSNR", "SSIM", "best-match MSE"
        );
        for (label, p, s, m) in &self.rows {
            out.push_str(&format!("{label:<28} {p:>8.2} {s:>8.3} {m:>14.6}\n"));
        }
        out
    }
}
