//! Score-difference training of the few-step generator.
//!
//! The generator is pushed toward the frozen teacher's distribution by the
//! difference between the student's and the teacher's velocity predictions
//! on the generator's own samples; the student tracks the generator through
//! ordinary flow matching, so the difference vanishes exactly when the two
//! agree. Clips beyond the first may be produced under an empty condition
//! (probability lambda), which removes the conditioning shortcut and makes
//! the cache the only route to a consistent continuation.

use super::{draw_t, few_step_sample_tokens, interpolate};
use crate::error::{MagError, Result};
use crate::model::mask::{build_inference_mask, AttentionMask};
use crate::model::{token_positions, ForwardInput, KvCache, Model, TokenInput};
use crate::nn::{GradMap, Graph, Tensor};
use crate::rng::Rng;
use crate::synthworld::SceneCondition;

/// Floor for the normalizer, so the direction never divides by ~0.
pub const NORM_FLOOR: f32 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct DmdConfig {
    /// Scale the score difference by its mean absolute value.
    pub normalize: bool,
    /// Euler steps of the generator's sampling path.
    pub sample_steps: usize,
}

impl Default for DmdConfig {
    fn default() -> Self {
        DmdConfig {
            normalize: true,
            sample_steps: 4,
        }
    }
}

/// Teacher and student velocity predictions at the same (xt, t).
pub struct ScorePair {
    pub teacher_pred: Tensor,
    pub student_pred: Tensor,
}

/// Direction applied to the generator's output: (student - teacher),
/// optionally scaled by 1/max(mean|diff|, floor). Descending the surrogate
/// <stopgrad(direction), x> moves samples toward the teacher's prediction,
/// i.e. down the divergence between generator and teacher distributions.
pub fn score_difference(pair: &ScorePair, normalize: bool) -> Tensor {
    assert_eq!(pair.teacher_pred.shape(), pair.student_pred.shape());
    let mut diff = Tensor::new(
        pair.teacher_pred.shape().to_vec(),
        pair.student_pred
            .data()
            .iter()
            .zip(pair.teacher_pred.data())
            .map(|(s, t)| s - t)
            .collect(),
    );
    if normalize {
        let scale = 1.0 / diff.mean_abs().max(NORM_FLOOR);
        for v in diff.data_mut() {
            *v *= scale;
        }
    }
    diff
}

/// Per-clip condition draw: the first clip keeps its condition; later clips
/// are replaced by the empty condition with probability lambda.
pub fn history_condition_sample(
    lambda: f64,
    cond: SceneCondition,
    i: usize,
    rng: &mut Rng,
) -> SceneCondition {
    debug_assert!((0.0..=1.0).contains(&lambda));
    if i <= 1 {
        cond
    } else if rng.bernoulli(lambda) {
        SceneCondition::null()
    } else {
        cond
    }
}

/// Everything recorded about one clip of a rollout that the training step
/// needs to re-run its sampling path exactly.
#[derive(Clone)]
pub struct ClipRecord {
    pub index: usize,
    pub cond_true: SceneCondition,
    pub cond_used: SceneCondition,
    /// Initial noise per block, (block_tokens, patch_dim).
    pub block_noise: Vec<Tensor>,
    /// Cache state before each block was generated.
    pub block_caches: Vec<KvCache>,
    pub block_positions: Vec<Vec<u32>>,
    /// Final clean tokens of the whole clip.
    pub tokens: Tensor,
    pub clip_positions: Vec<u32>,
    pub n_frames: usize,
}

pub struct DmdStepInfo {
    pub clip_index: usize,
    pub t: f32,
    pub lambda_draw: bool,
    pub direction_mean_abs: f32,
    pub surrogate: f32,
}

/// Backpropagate <stopgrad(direction), G(z)> through the recorded sampling
/// path of one clip, caches held constant. Exposed separately so tests can
/// drive it with a custom direction.
pub fn dmd_surrogate_grads(
    generator: &Model,
    clip: &ClipRecord,
    direction: &Tensor,
    sample_steps: usize,
) -> Result<(GradMap, f32)> {
    let mut g = Graph::new();
    let bound = generator.bind(&mut g, true);
    let block_tokens = generator.cfg.block_tokens();
    let mut total = None;
    for (bi, noise) in clip.block_noise.iter().enumerate() {
        let x = few_step_sample_tokens(
            generator,
            &mut g,
            &bound,
            noise,
            clip.cond_used,
            Some(&clip.block_caches[bi]),
            &clip.block_positions[bi],
            sample_steps,
        )?;
        let coeff = direction.slice_rows(bi * block_tokens, block_tokens);
        let part = g.dot_const(x, coeff);
        total = Some(match total {
            None => part,
            Some(acc) => g.add(acc, part),
        });
    }
    let loss = total.ok_or_else(|| MagError::Config("clip record has no blocks".into()))?;
    let value = g.value(loss).scalar();
    if !value.is_finite() {
        return Err(MagError::Numeric("surrogate loss is non-finite".into()));
    }
    let grads = g.backward(loss);
    Ok((generator.collect_grads(&bound, &grads), value))
}

/// One generator update on a sampled clip: noise the clip, score it with the
/// frozen teacher (true condition, no history) and the student (condition as
/// generated, history cache), then push the sampling path along the
/// stop-gradient score difference.
pub fn dmd_generator_step(
    generator: &Model,
    student: &Model,
    teacher: &Model,
    clip: &ClipRecord,
    cfg: &DmdConfig,
    rng: &mut Rng,
) -> Result<(GradMap, DmdStepInfo)> {
    let t = draw_t(rng);
    let x0 = Tensor::randn(clip.tokens.shape().to_vec(), 1.0, rng);
    let xt = interpolate(&x0, &clip.tokens, t);
    let n = clip.tokens.rows();
    let f = generator.cfg.frame_tokens();

    // Teacher scores the clip in its own frame of reference.
    let teacher_pred = {
        let mut g = Graph::inference();
        let bound = teacher.bind(&mut g, false);
        let mask = AttentionMask::bidirectional(n, n);
        let out = teacher.forward(
            &mut g,
            &bound,
            &ForwardInput {
                tokens: TokenInput::Const(xt.clone()),
                t_tokens: vec![t; n],
                positions: token_positions(0, 0, clip.n_frames, f),
                cond: clip.cond_true,
                cache: None,
                mask: &mask,
            },
        )?;
        g.value(out.velocity).clone()
    };

    // Student scores it as the generator produced it: same condition, same
    // positions, history cache prepended.
    let student_pred = {
        let mut g = Graph::inference();
        let bound = student.bind(&mut g, false);
        let history = &clip.block_caches[0];
        let mask = build_inference_mask(history.len(), n);
        let out = student.forward(
            &mut g,
            &bound,
            &ForwardInput {
                tokens: TokenInput::Const(xt),
                t_tokens: vec![t; n],
                positions: clip.clip_positions.clone(),
                cond: clip.cond_used,
                cache: Some(history),
                mask: &mask,
            },
        )?;
        g.value(out.velocity).clone()
    };

    let direction = score_difference(
        &ScorePair {
            teacher_pred,
            student_pred,
        },
        cfg.normalize,
    );
    let dir_mean = direction.mean_abs();
    let (grads, surrogate) = dmd_surrogate_grads(generator, clip, &direction, cfg.sample_steps)?;
    Ok((
        grads,
        DmdStepInfo {
            clip_index: clip.index,
            t,
            lambda_draw: clip.cond_used.is_null,
            direction_mean_abs: dir_mean,
            surrogate,
        },
    ))
}
