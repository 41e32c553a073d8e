//! Flow matching under the rectified convention: the interpolant is
//! xt = (1-t) x0 + t x1 with x0 ~ N(0, I) noise and x1 data, the regression
//! target is the constant velocity x1 - x0, and sampling integrates the
//! learned field with a few Euler steps from t=0 to t=1. Along a straight
//! path the oracle velocity reproduces x1 exactly at any step count.

pub mod dmd;

use crate::error::{MagError, Result};
use crate::model::mask::{build_inference_mask, AttentionMask};
use crate::model::{BoundModel, ForwardInput, KvCache, Model, TokenInput};
use crate::nn::{GradMap, Graph, Tensor, Var};
use crate::rng::Rng;
use crate::synthworld::SceneCondition;

/// Timestep draws avoid the exact endpoints.
pub const T_MIN: f32 = 0.02;
pub const T_MAX: f32 = 0.98;

pub fn draw_t(rng: &mut Rng) -> f32 {
    rng.uniform(T_MIN, T_MAX)
}

#[derive(Clone)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f32,
    pub xt: Tensor,
    pub v_target: Tensor,
}

pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f32) -> Tensor {
    assert_eq!(x0.shape(), x1.shape());
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

pub fn flow_sample(x1: &Tensor, t: f32, rng: &mut Rng) -> FlowSample {
    let x0 = Tensor::randn(x1.shape().to_vec(), 1.0, rng);
    let xt = interpolate(&x0, x1, t);
    let v_target = Tensor::new(
        x1.shape().to_vec(),
        x1.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect(),
    );
    FlowSample {
        x0,
        x1: x1.clone(),
        t,
        xt,
        v_target,
    }
}

/// One flow-matching evaluation over a clip of tokens.
pub struct FmTask<'a> {
    /// Clean data in token space, (n, patch_dim).
    pub data_tokens: &'a Tensor,
    pub cond: SceneCondition,
    pub cache: Option<&'a KvCache>,
    pub positions: Vec<u32>,
    pub mask: &'a AttentionMask,
}

/// mean || model(xt, t) - (x1 - x0) ||^2 with gradients for the model.
pub fn fm_loss(model: &Model, task: &FmTask<'_>, rng: &mut Rng) -> Result<(f32, GradMap)> {
    let t = draw_t(rng);
    fm_loss_at(model, task, t, rng)
}

pub fn fm_loss_at(model: &Model, task: &FmTask<'_>, t: f32, rng: &mut Rng) -> Result<(f32, GradMap)> {
    let sample = flow_sample(task.data_tokens, t, rng);
    let n = task.data_tokens.rows();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let out = model.forward(
        &mut g,
        &bound,
        &ForwardInput {
            tokens: TokenInput::Const(sample.xt.clone()),
            t_tokens: vec![t; n],
            positions: task.positions.clone(),
            cond: task.cond,
            cache: task.cache,
            mask: task.mask,
        },
    )?;
    let loss = g.mean_sq_diff(out.velocity, sample.v_target.clone());
    let loss_val = g.value(loss).scalar();
    if !loss_val.is_finite() {
        return Err(MagError::Numeric("flow-matching loss is non-finite".into()));
    }
    let grads = g.backward(loss);
    Ok((loss_val, model.collect_grads(&bound, &grads)))
}

/// Euler integration of the learned velocity field inside an existing graph;
/// the returned var is the final clean-token prediction and stays
/// differentiable with respect to the bound model.
#[allow(clippy::too_many_arguments)]
pub fn few_step_sample_tokens(
    model: &Model,
    g: &mut Graph,
    bound: &BoundModel,
    noise: &Tensor,
    cond: SceneCondition,
    cache: Option<&KvCache>,
    positions: &[u32],
    steps: usize,
) -> Result<Var> {
    if steps == 0 {
        return Err(MagError::Config("sampler needs steps >= 1".into()));
    }
    let n = positions.len();
    let cache_len = cache.map_or(0, |c| c.len());
    let mask = build_inference_mask(cache_len, n);
    let dt = 1.0 / steps as f32;
    let mut x = g.constant(noise.clone());
    for j in 0..steps {
        let t = j as f32 * dt;
        let out = model.forward(
            g,
            bound,
            &ForwardInput {
                tokens: TokenInput::Node(x),
                t_tokens: vec![t; n],
                positions: positions.to_vec(),
                cond,
                cache,
                mask: &mask,
            },
        )?;
        let stepv = g.scale(out.velocity, dt);
        x = g.add(x, stepv);
    }
    Ok(x)
}

/// Inference-mode sampling: returns the clean tokens as a plain tensor.
pub fn few_step_sample(
    model: &Model,
    noise: &Tensor,
    cond: SceneCondition,
    cache: Option<&KvCache>,
    positions: &[u32],
    steps: usize,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let bound = model.bind(&mut g, false);
    let x = few_step_sample_tokens(model, &mut g, &bound, noise, cond, cache, positions, steps)?;
    Ok(g.value(x).clone())
}
