//! The diffusion transformer shared by teacher, student, generator and
//! memory models: patch embedding, additive time/condition embeddings,
//! pre-norm attention blocks with rotary positions, and a velocity head.
//!
//! One forward serves every role. The caller controls the mask (bidirectional
//! scoring, all-visible generation over a cache, or the encode-decode
//! training mask) and whether cache K/V are prepended. Per-layer K/V of the
//! current tokens are always returned; pipelines append them to a cache only
//! after a clean (re-encoding) pass.

use super::config::ModelConfig;
use super::kv_cache::{KvCache, LayerKv};
use super::mask::AttentionMask;
use crate::error::{MagError, Result};
use crate::nn::kernels::rope_tables;
use crate::nn::{GradMap, Gradients, Graph, ParamSet, Tensor, Var};
use crate::rng::Rng;
use crate::synthworld::SceneCondition;

#[derive(Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

/// Parameter vars bound into one graph; shared across forwards in a chain so
/// gradients accumulate on a single leaf per parameter.
pub struct BoundModel {
    vars: Vec<(String, Var)>,
    pub trainable: bool,
}

impl BoundModel {
    fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unbound param {name}"))
            .1
    }
}

pub enum TokenInput {
    Const(Tensor),
    Node(Var),
}

pub struct ForwardInput<'a> {
    pub tokens: TokenInput,
    /// Interpolant time per token, in [0, 1].
    pub t_tokens: Vec<f32>,
    pub positions: Vec<u32>,
    pub cond: SceneCondition,
    pub cache: Option<&'a KvCache>,
    pub mask: &'a AttentionMask,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub velocity: Var,
    pub layer_kv: Vec<LayerKv>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut p = ParamSet::new();
        let d = cfg.d_model;
        let pd = cfg.patch_dim();
        let td = cfg.time_embed_dim;
        let scale = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();

        p.insert("patch_in.w", Tensor::randn(vec![pd, d], scale(pd), &mut rng));
        p.insert("patch_in.b", Tensor::zeros(vec![d]));
        // Within-frame spatial identity; temporal order lives in the rotary
        // positions so this table is invariant to start-index shifts.
        p.insert(
            "spatial.emb",
            Tensor::randn(vec![cfg.frame_tokens(), d], 0.5 * scale(d), &mut rng),
        );
        p.insert("time.w1", Tensor::randn(vec![td, d], scale(td), &mut rng));
        p.insert("time.b1", Tensor::zeros(vec![d]));
        p.insert("time.w2", Tensor::randn(vec![d, d], scale(d), &mut rng));
        p.insert("time.b2", Tensor::zeros(vec![d]));
        p.insert("cond.scene", Tensor::randn(vec![cfg.scene_vocab, d], 0.02, &mut rng));
        p.insert("cond.motion", Tensor::randn(vec![cfg.motion_vocab, d], 0.02, &mut rng));
        p.insert("cond.null", Tensor::randn(vec![1, d], 0.02, &mut rng));
        for l in 0..cfg.layers {
            p.insert(format!("layer{l}.ln1.g"), Tensor::full(vec![d], 1.0));
            p.insert(format!("layer{l}.ln1.b"), Tensor::zeros(vec![d]));
            p.insert(format!("layer{l}.wq"), Tensor::randn(vec![d, d], scale(d), &mut rng));
            p.insert(format!("layer{l}.wk"), Tensor::randn(vec![d, d], scale(d), &mut rng));
            p.insert(format!("layer{l}.wv"), Tensor::randn(vec![d, d], scale(d), &mut rng));
            p.insert(format!("layer{l}.wo"), Tensor::randn(vec![d, d], scale(d), &mut rng));
            p.insert(format!("layer{l}.bo"), Tensor::zeros(vec![d]));
            p.insert(format!("layer{l}.ln2.g"), Tensor::full(vec![d], 1.0));
            p.insert(format!("layer{l}.ln2.b"), Tensor::zeros(vec![d]));
            p.insert(format!("layer{l}.mlp.w1"), Tensor::randn(vec![d, 4 * d], scale(d), &mut rng));
            p.insert(format!("layer{l}.mlp.b1"), Tensor::zeros(vec![4 * d]));
            p.insert(format!("layer{l}.mlp.w2"), Tensor::randn(vec![4 * d, d], scale(4 * d), &mut rng));
            p.insert(format!("layer{l}.mlp.b2"), Tensor::zeros(vec![d]));
        }
        p.insert("final.ln.g", Tensor::full(vec![d], 1.0));
        p.insert("final.ln.b", Tensor::zeros(vec![d]));
        p.insert("head.w", Tensor::randn(vec![d, pd], 0.02 * scale(d), &mut rng));
        p.insert("head.b", Tensor::zeros(vec![pd]));
        Ok(Model { cfg, params: p })
    }

    /// Copy of `self` with weights taken from `source`; layouts must match.
    pub fn with_params_from(cfg: ModelConfig, source: &Model) -> Result<Model> {
        let probe = Model::new(cfg.clone(), 0)?;
        if !probe.params.same_layout(&source.params) {
            return Err(MagError::Checkpoint(
                "model configurations are not weight-compatible".into(),
            ));
        }
        Ok(Model {
            cfg,
            params: source.params.clone(),
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut vars = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            vars.push((name.to_string(), v));
        }
        BoundModel { vars, trainable }
    }

    /// Gather this model's parameter gradients out of a backward pass.
    pub fn collect_grads(&self, bound: &BoundModel, grads: &Gradients) -> GradMap {
        let mut out = GradMap::new();
        for (name, var) in &bound.vars {
            if let Some(g) = grads.grad_of(*var) {
                out.accumulate(name, g);
            }
        }
        out
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundModel, input: &ForwardInput<'_>) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let n = input.positions.len();
        if input.t_tokens.len() != n {
            return Err(MagError::Shape(format!(
                "{} t values for {n} positions",
                input.t_tokens.len()
            )));
        }
        if let Some(&p) = input.positions.iter().max() {
            if p > cfg.max_position {
                return Err(MagError::Horizon(format!(
                    "position {p} exceeds configured horizon {}",
                    cfg.max_position
                )));
            }
        }
        let cache_len = input.cache.map_or(0, |c| c.len());
        if let Some(c) = input.cache {
            if c.d_model() != cfg.d_model || c.layers() != cfg.layers {
                return Err(MagError::Cache(format!(
                    "cache layout {}x{} does not match model {}x{}",
                    c.layers(),
                    c.d_model(),
                    cfg.layers,
                    cfg.d_model
                )));
            }
        }
        if input.mask.nq() != n || input.mask.nk() != cache_len + n {
            return Err(MagError::Mask(format!(
                "mask {}x{} does not fit {} tokens over cache {cache_len}",
                input.mask.nq(),
                input.mask.nk(),
                n
            )));
        }

        let tokens = match &input.tokens {
            TokenInput::Const(t) => {
                if t.rows() != n || t.cols() != cfg.patch_dim() {
                    return Err(MagError::Shape(format!(
                        "token tensor {:?}, expected {n}x{}",
                        t.shape(),
                        cfg.patch_dim()
                    )));
                }
                g.constant(t.clone())
            }
            TokenInput::Node(v) => {
                let t = g.value(*v);
                if t.rows() != n || t.cols() != cfg.patch_dim() {
                    return Err(MagError::Shape(format!(
                        "token node {:?}, expected {n}x{}",
                        t.shape(),
                        cfg.patch_dim()
                    )));
                }
                *v
            }
        };

        // Embed: patches + spatial identity + time + condition.
        let w_in = bound.get("patch_in.w");
        let b_in = bound.get("patch_in.b");
        let mut h = g.matmul(tokens, w_in);
        h = g.add_row(h, b_in);
        let f = cfg.frame_tokens();
        let spatial_idx: Vec<usize> = (0..n).map(|i| i % f).collect();
        let spatial = g.gather_rows(bound.get("spatial.emb"), &spatial_idx);
        h = g.add(h, spatial);

        let tfeat = g.constant(time_features(&input.t_tokens, cfg.time_embed_dim));
        let t1 = g.matmul(tfeat, bound.get("time.w1"));
        let t1 = g.add_row(t1, bound.get("time.b1"));
        let t1 = g.silu(t1);
        let t2 = g.matmul(t1, bound.get("time.w2"));
        let temb = g.add_row(t2, bound.get("time.b2"));
        h = g.add(h, temb);

        let cond_row = self.condition_row(g, bound, &input.cond)?;
        h = g.add_row(h, cond_row);

        let rot = rope_tables(&input.positions, cfg.heads, cfg.head_dim(), cfg.rope_base);
        let mut layer_kv = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let a = g.layer_norm(h, bound.get(&format!("layer{l}.ln1.g")), bound.get(&format!("layer{l}.ln1.b")));
            let q = g.matmul(a, bound.get(&format!("layer{l}.wq")));
            let k = g.matmul(a, bound.get(&format!("layer{l}.wk")));
            let v = g.matmul(a, bound.get(&format!("layer{l}.wv")));
            let q = g.rope(q, rot.clone());
            let k = g.rope(k, rot.clone());
            layer_kv.push(LayerKv {
                k: g.value(k).clone(),
                v: g.value(v).clone(),
            });
            let (k_full, v_full) = match input.cache {
                Some(c) if cache_len > 0 => {
                    let ck = g.constant(c.keys_tensor(l));
                    let cv = g.constant(c.values_tensor(l));
                    (g.concat_rows(&[ck, k]), g.concat_rows(&[cv, v]))
                }
                _ => (k, v),
            };
            let attn = g.attention(q, k_full, v_full, input.mask, cfg.heads)?;
            let proj = g.matmul(attn, bound.get(&format!("layer{l}.wo")));
            let proj = g.add_row(proj, bound.get(&format!("layer{l}.bo")));
            h = g.add(h, proj);

            let m = g.layer_norm(h, bound.get(&format!("layer{l}.ln2.g")), bound.get(&format!("layer{l}.ln2.b")));
            let m1 = g.matmul(m, bound.get(&format!("layer{l}.mlp.w1")));
            let m1 = g.add_row(m1, bound.get(&format!("layer{l}.mlp.b1")));
            let m1 = g.silu(m1);
            let m2 = g.matmul(m1, bound.get(&format!("layer{l}.mlp.w2")));
            let m2 = g.add_row(m2, bound.get(&format!("layer{l}.mlp.b2")));
            h = g.add(h, m2);
        }

        let fin = g.layer_norm(h, bound.get("final.ln.g"), bound.get("final.ln.b"));
        let out = g.matmul(fin, bound.get("head.w"));
        let velocity = g.add_row(out, bound.get("head.b"));
        Ok(ForwardOutput { velocity, layer_kv })
    }

    fn condition_row(&self, g: &mut Graph, bound: &BoundModel, cond: &SceneCondition) -> Result<Var> {
        if cond.is_null {
            return Ok(g.gather_rows(bound.get("cond.null"), &[0]));
        }
        let scene = cond.scene_id as usize;
        let motion = cond.motion_id as usize;
        if scene >= self.cfg.scene_vocab || motion >= self.cfg.motion_vocab {
            return Err(MagError::Config(format!(
                "condition ids ({scene},{motion}) outside vocab ({},{})",
                self.cfg.scene_vocab, self.cfg.motion_vocab
            )));
        }
        let s = g.gather_rows(bound.get("cond.scene"), &[scene]);
        let m = g.gather_rows(bound.get("cond.motion"), &[motion]);
        Ok(g.add(s, m))
    }
}

/// Sinusoidal features of t in [0,1], scaled by 1000 as is conventional for
/// diffusion timesteps.
pub fn time_features(t_tokens: &[f32], dim: usize) -> Tensor {
    assert!(dim.is_multiple_of(2));
    let half = dim / 2;
    let n = t_tokens.len();
    let mut data = vec![0.0f32; n * dim];
    for (i, &t) in t_tokens.iter().enumerate() {
        let ts = (t as f64) * 1000.0;
        for j in 0..half {
            let freq = 10000f64.powf(-(j as f64) / half.max(1) as f64);
            data[i * dim + j] = (ts * freq).sin() as f32;
            data[i * dim + half + j] = (ts * freq).cos() as f32;
        }
    }
    Tensor::new(vec![n, dim], data)
}

// ---------------------------------------------------------------------------
// Pixel <-> token layout
// ---------------------------------------------------------------------------

/// Frames (T, H, W, C) row-major -> tokens (T*f, patch*patch*C). Tokens are
/// frame-major, patch-grid row-major inside a frame.
pub fn patchify(frames: &[f32], n_frames: usize, cfg: &ModelConfig) -> Tensor {
    let (h, w, c, p) = (cfg.frame_h, cfg.frame_w, cfg.channels, cfg.patch_size);
    assert_eq!(frames.len(), n_frames * h * w * c);
    let (gh, gw) = (h / p, w / p);
    let pd = p * p * c;
    let f = gh * gw;
    let mut out = vec![0.0f32; n_frames * f * pd];
    for t in 0..n_frames {
        let fbase = t * h * w * c;
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = t * f + gy * gw + gx;
                let obase = tok * pd;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            let src = fbase + ((gy * p + dy) * w + (gx * p + dx)) * c + ch;
                            out[obase + (dy * p + dx) * c + ch] = frames[src];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n_frames * f, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, n_frames: usize, cfg: &ModelConfig) -> Vec<f32> {
    let (h, w, c, p) = (cfg.frame_h, cfg.frame_w, cfg.channels, cfg.patch_size);
    let (gh, gw) = (h / p, w / p);
    let pd = p * p * c;
    let f = gh * gw;
    assert_eq!(tokens.rows(), n_frames * f);
    assert_eq!(tokens.cols(), pd);
    let mut out = vec![0.0f32; n_frames * h * w * c];
    let data = tokens.data();
    for t in 0..n_frames {
        let fbase = t * h * w * c;
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = t * f + gy * gw + gx;
                let ibase = tok * pd;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            let dst = fbase + ((gy * p + dy) * w + (gx * p + dx)) * c + ch;
                            out[dst] = data[ibase + (dy * p + dx) * c + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Token positions for frames starting at global frame index `start_frame`,
/// shifted by `start_offset` tokens.
pub fn token_positions(start_offset: u32, start_frame: u32, n_frames: usize, f: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(n_frames * f);
    for g in 0..n_frames as u32 {
        for j in 0..f as u32 {
            out.push(start_offset + (start_frame + g) * f as u32 + j);
        }
    }
    out
}
