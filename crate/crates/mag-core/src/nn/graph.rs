//! Reverse-mode autodiff over a fixed op set.
//!
//! A `Graph` is a tape: every op appends a node holding its value and enough
//! context to run its backward step. Node ids only ever reference earlier
//! nodes, so backward is a single reverse sweep. Graphs are built per
//! forward/loss evaluation and dropped afterwards.
//!
//! With `recording` off the tape stores values only (no softmax probs, no
//! layer-norm stats); that is the inference path used by rollouts, streaming
//! and evaluation.

use super::kernels::{self, AttentionSaved, LayerNormSaved, RopeTables};
use super::tensor::Tensor;
use crate::error::{MagError, Result};
use crate::model::mask::AttentionMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Step {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    /// x (n,d) + row (1,d) broadcast over rows.
    AddRow(Var, Var),
    MatMul(Var, Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        saved: LayerNormSaved,
    },
    Rope {
        x: Var,
        rot: RopeTables,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        saved: AttentionSaved,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    /// mean((x - target)^2) -> scalar
    MeanSqDiff {
        x: Var,
        target: Tensor,
    },
    /// sum(x * coeff) -> scalar
    DotConst {
        x: Var,
        coeff: Tensor,
    },
}

struct Node {
    value: Tensor,
    step: Step,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Inference-mode graph: values only, backward unavailable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, step: Step, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        debug_assert!(
            value.all_finite(),
            "graph op produced non-finite values (node {})",
            self.nodes.len()
        );
        let rg = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            step: if rg { step } else { Step::Leaf },
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (parameters).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Step::Leaf, true)
    }

    /// Non-trainable leaf (inputs, cached activations, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Step::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(t, Step::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(t, Step::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(t, Step::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.nodes[a.0].requires_grad;
        self.push(t, Step::Scale(a, s), rg)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let (n, d) = (vx.rows(), vx.cols());
        assert_eq!(vr.len(), d, "row broadcast width mismatch");
        let rdata = vr.data();
        let mut data = vx.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += rdata[j];
            }
        }
        let t = Tensor::new(vec![n, d], data);
        let rg = self.nodes[x.0].requires_grad || self.nodes[row.0].requires_grad;
        self.push(t, Step::AddRow(x, row), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (va.rows(), va.cols());
        let (k2, m) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let data = kernels::matmul(va.data(), vb.data(), n, k, m);
        let t = Tensor::new(vec![n, m], data);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(t, Step::MatMul(a, b), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| kernels::silu(v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Step::Silu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (n, d) = (vx.rows(), vx.cols());
        let vg = &self.nodes[gain.0].value;
        let vb = &self.nodes[bias.0].value;
        assert_eq!(vg.len(), d);
        assert_eq!(vb.len(), d);
        let (data, saved) = kernels::layer_norm_forward(vx.data(), vg.data(), vb.data(), n, d);
        let t = Tensor::new(vec![n, d], data);
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gain.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        self.push(t, Step::LayerNorm { x, gain, bias, saved }, rg)
    }

    pub fn rope(&mut self, x: Var, rot: RopeTables) -> Var {
        let vx = &self.nodes[x.0].value;
        let (n, d) = (vx.rows(), vx.cols());
        assert_eq!(d, rot.heads * rot.head_dim);
        let data = kernels::rope_forward(vx.data(), &rot, n, d);
        let t = Tensor::new(vec![n, d], data);
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Step::Rope { x, rot }, rg)
    }

    /// Masked multi-head scaled-dot-product attention.
    ///
    /// Rows of the mask with no visible key are rejected: that always means a
    /// mis-built mask upstream.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask, heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (nq, d) = (vq.rows(), vq.cols());
        let nk = vk.rows();
        if vk.cols() != d || vv.cols() != d || vv.rows() != nk {
            return Err(MagError::Shape(format!(
                "attention got q {:?} k {:?} v {:?}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            )));
        }
        if d % heads != 0 {
            return Err(MagError::Config(format!("d_model {d} not divisible by heads {heads}")));
        }
        if mask.nq() != nq || mask.nk() != nk {
            return Err(MagError::Mask(format!(
                "mask is {}x{} but attention is {nq}x{nk}",
                mask.nq(),
                mask.nk()
            )));
        }
        mask.ensure_no_hidden_rows()?;
        let rg = self.nodes[q.0].requires_grad
            || self.nodes[k.0].requires_grad
            || self.nodes[v.0].requires_grad;
        let save = rg && self.recording;
        let (data, saved) = kernels::attention_forward(
            vq.data(),
            vk.data(),
            vv.data(),
            mask.additive(),
            nq,
            nk,
            d,
            heads,
            save,
        );
        let t = Tensor::new(vec![nq, d], data);
        let step = match saved {
            Some(saved) => Step::Attention { q, k, v, heads, saved },
            None => Step::Leaf,
        };
        Ok(self.push(t, step, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let t = Tensor::concat_rows(&tensors);
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(t, Step::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let t = vx.slice_rows(start, len);
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Step::SliceRows { x, start }, rg)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let vt = &self.nodes[table.0].value;
        let d = vt.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(vt.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], data);
        let rg = self.nodes[table.0].requires_grad;
        self.push(
            t,
            Step::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// mean((x - target)^2), accumulated in f64.
    pub fn mean_sq_diff(&mut self, x: Var, target: Tensor) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape(), target.shape());
        let mut acc = 0.0f64;
        for (a, b) in vx.data().iter().zip(target.data()) {
            let dlt = (a - b) as f64;
            acc += dlt * dlt;
        }
        let t = Tensor::scalar_tensor((acc / vx.len() as f64) as f32);
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Step::MeanSqDiff { x, target }, rg)
    }

    /// sum(x * coeff), accumulated in f64.
    pub fn dot_const(&mut self, x: Var, coeff: Tensor) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape(), coeff.shape());
        let mut acc = 0.0f64;
        for (a, b) in vx.data().iter().zip(coeff.data()) {
            acc += (a * b) as f64;
        }
        let t = Tensor::scalar_tensor(acc as f32);
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Step::DotConst { x, coeff }, rg)
    }

    /// Reverse sweep from a scalar output. Returns per-node gradients for the
    /// nodes that required grad; read them out with `grad_of`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.recording, "backward on an inference graph");
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar_tensor(1.0));
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            match &node.step {
                Step::Leaf => {}
                Step::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.clone());
                }
                Step::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect());
                    self.accumulate(&mut grads, *b, neg);
                }
                Step::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                    );
                    let gb = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                    );
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Step::Scale(a, s) => {
                    let ga = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * s).collect());
                    self.accumulate(&mut grads, *a, ga);
                }
                Step::AddRow(x, row) => {
                    let d = self.nodes[row.0].value.len();
                    let n = g.len() / d;
                    let mut rsum = vec![0.0f32; d];
                    for i in 0..n {
                        for (j, r) in rsum.iter_mut().enumerate() {
                            *r += g.data()[i * d + j];
                        }
                    }
                    self.accumulate(&mut grads, *x, g.clone());
                    let rshape = self.nodes[row.0].value.shape().to_vec();
                    self.accumulate(&mut grads, *row, Tensor::new(rshape, rsum));
                }
                Step::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (n, k) = (va.rows(), va.cols());
                    let m = vb.cols();
                    // dA = dC . B^T ; dB = A^T . dC
                    let da = kernels::matmul_nt(g.data(), vb.data(), n, m, k);
                    let db = kernels::matmul_tn(va.data(), g.data(), n, k, m);
                    self.accumulate(&mut grads, *a, Tensor::new(vec![n, k], da));
                    self.accumulate(&mut grads, *b, Tensor::new(vec![k, m], db));
                }
                Step::Silu(x) => {
                    let vx = &self.nodes[x.0].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(gv, xv)| gv * kernels::silu_grad(*xv))
                        .collect();
                    self.accumulate(&mut grads, *x, Tensor::new(vx.shape().to_vec(), data));
                }
                Step::LayerNorm { x, gain, bias, saved } => {
                    let vx = &self.nodes[x.0].value;
                    let (n, d) = (vx.rows(), vx.cols());
                    let vg = &self.nodes[gain.0].value;
                    let (dx, dgain, dbias) =
                        kernels::layer_norm_backward(vx.data(), vg.data(), saved, g.data(), n, d);
                    self.accumulate(&mut grads, *x, Tensor::new(vec![n, d], dx));
                    let gshape = vg.shape().to_vec();
                    let bshape = self.nodes[bias.0].value.shape().to_vec();
                    self.accumulate(&mut grads, *gain, Tensor::new(gshape, dgain));
                    self.accumulate(&mut grads, *bias, Tensor::new(bshape, dbias));
                }
                Step::Rope { x, rot } => {
                    let vx = &self.nodes[x.0].value;
                    let (n, d) = (vx.rows(), vx.cols());
                    let dx = kernels::rope_backward(g.data(), rot, n, d);
                    self.accumulate(&mut grads, *x, Tensor::new(vec![n, d], dx));
                }
                Step::Attention { q, k, v, heads, saved } => {
                    let (vq, vk, vv) = (
                        &self.nodes[q.0].value,
                        &self.nodes[k.0].value,
                        &self.nodes[v.0].value,
                    );
                    let (nq, d) = (vq.rows(), vq.cols());
                    let nk = vk.rows();
                    let (dq, dk, dv) = kernels::attention_backward(
                        vq.data(),
                        vk.data(),
                        vv.data(),
                        saved,
                        g.data(),
                        nq,
                        nk,
                        d,
                        *heads,
                    );
                    self.accumulate(&mut grads, *q, Tensor::new(vec![nq, d], dq));
                    self.accumulate(&mut grads, *k, Tensor::new(vec![nk, d], dk));
                    self.accumulate(&mut grads, *v, Tensor::new(vec![nk, d], dv));
                }
                Step::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.rows();
                        let part = g.slice_rows(start, rows);
                        self.accumulate(&mut grads, *p, part);
                        start += rows;
                    }
                }
                Step::SliceRows { x, start } => {
                    let vx = &self.nodes[x.0].value;
                    let (n, d) = (vx.rows(), vx.cols());
                    let mut dx = vec![0.0f32; n * d];
                    let len = g.rows();
                    dx[start * d..(start + len) * d].copy_from_slice(g.data());
                    self.accumulate(&mut grads, *x, Tensor::new(vec![n, d], dx));
                }
                Step::GatherRows { table, idx } => {
                    let vt = &self.nodes[table.0].value;
                    let d = vt.cols();
                    let mut dt = vec![0.0f32; vt.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g.data()[r * d + j];
                        }
                    }
                    self.accumulate(&mut grads, *table, Tensor::new(vt.shape().to_vec(), dt));
                }
                Step::MeanSqDiff { x, target } => {
                    let vx = &self.nodes[x.0].value;
                    let gs = g.scalar() * 2.0 / vx.len() as f32;
                    let data = vx
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| gs * (a - b))
                        .collect();
                    self.accumulate(&mut grads, *x, Tensor::new(vx.shape().to_vec(), data));
                }
                Step::DotConst { x, coeff } => {
                    let gs = g.scalar();
                    let data = coeff.data().iter().map(|c| gs * c).collect();
                    self.accumulate(&mut grads, *x, Tensor::new(coeff.shape().to_vec(), data));
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), g.shape());
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn grad_of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn quadratic_gradient_is_x() {
        // loss = mean(x^2) = mean((x-0)^2); grad = 2x/n
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 4], vec![1.0, -2.0, 3.0, 0.5]));
        let loss = g.mean_sq_diff(x, Tensor::zeros(vec![1, 4]));
        let grads = g.backward(loss);
        let gx = grads.grad_of(x).unwrap();
        for (gv, xv) in gx.data().iter().zip([1.0, -2.0, 3.0, 0.5]) {
            assert!((gv - 2.0 * xv / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_grads_match_manual() {
        // loss = sum(A.B * C) => dA = C.B^T, dB = A^T.C
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]));
        let b = g.param(Tensor::new(vec![2, 2], vec![0.5, -1., 2., 1.]));
        let c = Tensor::new(vec![2, 2], vec![1., 1., 1., 1.]);
        let prod = g.matmul(a, b);
        let loss = g.dot_const(prod, c);
        let grads = g.backward(loss);
        let da = grads.grad_of(a).unwrap();
        // C.B^T with C=ones: row sums of B columns... dA[i][l] = sum_j B[l][j]
        assert!((da.data()[0] - (-0.5)).abs() < 1e-6);
        assert!((da.data()[1] - 3.0).abs() < 1e-6);
        let db = grads.grad_of(b).unwrap();
        // dB[l][j] = sum_i A[i][l]
        assert!((db.data()[0] - 4.0).abs() < 1e-6);
        assert!((db.data()[2] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![2, 4], vec![0.3; 8]));
        let k = g.constant(Tensor::new(vec![1, 4], vec![0.1, 0.2, -0.1, 0.4]));
        let v = g.constant(Tensor::new(vec![1, 4], vec![9.0, -3.0, 2.0, 0.5]));
        let mask = AttentionMask::bidirectional(2, 1);
        let out = g.attention(q, k, v, &mask, 2).unwrap();
        for i in 0..2 {
            for (o, vv) in g.value(out).row(i).iter().zip([9.0, -3.0, 2.0, 0.5]) {
                assert!((o - vv).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rejects_hidden_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![2, 2], vec![0.0; 4]));
        let k = g.constant(Tensor::new(vec![2, 2], vec![0.0; 4]));
        let v = g.constant(Tensor::new(vec![2, 2], vec![0.0; 4]));
        let mut mask = AttentionMask::bidirectional(2, 2);
        mask.hide_row_for_test(1);
        let err = g.attention(q, k, v, &mask, 1).unwrap_err();
        assert!(matches!(err, MagError::Mask(_)));
    }

    #[test]
    fn inference_graph_skips_tape() {
        let mut g = Graph::inference();
        let x = g.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let y = g.scale(x, 3.0);
        assert_eq!(g.value(y).data(), &[3.0, 6.0]);
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn identity_visibility_returns_matching_value_rows() {
        let mut rng = Rng::new(5);
        let mut g = Graph::new();
        let n = 4;
        let q = g.constant(Tensor::randn(vec![n, 4], 1.0, &mut rng));
        let k = g.constant(Tensor::randn(vec![n, 4], 1.0, &mut rng));
        let v = g.constant(Tensor::randn(vec![n, 4], 1.0, &mut rng));
        let mask = AttentionMask::identity_for_test(n);
        let out = g.attention(q, k, v, &mask, 1).unwrap();
        let vv = g.value(v).clone();
        for i in 0..n {
            for (a, b) in g.value(out).row(i).iter().zip(vv.row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
