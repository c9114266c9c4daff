//! Tape-based reverse-mode differentiation over a fixed operator set.
//!
//! A [`Graph`] records every operation as it is evaluated. Tensors with a
//! leading batch axis are laid out `[B, C, H, W]` (images) or `[B, C]`
//! (vectors). [`Graph::backward`] walks the tape once in reverse and returns
//! the gradient of a scalar root with respect to every recorded node.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2 {
        x: usize,
        w: usize,
        b: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Clamp(usize, f64, f64),
    LayerNorm {
        x: usize,
        rstd: Vec<f64>,
    },
    Modulate {
        x: usize,
        scale: usize,
        shift: usize,
    },
    Blend {
        content: usize,
        noise: usize,
        gates: Vec<f64>,
    },
    RowScale {
        x: usize,
        factors: Vec<f64>,
    },
    Concat(usize, usize),
    Reshape(usize),
    Gram(usize),
    SqDistRows {
        x: usize,
        target: Tensor,
        reduce: Reduce,
    },
    SqDistToSet {
        x: usize,
        set_mean: Vec<f64>,
    },
    WeightedSum {
        x: usize,
        weights: Vec<f64>,
    },
    Mean(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar root, indexed by node.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }
}

/// Recording of one forward computation.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!("node {} does not belong to this graph", v.index)));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Trainable (or otherwise differentiated) input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// 2-D convolution. `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::Graph(format!("conv2d: bad shapes x {xs:?}, w {ws:?}")));
        }
        ensure_shape(&[ws[0]], self.nodes[bi].value.shape())?;
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Graph("conv2d: kernel larger than padded input".into()));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; bsz * cout * ho * wo];
        {
            let xv = self.nodes[xi].value.data();
            let wv = self.nodes[wi].value.data();
            let bv = self.nodes[bi].value.data();
            let geo = ConvGeom {
                h,
                w: wd,
                ho,
                wo,
                k,
                stride,
                pad,
            };
            for bb in 0..bsz {
                for co in 0..cout {
                    let oplane = &mut out[(bb * cout + co) * ho * wo..][..ho * wo];
                    oplane.iter_mut().for_each(|v| *v = bv[co]);
                    for ci in 0..cin {
                        let iplane = &xv[(bb * cin + ci) * h * wd..][..h * wd];
                        let kern = &wv[(co * cin + ci) * k * k..][..k * k];
                        geo.accumulate_forward(iplane, kern, oplane);
                    }
                }
            }
        }
        let value = Tensor::new(vec![bsz, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                stride,
                pad,
            },
            &[xi, wi, bi],
        ))
    }

    /// Transposed convolution with kernel 2 and stride 2.
    /// `x: [B, Cin, H, W]`, `w: [Cin, Cout, 2, 2]`, `b: [Cout]` -> `[B, Cout, 2H, 2W]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::Graph(format!("conv_transpose2: bad shapes x {xs:?}, w {ws:?}")));
        }
        ensure_shape(&[ws[1]], self.nodes[bi].value.shape())?;
        let (bsz, cin, h, wd, cout) = (xs[0], xs[1], xs[2], xs[3], ws[1]);
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![0.0; bsz * cout * ho * wo];
        {
            let xv = self.nodes[xi].value.data();
            let wv = self.nodes[wi].value.data();
            let bv = self.nodes[bi].value.data();
            for bb in 0..bsz {
                for co in 0..cout {
                    let oplane = &mut out[(bb * cout + co) * ho * wo..][..ho * wo];
                    oplane.iter_mut().for_each(|v| *v = bv[co]);
                    for ci in 0..cin {
                        let iplane = &xv[(bb * cin + ci) * h * wd..][..h * wd];
                        let kern = &wv[(ci * cout + co) * 4..][..4];
                        for i in 0..h {
                            for j in 0..wd {
                                let v = iplane[i * wd + j];
                                let base = 2 * i * wo + 2 * j;
                                oplane[base] += v * kern[0];
                                oplane[base + 1] += v * kern[1];
                                oplane[base + wo] += v * kern[2];
                                oplane[base + wo + 1] += v * kern[3];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![bsz, cout, ho, wo], out)?;
        Ok(self.push(value, Op::ConvTranspose2 { x: xi, w: wi, b: bi }, &[xi, wi, bi]))
    }

    /// Affine map of rows. `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::Graph(format!("linear: bad shapes x {xs:?}, w {ws:?}")));
        }
        ensure_shape(&[ws[0]], self.nodes[bi].value.shape())?;
        let (bsz, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; bsz * dout];
        {
            let xv = self.nodes[xi].value.data();
            let wv = self.nodes[wi].value.data();
            let bv = self.nodes[bi].value.data();
            for bb in 0..bsz {
                let row = &xv[bb * din..][..din];
                for o in 0..dout {
                    let wr = &wv[o * din..][..din];
                    out[bb * dout + o] = bv[o] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let value = Tensor::new(vec![bsz, dout], out)?;
        Ok(self.push(value, Op::Linear { x: xi, w: wi, b: bi }, &[xi, wi, bi]))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ai].value.zip_map(&self.nodes[bi].value, f)?;
        Ok((ai, bi, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(ai, bi), &[ai, bi]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(ai, bi), &[ai, bi]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(ai, bi), &[ai, bi]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = self.nodes[ai].value.scale(s);
        Ok(self.push(v, Op::Scale(ai, s), &[ai]))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = self.nodes[ai].value.map(silu);
        Ok(self.push(v, Op::Silu(ai), &[ai]))
    }

    /// Elementwise clip to `[lo, hi]`; the gradient is zero where clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = self.nodes[ai].value.map(|x| x.clamp(lo, hi));
        Ok(self.push(v, Op::Clamp(ai, lo, hi), &[ai]))
    }

    /// Per-sample standardization over every non-batch element (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let bsz = xv.shape()[0];
        let n = xv.len() / bsz;
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(bsz);
        for row in out.data_mut().chunks_exact_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        Ok(self.push(out, Op::LayerNorm { x: xi, rstd }, &[xi]))
    }

    /// `x * (1 + scale) + shift` with `scale, shift: [B, C]` broadcast over
    /// the trailing axes of `x: [B, C, ...]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xi, si, hi) = (self.idx(x)?, self.idx(scale)?, self.idx(shift)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::Graph("modulate: x needs [B, C, ...]".into()));
        }
        ensure_shape(&xs[..2], self.nodes[si].value.shape())?;
        ensure_shape(&xs[..2], self.nodes[hi].value.shape())?;
        let spatial: usize = xs[2..].iter().product();
        let mut out = self.nodes[xi].value.clone();
        let sv = self.nodes[si].value.data();
        let hv = self.nodes[hi].value.data();
        for (bc, chunk) in out.data_mut().chunks_exact_mut(spatial).enumerate() {
            let (s, h) = (1.0 + sv[bc], hv[bc]);
            chunk.iter_mut().for_each(|v| *v = *v * s + h);
        }
        Ok(self.push(
            out,
            Op::Modulate {
                x: xi,
                scale: si,
                shift: hi,
            },
            &[xi, si, hi],
        ))
    }

    /// Per-sample convex blend `g_b * content + (1 - g_b) * noise`.
    pub fn blend(&mut self, content: Var, noise: Var, gates: &[f64]) -> Result<Var> {
        let (ci, ni) = (self.idx(content)?, self.idx(noise)?);
        let cv = &self.nodes[ci].value;
        ensure_shape(cv.shape(), self.nodes[ni].value.shape())?;
        let bsz = cv.shape()[0];
        if gates.len() != bsz {
            return Err(Error::Graph(format!("blend: {} gates for batch {bsz}", gates.len())));
        }
        let n = cv.len() / bsz;
        let mut out = cv.clone();
        let nv = self.nodes[ni].value.data();
        for (bb, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
            let g = gates[bb];
            for (o, z) in row.iter_mut().zip(&nv[bb * n..(bb + 1) * n]) {
                *o = g * *o + (1.0 - g) * z;
            }
        }
        Ok(self.push(
            out,
            Op::Blend {
                content: ci,
                noise: ni,
                gates: gates.to_vec(),
            },
            &[ci, ni],
        ))
    }

    /// Multiplies batch element `b` by `factors[b]`.
    pub fn row_scale(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let bsz = xv.shape()[0];
        if factors.len() != bsz {
            return Err(Error::Graph("row_scale: factor count != batch".into()));
        }
        let n = xv.len() / bsz;
        let mut out = xv.clone();
        for (row, f) in out.data_mut().chunks_exact_mut(n).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(
            out,
            Op::RowScale {
                x: xi,
                factors: factors.to_vec(),
            },
            &[xi],
        ))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (as_, bs) = (av.shape(), bv.shape());
        if as_.len() < 2 || as_.len() != bs.len() || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(Error::Graph(format!("concat: incompatible {as_:?} and {bs:?}")));
        }
        let bsz = as_[0];
        let (na, nb) = (av.len() / bsz, bv.len() / bsz);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for bb in 0..bsz {
            data.extend_from_slice(&av.data()[bb * na..(bb + 1) * na]);
            data.extend_from_slice(&bv.data()[bb * nb..(bb + 1) * nb]);
        }
        let mut shape = as_.to_vec();
        shape[1] += bs[1];
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(ai, bi), &[ai, bi]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(xi), &[xi]))
    }

    /// Gram matrices `F F^T / (H W)` of `x: [B, C, H, W]` (or `[B, C]`) -> `[B, C, C]`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let (bsz, c, hw) = gram_dims(xv.shape())?;
        let mut out = vec![0.0; bsz * c * c];
        for bb in 0..bsz {
            let f = &xv.data()[bb * c * hw..][..c * hw];
            let g = &mut out[bb * c * c..][..c * c];
            gram_into(f, c, hw, g);
        }
        let v = Tensor::new(vec![bsz, c, c], out)?;
        Ok(self.push(v, Op::Gram(xi), &[xi]))
    }

    /// Per-sample squared distance to a constant `target` of the same shape,
    /// reduced over the non-batch axes -> `[B]`.
    pub fn sq_dist_rows(&mut self, x: Var, target: &Tensor, reduce: Reduce) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        ensure_shape(xv.shape(), target.shape())?;
        let bsz = xv.shape()[0];
        let n = xv.len() / bsz;
        let denom = match reduce {
            Reduce::Mean => n as f64,
            Reduce::Sum => 1.0,
        };
        let out: Vec<f64> = xv
            .data()
            .chunks_exact(n)
            .zip(target.data().chunks_exact(n))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / denom)
            .collect();
        let v = Tensor::new(vec![bsz], out)?;
        Ok(self.push(
            v,
            Op::SqDistRows {
                x: xi,
                target: target.clone(),
                reduce,
            },
            &[xi],
        ))
    }

    /// Mean over the members of `set: [m, ...]` of the element-mean squared
    /// distance between each batch row of `x` and the member -> `[B]`.
    pub fn sq_dist_to_set(&mut self, x: Var, set: &Tensor) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let bsz = xv.shape()[0];
        let m = set.shape()[0];
        ensure_shape(&xv.shape()[1..], &set.shape()[1..])?;
        let n = xv.len() / bsz;
        let mut set_mean = vec![0.0; n];
        for member in set.data().chunks_exact(n) {
            for (s, v) in set_mean.iter_mut().zip(member) {
                *s += v / m as f64;
            }
        }
        let out: Vec<f64> = xv
            .data()
            .chunks_exact(n)
            .map(|row| {
                set.data()
                    .chunks_exact(n)
                    .map(|mem| row.iter().zip(mem).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n as f64)
                    .sum::<f64>()
                    / m as f64
            })
            .collect();
        let v = Tensor::new(vec![bsz], out)?;
        Ok(self.push(v, Op::SqDistToSet { x: xi, set_mean }, &[xi]))
    }

    /// `sum_b weights[b] * x[b]` for `x: [B]` -> scalar `[1]`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.len() != weights.len() {
            return Err(Error::Graph("weighted_sum: weight count != length".into()));
        }
        let s = xv.data().iter().zip(weights).map(|(a, w)| a * w).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x: xi,
                weights: weights.to_vec(),
            },
            &[xi],
        ))
    }

    /// Mean of all elements -> scalar `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let m = self.nodes[xi].value.mean();
        Ok(self.push(Tensor::scalar(m), Op::Mean(xi), &[xi]))
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let ri = self.idx(root)?;
        if self.nodes[ri].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[ri].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[ri] = Some(vec![1.0]);
        for i in (0..=ri).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let xs = xv.shape();
                let ws = wv.shape();
                let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let geo = ConvGeom {
                    h,
                    w: wd,
                    ho: os[2],
                    wo: os[3],
                    k,
                    stride: *stride,
                    pad: *pad,
                };
                let plane_out = geo.ho * geo.wo;
                if self.wants(*b) {
                    let gb = grad_slot(grads, *b, cout);
                    for bb in 0..bsz {
                        for co in 0..cout {
                            gb[co] += g[(bb * cout + co) * plane_out..][..plane_out].iter().sum::<f64>();
                        }
                    }
                }
                if self.wants(*w) {
                    let gw = grad_slot(grads, *w, wv.len());
                    for bb in 0..bsz {
                        for co in 0..cout {
                            let gplane = &g[(bb * cout + co) * plane_out..][..plane_out];
                            for ci in 0..cin {
                                let iplane = &xv.data()[(bb * cin + ci) * h * wd..][..h * wd];
                                let gk = &mut gw[(co * cin + ci) * k * k..][..k * k];
                                geo.accumulate_weight_grad(iplane, gplane, gk);
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = grad_slot(grads, *x, xv.len());
                    for bb in 0..bsz {
                        for co in 0..cout {
                            let gplane = &g[(bb * cout + co) * plane_out..][..plane_out];
                            for ci in 0..cin {
                                let kern = &wv.data()[(co * cin + ci) * k * k..][..k * k];
                                let gi = &mut gx[(bb * cin + ci) * h * wd..][..h * wd];
                                geo.accumulate_input_grad(kern, gplane, gi);
                            }
                        }
                    }
                }
            }
            Op::ConvTranspose2 { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let xs = xv.shape();
                let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = wv.shape()[1];
                let (ho, wo) = (2 * h, 2 * wd);
                if self.wants(*b) {
                    let gb = grad_slot(grads, *b, cout);
                    for bb in 0..bsz {
                        for co in 0..cout {
                            gb[co] += g[(bb * cout + co) * ho * wo..][..ho * wo].iter().sum::<f64>();
                        }
                    }
                }
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                let mut gw = vec![0.0; if want_w { wv.len() } else { 0 }];
                let mut gx = vec![0.0; if want_x { xv.len() } else { 0 }];
                for bb in 0..bsz {
                    for co in 0..cout {
                        let gplane = &g[(bb * cout + co) * ho * wo..][..ho * wo];
                        for ci in 0..cin {
                            let base_x = (bb * cin + ci) * h * wd;
                            let kbase = (ci * cout + co) * 4;
                            let kern = &wv.data()[kbase..kbase + 4];
                            let mut acc = [0.0; 4];
                            for ii in 0..h {
                                for jj in 0..wd {
                                    let o = 2 * ii * wo + 2 * jj;
                                    let q = [gplane[o], gplane[o + 1], gplane[o + wo], gplane[o + wo + 1]];
                                    if want_w {
                                        let v = xv.data()[base_x + ii * wd + jj];
                                        for (a, qq) in acc.iter_mut().zip(q) {
                                            *a += v * qq;
                                        }
                                    }
                                    if want_x {
                                        gx[base_x + ii * wd + jj] +=
                                            q[0] * kern[0] + q[1] * kern[1] + q[2] * kern[2] + q[3] * kern[3];
                                    }
                                }
                            }
                            if want_w {
                                for (t, a) in gw[kbase..kbase + 4].iter_mut().zip(acc) {
                                    *t += a;
                                }
                            }
                        }
                    }
                }
                if want_w {
                    add_into(grad_slot(grads, *w, wv.len()), &gw);
                }
                if want_x {
                    add_into(grad_slot(grads, *x, xv.len()), &gx);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (bsz, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if self.wants(*b) {
                    let gb = grad_slot(grads, *b, dout);
                    for bb in 0..bsz {
                        add_into(gb, &g[bb * dout..(bb + 1) * dout]);
                    }
                }
                if self.wants(*w) {
                    let gw = grad_slot(grads, *w, wv.len());
                    for bb in 0..bsz {
                        let row = &xv.data()[bb * din..][..din];
                        for o in 0..dout {
                            let go = g[bb * dout + o];
                            for (t, xvv) in gw[o * din..][..din].iter_mut().zip(row) {
                                *t += go * xvv;
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = grad_slot(grads, *x, xv.len());
                    for bb in 0..bsz {
                        for o in 0..dout {
                            let go = g[bb * dout + o];
                            let wr = &wv.data()[o * din..][..din];
                            for (t, ww) in gx[bb * din..][..din].iter_mut().zip(wr) {
                                *t += go * ww;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &j in [a, b] {
                    if self.wants(j) {
                        add_into(grad_slot(grads, j, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(grad_slot(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let gb = grad_slot(grads, *b, g.len());
                    for (t, v) in gb.iter_mut().zip(g) {
                        *t -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.wants(*a) {
                    let ga = grad_slot(grads, *a, g.len());
                    for ((t, v), o) in ga.iter_mut().zip(g).zip(bv) {
                        *t += v * o;
                    }
                }
                if self.wants(*b) {
                    let gb = grad_slot(grads, *b, g.len());
                    for ((t, v), o) in gb.iter_mut().zip(g).zip(av) {
                        *t += v * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = grad_slot(grads, *a, g.len());
                for (t, v) in ga.iter_mut().zip(g) {
                    *t += s * v;
                }
            }
            Op::Silu(a) => {
                let av = self.nodes[*a].value.data();
                let ga = grad_slot(grads, *a, g.len());
                for ((t, v), x) in ga.iter_mut().zip(g).zip(av) {
                    *t += v * silu_grad(*x);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.nodes[*a].value.data();
                let ga = grad_slot(grads, *a, g.len());
                for ((t, v), x) in ga.iter_mut().zip(g).zip(av) {
                    if x > lo && x < hi {
                        *t += v;
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let n = y.len() / rstd.len();
                let gx = grad_slot(grads, *x, y.len());
                for (bb, r) in rstd.iter().enumerate() {
                    let gr = &g[bb * n..][..n];
                    let yr = &y[bb * n..][..n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((t, gi), yi) in gx[bb * n..][..n].iter_mut().zip(gr).zip(yr) {
                        *t += r * (gi - mg - yi * mgy);
                    }
                }
            }
            Op::Modulate { x, scale, shift } => {
                let xv = self.nodes[*x].value.data();
                let sv = self.nodes[*scale].value.data();
                let bc = sv.len();
                let spatial = xv.len() / bc;
                if self.wants(*scale) {
                    let gs = grad_slot(grads, *scale, bc);
                    for (j, t) in gs.iter_mut().enumerate() {
                        *t += g[j * spatial..][..spatial]
                            .iter()
                            .zip(&xv[j * spatial..][..spatial])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if self.wants(*shift) {
                    let gh = grad_slot(grads, *shift, bc);
                    for (j, t) in gh.iter_mut().enumerate() {
                        *t += g[j * spatial..][..spatial].iter().sum::<f64>();
                    }
                }
                if self.wants(*x) {
                    let gx = grad_slot(grads, *x, xv.len());
                    for j in 0..bc {
                        let s = 1.0 + sv[j];
                        for (t, v) in gx[j * spatial..][..spatial]
                            .iter_mut()
                            .zip(&g[j * spatial..][..spatial])
                        {
                            *t += s * v;
                        }
                    }
                }
            }
            Op::Blend { content, noise, gates } => {
                let n = g.len() / gates.len();
                if self.wants(*content) {
                    let gc = grad_slot(grads, *content, g.len());
                    for (bb, gate) in gates.iter().enumerate() {
                        for (t, v) in gc[bb * n..][..n].iter_mut().zip(&g[bb * n..][..n]) {
                            *t += gate * v;
                        }
                    }
                }
                if self.wants(*noise) {
                    let gz = grad_slot(grads, *noise, g.len());
                    for (bb, gate) in gates.iter().enumerate() {
                        for (t, v) in gz[bb * n..][..n].iter_mut().zip(&g[bb * n..][..n]) {
                            *t += (1.0 - gate) * v;
                        }
                    }
                }
            }
            Op::RowScale { x, factors } => {
                let n = g.len() / factors.len();
                let gx = grad_slot(grads, *x, g.len());
                for (bb, f) in factors.iter().enumerate() {
                    for (t, v) in gx[bb * n..][..n].iter_mut().zip(&g[bb * n..][..n]) {
                        *t += f * v;
                    }
                }
            }
            Op::Concat(a, b) => {
                let bsz = node.value.shape()[0];
                let na = self.nodes[*a].value.len() / bsz;
                let nb = self.nodes[*b].value.len() / bsz;
                if self.wants(*a) {
                    let ga = grad_slot(grads, *a, na * bsz);
                    for bb in 0..bsz {
                        add_into(&mut ga[bb * na..][..na], &g[bb * (na + nb)..][..na]);
                    }
                }
                if self.wants(*b) {
                    let gb = grad_slot(grads, *b, nb * bsz);
                    for bb in 0..bsz {
                        add_into(&mut gb[bb * nb..][..nb], &g[bb * (na + nb) + na..][..nb]);
                    }
                }
            }
            Op::Reshape(a) => add_into(grad_slot(grads, *a, g.len()), g),
            Op::Gram(x) => {
                let xv = &self.nodes[*x].value;
                let (bsz, c, hw) = gram_dims(xv.shape()).expect("validated in forward");
                let gx = grad_slot(grads, *x, xv.len());
                for bb in 0..bsz {
                    let f = &xv.data()[bb * c * hw..][..c * hw];
                    let gg = &g[bb * c * c..][..c * c];
                    let out = &mut gx[bb * c * hw..][..c * hw];
                    for i in 0..c {
                        for j in 0..c {
                            let coef = (gg[i * c + j] + gg[j * c + i]) / hw as f64;
                            if coef == 0.0 {
                                continue;
                            }
                            let fj = &f[j * hw..][..hw];
                            for (t, v) in out[i * hw..][..hw].iter_mut().zip(fj) {
                                *t += coef * v;
                            }
                        }
                    }
                }
            }
            Op::SqDistRows { x, target, reduce } => {
                let xv = self.nodes[*x].value.data();
                let n = xv.len() / g.len();
                let denom = match reduce {
                    Reduce::Mean => n as f64,
                    Reduce::Sum => 1.0,
                };
                let gx = grad_slot(grads, *x, xv.len());
                for (bb, gb) in g.iter().enumerate() {
                    let c = 2.0 * gb / denom;
                    for k in bb * n..(bb + 1) * n {
                        gx[k] += c * (xv[k] - target.data()[k]);
                    }
                }
            }
            Op::SqDistToSet { x, set_mean } => {
                let xv = self.nodes[*x].value.data();
                let n = set_mean.len();
                let gx = grad_slot(grads, *x, xv.len());
                for (bb, gb) in g.iter().enumerate() {
                    let c = 2.0 * gb / n as f64;
                    for (k, sm) in set_mean.iter().enumerate() {
                        gx[bb * n + k] += c * (xv[bb * n + k] - sm);
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let gx = grad_slot(grads, *x, weights.len());
                for (t, w) in gx.iter_mut().zip(weights) {
                    *t += g[0] * w;
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len();
                let gx = grad_slot(grads, *x, n);
                let c = g[0] / n as f64;
                gx.iter_mut().for_each(|t| *t += c);
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gram_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Graph(format!("gram: need [B, C, ...], got {shape:?}")));
    }
    let hw: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], hw.max(1)))
}

/// `g = f f^T / hw` for a `c x hw` row-major feature matrix.
pub(crate) fn gram_into(f: &[f64], c: usize, hw: usize, g: &mut [f64]) {
    for i in 0..c {
        for j in i..c {
            let s: f64 = f[i * hw..][..hw]
                .iter()
                .zip(&f[j * hw..][..hw])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / hw as f64;
            g[i * c + j] = s;
            g[j * c + i] = s;
        }
    }
}

/// Index arithmetic shared by the convolution forward and backward passes.
struct ConvGeom {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output columns `ox` for which `ox * stride + kx - pad` lies in `[0, w)`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn row_in(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }

    fn accumulate_forward(&self, input: &[f64], kern: &[f64], out: &mut [f64]) {
        for ky in 0..self.k {
            for kx in 0..self.k {
                let wv = kern[ky * self.k + kx];
                let (lo, hi) = self.col_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..self.ho {
                    let Some(iy) = self.row_in(oy, ky) else { continue };
                    let orow = &mut out[oy * self.wo..][..self.wo];
                    let irow = &input[iy * self.w..][..self.w];
                    let off = kx as isize - self.pad as isize;
                    if self.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        for (o, i) in orow[lo..hi].iter_mut().zip(&irow[start..start + hi - lo]) {
                            *o += wv * i;
                        }
                    } else {
                        for ox in lo..hi {
                            let ix = (ox * self.stride) as isize + off;
                            orow[ox] += wv * irow[ix as usize];
                        }
                    }
                }
            }
        }
    }

    fn accumulate_weight_grad(&self, input: &[f64], gout: &[f64], gk: &mut [f64]) {
        for ky in 0..self.k {
            for kx in 0..self.k {
                let (lo, hi) = self.col_range(kx);
                if lo >= hi {
                    continue;
                }
                let off = kx as isize - self.pad as isize;
                let mut acc = 0.0;
                for oy in 0..self.ho {
                    let Some(iy) = self.row_in(oy, ky) else { continue };
                    let grow = &gout[oy * self.wo..][..self.wo];
                    let irow = &input[iy * self.w..][..self.w];
                    if self.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        acc += grow[lo..hi]
                            .iter()
                            .zip(&irow[start..start + hi - lo])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    } else {
                        for ox in lo..hi {
                            let ix = (ox * self.stride) as isize + off;
                            acc += grow[ox] * irow[ix as usize];
                        }
                    }
                }
                gk[ky * self.k + kx] += acc;
            }
        }
    }

    fn accumulate_input_grad(&self, kern: &[f64], gout: &[f64], gin: &mut [f64]) {
        for ky in 0..self.k {
            for kx in 0..self.k {
                let wv = kern[ky * self.k + kx];
                let (lo, hi) = self.col_range(kx);
                if lo >= hi {
                    continue;
                }
                let off = kx as isize - self.pad as isize;
                for oy in 0..self.ho {
                    let Some(iy) = self.row_in(oy, ky) else { continue };
                    let grow = &gout[oy * self.wo..][..self.wo];
                    let irow = &mut gin[iy * self.w..][..self.w];
                    if self.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        for (i, o) in irow[start..start + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                            *i += wv * o;
                        }
                    } else {
                        for ox in lo..hi {
                            let ix = (ox * self.stride) as isize + off;
                            irow[ix as usize] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_draw, RngStream};

    /// Checks d(root)/d(leaf) for every leaf element by central differences.
    fn check(leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().cloned().map(|t| g.param(t)).collect();
        let root = build(&mut g, &vars).unwrap();
        let grads = g.backward(root).unwrap();
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(vars[li])
                .map(<[f64]>::to_vec)
                .unwrap_or(vec![0.0; leaf.len()]);
            for k in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == li {
                                t.data_mut()[k] += delta;
                            }
                            g2.param(t)
                        })
                        .collect();
                    let r = build(&mut g2, &vs).unwrap();
                    g2.value(r).unwrap().data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-5, "leaf {li} elem {k}: analytic {a} vs fd {fd}");
            }
        }
    }

    fn rand(seed: u64, shape: &[usize]) -> Tensor {
        gaussian_draw(&mut RngStream::new(seed, 0), shape)
    }

    #[test]
    fn conv2d_gradients_stride_and_pad() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            check(
                vec![
                    rand(1, &[2, 2, 5, 5]),
                    rand(2, &[3, 2, 3, 3]),
                    rand(3, &[3]),
                    rand(4, &[1]),
                ],
                |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                    let s = g.silu(y)?;
                    let q = g.mul(s, s)?;
                    g.mean(q)
                },
            );
        }
    }

    #[test]
    fn conv_transpose_and_concat_gradients() {
        check(
            vec![
                rand(5, &[2, 3, 2, 3]),
                rand(6, &[3, 2, 2, 2]),
                rand(7, &[2]),
                rand(8, &[2, 1, 4, 6]),
            ],
            |g, v| {
                let y = g.conv_transpose2(v[0], v[1], v[2])?;
                let c = g.concat(y, v[3])?;
                let s = g.silu(c)?;
                let s = g.clamp(s, -0.2, 0.9)?;
                let q = g.mul(s, c)?;
                g.mean(q)
            },
        );
    }

    #[test]
    fn linear_modulate_norm_gradients() {
        check(
            vec![
                rand(9, &[3, 4]),
                rand(10, &[2, 4]),
                rand(11, &[2]),
                rand(12, &[3, 2, 2, 2]),
                rand(13, &[3, 2]),
            ],
            |g, v| {
                let l = g.linear(v[0], v[1], v[2])?;
                let n = g.layer_norm(v[3])?;
                let m = g.modulate(n, l, v[4])?;
                let s = g.silu(m)?;
                let t = Tensor::full(&[3, 2, 2, 2], 0.3);
                let d = g.sq_dist_rows(s, &t, Reduce::Mean)?;
                g.weighted_sum(d, &[0.2, 0.5, 0.3])
            },
        );
    }

    #[test]
    fn blend_rowscale_gram_set_gradients() {
        let set = rand(14, &[3, 2, 2]);
        check(vec![rand(15, &[2, 2, 3, 1]), rand(16, &[2, 2, 3, 1])], move |g, v| {
            let b = g.blend(v[0], v[1], &[0.25, 0.9])?;
            let r = g.row_scale(b, &[1.5, -0.5])?;
            let gm = g.gram(r)?;
            let d = g.sq_dist_to_set(gm, &set)?;
            let diff = g.sub(v[0], v[1])?;
            let sc = g.scale(diff, 0.7)?;
            let rs = g.reshape(sc, &[2, 6])?;
            let e = g.sq_dist_rows(rs, &Tensor::zeros(&[2, 6]), Reduce::Sum)?;
            let tot = g.add(d, e)?;
            g.weighted_sum(tot, &[0.5, 0.5])
        });
    }

    #[test]
    fn l2_head_closed_form() {
        let pred = rand(20, &[2, 3]);
        let target = rand(21, &[2, 3]);
        let mut g = Graph::new();
        let p = g.param(pred.clone());
        let d = g.sq_dist_rows(p, &target, Reduce::Mean).unwrap();
        let l = g.weighted_sum(d, &[0.5, 0.5]).unwrap();
        let grads = g.backward(l).unwrap();
        let count = 6.0;
        for k in 0..6 {
            let expect = 2.0 * (pred.data()[k] - target.data()[k]) / count;
            assert!((grads.get(p).unwrap()[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let target = rand(22, &[2, 3]);
        let mut g = Graph::new();
        let p = g.param(target.clone());
        let d = g.sq_dist_rows(p, &target, Reduce::Mean).unwrap();
        let l = g.mean(d).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn foreign_and_non_scalar_nodes_are_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let a = g1.param(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g2.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g1.add(a, b).is_err());
        assert!(g1.backward(a).is_err());
        let m = g1.mean(a).unwrap();
        assert!(g2.backward(m).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let p = g.param(Tensor::from_vec(vec![3.0, 4.0]));
        let m = g.mul(c, p).unwrap();
        let l = g.mean(m).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &[0.5, 1.0]);
    }
}
