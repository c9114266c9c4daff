//! Training objectives and the fixed feature encoders they are measured in.
//!
//! Plain-tensor functions evaluate a loss; the `record_*` heads put the same
//! loss on a [`Graph`] so it can be differentiated. Batched inputs carry a
//! leading batch axis.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gram_into, Graph, Reduce, Var};
use crate::denoiser::{Denoiser, DenoiserParams, InputShape};
use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{sq_dist, PointSet, RngStream, Tensor};
use crate::schedule::PhasicConfig;

const RANDOM_CONV_WIDTH: usize = 8;
const RANDOM_CONV_STREAM: u64 = 0x5E1F;
const FEW_SHOT_LIMIT: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ddc: f64,
    pub lambda_style: f64,
    /// Per-layer style weights; `None` means uniform `1 / L`.
    pub style_layers: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ddc: 1.0,
            lambda_style: 1.0,
            style_layers: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let layers = self.style_layers.iter().flatten();
        if self.lambda_ddc < 0.0 || self.lambda_style < 0.0 || layers.clone().any(|w| *w < 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights (lambda_ddc, lambda_style, style_layers) must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_weights(&self, layers: usize) -> Result<Vec<f64>> {
        match &self.style_layers {
            Some(w) if w.len() == layers => Ok(w.clone()),
            Some(w) => Err(Error::InvalidConfig(format!(
                "style_layers has {} weights for {layers} encoder layers",
                w.len()
            ))),
            None => Ok(vec![1.0 / layers as f64; layers]),
        }
    }
}

/// A seeded stack of three convolutions (or dense layers in point mode).
#[derive(Clone, Debug)]
pub struct RandomConv {
    input: InputShape,
    layers: Vec<(Tensor, Tensor, usize)>,
}

impl RandomConv {
    pub fn new(input: &InputShape, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, RANDOM_CONV_STREAM);
        let c = RANDOM_CONV_WIDTH;
        let mut draw = |shape: Vec<usize>, fan_in: usize| {
            let bound = (3.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
            Tensor::new(shape, data).expect("layer shape")
        };
        let layers = match *input {
            InputShape::Image { channels, .. } => [(channels, 1), (c, 2), (c, 2)]
                .into_iter()
                .map(|(cin, stride)| (draw(vec![c, cin, 3, 3], cin * 9), Tensor::zeros(&[c]), stride))
                .collect(),
            InputShape::Point { dim } => [dim, c, c]
                .into_iter()
                .map(|din| (draw(vec![c, din], din), Tensor::zeros(&[c]), 1))
                .collect(),
        };
        Self {
            input: input.clone(),
            layers,
        }
    }
}

/// Fixed map from samples to a flat embedding and a stack of feature maps.
#[derive(Clone, Debug)]
pub enum FeatureEncoder {
    /// Embedding is the sample itself; one feature map, the sample.
    Identity,
    /// Bottleneck features of a frozen denoiser.
    FrozenSource {
        denoiser: Denoiser,
        params: DenoiserParams,
    },
    RandomConv(RandomConv),
}

impl FeatureEncoder {
    pub fn frozen_source(denoiser: &Denoiser, params: &DenoiserParams) -> Self {
        FeatureEncoder::FrozenSource {
            denoiser: denoiser.clone(),
            params: params.clone(),
        }
    }

    pub fn random_conv(input: &InputShape, seed: u64) -> Self {
        FeatureEncoder::RandomConv(RandomConv::new(input, seed))
    }

    /// Records the feature-map stack of `x: [B, ...]`.
    pub fn record_maps(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        match self {
            FeatureEncoder::Identity => Ok(vec![x]),
            FeatureEncoder::FrozenSource { denoiser, params } => {
                let b = denoiser.bind(g, params, |_| false)?;
                denoiser.record_encoder(g, &b, x)
            }
            FeatureEncoder::RandomConv(rc) => {
                let batch = g.shape(x)?[0];
                ensure_shape(&rc.input.batched(batch), g.shape(x)?)?;
                let mut h = x;
                let mut maps = Vec::with_capacity(rc.layers.len());
                for (w, bias, stride) in &rc.layers {
                    let (wv, bv) = (g.constant(w.clone()), g.constant(bias.clone()));
                    h = match rc.input {
                        InputShape::Image { .. } => g.conv2d(h, wv, bv, *stride, 1)?,
                        InputShape::Point { .. } => g.linear(h, wv, bv)?,
                    };
                    h = g.silu(h)?;
                    maps.push(h);
                }
                Ok(maps)
            }
        }
    }

    /// Records the flat embedding `[B, d]`: the flattened last feature map.
    pub fn record_embedding(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let maps = self.record_maps(g, x)?;
        let last = *maps.last().expect("at least one map");
        let s = g.shape(last)?.to_vec();
        let d = s[1..].iter().product();
        g.reshape(last, &[s[0], d])
    }

    /// Embeddings of a batch, `[B, d]`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = self.record_embedding(&mut g, xv)?;
        Ok(g.value(e)?.clone())
    }

    /// Feature maps of a batch, one tensor per layer.
    pub fn feature_maps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let maps = self.record_maps(&mut g, xv)?;
        maps.into_iter().map(|m| g.value(m).cloned()).collect()
    }

    /// Per-layer Gram matrices of a batch, each `[B, C, C]`.
    pub fn grams(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.feature_maps(x)?.iter().map(batch_gram).collect()
    }
}

/// Inter-domain centroid difference in embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionVector {
    pub w: Vec<f64>,
}

fn centroid_rows(e: &Tensor) -> Vec<f64> {
    let d = e.shape()[1];
    let n = e.shape()[0] as f64;
    let mut c = vec![0.0; d];
    for row in e.data().chunks_exact(d) {
        for (ci, v) in c.iter_mut().zip(row) {
            *ci += v;
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// `w = mean E(B) - mean E(A)` over batches `a: [n, ...]`, `b: [m, ...]`.
pub fn direction_vector(a: &Tensor, b: &Tensor, enc: &FeatureEncoder) -> Result<DirectionVector> {
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(Error::InvalidArgument(
            "direction_vector needs batched, non-empty sets".into(),
        ));
    }
    let (ea, eb) = (enc.embed(a)?, enc.embed(b)?);
    let (ca, cb) = (centroid_rows(&ea), centroid_rows(&eb));
    let w: Vec<f64> = cb.iter().zip(&ca).map(|(p, q)| p - q).collect();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("direction vector".into()));
    }
    Ok(DirectionVector { w })
}

/// Rows `E(x_A) + w`, the per-sample DDC targets.
pub fn ddc_targets(x_a: &Tensor, w: &DirectionVector, enc: &FeatureEncoder) -> Result<Tensor> {
    let mut e = enc.embed(x_a)?;
    let d = e.shape()[1];
    ensure_shape(&[d], &[w.w.len()])?;
    for row in e.data_mut().chunks_exact_mut(d) {
        for (r, wi) in row.iter_mut().zip(&w.w) {
            *r += wi;
        }
    }
    Ok(e)
}

/// Batch mean of `||E(x_A) + w - E(x_AB)||^2`, summed over embedding entries.
pub fn ddc_loss(x_a: &Tensor, x_ab: &Tensor, w: &DirectionVector, enc: &FeatureEncoder) -> Result<f64> {
    ensure_shape(x_a.shape(), x_ab.shape())?;
    let target = ddc_targets(x_a, w, enc)?;
    let gen = enc.embed(x_ab)?;
    let d = target.shape()[1];
    let per: f64 = target
        .data()
        .chunks_exact(d)
        .zip(gen.data().chunks_exact(d))
        .map(|(p, q)| sq_dist(p, q))
        .sum();
    Ok(per / target.shape()[0] as f64)
}

/// `G = F F^T / (H W)` of one feature map `[C, ...]`.
pub fn gram(feature_map: &Tensor) -> Result<Tensor> {
    let s = feature_map.shape();
    let c = s[0];
    let hw: usize = s[1..].iter().product::<usize>().max(1);
    let mut g = vec![0.0; c * c];
    gram_into(feature_map.data(), c, hw, &mut g);
    Tensor::new(vec![c, c], g)
}

fn batch_gram(maps: &Tensor) -> Result<Tensor> {
    let items: Vec<Tensor> = (0..maps.shape()[0])
        .map(|i| maps.item(i).and_then(|m| gram(&m)))
        .collect::<Result<_>>()?;
    Tensor::stack(&items)
}

fn check_targets(targets: &Tensor) -> Result<usize> {
    let m = targets.shape()[0];
    if targets.ndim() < 2 || m == 0 {
        return Err(Error::InvalidArgument("style loss needs a non-empty target set".into()));
    }
    if m > FEW_SHOT_LIMIT {
        log::warn!("style target set has {m} members, above the few-shot limit of {FEW_SHOT_LIMIT}");
    }
    Ok(m)
}

/// `(1/m) sum_i sum_l w_l mean((G^l(x) - G^l(t_i))^2)`, averaged over the batch `x_ab`.
pub fn style_loss(x_ab: &Tensor, targets: &Tensor, enc: &FeatureEncoder, weights: &LossWeights) -> Result<f64> {
    let m = check_targets(targets)?;
    let gen = enc.grams(x_ab)?;
    let tgt = enc.grams(targets)?;
    let lw = weights.layer_weights(gen.len())?;
    let batch = x_ab.shape()[0];
    let mut total = 0.0;
    for ((gl, tl), wl) in gen.iter().zip(&tgt).zip(&lw) {
        let cc = gl.len() / batch;
        for gi in gl.data().chunks_exact(cc) {
            for ti in tl.data().chunks_exact(cc) {
                total += wl * sq_dist(gi, ti) / cc as f64 / m as f64;
            }
        }
    }
    Ok(total / batch as f64)
}

/// Mean squared error over all elements.
pub fn diffusion_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<f64> {
    ensure_shape(eps.shape(), eps_pred.shape())?;
    Ok(sq_dist(eps_pred.data(), eps.data()) / eps.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ddc: f64,
    pub style: f64,
    pub dif: f64,
}

/// `m(t)(1 - w(t))(l_ddc L_ddc + l_style L_style) + w(t) L_dif`.
pub fn total_loss(t: usize, terms: &LossTerms, cfg: &PhasicConfig, weights: &LossWeights) -> f64 {
    cfg.branch_weight(t) * (weights.lambda_ddc * terms.ddc + weights.lambda_style * terms.style)
        + cfg.weight(t) * terms.dif
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Cosine of the angle between the two vectors, about the origin.
    #[default]
    Cosine,
    /// Euclidean distance.
    Distance,
}

impl Similarity {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Distance => sq_dist(a, b).sqrt(),
            Similarity::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
        }
    }
}

/// Mean over pairs `i < j` of `(sim(src_i, src_j) - sim(gen_i, gen_j))^2`.
pub fn pairwise_consistency_loss(src: &PointSet, gen: &PointSet, sim: Similarity) -> Result<f64> {
    if src.len() != gen.len() || src.dim() != gen.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![src.len(), src.dim()],
            got: vec![gen.len(), gen.dim()],
        });
    }
    let n = src.len();
    if n < 2 {
        return Err(Error::InvalidArgument("pairwise loss needs at least 2 points".into()));
    }
    let (sp, gp) = (src.points(), gen.points());
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = sim.eval(&sp[i], &sp[j]) - sim.eval(&gp[i], &gp[j]);
            total += d * d;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Per-sample DDC head `[B]` against precomputed `targets = E(x_A) + w`.
pub fn record_ddc(g: &mut Graph, enc: &FeatureEncoder, x_ab: Var, targets: &Tensor) -> Result<Var> {
    let e = enc.record_embedding(g, x_ab)?;
    g.sq_dist_rows(e, targets, Reduce::Sum)
}

/// Per-sample style head `[B]` against per-layer target Grams, each `[m, C, C]`.
pub fn record_style(
    g: &mut Graph,
    enc: &FeatureEncoder,
    x_ab: Var,
    target_grams: &[Tensor],
    weights: &LossWeights,
) -> Result<Var> {
    let maps = enc.record_maps(g, x_ab)?;
    if maps.len() != target_grams.len() {
        return Err(Error::InvalidArgument("target Gram count != encoder layers".into()));
    }
    let lw = weights.layer_weights(maps.len())?;
    let mut acc: Option<Var> = None;
    for ((m, tg), wl) in maps.into_iter().zip(target_grams).zip(lw) {
        let gm = g.gram(m)?;
        let d = g.sq_dist_to_set(gm, tg)?;
        let d = g.scale(d, wl)?;
        acc = Some(match acc {
            Some(a) => g.add(a, d)?,
            None => d,
        });
    }
    Ok(acc.expect("at least one layer"))
}

/// Per-sample diffusion head `[B]`.
pub fn record_dif(g: &mut Graph, eps_pred: Var, eps: &Tensor) -> Result<Var> {
    g.sq_dist_rows(eps_pred, eps, Reduce::Mean)
}

/// Batch mean of the phasic combination with per-sample steps `t`.
/// Missing branch heads contribute nothing.
pub fn record_total(
    g: &mut Graph,
    t: &[usize],
    ddc: Option<Var>,
    style: Option<Var>,
    dif: Var,
    cfg: &PhasicConfig,
    weights: &LossWeights,
) -> Result<Var> {
    let b = t.len() as f64;
    let w_dif: Vec<f64> = t.iter().map(|&ti| cfg.weight(ti) / b).collect();
    let mut total = g.weighted_sum(dif, &w_dif)?;
    for (head, lambda) in [(ddc, weights.lambda_ddc), (style, weights.lambda_style)] {
        if let Some(h) = head {
            let w: Vec<f64> = t.iter().map(|&ti| lambda * cfg.branch_weight(ti) / b).collect();
            let s = g.weighted_sum(h, &w)?;
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}
