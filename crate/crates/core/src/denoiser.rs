//! The fusion-augmented noise predictor: a time-free encoder, the phasic
//! content-fusion block, and a time-modulated decoder, plus Adam.
//!
//! Parameters live in one flat `Vec<f64>`. [`ParamLayout`] names the
//! per-layer views. Every forward pass is recorded on an
//! [`autodiff::Graph`](crate::autodiff::Graph), so the same code serves
//! inference and training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::diffusion::NoisePredictor;
use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{gaussian_draw, RngStream, Tensor};
use crate::schedule::PhasicConfig;

/// Number of layers in the fusion merge block.
pub const MERGE_DEPTH: usize = 3;

const MERGE_PREFIX: &str = "merge";
const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Point {
        dim: usize,
    },
}

impl InputShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            InputShape::Point { dim } => vec![dim],
        }
    }

    pub fn batched(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(self.dims());
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub input: InputShape,
    /// Image mode: channels of the full-resolution and the two downsampled
    /// stages (`[c1, c2]`). Point mode: `[hidden]`.
    pub widths: Vec<usize>,
    pub time_dim: usize,
    #[serde(default = "default_merge_depth")]
    pub merge_depth: usize,
}

fn default_merge_depth() -> usize {
    MERGE_DEPTH
}

impl DenoiserConfig {
    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self {
            input: InputShape::Image {
                channels,
                height,
                width,
            },
            widths: vec![8, 16],
            time_dim: 16,
            merge_depth: MERGE_DEPTH,
        }
    }

    pub fn point(dim: usize) -> Self {
        Self {
            input: InputShape::Point { dim },
            widths: vec![64],
            time_dim: 16,
            merge_depth: MERGE_DEPTH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("denoiser widths must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "denoiser time_dim must be positive and even".into(),
            ));
        }
        if self.merge_depth != MERGE_DEPTH {
            return Err(Error::InvalidConfig(format!(
                "denoiser merge_depth is fixed at {MERGE_DEPTH}, got {}",
                self.merge_depth
            )));
        }
        match self.input {
            InputShape::Image {
                channels,
                height,
                width,
            } => {
                if self.widths.len() != 2 {
                    return Err(Error::InvalidConfig("image denoiser widths need 2 entries".into()));
                }
                if channels == 0 || height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "denoiser input extents must be positive and divisible by 4, got {height}x{width}"
                    )));
                }
            }
            InputShape::Point { dim } => {
                if self.widths.len() != 1 || dim == 0 {
                    return Err(Error::InvalidConfig(
                        "point denoiser needs dim >= 1 and exactly one width".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamView {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    fan_in: usize,
    zero_init: bool,
}

impl ParamView {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_merge(&self) -> bool {
        self.name.starts_with(MERGE_PREFIX)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    views: Vec<ParamView>,
    total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: &str, shape: &[usize], fan_in: usize, zero_init: bool) {
        let view = ParamView {
            name: name.to_string(),
            offset: self.total,
            shape: shape.to_vec(),
            fan_in,
            zero_init,
        };
        self.total += view.len();
        self.views.push(view);
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, zero: bool) {
        self.push(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, zero);
        self.push(&format!("{name}.b"), &[cout], cin * k * k, true);
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize) {
        self.push(&format!("{name}.w"), &[cin, cout, 2, 2], cin * 4, false);
        self.push(&format!("{name}.b"), &[cout], cin * 4, true);
    }

    fn linear(&mut self, name: &str, dout: usize, din: usize, zero: bool) {
        self.push(&format!("{name}.w"), &[dout, din], din, zero);
        self.push(&format!("{name}.b"), &[dout], din, true);
    }

    pub fn views(&self) -> &[ParamView] {
        &self.views
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamView> {
        self.views.iter().find(|v| v.name == name)
    }

    fn index(&self, name: &str) -> usize {
        self.views
            .iter()
            .position(|v| v.name == name)
            .unwrap_or_else(|| panic!("layout has no view {name}"))
    }
}

/// The flat parameter vector `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub values: Vec<f64>,
}

impl DenoiserParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn view(&self, v: &ParamView) -> &[f64] {
        &self.values[v.range()]
    }
}

/// Per-stage encoder features; the bottleneck is last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub stages: Vec<Tensor>,
}

impl FeatureStack {
    pub fn bottleneck(&self) -> &Tensor {
        self.stages.last().expect("at least one stage")
    }
}

/// Parameter views bound into one graph, in layout order.
pub struct BoundParams {
    vars: Vec<Var>,
}

/// Architecture plus fusion gate; stateless apart from its configuration.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    phasic: PhasicConfig,
    layout: ParamLayout,
}

/// `Ê = m x + (1 - m) z` elementwise.
pub fn fuse_content(content_feat: &Tensor, z: &Tensor, t: usize, cfg: &PhasicConfig) -> Result<Tensor> {
    let m = cfg.gate(t);
    content_feat.zip_map(z, |c, zz| m * c + (1.0 - m) * zz)
}

/// Sinusoidal embedding rows for per-sample steps.
pub fn time_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let tf = ti as f64;
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((tf * f).sin(), (tf * f).cos())).unzip();
        data.extend(s);
        data.extend(c);
    }
    Tensor::new(vec![t.len(), dim], data).expect("embedding shape")
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, phasic: PhasicConfig) -> Result<Self> {
        config.validate()?;
        phasic.validate()?;
        let mut l = ParamLayout::default();
        let e = config.time_dim;
        match config.input {
            InputShape::Image { channels, .. } => {
                let (c1, c2) = (config.widths[0], config.widths[1]);
                l.conv("enc0", c1, channels, 3, false);
                l.conv("enc1", c2, c1, 3, false);
                l.conv("enc2", c2, c2, 3, false);
                l.conv("merge0", c2, 2 * c2, 3, false);
                l.conv("merge1", c2, c2, 3, false);
                l.conv("merge2", c2, c2, 3, true);
                l.linear("time", e, e, false);
                l.linear("mod_b.scale", c2, e, false);
                l.linear("mod_b.shift", c2, e, false);
                l.conv_t("up1", c2, c2);
                l.conv("dec1", c1, 2 * c2, 3, false);
                l.linear("mod_d1.scale", c1, e, false);
                l.linear("mod_d1.shift", c1, e, false);
                l.conv_t("up0", c1, c1);
                l.conv("dec0", c1, 2 * c1, 3, false);
                l.linear("mod_d0.scale", c1, e, false);
                l.linear("mod_d0.shift", c1, e, false);
                l.conv("out", channels, c1, 3, false);
            }
            InputShape::Point { dim } => {
                let h = config.widths[0];
                l.linear("enc0", h, dim, false);
                l.linear("merge0", h, 2 * h, false);
                l.linear("merge1", h, h, false);
                l.linear("merge2", h, h, true);
                l.linear("time", e, e, false);
                l.linear("dec0", h, h + e, false);
                l.linear("out", dim, h, false);
            }
        }
        Ok(Self {
            config,
            phasic,
            layout: l,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn phasic(&self) -> &PhasicConfig {
        &self.phasic
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Fan-in scaled uniform weights, zero biases, zero last merge layer.
    pub fn init_params(&self, seed: u64) -> DenoiserParams {
        let mut rng = RngStream::new(seed, INIT_STREAM);
        let mut values = vec![0.0; self.layout.total];
        for v in &self.layout.views {
            if v.zero_init {
                continue;
            }
            let bound = 1.0 / (v.fan_in as f64).sqrt();
            for x in &mut values[v.range()] {
                *x = rng.uniform_range(-bound, bound);
            }
        }
        DenoiserParams { values }
    }

    /// Shape of the bottleneck feature (and of the fusion noise `z`) for a batch.
    pub fn feature_shape(&self, batch: usize) -> Vec<usize> {
        match self.config.input {
            InputShape::Image { height, width, .. } => vec![batch, self.config.widths[1], height / 4, width / 4],
            InputShape::Point { .. } => vec![batch, self.config.widths[0]],
        }
    }

    /// Adds every view as a leaf; views for which `trainable` is false become constants.
    pub fn bind(
        &self,
        g: &mut Graph,
        params: &DenoiserParams,
        trainable: impl Fn(&ParamView) -> bool,
    ) -> Result<BoundParams> {
        ensure_shape(&[self.layout.total], &[params.len()])?;
        let vars = self
            .layout
            .views
            .iter()
            .map(|v| {
                let t = Tensor::new(v.shape.clone(), params.view(v).to_vec()).expect("view shape");
                if trainable(v) {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Ok(BoundParams { vars })
    }

    /// Flat gradient in layout order; views without gradient contribute zeros.
    pub fn collect_gradient(&self, grads: &Gradients, bound: &BoundParams) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.total];
        for (v, var) in self.layout.views.iter().zip(&bound.vars) {
            if let Some(gv) = grads.get(*var) {
                out[v.range()].copy_from_slice(gv);
            }
        }
        out
    }

    fn p(&self, b: &BoundParams, name: &str) -> Var {
        b.vars[self.layout.index(name)]
    }

    fn conv_ln_silu(&self, g: &mut Graph, b: &BoundParams, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.p(b, &format!("{name}.w"));
        let bias = self.p(b, &format!("{name}.b"));
        let y = g.conv2d(x, w, bias, stride, 1)?;
        let y = g.layer_norm(y)?;
        g.silu(y)
    }

    fn lin(&self, g: &mut Graph, b: &BoundParams, x: Var, name: &str) -> Result<Var> {
        let w = self.p(b, &format!("{name}.w"));
        let bias = self.p(b, &format!("{name}.b"));
        g.linear(x, w, bias)
    }

    fn conv(&self, g: &mut Graph, b: &BoundParams, x: Var, name: &str) -> Result<Var> {
        let w = self.p(b, &format!("{name}.w"));
        let bias = self.p(b, &format!("{name}.b"));
        g.conv2d(x, w, bias, 1, 1)
    }

    fn modulate(&self, g: &mut Graph, b: &BoundParams, x: Var, temb: Var, name: &str) -> Result<Var> {
        let scale = self.lin(g, b, temb, &format!("{name}.scale"))?;
        let shift = self.lin(g, b, temb, &format!("{name}.shift"))?;
        g.modulate(x, scale, shift)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<usize> {
        let s = g.shape(x)?;
        let batch = s.first().copied().unwrap_or(0);
        ensure_shape(&self.config.input.batched(batch), s)?;
        Ok(batch)
    }

    /// Records the encoder on a batch `x: [B, ...]`; returns the stages, bottleneck last.
    pub fn record_encoder(&self, g: &mut Graph, b: &BoundParams, x: Var) -> Result<Vec<Var>> {
        self.check_input(g, x)?;
        match self.config.input {
            InputShape::Image { .. } => {
                let s0 = self.conv_ln_silu(g, b, x, "enc0", 1)?;
                let s1 = self.conv_ln_silu(g, b, s0, "enc1", 2)?;
                let s2 = self.conv_ln_silu(g, b, s1, "enc2", 2)?;
                Ok(vec![s0, s1, s2])
            }
            InputShape::Point { .. } => {
                let h = self.lin(g, b, x, "enc0")?;
                Ok(vec![g.silu(h)?])
            }
        }
    }

    /// Records the noise prediction for `xt: [B, ...]` at per-sample steps `t`.
    ///
    /// With `content`, the fused feature is `m(t) E(content) + (1 - m(t)) z`;
    /// without it the fused feature is `z` (the gate on content forced to 0).
    pub fn record_noise(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        xt: Var,
        t: &[usize],
        content: Option<Var>,
        z: Var,
    ) -> Result<Var> {
        let gates: Vec<f64> = t.iter().map(|&ti| self.phasic.gate(ti)).collect();
        self.record_noise_gated(g, b, xt, t, content.map(|c| (c, gates.as_slice())), z)
    }

    /// As [`record_noise`](Self::record_noise) with explicit per-sample content gates.
    pub fn record_noise_gated(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        xt: Var,
        t: &[usize],
        content: Option<(Var, &[f64])>,
        z: Var,
    ) -> Result<Var> {
        let batch = self.check_input(g, xt)?;
        if t.len() != batch {
            return Err(Error::InvalidArgument(format!("{} steps for batch {batch}", t.len())));
        }
        ensure_shape(&self.feature_shape(batch), g.shape(z)?)?;
        let stages = self.record_encoder(g, b, xt)?;
        let bott = *stages.last().expect("encoder stages");
        let fused = match content {
            Some((c, gates)) => {
                let cs = self.record_encoder(g, b, c)?;
                let cb = *cs.last().expect("encoder stages");
                g.blend(cb, z, gates)?
            }
            None => z,
        };
        let temb0 = g.constant(time_embedding(t, self.config.time_dim));
        let temb = self.lin(g, b, temb0, "time")?;
        let temb = g.silu(temb)?;
        let merged_in = g.concat(bott, fused)?;
        match self.config.input {
            InputShape::Image { .. } => {
                let m = self.conv(g, b, merged_in, "merge0")?;
                let m = g.silu(m)?;
                let m = self.conv(g, b, m, "merge1")?;
                let m = g.silu(m)?;
                let m = self.conv(g, b, m, "merge2")?;
                let h = g.add(bott, m)?;
                let h = self.modulate(g, b, h, temb, "mod_b")?;
                let h = g.silu(h)?;

                let u = g.conv_transpose2(h, self.p(b, "up1.w"), self.p(b, "up1.b"))?;
                let u = g.concat(u, stages[1])?;
                let d = self.conv(g, b, u, "dec1")?;
                let d = g.layer_norm(d)?;
                let d = self.modulate(g, b, d, temb, "mod_d1")?;
                let d = g.silu(d)?;

                let u = g.conv_transpose2(d, self.p(b, "up0.w"), self.p(b, "up0.b"))?;
                let u = g.concat(u, stages[0])?;
                let d = self.conv(g, b, u, "dec0")?;
                let d = g.layer_norm(d)?;
                let d = self.modulate(g, b, d, temb, "mod_d0")?;
                let d = g.silu(d)?;
                self.conv(g, b, d, "out")
            }
            InputShape::Point { .. } => {
                let m = self.lin(g, b, merged_in, "merge0")?;
                let m = g.silu(m)?;
                let m = self.lin(g, b, m, "merge1")?;
                let m = g.silu(m)?;
                let m = self.lin(g, b, m, "merge2")?;
                let h = g.add(bott, m)?;
                let h = g.concat(h, temb)?;
                let d = self.lin(g, b, h, "dec0")?;
                let d = g.silu(d)?;
                self.lin(g, b, d, "out")
            }
        }
    }

    /// Adds a missing batch axis; returns the batched tensor and whether one was added.
    fn batch_of(&self, x: &Tensor) -> Result<(Tensor, bool)> {
        let dims = self.config.input.dims();
        if x.shape() == dims.as_slice() {
            Ok((x.clone().reshape(&self.config.input.batched(1))?, true))
        } else {
            ensure_shape(&self.config.input.batched(x.shape()[0]), x.shape())?;
            Ok((x.clone(), false))
        }
    }

    /// Encoder features of a single sample or a batch.
    pub fn encode(&self, x: &Tensor, params: &DenoiserParams) -> Result<FeatureStack> {
        let (xb, _) = self.batch_of(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, params, |_| false)?;
        let xv = g.constant(xb);
        let stages = self.record_encoder(&mut g, &b, xv)?;
        Ok(FeatureStack {
            stages: stages.iter().map(|&s| g.value(s).cloned()).collect::<Result<_>>()?,
        })
    }

    /// Predicts `eps` for a single sample or a batch sharing step `t`, drawing
    /// the fusion noise `z` from `rng`.
    pub fn predict_noise(
        &self,
        xt: &Tensor,
        t: usize,
        content: Option<&Tensor>,
        params: &DenoiserParams,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        let (xb, added) = self.batch_of(xt)?;
        let batch = xb.shape()[0];
        let z = gaussian_draw(rng, &self.feature_shape(batch));
        let mut g = Graph::new();
        let b = self.bind(&mut g, params, |_| false)?;
        let xv = g.constant(xb);
        let cv = match content {
            Some(c) => {
                let (cb, _) = self.batch_of(c)?;
                ensure_shape(g.shape(xv)?, cb.shape())?;
                Some(g.constant(cb))
            }
            None => None,
        };
        let zv = g.constant(z);
        let out = self.record_noise(&mut g, &b, xv, &vec![t; batch], cv, zv)?;
        let out = g.value(out)?.clone();
        if added {
            out.reshape(xt.shape())
        } else {
            Ok(out)
        }
    }
}

/// A denoiser with fixed parameters, predicting without content.
#[derive(Clone, Debug)]
pub struct Model {
    pub denoiser: Denoiser,
    pub params: DenoiserParams,
}

impl NoisePredictor for Model {
    fn predict_noise(&self, xt: &Tensor, t: usize, rng: &mut RngStream) -> Result<Tensor> {
        self.denoiser.predict_noise(xt, t, None, &self.params, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    ensure_shape(&[params.len()], &[grads.len()])?;
    ensure_shape(&[params.len()], &[state.m.len()])?;
    ensure_shape(&[params.len()], &[state.v.len()])?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Reduce;

    fn image_net() -> Denoiser {
        Denoiser::new(DenoiserConfig::image(1, 8, 8), PhasicConfig::default()).unwrap()
    }

    fn point_net() -> Denoiser {
        let mut cfg = DenoiserConfig::point(2);
        cfg.widths = vec![6];
        cfg.time_dim = 4;
        Denoiser::new(cfg, PhasicConfig::default()).unwrap()
    }

    fn randomized(net: &Denoiser, seed: u64) -> DenoiserParams {
        let mut rng = RngStream::new(seed, 3);
        let mut p = net.init_params(seed);
        for v in &mut p.values {
            *v += 0.2 * rng.normal();
        }
        p
    }

    #[test]
    fn views_tile_the_vector() {
        for net in [image_net(), point_net()] {
            let mut next = 0;
            for v in net.layout().views() {
                assert_eq!(v.offset, next, "{}", v.name);
                next += v.len();
            }
            assert_eq!(next, net.layout().total());
            assert_eq!(net.init_params(1).len(), next);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = DenoiserConfig::image(1, 10, 8);
        assert!(cfg.validate().is_err());
        cfg.input = InputShape::Image {
            channels: 1,
            height: 8,
            width: 8,
        };
        cfg.widths = vec![8, 0];
        assert!(cfg.validate().is_err());
        cfg.widths = vec![8, 16];
        cfg.merge_depth = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encoder_stage_shapes() {
        let net = image_net();
        let f = net.encode(&Tensor::full(&[1, 8, 8], 0.3), &net.init_params(2)).unwrap();
        let shapes: Vec<_> = f.stages.iter().map(|s| s.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 8, 8, 8], vec![1, 16, 4, 4], vec![1, 16, 2, 2]]);
        assert_eq!(f.bottleneck().shape(), net.feature_shape(1).as_slice());
        assert!(net.encode(&Tensor::zeros(&[1, 4, 8]), &net.init_params(2)).is_err());
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let net = image_net();
        let f = net.encode(&Tensor::zeros(&[2, 1, 8, 8]), &net.init_params(3)).unwrap();
        assert!(f.stages.iter().all(|s| s.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn features_are_deterministic() {
        let net = image_net();
        let x = gaussian_draw(&mut RngStream::new(4, 0), &[1, 8, 8]);
        let a = net.encode(&x, &net.init_params(5)).unwrap();
        let b = net.encode(&x, &net.init_params(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fusion_gate_limits() {
        let cfg = PhasicConfig::default();
        let c = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let z = Tensor::from_vec(vec![0.5, 0.5, -1.0]);
        let hi = fuse_content(&c, &z, 1000, &cfg).unwrap();
        let lo = fuse_content(&c, &z, 0, &cfg).unwrap();
        let mid = fuse_content(&c, &z, 300, &cfg).unwrap();
        assert!(hi.max_abs_diff(&c).unwrap() < 1e-12);
        assert!(lo.max_abs_diff(&z).unwrap() < 1e-12);
        assert_eq!(mid.data(), &[0.75, -0.75, 1.0]);
        assert!(fuse_content(&c, &Tensor::from_vec(vec![1.0]), 5, &cfg).is_err());
    }

    #[test]
    fn output_shape_matches_input() {
        let net = image_net();
        let p = net.init_params(6);
        let x = gaussian_draw(&mut RngStream::new(7, 0), &[1, 8, 8]);
        let mut rng = RngStream::new(8, 0);
        assert_eq!(
            net.predict_noise(&x, 10, None, &p, &mut rng).unwrap().shape(),
            x.shape()
        );
        assert_eq!(
            net.predict_noise(&x, 10, Some(&x), &p, &mut rng).unwrap().shape(),
            x.shape()
        );
        let xb = gaussian_draw(&mut rng, &[3, 1, 8, 8]);
        assert_eq!(
            net.predict_noise(&xb, 10, None, &p, &mut rng).unwrap().shape(),
            xb.shape()
        );
        let pn = point_net();
        let pt = Tensor::from_vec(vec![0.1, -0.4]);
        assert_eq!(
            pn.predict_noise(&pt, 3, Some(&pt), &pn.init_params(1), &mut rng)
                .unwrap()
                .shape(),
            &[2]
        );
    }

    #[test]
    fn prediction_is_deterministic() {
        let net = image_net();
        let p = randomized(&net, 9);
        let x = gaussian_draw(&mut RngStream::new(10, 0), &[2, 1, 8, 8]);
        let run = || {
            net.predict_noise(&x, 400, Some(&x), &p, &mut RngStream::new(11, 0))
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    fn gated_loss(net: &Denoiser, p: &DenoiserParams, gate_zero: bool) -> (f64, Vec<f64>) {
        let batch = 2;
        let mut rng = RngStream::new(12, 0);
        let x = gaussian_draw(&mut rng, &net.config().input.batched(batch));
        let c = gaussian_draw(&mut rng, &net.config().input.batched(batch));
        let z = gaussian_draw(&mut rng, &net.feature_shape(batch));
        let target = gaussian_draw(&mut rng, &net.config().input.batched(batch));
        let mut g = Graph::new();
        let b = net.bind(&mut g, p, |_| true).unwrap();
        let (xv, cv, zv) = (g.constant(x), g.constant(c), g.constant(z));
        let gates = [0.0; 2];
        let content = gate_zero.then_some((cv, &gates[..]));
        let out = net.record_noise_gated(&mut g, &b, xv, &[700, 20], content, zv).unwrap();
        let d = g.sq_dist_rows(out, &target, Reduce::Mean).unwrap();
        let l = g.mean(d).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).unwrap().data()[0], net.collect_gradient(&grads, &b))
    }

    #[test]
    fn forced_zero_gate_equals_no_content_path() {
        for net in [image_net(), point_net()] {
            let p = randomized(&net, 13);
            let (la, ga) = gated_loss(&net, &p, true);
            let (lb, gb) = gated_loss(&net, &p, false);
            assert_eq!(la, lb);
            assert_eq!(ga, gb);
        }
    }

    /// Central differences on `count` random coordinates of the flat vector.
    fn fd_check(net: &Denoiser, with_content: bool, count: usize, seed: u64) {
        let p = randomized(net, seed);
        let batch = 2;
        let mut rng = RngStream::new(seed, 1);
        let x = gaussian_draw(&mut rng, &net.config().input.batched(batch));
        let c = gaussian_draw(&mut rng, &net.config().input.batched(batch));
        let z = gaussian_draw(&mut rng, &net.feature_shape(batch));
        let target = gaussian_draw(&mut rng, &net.config().input.batched(batch));
        let t = [301, 150];
        let eval = |params: &DenoiserParams| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let b = net.bind(&mut g, params, |_| true).unwrap();
            let (xv, cv, zv) = (g.constant(x.clone()), g.constant(c.clone()), g.constant(z.clone()));
            let out = net
                .record_noise(&mut g, &b, xv, &t, with_content.then_some(cv), zv)
                .unwrap();
            let d = g.sq_dist_rows(out, &target, Reduce::Mean).unwrap();
            let l = g.mean(d).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).unwrap().data()[0], net.collect_gradient(&grads, &b))
        };
        let (_, analytic) = eval(&p);
        let h = 1e-5;
        for _ in 0..count {
            let k = rng.int_range(0, p.len() - 1);
            let mut plus = p.clone();
            plus.values[k] += h;
            let mut minus = p.clone();
            minus.values[k] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "coord {k}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_image() {
        fd_check(&image_net(), true, 60, 20);
        fd_check(&image_net(), false, 60, 21);
    }

    #[test]
    fn gradients_match_finite_differences_point() {
        fd_check(&point_net(), true, 60, 22);
        fd_check(&point_net(), false, 60, 23);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2, 1e-3);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2, 1e-3);
        adam_step(&mut p, &[0.5, -3.0], &mut s).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
        assert!((p[1] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_matches_scalar_trace() {
        // scalar reference written out step by step
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let g = [0.3f64, -1.2];
        let mut theta = 0.7f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (i, gi) in g.iter().enumerate() {
            let k = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * gi;
            v = b2 * v + (1.0 - b2) * gi * gi;
            theta -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
        }
        let mut p = vec![0.7];
        let mut s = AdamState::new(1, lr);
        adam_step(&mut p, &[0.3], &mut s).unwrap();
        adam_step(&mut p, &[-1.2], &mut s).unwrap();
        assert!((p[0] - theta).abs() < 1e-12);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2, 1e-3);
        let err = adam_step(&mut p, &[1.0, f64::NAN], &mut s).unwrap_err();
        assert!(err.to_string().contains("entry 1"));
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(s.step, 0);
    }
}
