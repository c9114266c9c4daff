//! Noise-then-denoise chains from a source sample, optionally guided by the
//! low-pass component of a reference chain (ILVR or ICSG).
//!
//! The x-chain and the guide draw from separate streams, so switching
//! guidance off reproduces the plain chain draw for draw.

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionProcess, NoisePredictor};
use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{gaussian_draw, low_pass, RngStream, Tensor};

const CHAIN_STREAM: u64 = 0xC4A1;
const GUIDE_STREAM: u64 = 0x6D1E;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Plain,
    Ilvr,
    #[default]
    Icsg,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(SamplerMode::Plain),
            "ilvr" => Ok(SamplerMode::Ilvr),
            "icsg" => Ok(SamplerMode::Icsg),
            other => Err(Error::InvalidConfig(format!(
                "mode must be plain, ilvr or icsg, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Start step; the source is noised to `x_M`.
    #[serde(rename = "M")]
    pub m: usize,
    /// Last guided step.
    pub t_stop: usize,
    /// Style-enhancement repeats.
    #[serde(rename = "K")]
    pub k: usize,
    /// Low-pass factor.
    #[serde(rename = "N")]
    pub n: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Icsg,
            m: 800,
            t_stop: 500,
            k: 1,
            n: 8,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.t_stop < 1 {
            return Err(Error::InvalidConfig(format!(
                "t_stop must be >= 1, got {}",
                self.t_stop
            )));
        }
        if self.t_stop > self.m {
            return Err(Error::InvalidConfig(format!(
                "t_stop ({}) must not exceed M ({})",
                self.t_stop, self.m
            )));
        }
        if self.m > steps {
            return Err(Error::InvalidConfig(format!(
                "M ({}) must not exceed T ({steps})",
                self.m
            )));
        }
        if self.n < 1 {
            return Err(Error::InvalidConfig("N must be >= 1".into()));
        }
        Ok(())
    }
}

/// The x-chain stream and the guide stream of one sampling run.
#[derive(Clone, Debug)]
pub struct ChainRngs {
    pub chain: RngStream,
    pub guide: RngStream,
}

impl ChainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            chain: RngStream::new(seed, CHAIN_STREAM),
            guide: RngStream::new(seed, GUIDE_STREAM),
        }
    }
}

/// `K` rounds of `y_t <- Phi_t(Psi_t(y_t), fresh eps)` at a fixed step `t`.
pub fn style_enhance(
    diff: &DiffusionProcess,
    model: &dyn NoisePredictor,
    y_t: &Tensor,
    t: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let mut y = y_t.clone();
    for _ in 0..k {
        let eps_pred = model.predict_noise(&y, t, rng)?;
        let y0 = diff.predict_x0(&y, t, &eps_pred)?;
        let eps = gaussian_draw(rng, y.shape());
        y = diff.forward_sample(&y0, t, &eps)?;
    }
    Ok(y)
}

/// `x' + phi_N(guide) - phi_N(x')`.
pub fn guide_correction(x_prime: &Tensor, guide: &Tensor, n: usize) -> Result<Tensor> {
    ensure_shape(x_prime.shape(), guide.shape())?;
    let lg = low_pass(guide, n)?;
    let lx = low_pass(x_prime, n)?;
    let mut out = x_prime.clone();
    for ((o, a), b) in out.data_mut().iter_mut().zip(lg.data()).zip(lx.data()) {
        *o += a - b;
    }
    Ok(out)
}

/// One ICSG step: a reverse step of `x_t`, then the low-pass of the result is
/// replaced by that of the translated guide `y_prev`.
pub fn icsg_step(
    diff: &DiffusionProcess,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    y_prev: &Tensor,
    t: usize,
    n: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    ensure_shape(x_t.shape(), y_prev.shape())?;
    let x_prime = diff.model_step(model, x_t, t, rng)?;
    guide_correction(&x_prime, y_prev, n)
}

/// One ILVR step: the guide is the source noised to `t - 1` with a draw from `guide_rng`.
#[allow(clippy::too_many_arguments)]
pub fn ilvr_step(
    diff: &DiffusionProcess,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    y_source: &Tensor,
    t: usize,
    n: usize,
    rng: &mut RngStream,
    guide_rng: &mut RngStream,
) -> Result<Tensor> {
    ensure_shape(x_t.shape(), y_source.shape())?;
    let x_prime = diff.model_step(model, x_t, t, rng)?;
    let eps = gaussian_draw(guide_rng, y_source.shape());
    let y_prev = diff.forward_sample(y_source, t - 1, &eps)?;
    guide_correction(&x_prime, &y_prev, n)
}

/// The translated guide `y'_{t-1}` of ICSG at step `t`.
fn icsg_guide(
    diff: &DiffusionProcess,
    model: &dyn NoisePredictor,
    x_source: &Tensor,
    t: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let eps = gaussian_draw(rng, x_source.shape());
    let y_t = diff.forward_sample(x_source, t, &eps)?;
    let y_t = style_enhance(diff, model, &y_t, t, k, rng)?;
    diff.model_step(model, &y_t, t, rng)
}

/// Runs the chain without the `t_stop <= M` check, so `t_stop = M + 1`
/// (guidance never fires) and `M = 0` (no steps) are accepted.
pub fn guided_chain(
    diff: &DiffusionProcess,
    model: &dyn NoisePredictor,
    x_source: &Tensor,
    cfg: &SamplerConfig,
    rngs: &mut ChainRngs,
) -> Result<Tensor> {
    if cfg.m > diff.steps() || cfg.n < 1 {
        return Err(Error::InvalidConfig(format!(
            "M ({}) must not exceed T ({}) and N must be >= 1",
            cfg.m,
            diff.steps()
        )));
    }
    if cfg.m == 0 {
        return Ok(x_source.clone());
    }
    let eps = gaussian_draw(&mut rngs.chain, x_source.shape());
    let mut x = diff.forward_sample(x_source, cfg.m, &eps)?;
    for t in (1..=cfg.m).rev() {
        let guided = t >= cfg.t_stop;
        x = match cfg.mode {
            SamplerMode::Icsg if guided => {
                let y_prev = icsg_guide(diff, model, x_source, t, cfg.k, &mut rngs.guide)?;
                icsg_step(diff, model, &x, &y_prev, t, cfg.n, &mut rngs.chain)?
            }
            SamplerMode::Ilvr if guided => {
                ilvr_step(diff, model, &x, x_source, t, cfg.n, &mut rngs.chain, &mut rngs.guide)?
            }
            _ => diff.model_step(model, &x, t, &mut rngs.chain)?,
        };
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("sampler state at step {t}")));
        }
    }
    Ok(x)
}

/// Validated entry point: translates `x_source` (a sample or a batch).
pub fn icsg_sample(
    diff: &DiffusionProcess,
    model: &dyn NoisePredictor,
    x_source: &Tensor,
    cfg: &SamplerConfig,
    rngs: &mut ChainRngs,
) -> Result<Tensor> {
    cfg.validate(diff.steps())?;
    guided_chain(diff, model, x_source, cfg, rngs)
}
