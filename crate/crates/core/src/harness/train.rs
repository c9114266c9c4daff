//! Source pretraining, fusion warm-up, two-path adaptation and sampling.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::DomainDataset;
use super::io::Checkpoint;
use super::metrics::{evaluate_metrics, MetricsRow};
use crate::autodiff::{Graph, Var};
use crate::denoiser::{adam_step, AdamState, BoundParams, Denoiser, DenoiserParams, Model};
use crate::diffusion::DiffusionProcess;
use crate::error::{Error, Result};
use crate::losses::{
    ddc_loss, ddc_targets, diffusion_loss, direction_vector, record_ddc, record_dif, record_style, record_total,
    style_loss, DirectionVector, FeatureEncoder,
};
use crate::numerics::{gaussian_draw, RngStream, Tensor};
use crate::sampler::{icsg_sample, ChainRngs, SamplerConfig};

const PRETRAIN_STREAM: u64 = 0x9E71;
const WARMUP_STREAM: u64 = 0x3A2F;
const TARGET_PATH_STREAM: u64 = 0x7A47;
const SOURCE_PATH_STREAM: u64 = 0x5A47;
const EVAL_STREAM: u64 = 0xE7A1;
/// Stream offset of the parameter initialisation.
const INIT_OFFSET: u64 = 0x1417;

/// Sources used for the per-checkpoint sample proxies.
pub const EVAL_SOURCES: usize = 32;

/// One optimisation step of a training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub stage: u8,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    /// Stage 1 (base denoiser) followed by stage 2 (fusion warm-up).
    pub curve: Vec<LossPoint>,
}

/// Per-iteration training-batch values of adaptation, at the scale they
/// enter the objective (the DDC head is a per-element mean here).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptPoint {
    pub iteration: usize,
    pub total: f64,
    pub dif: f64,
    pub ddc: f64,
    pub style: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptOutput {
    pub checkpoint: Checkpoint,
    pub rows: Vec<MetricsRow>,
    pub curve: Vec<AdaptPoint>,
    /// Frozen inter-domain direction, computed once before the first step.
    pub direction: DirectionVector,
}

/// Mean of the first and of the last `window` values.
pub fn smoothed_ends(values: &[f64], window: usize) -> (f64, f64) {
    let w = window.clamp(1, values.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (
        mean(&values[..w.min(values.len())]),
        mean(&values[values.len().saturating_sub(w)..]),
    )
}

fn draw_indices(rng: &mut RngStream, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.int_range(0, n - 1)).collect()
}

fn draw_steps(rng: &mut RngStream, steps: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.int_range(1, steps)).collect()
}

/// `x_t` of a batch with per-sample steps.
fn noise_batch(diff: &DiffusionProcess, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    let items = (0..t.len())
        .map(|i| diff.forward_sample(&x0.item(i)?, t[i], &eps.item(i)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Scales `grad` to norm `clip` when it is longer; returns the original norm.
fn clip_gradient(grad: &mut [f64], clip: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if clip > 0.0 && norm > clip {
        let s = clip / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

fn check_loss(v: f64, stage: &str, iteration: usize) -> Result<()> {
    if !v.is_finite() {
        log::error!("{stage}: loss {v} at iteration {iteration}");
        return Err(Error::NonFinite(format!("{stage} loss {v} at iteration {iteration}")));
    }
    Ok(())
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    Ok(g.value(v)?.data()[0])
}

fn batch_mean(g: &Graph, v: Var) -> Result<f64> {
    Ok(g.value(v)?.mean())
}

struct Trainer<'a> {
    den: &'a Denoiser,
    diff: &'a DiffusionProcess,
    cfg: &'a RunConfig,
}

impl Trainer<'_> {
    /// Predicted noise of a noised batch; `content` switches on the fused path.
    fn predict(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        xt: &Tensor,
        t: &[usize],
        content: Option<&Tensor>,
        z: &Tensor,
    ) -> Result<Var> {
        let xv = g.constant(xt.clone());
        let cv = content.map(|c| g.constant(c.clone()));
        let zv = g.constant(z.clone());
        self.den.record_noise(g, b, xv, t, cv, zv)
    }

    /// One diffusion-loss step on `data`; stage 1 freezes the fusion merge and
    /// runs without content, stage 2 trains only the merge on the fused path.
    fn pretrain_step(
        &self,
        params: &mut DenoiserParams,
        adam: &mut AdamState,
        data: &DomainDataset,
        rng: &mut RngStream,
        fused: bool,
    ) -> Result<f64> {
        let bs = self.cfg.train.batch_size;
        let idx = draw_indices(rng, data.len(), bs);
        let t = draw_steps(rng, self.diff.steps(), bs);
        let x0 = data.batch(&idx)?;
        let eps = gaussian_draw(rng, x0.shape());
        let z = gaussian_draw(rng, &self.den.feature_shape(bs));
        let xt = noise_batch(self.diff, &x0, &t, &eps)?;

        let mut g = Graph::new();
        let b = self.den.bind(&mut g, params, |v| v.is_merge() == fused)?;
        let pred = self.predict(&mut g, &b, &xt, &t, fused.then_some(&x0), &z)?;
        let dif = record_dif(&mut g, pred, &eps)?;
        let loss = g.mean(dif)?;
        let value = scalar(&g, loss)?;
        check_loss(value, if fused { "warm-up" } else { "pretrain" }, adam.step as usize)?;
        let mut grad = self.den.collect_gradient(&g.backward(loss)?, &b);
        clip_gradient(&mut grad, self.cfg.train.grad_clip);
        adam_step(&mut params.values, &grad, adam)?;
        Ok(value)
    }
}

/// Stage 1 trains the base denoiser on the source with the diffusion loss;
/// stage 2 warms up the fusion merge on the fused path with a fresh optimizer.
pub fn pretrain(cfg: &RunConfig, source: &DomainDataset) -> Result<PretrainOutput> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidArgument(
            "pretraining needs a non-empty source set".into(),
        ));
    }
    let den = cfg.denoiser()?;
    let diff = cfg.process()?;
    let tr = Trainer {
        den: &den,
        diff: &diff,
        cfg,
    };
    let mut params = den.init_params(cfg.seed ^ INIT_OFFSET);
    let mut curve = Vec::with_capacity(cfg.train.pretrain_iters + cfg.train.warmup_iters);

    let mut adam = AdamState::new(params.len(), cfg.train.lr);
    let mut rng = RngStream::new(cfg.seed, PRETRAIN_STREAM);
    for i in 0..cfg.train.pretrain_iters {
        let loss = tr.pretrain_step(&mut params, &mut adam, source, &mut rng, false)?;
        curve.push(LossPoint {
            stage: 1,
            iteration: i,
            loss,
        });
    }
    log::info!("pretrain: {} base iterations done", cfg.train.pretrain_iters);

    let mut adam = AdamState::new(params.len(), cfg.train.lr);
    let mut rng = RngStream::new(cfg.seed, WARMUP_STREAM);
    for i in 0..cfg.train.warmup_iters {
        let loss = tr.pretrain_step(&mut params, &mut adam, source, &mut rng, true)?;
        curve.push(LossPoint {
            stage: 2,
            iteration: i,
            loss,
        });
    }
    log::info!("pretrain: {} warm-up iterations done", cfg.train.warmup_iters);

    Ok(PretrainOutput {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            params,
            adam: Some(adam),
        },
        curve,
    })
}

/// Fixed noise for the per-checkpoint evaluations of one run.
pub struct EvalPlan {
    /// Evaluation steps, evenly spread over `[1, T]`.
    pub steps: Vec<usize>,
    /// Target-set noise per evaluation step.
    target_eps: Vec<Tensor>,
    target_z: Vec<Tensor>,
    /// Step of the one-shot clean estimates fed to the sample proxies.
    pub t_eval: usize,
    sources: Tensor,
    source_eps: Tensor,
    source_z: Tensor,
}

impl EvalPlan {
    pub fn new(cfg: &RunConfig, den: &Denoiser, source: &DomainDataset, target: &DomainDataset) -> Result<Self> {
        let big_t = cfg.schedule.steps;
        let k = cfg.train.eval_steps;
        let steps: Vec<usize> = (0..k)
            .map(|i| (((i as f64 + 0.5) * big_t as f64 / k as f64).round() as usize).clamp(1, big_t))
            .collect();
        let mut rng = RngStream::new(cfg.seed, EVAL_STREAM);
        let tshape = target.all()?.shape().to_vec();
        let mut target_eps = Vec::with_capacity(k);
        let mut target_z = Vec::with_capacity(k);
        for _ in 0..k {
            target_eps.push(gaussian_draw(&mut rng, &tshape));
            target_z.push(gaussian_draw(&mut rng, &den.feature_shape(target.len())));
        }
        let n = EVAL_SOURCES.min(source.len()).max(2.min(source.len()));
        let sources = source.batch(&(0..n).collect::<Vec<_>>())?;
        let source_eps = gaussian_draw(&mut rng, sources.shape());
        let source_z = gaussian_draw(&mut rng, &den.feature_shape(n));
        Ok(Self {
            steps,
            target_eps,
            target_z,
            t_eval: big_t / 2,
            sources,
            source_eps,
            source_z,
        })
    }

    pub fn sources(&self) -> &Tensor {
        &self.sources
    }

    /// Mean target-set diffusion loss over the evaluation steps, content gate off.
    pub fn target_loss(
        &self,
        den: &Denoiser,
        diff: &DiffusionProcess,
        params: &DenoiserParams,
        target: &Tensor,
    ) -> Result<f64> {
        let mut total = 0.0;
        for ((&t, eps), z) in self.steps.iter().zip(&self.target_eps).zip(&self.target_z) {
            let ts = vec![t; target.shape()[0]];
            let xt = noise_batch(diff, target, &ts, eps)?;
            let mut g = Graph::new();
            let b = den.bind(&mut g, params, |_| false)?;
            let xv = g.constant(xt);
            let zv = g.constant(z.clone());
            let pred = den.record_noise(&mut g, &b, xv, &ts, None, zv)?;
            total += diffusion_loss(g.value(pred)?, eps)?;
        }
        Ok(total / self.steps.len() as f64)
    }

    /// One-shot clean estimates of the evaluation sources on the fused path.
    pub fn translate(&self, den: &Denoiser, diff: &DiffusionProcess, params: &DenoiserParams) -> Result<Tensor> {
        let n = self.sources.shape()[0];
        let ts = vec![self.t_eval; n];
        let xt = noise_batch(diff, &self.sources, &ts, &self.source_eps)?;
        let mut g = Graph::new();
        let b = den.bind(&mut g, params, |_| false)?;
        let xv = g.constant(xt.clone());
        let cv = g.constant(self.sources.clone());
        let zv = g.constant(self.source_z.clone());
        let pred = den.record_noise(&mut g, &b, xv, &ts, Some(cv), zv)?;
        let x0 = diff.predict_x0(&xt, self.t_eval, g.value(pred)?)?;
        Ok(x0.map(|v| v.clamp(-1.0, 1.0)))
    }
}

/// Losses and proxies of the current parameters at one checkpoint.
struct Evaluator<'a> {
    den: &'a Denoiser,
    diff: &'a DiffusionProcess,
    cfg: &'a RunConfig,
    plan: EvalPlan,
    target: Tensor,
    w: &'a DirectionVector,
    frozen: &'a FeatureEncoder,
    style: &'a FeatureEncoder,
    run_id: String,
}

impl Evaluator<'_> {
    fn row(&self, params: &DenoiserParams, iteration: usize) -> Result<MetricsRow> {
        let dif = self.plan.target_loss(self.den, self.diff, params, &self.target)?;
        let gen = self.plan.translate(self.den, self.diff, params)?;
        let src = self.plan.sources();
        let ddc = ddc_loss(src, &gen, self.w, self.frozen)?;
        let sty = style_loss(&gen, &self.target, self.style, &self.cfg.loss_weights)?;
        let eval = evaluate_metrics(&gen, src, &self.target, self.frozen)?;
        let row = MetricsRow::new(&self.run_id, self.cfg.seed, iteration, [dif, ddc, sty], &eval);
        row.check_finite()?;
        log::info!(
            "adapt[{}] it {iteration}: dif {dif:.5} ddc {ddc:.5} style {sty:.5} drift {:.4} div {:.4}",
            self.run_id,
            eval.center_drift,
            eval.diversity
        );
        Ok(row)
    }
}

/// Run identifier used in metrics rows.
pub fn run_id(cfg: &RunConfig) -> String {
    format!(
        "s{}-ddc{}-style{}",
        cfg.seed, cfg.loss_weights.lambda_ddc, cfg.loss_weights.lambda_style
    )
}

/// Two-path adaptation of a pretrained source model to a few-shot target.
///
/// Both paths share the per-sample steps. The target path is a plain
/// diffusion loss with the content gate off; the source path predicts with
/// content fusion, forms the clean estimate and feeds it to the directional
/// consistency loss (frozen source encoder, fixed direction) and the style
/// loss (seeded random encoder). The phasic weights combine the three.
pub fn adapt(
    cfg: &RunConfig,
    source_ckpt: &Checkpoint,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<AdaptOutput> {
    cfg.validate()?;
    if source_ckpt.config.denoiser_config() != cfg.denoiser_config() {
        return Err(Error::InvalidConfig(
            "denoiser settings differ from the pretrained checkpoint".into(),
        ));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument(
            "adaptation needs source and target items".into(),
        ));
    }
    if target.len() > 10 && !cfg.dataset.allow_many_shots {
        return Err(Error::InvalidConfig(format!(
            "dataset.m_target: {} target items exceed 10 without dataset.allow_many_shots",
            target.len()
        )));
    }
    let den = cfg.denoiser()?;
    let diff = cfg.process()?;
    let tr = Trainer {
        den: &den,
        diff: &diff,
        cfg,
    };
    let phasic = cfg.phasic();
    let weights = &cfg.loss_weights;
    let frozen = FeatureEncoder::frozen_source(&den, &source_ckpt.params);
    let style_enc = FeatureEncoder::random_conv(&cfg.input_shape(), cfg.seed);
    let target_all = target.all()?;
    let w = direction_vector(&source.all()?, &target_all, &frozen)?;
    let target_grams = style_enc.grams(&target_all)?;
    let use_source_path = weights.lambda_ddc > 0.0 || weights.lambda_style > 0.0;

    let eval = Evaluator {
        den: &den,
        diff: &diff,
        cfg,
        plan: EvalPlan::new(cfg, &den, source, target)?,
        target: target_all.clone(),
        w: &w,
        frozen: &frozen,
        style: &style_enc,
        run_id: run_id(cfg),
    };

    let mut params = source_ckpt.params.clone();
    let mut adam = AdamState::new(params.len(), cfg.train.lr);
    let mut rng_t = RngStream::new(cfg.seed, TARGET_PATH_STREAM);
    let mut rng_s = RngStream::new(cfg.seed, SOURCE_PATH_STREAM);
    let bs = cfg.train.batch_size;
    let iters = cfg.train.adapt_iters;
    let mut rows = vec![eval.row(&params, 0)?];
    let mut curve = Vec::with_capacity(iters);

    for it in 0..iters {
        let t = draw_steps(&mut rng_t, diff.steps(), bs);
        let xb = target.batch(&draw_indices(&mut rng_t, target.len(), bs))?;
        let eps_b = gaussian_draw(&mut rng_t, xb.shape());
        let z_b = gaussian_draw(&mut rng_t, &den.feature_shape(bs));

        let mut g = Graph::new();
        let b = den.bind(&mut g, &params, |_| true)?;
        let xb_t = noise_batch(&diff, &xb, &t, &eps_b)?;
        let pred_b = tr.predict(&mut g, &b, &xb_t, &t, None, &z_b)?;
        let dif = record_dif(&mut g, pred_b, &eps_b)?;

        let (mut ddc, mut sty) = (None, None);
        if use_source_path {
            let xa = source.batch(&draw_indices(&mut rng_s, source.len(), bs))?;
            let eps_a = gaussian_draw(&mut rng_s, xa.shape());
            let z_a = gaussian_draw(&mut rng_s, &den.feature_shape(bs));
            let xa_t = noise_batch(&diff, &xa, &t, &eps_a)?;
            let pred_a = tr.predict(&mut g, &b, &xa_t, &t, Some(&xa), &z_a)?;
            let (ca, ce): (Vec<f64>, Vec<f64>) = t.iter().map(|&ti| diff.x0_coefs(ti)).unzip();
            let xa_tv = g.constant(xa_t);
            let lhs = g.row_scale(xa_tv, &ca)?;
            let rhs = g.row_scale(pred_a, &ce)?;
            let x0 = g.add(lhs, rhs)?;
            let x0 = g.clamp(x0, -1.0, 1.0)?;
            if weights.lambda_ddc > 0.0 {
                let targets = ddc_targets(&xa, &w, &frozen)?;
                // per-element mean inside the objective keeps lambda_ddc scale-free
                let head = record_ddc(&mut g, &frozen, x0, &targets)?;
                ddc = Some(g.scale(head, 1.0 / w.w.len() as f64)?);
            }
            if weights.lambda_style > 0.0 {
                sty = Some(record_style(&mut g, &style_enc, x0, &target_grams, weights)?);
            }
        }
        let total = record_total(&mut g, &t, ddc, sty, dif, &phasic, weights)?;
        let value = scalar(&g, total)?;
        check_loss(value, "adapt", it)?;
        curve.push(AdaptPoint {
            iteration: it,
            total: value,
            dif: batch_mean(&g, dif)?,
            ddc: ddc.map(|v| batch_mean(&g, v)).transpose()?.unwrap_or(0.0),
            style: sty.map(|v| batch_mean(&g, v)).transpose()?.unwrap_or(0.0),
        });
        let mut grad = den.collect_gradient(&g.backward(total)?, &b);
        clip_gradient(&mut grad, cfg.train.grad_clip);
        adam_step(&mut params.values, &grad, &mut adam)?;

        let done = it + 1;
        if done % cfg.train.metrics_every == 0 || done == iters {
            rows.push(eval.row(&params, done)?);
        }
    }

    Ok(AdaptOutput {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            params,
            adam: Some(adam),
        },
        rows,
        curve,
        direction: w,
    })
}

/// Translates a batch of sources with the sampler settings of `cfg`.
pub fn sample(cfg: &RunConfig, ckpt: &Checkpoint, sources: &Tensor, sampler: &SamplerConfig) -> Result<Tensor> {
    let diff = cfg.process()?;
    let model = Model {
        denoiser: ckpt.config.denoiser()?,
        params: ckpt.params.clone(),
    };
    let mut rngs = ChainRngs::new(cfg.seed);
    icsg_sample(&diff, &model, sources, sampler, &mut rngs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Mode;
    use crate::harness::data::gen_toy_domains;
    use crate::losses::LossWeights;

    fn small(mode: Mode) -> RunConfig {
        let mut cfg = RunConfig::new(3, mode);
        cfg.schedule.steps = 100;
        cfg.phasic.t_s = 30.0;
        cfg.dataset.n_source = 40;
        cfg.dataset.m_target = 4;
        cfg.train.pretrain_iters = 6;
        cfg.train.warmup_iters = 3;
        cfg.train.adapt_iters = 4;
        cfg.train.metrics_every = 2;
        cfg.train.eval_steps = 3;
        cfg.train.lr = 1e-3;
        cfg.sample.sampler = SamplerConfig {
            m: 20,
            t_stop: 10,
            ..SamplerConfig::default()
        };
        if mode == Mode::Point {
            cfg.denoiser.widths = vec![16];
        }
        cfg
    }

    #[test]
    fn pretrain_curves_and_merge_mask() {
        let cfg = small(Mode::Image);
        let (src, _) = gen_toy_domains(&cfg.dataset, cfg.seed).unwrap();
        let out = pretrain(&cfg, &src).unwrap();
        assert_eq!(out.curve.len(), 9);
        assert!(out.curve[..6].iter().all(|p| p.stage == 1));
        assert!(out.curve[6..].iter().all(|p| p.stage == 2));
        // untrained predictor: order-one loss
        assert!((0.2..5.0).contains(&out.curve[0].loss), "{}", out.curve[0].loss);

        let stage1 = RunConfig {
            train: crate::harness::config::TrainSpec {
                warmup_iters: 0,
                ..cfg.train.clone()
            },
            ..cfg.clone()
        };
        let base = pretrain(&stage1, &src).unwrap().checkpoint.params;
        let den = cfg.denoiser().unwrap();
        let init = den.init_params(cfg.seed ^ INIT_OFFSET);
        for v in den.layout().views() {
            let (a, b, c) = (
                &base.values[v.range()],
                &init.values[v.range()],
                &out.checkpoint.params.values[v.range()],
            );
            if v.is_merge() {
                assert_eq!(a, b, "{} moved in stage 1", v.name);
            } else {
                assert_eq!(a, c, "{} moved in stage 2", v.name);
            }
        }
    }

    #[test]
    fn rerun_is_bit_identical() {
        let cfg = small(Mode::Point);
        let (src, tgt) = gen_toy_domains(&cfg.dataset, cfg.seed).unwrap();
        let a = pretrain(&cfg, &src).unwrap();
        let b = pretrain(&cfg, &src).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        let x = adapt(&cfg, &a.checkpoint, &src, &tgt).unwrap();
        let y = adapt(&cfg, &a.checkpoint, &src, &tgt).unwrap();
        assert_eq!(x.rows, y.rows);
        assert_eq!(x.checkpoint.to_bytes(), y.checkpoint.to_bytes());
        assert_eq!(x.rows.len(), 3);
        assert_eq!(x.rows.last().unwrap().iteration, 4);
    }

    #[test]
    fn reload_gives_identical_evaluation() {
        let cfg = small(Mode::Image);
        let (src, tgt) = gen_toy_domains(&cfg.dataset, cfg.seed).unwrap();
        let ck = pretrain(&cfg, &src).unwrap().checkpoint;
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let den = cfg.denoiser().unwrap();
        let diff = cfg.process().unwrap();
        let plan = EvalPlan::new(&cfg, &den, &src, &tgt).unwrap();
        let tall = tgt.all().unwrap();
        let a = plan.target_loss(&den, &diff, &ck.params, &tall).unwrap();
        let b = plan.target_loss(&den, &diff, &back.params, &tall).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    /// Weighted fine-tuning on the target alone, written out independently.
    fn plain_finetune(cfg: &RunConfig, ck: &Checkpoint, tgt: &DomainDataset) -> Vec<f64> {
        let den = cfg.denoiser().unwrap();
        let diff = cfg.process().unwrap();
        let phasic = cfg.phasic();
        let mut params = ck.params.clone();
        let mut adam = AdamState::new(params.len(), cfg.train.lr);
        let mut rng = RngStream::new(cfg.seed, TARGET_PATH_STREAM);
        let bs = cfg.train.batch_size;
        let mut out = Vec::new();
        for _ in 0..cfg.train.adapt_iters {
            let t: Vec<usize> = (0..bs).map(|_| rng.int_range(1, diff.steps())).collect();
            let idx: Vec<usize> = (0..bs).map(|_| rng.int_range(0, tgt.len() - 1)).collect();
            let x0 = tgt.batch(&idx).unwrap();
            let eps = gaussian_draw(&mut rng, x0.shape());
            let z = gaussian_draw(&mut rng, &den.feature_shape(bs));
            let mut xt = x0.clone();
            let inner = x0.len() / bs;
            for i in 0..bs {
                let ab = diff.schedule().alpha_bar(t[i]);
                for j in i * inner..(i + 1) * inner {
                    xt.data_mut()[j] = ab.sqrt() * x0.data()[j] + (1.0 - ab).sqrt() * eps.data()[j];
                }
            }
            let mut g = Graph::new();
            let b = den.bind(&mut g, &params, |_| true).unwrap();
            let (xv, zv) = (g.constant(xt), g.constant(z));
            let pred = den.record_noise(&mut g, &b, xv, &t, None, zv).unwrap();
            let dif = record_dif(&mut g, pred, &eps).unwrap();
            let wts: Vec<f64> = t.iter().map(|&ti| phasic.weight(ti) / bs as f64).collect();
            let loss = g.weighted_sum(dif, &wts).unwrap();
            out.push(g.value(loss).unwrap().data()[0]);
            let mut grad = den.collect_gradient(&g.backward(loss).unwrap(), &b);
            clip_gradient(&mut grad, cfg.train.grad_clip);
            adam_step(&mut params.values, &grad, &mut adam).unwrap();
        }
        out
    }

    #[test]
    fn gate_off_matches_plain_finetune() {
        let mut cfg = small(Mode::Point);
        cfg.loss_weights = LossWeights {
            lambda_ddc: 0.0,
            lambda_style: 0.0,
            style_layers: None,
        };
        let (src, tgt) = gen_toy_domains(&cfg.dataset, cfg.seed).unwrap();
        let ck = pretrain(&cfg, &src).unwrap().checkpoint;
        let got: Vec<f64> = adapt(&cfg, &ck, &src, &tgt)
            .unwrap()
            .curve
            .iter()
            .map(|p| p.total)
            .collect();
        let want = plain_finetune(&cfg, &ck, &tgt);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn direction_is_frozen_and_source_path_active() {
        let cfg = small(Mode::Image);
        let (src, tgt) = gen_toy_domains(&cfg.dataset, cfg.seed).unwrap();
        let ck = pretrain(&cfg, &src).unwrap().checkpoint;
        let out = adapt(&cfg, &ck, &src, &tgt).unwrap();
        let den = cfg.denoiser().unwrap();
        let frozen = FeatureEncoder::frozen_source(&den, &ck.params);
        let again = direction_vector(&src.all().unwrap(), &tgt.all().unwrap(), &frozen).unwrap();
        let bits = |d: &DirectionVector| d.w.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out.direction), bits(&again));
        assert!(out.curve.iter().all(|p| p.ddc > 0.0 && p.style > 0.0));
    }

    #[test]
    fn rejects_mismatched_checkpoint() {
        let cfg = small(Mode::Point);
        let (src, tgt) = gen_toy_domains(&cfg.dataset, cfg.seed).unwrap();
        let ck = pretrain(&cfg, &src).unwrap().checkpoint;
        let mut other = cfg.clone();
        other.denoiser.widths = vec![8];
        assert!(adapt(&other, &ck, &src, &tgt).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = small(Mode::Image);
        let (src, _) = gen_toy_domains(&cfg.dataset, cfg.seed).unwrap();
        let ck = pretrain(&cfg, &src).unwrap().checkpoint;
        let x = src.batch(&[0, 1]).unwrap();
        let a = sample(&cfg, &ck, &x, &cfg.sample.sampler).unwrap();
        let b = sample(&cfg, &ck, &x, &cfg.sample.sampler).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn smoothing_windows() {
        assert_eq!(smoothed_ends(&[4.0, 2.0, 1.0, 1.0], 2), (3.0, 1.0));
        assert_eq!(smoothed_ends(&[2.0], 10), (2.0, 2.0));
    }
}
