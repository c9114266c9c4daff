//! Point-cloud laboratory: optimizes generated point positions directly
//! under the DDC loss or the pairwise-consistency baseline (plus a
//! centroid pull), and measures rotation, center and structure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{pairwise_consistency_loss, Similarity};
use crate::numerics::{orthogonal_procrustes, sq_dist, upper_distances, PointSet, RngStream};

const SOURCE_STREAM: u64 = 0x50;
const TARGET_STREAM: u64 = 0x7A;
const INIT_STREAM: u64 = 0x1A;

/// Below this RMS radius a target set has no usable scale.
const MIN_SCALE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    TwoMoons,
    Ring,
    Grid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabLoss {
    #[default]
    Ddc,
    PairwiseCos,
    PairwiseDist,
}

/// Starting positions of the generated set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabInit {
    /// The source points plus Gaussian jitter of the given scale.
    #[default]
    Source,
    /// The DDC minimizer `{x_i + w}`.
    Optimum,
    /// The DDC minimizer rotated about its centroid.
    RotatedOptimum { deg: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub source: SourceKind,
    pub n_source: usize,
    pub m_target: usize,
    pub shift: [f64; 2],
    pub rotation_deg: f64,
    pub scale: f64,
    pub loss: LabLoss,
    pub steps: usize,
    pub lr: f64,
    /// Weight of the centroid-matching term of the pairwise arms.
    pub center_weight: f64,
    pub init: LabInit,
    /// Standard deviation of the jitter added by [`LabInit::Source`].
    pub jitter: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            source: SourceKind::TwoMoons,
            n_source: 64,
            m_target: 10,
            shift: [2.0, 1.0],
            rotation_deg: 0.0,
            scale: 1.0,
            loss: LabLoss::Ddc,
            steps: 200,
            lr: 1.0,
            center_weight: 1.0,
            init: LabInit::Source,
            jitter: 0.05,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_target == 0 {
            return Err(Error::InvalidConfig("m_target must be >= 1".into()));
        }
        if self.m_target > 10 {
            log::warn!("m_target = {} exceeds the few-shot limit of 10", self.m_target);
        }
        if self.n_source < 2 * self.m_target {
            return Err(Error::InvalidConfig(format!(
                "n_source ({}) must be >= 2 * m_target ({})",
                self.n_source, self.m_target
            )));
        }
        if self.steps < 1 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.lr.is_nan()
            || self.lr <= 0.0
            || self.scale.is_nan()
            || self.scale <= 0.0
            || self.center_weight.is_nan()
            || self.center_weight < 0.0
        {
            return Err(Error::InvalidConfig(
                "lr and scale must be > 0, center_weight >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryReport {
    pub center_drift: f64,
    pub rotation_deg: f64,
    /// `None` when a distance vector has zero variance.
    pub structure_corr: Option<f64>,
    /// RMS radius of the generated set over that of the source.
    pub scale_ratio: f64,
    pub rotation_degenerate: bool,
    /// Loss before each step, then the final loss.
    pub losses: Vec<f64>,
    pub source: PointSet,
    pub target: PointSet,
    pub generated: PointSet,
}

/// Draws `n` points of the given generator.
pub fn generate_points(kind: SourceKind, n: usize, noise: f64, rng: &mut RngStream) -> Result<PointSet> {
    let mut pts = Vec::with_capacity(n);
    match kind {
        SourceKind::TwoMoons => {
            for i in 0..n {
                let th = rng.uniform() * std::f64::consts::PI;
                let (s, c) = th.sin_cos();
                let p = if i % 2 == 0 { [c, s] } else { [1.0 - c, 0.5 - s] };
                pts.push(vec![p[0] + noise * rng.normal(), p[1] + noise * rng.normal()]);
            }
        }
        SourceKind::Ring => {
            for _ in 0..n {
                let th = rng.uniform() * std::f64::consts::TAU;
                let r = 1.0 + noise * rng.normal();
                pts.push(vec![r * th.cos(), r * th.sin()]);
            }
        }
        SourceKind::Grid => {
            let side = (n as f64).sqrt().ceil() as usize;
            let step = if side > 1 { 2.0 / (side - 1) as f64 } else { 0.0 };
            for i in 0..n {
                let (r, c) = (i / side, i % side);
                pts.push(vec![
                    -1.0 + c as f64 * step + noise * rng.normal(),
                    -1.0 + r as f64 * step + noise * rng.normal(),
                ]);
            }
        }
    }
    PointSet::new(pts)
}

/// Pearson correlation of the upper-triangle pairwise distances.
pub fn structure_score(gen: &PointSet, src: &PointSet) -> Result<Option<f64>> {
    if gen.len() != src.len() || gen.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "structure score needs equal counts >= 3, got {} and {}",
            gen.len(),
            src.len()
        )));
    }
    Ok(pearson(&upper_distances(gen), &upper_distances(src)))
}

/// Pearson correlation; `None` if either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `||centroid(gen) - centroid(target)||` over the target's RMS radius
/// (taken as 1 when that radius vanishes).
pub fn center_drift(gen: &PointSet, target: &PointSet) -> Result<f64> {
    if gen.dim() != target.dim() {
        return Err(Error::InvalidArgument("center drift needs equal dimensions".into()));
    }
    let d = sq_dist(&gen.centroid(), &target.centroid()).sqrt();
    let scale = target.rms_radius();
    Ok(if scale < MIN_SCALE { d } else { d / scale })
}

struct Problem {
    loss: LabLoss,
    center_weight: f64,
    src: Vec<[f64; 2]>,
    ddc_target: Vec<[f64; 2]>,
    target_centroid: [f64; 2],
}

fn to_arr(p: &PointSet) -> Vec<[f64; 2]> {
    p.points().iter().map(|v| [v[0], v[1]]).collect()
}

fn to_set(p: &[[f64; 2]]) -> PointSet {
    PointSet::new(p.iter().map(|v| v.to_vec()).collect()).expect("non-empty")
}

fn sim_of(loss: LabLoss) -> Similarity {
    match loss {
        LabLoss::PairwiseDist => Similarity::Distance,
        _ => Similarity::Cosine,
    }
}

impl Problem {
    fn loss_and_grad(&self, g: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>) {
        let n = g.len();
        let mut grad = vec![[0.0; 2]; n];
        if self.loss == LabLoss::Ddc {
            let mut l = 0.0;
            for i in 0..n {
                for k in 0..2 {
                    let d = g[i][k] - self.ddc_target[i][k];
                    l += d * d;
                    grad[i][k] = 2.0 * d / n as f64;
                }
            }
            return (l / n as f64, grad);
        }
        let sim = sim_of(self.loss);
        let pairs = (n * (n - 1) / 2) as f64;
        let mut l = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let r = sim.eval(&self.src[i], &self.src[j]) - sim.eval(&g[i], &g[j]);
                l += r * r;
                let (gi, gj) = sim_grad(sim, &g[i], &g[j]);
                // d/dg of (s - sim(g))^2 = -2 r dsim/dg
                let c = -2.0 * r / pairs;
                for k in 0..2 {
                    grad[i][k] += c * gi[k];
                    grad[j][k] += c * gj[k];
                }
            }
        }
        l /= pairs;
        let mut centroid = [0.0; 2];
        for p in g {
            centroid[0] += p[0] / n as f64;
            centroid[1] += p[1] / n as f64;
        }
        for k in 0..2 {
            let d = centroid[k] - self.target_centroid[k];
            l += self.center_weight * d * d;
            for gr in &mut grad {
                gr[k] += 2.0 * self.center_weight * d / n as f64;
            }
        }
        (l, grad)
    }
}

/// Gradient of `sim(a, b)` with respect to `a` and `b`.
fn sim_grad(sim: Similarity, a: &[f64; 2], b: &[f64; 2]) -> ([f64; 2], [f64; 2]) {
    match sim {
        Similarity::Distance => {
            let d = sq_dist(a, b).sqrt();
            if d == 0.0 {
                return ([0.0; 2], [0.0; 2]);
            }
            let u = [(a[0] - b[0]) / d, (a[1] - b[1]) / d];
            (u, [-u[0], -u[1]])
        }
        Similarity::Cosine => {
            let na = a[0].hypot(a[1]);
            let nb = b[0].hypot(b[1]);
            if na == 0.0 || nb == 0.0 {
                return ([0.0; 2], [0.0; 2]);
            }
            let c = (a[0] * b[0] + a[1] * b[1]) / (na * nb);
            let ga = [
                b[0] / (na * nb) - c * a[0] / (na * na),
                b[1] / (na * nb) - c * a[1] / (na * na),
            ];
            let gb = [
                a[0] / (na * nb) - c * b[0] / (nb * nb),
                a[1] / (na * nb) - c * b[1] / (nb * nb),
            ];
            (ga, gb)
        }
    }
}

/// Runs one arm of the lab and reports the final geometry.
pub fn run_adaptation_2d(cfg: &LabConfig) -> Result<GeometryReport> {
    cfg.validate()?;
    let source = generate_points(
        cfg.source,
        cfg.n_source,
        cfg.noise,
        &mut RngStream::new(cfg.seed, SOURCE_STREAM),
    )?;
    let raw_target = generate_points(
        cfg.source,
        cfg.m_target,
        cfg.noise,
        &mut RngStream::new(cfg.seed, TARGET_STREAM),
    )?;
    let target = raw_target
        .map(|p| p.iter().map(|v| v * cfg.scale).collect())
        .rotated_2d(cfg.rotation_deg, &[0.0, 0.0])?
        .translated(&cfg.shift);

    let (sc, tc) = (source.centroid(), target.centroid());
    let w = [tc[0] - sc[0], tc[1] - sc[1]];
    let src = to_arr(&source);
    let ddc_target: Vec<[f64; 2]> = src.iter().map(|p| [p[0] + w[0], p[1] + w[1]]).collect();

    let mut g: Vec<[f64; 2]> = match cfg.init {
        LabInit::Source => {
            let mut rng = RngStream::new(cfg.seed, INIT_STREAM);
            src.iter()
                .map(|p| [p[0] + cfg.jitter * rng.normal(), p[1] + cfg.jitter * rng.normal()])
                .collect()
        }
        LabInit::Optimum => ddc_target.clone(),
        LabInit::RotatedOptimum { deg } => {
            let opt = to_set(&ddc_target);
            to_arr(&opt.rotated_2d(deg, &opt.centroid())?)
        }
    };

    let problem = Problem {
        loss: cfg.loss,
        center_weight: cfg.center_weight,
        src,
        ddc_target,
        target_centroid: [tc[0], tc[1]],
    };
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (l, grad) = problem.loss_and_grad(&g);
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("lab loss diverged at step {step}")));
        }
        losses.push(l);
        if step == cfg.steps {
            break;
        }
        for (p, d) in g.iter_mut().zip(&grad) {
            p[0] -= cfg.lr * d[0];
            p[1] -= cfg.lr * d[1];
        }
    }

    let generated = to_set(&g);
    let fit = orthogonal_procrustes(&source, &generated)?;
    Ok(GeometryReport {
        center_drift: center_drift(&generated, &target)?,
        rotation_deg: fit.rotation_deg,
        structure_corr: structure_score(&generated, &source)?,
        scale_ratio: generated.rms_radius() / source.rms_radius(),
        rotation_degenerate: fit.degenerate,
        losses,
        source,
        target,
        generated,
    })
}

/// Exposes the DDC / pairwise objective of a configuration for checks.
pub fn lab_objective(cfg: &LabConfig, source: &PointSet, target: &PointSet, gen: &PointSet) -> Result<f64> {
    let (sc, tc) = (source.centroid(), target.centroid());
    match cfg.loss {
        LabLoss::Ddc => {
            let mut l = 0.0;
            for (s, g) in source.points().iter().zip(gen.points()) {
                l += (g[0] - s[0] - (tc[0] - sc[0])).powi(2) + (g[1] - s[1] - (tc[1] - sc[1])).powi(2);
            }
            Ok(l / gen.len() as f64)
        }
        loss => {
            let gc = gen.centroid();
            Ok(pairwise_consistency_loss(source, gen, sim_of(loss))? + cfg.center_weight * sq_dist(&gc, &tc))
        }
    }
}
