//! Desk-scale proxies for structure, diversity and distribution geometry.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::geolab::{center_drift, structure_score};
use crate::losses::FeatureEncoder;
use crate::numerics::{orthogonal_procrustes, sq_dist, PointSet, Tensor};

/// Pairwise-distance means below this are treated as zero.
const MIN_SPREAD: f64 = 1e-12;

/// One evaluation checkpoint of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub iteration: usize,
    pub loss_dif: f64,
    pub loss_ddc: f64,
    pub loss_style: f64,
    pub center_drift: f64,
    pub rotation_deg: f64,
    pub structure_corr: f64,
    pub scs_proxy: f64,
    pub diversity: f64,
}

impl MetricsRow {
    pub fn new(run_id: &str, seed: u64, iteration: usize, losses: [f64; 3], eval: &EvalMetrics) -> Self {
        Self {
            run_id: run_id.to_string(),
            seed,
            iteration,
            loss_dif: losses[0],
            loss_ddc: losses[1],
            loss_style: losses[2],
            center_drift: eval.center_drift,
            rotation_deg: eval.rotation_deg,
            structure_corr: eval.structure_corr,
            scs_proxy: eval.scs_proxy,
            diversity: eval.diversity,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        let fields = [
            ("loss_dif", self.loss_dif),
            ("loss_ddc", self.loss_ddc),
            ("loss_style", self.loss_style),
            ("center_drift", self.center_drift),
            ("rotation_deg", self.rotation_deg),
            ("structure_corr", self.structure_corr),
            ("scs_proxy", self.scs_proxy),
            ("diversity", self.diversity),
        ];
        match fields.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::NonFinite(format!(
                "metrics field {name} = {v} at iteration {}",
                self.iteration
            ))),
            None => Ok(()),
        }
    }
}

/// Sample-quality proxies of one generated set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Centroid offset from the target set in encoder space, over the target RMS radius.
    pub center_drift: f64,
    /// Procrustes angle between source and generated embeddings in the
    /// source's leading principal plane.
    pub rotation_deg: f64,
    /// Pearson correlation of pairwise embedding distances (generated vs source).
    pub structure_corr: f64,
    /// Mean cosine similarity of paired Sobel edge maps (images) or of paired
    /// centered positions (points).
    pub scs_proxy: f64,
    /// Mean pairwise embedding distance among generated over that among targets.
    pub diversity: f64,
    /// Mean distance from each generated embedding to its nearest target.
    pub nearest_target: f64,
}

/// Sobel gradient magnitude of every plane of a `[..., H, W]` tensor, with replicated borders.
pub fn sobel_magnitude(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    if s.len() < 2 {
        return Err(Error::InvalidArgument(format!("Sobel needs an image, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Tensor::zeros(s);
    for (src, dst) in img
        .data()
        .chunks_exact(h * w)
        .zip(out.data_mut().chunks_exact_mut(h * w))
    {
        let at = |r: isize, c: isize| {
            let r = r.clamp(0, h as isize - 1) as usize;
            let c = c.clamp(0, w as isize - 1) as usize;
            src[r * w + c]
        };
        for r in 0..h as isize {
            for c in 0..w as isize {
                let right = at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1);
                let left = at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1);
                let below = at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1);
                let above = at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1);
                let (gx, gy) = (right - left, below - above);
                dst[r as usize * w + c as usize] = gx.hypot(gy);
            }
        }
    }
    Ok(out)
}

/// Cosine similarity; two zero vectors count as identical, one as orthogonal.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

fn rows(t: &Tensor) -> impl Iterator<Item = &[f64]> {
    let n = t.shape()[0];
    t.data().chunks_exact(t.len() / n)
}

/// Mean cosine of paired edge maps (`[n, C, H, W]`) or centered positions (`[n, D]`).
pub fn scs_proxy(generated: &Tensor, source: &Tensor) -> Result<f64> {
    ensure_shape(source.shape(), generated.shape())?;
    let n = generated.shape()[0] as f64;
    let total: f64 = if generated.ndim() >= 3 {
        let (eg, es) = (sobel_magnitude(generated)?, sobel_magnitude(source)?);
        rows(&eg).zip(rows(&es)).map(|(a, b)| cosine(a, b)).sum()
    } else {
        let gc = PointSet::from_rows(generated)?.centered();
        let sc = PointSet::from_rows(source)?.centered();
        gc.points().iter().zip(sc.points()).map(|(a, b)| cosine(a, b)).sum()
    };
    Ok(total / n)
}

fn mean_pairwise_distance(e: &[Vec<f64>]) -> f64 {
    let n = e.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += sq_dist(&e[i], &e[j]).sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

fn embed_rows(enc: &FeatureEncoder, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let e = enc.embed(x)?;
    Ok(rows(&e).map(<[f64]>::to_vec).collect())
}

/// Leading two principal directions of `e` (rows), as a `2 x d` matrix.
fn principal_plane(e: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let (n, d) = (e.len(), e[0].len());
    if n < 2 || d < 2 {
        return None;
    }
    let c = PointSet::new(e.to_vec()).ok()?.centered();
    let x = DMatrix::from_fn(n, d, |i, j| c.points()[i][j]);
    let svd = x.svd(false, true);
    let vt = svd.v_t?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    if order.len() < 2 {
        return None;
    }
    Some(DMatrix::from_fn(2, d, |r, j| vt[(order[r], j)]))
}

fn project(e: &[Vec<f64>], plane: &DMatrix<f64>) -> Result<PointSet> {
    PointSet::new(
        e.iter()
            .map(|v| {
                (0..2)
                    .map(|r| plane.row(r).iter().zip(v).map(|(p, x)| p * x).sum())
                    .collect()
            })
            .collect(),
    )
}

/// Rotation of `gen` relative to `src` within the source's principal plane.
fn plane_rotation(gen: &[Vec<f64>], src: &[Vec<f64>]) -> Result<f64> {
    if gen.len() != src.len() {
        return Ok(0.0);
    }
    let Some(plane) = principal_plane(src) else {
        return Ok(0.0);
    };
    let fit = orthogonal_procrustes(&project(src, &plane)?, &project(gen, &plane)?)?;
    if fit.degenerate {
        log::warn!("rotation proxy undefined for a rank-deficient projection; reporting 0");
    }
    Ok(fit.rotation_deg)
}

/// Proxies for a generated batch paired with its `source` batch.
pub fn evaluate_metrics(
    generated: &Tensor,
    source: &Tensor,
    target: &Tensor,
    enc: &FeatureEncoder,
) -> Result<EvalMetrics> {
    if generated.ndim() < 2 || generated.shape()[0] < 2 {
        return Err(Error::InvalidArgument(
            "metrics need at least 2 generated samples".into(),
        ));
    }
    ensure_shape(&generated.shape()[1..], &target.shape()[1..])?;
    let eg = embed_rows(enc, generated)?;
    let es = embed_rows(enc, source)?;
    let et = embed_rows(enc, target)?;
    let (gset, tset) = (PointSet::new(eg.clone())?, PointSet::new(et.clone())?);

    let structure = if eg.len() == es.len() && eg.len() >= 3 {
        structure_score(&gset, &PointSet::new(es.clone())?)?
    } else {
        None
    };
    let structure_corr = structure.unwrap_or_else(|| {
        log::warn!("structure correlation undefined (constant distances or too few pairs); reporting 0");
        0.0
    });

    let spread_t = mean_pairwise_distance(&et);
    let diversity = mean_pairwise_distance(&eg) / if spread_t < MIN_SPREAD { 1.0 } else { spread_t };
    let nearest_target = eg
        .iter()
        .map(|g| et.iter().map(|t| sq_dist(g, t)).fold(f64::INFINITY, f64::min).sqrt())
        .sum::<f64>()
        / eg.len() as f64;

    Ok(EvalMetrics {
        center_drift: center_drift(&gset, &tset)?,
        rotation_deg: plane_rotation(&eg, &es)?,
        structure_corr,
        scs_proxy: if source.shape() == generated.shape() {
            scs_proxy(generated, source)?
        } else {
            0.0
        },
        diversity,
        nearest_target,
    })
}
