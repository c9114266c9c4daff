use nalgebra::DMatrix;

use super::Tensor;
use crate::error::{Error, Result};

/// A non-empty set of points sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Vec<Vec<f64>>,
    dim: usize,
}

impl PointSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidArgument("point set must be non-empty".into()))?;
        if dim == 0 {
            return Err(Error::InvalidArgument("points must have dimension >= 1".into()));
        }
        if let Some(bad) = points.iter().position(|p| p.len() != dim) {
            return Err(Error::InvalidArgument(format!(
                "point {bad} has dimension {}, expected {dim}",
                points[bad].len()
            )));
        }
        Ok(Self { points, dim })
    }

    /// Rows of a `[n, d]` tensor (or `[n, ...]`, flattened per row).
    pub fn from_rows(t: &Tensor) -> Result<Self> {
        let n = t.shape()[0];
        let d = t.len() / n;
        Self::new(t.data().chunks_exact(d).map(<[f64]>::to_vec).collect())
    }

    pub fn to_rows(&self) -> Tensor {
        let data = self.points.iter().flatten().copied().collect();
        Tensor::new(vec![self.len(), self.dim], data).expect("consistent by construction")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        for p in &self.points {
            for (ci, pi) in c.iter_mut().zip(p) {
                *ci += pi;
            }
        }
        let n = self.len() as f64;
        c.iter_mut().for_each(|v| *v /= n);
        c
    }

    pub fn centered(&self) -> PointSet {
        let c = self.centroid();
        self.map(|p| p.iter().zip(&c).map(|(a, b)| a - b).collect())
    }

    /// Root-mean-square distance of the points from their centroid.
    pub fn rms_radius(&self) -> f64 {
        let c = self.centroid();
        let ss: f64 = self.points.iter().map(|p| sq_dist(p, &c)).sum();
        (ss / self.len() as f64).sqrt()
    }

    pub fn map(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> PointSet {
        PointSet {
            points: self.points.iter().map(|p| f(p)).collect(),
            dim: self.dim,
        }
    }

    pub fn translated(&self, offset: &[f64]) -> PointSet {
        self.map(|p| p.iter().zip(offset).map(|(a, b)| a + b).collect())
    }

    /// Rotation by `deg` degrees about `center`, 2-D only.
    pub fn rotated_2d(&self, deg: f64, center: &[f64]) -> Result<PointSet> {
        if self.dim != 2 {
            return Err(Error::InvalidArgument("rotated_2d needs 2-D points".into()));
        }
        let (s, c) = deg.to_radians().sin_cos();
        Ok(self.map(|p| {
            let (x, y) = (p[0] - center[0], p[1] - center[1]);
            vec![center[0] + c * x - s * y, center[1] + s * x + c * y]
        }))
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of aligning one centered point set onto another.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcrustesFit {
    /// Angle of the fitted proper rotation, in `[0, 180]`.
    pub rotation_deg: f64,
    /// RMS distance between the rotated source and the destination.
    pub residual: f64,
    /// Cross-covariance was rank-deficient; `rotation_deg` is reported as 0.
    pub degenerate: bool,
    /// Row-major `D x D` rotation matrix mapping centered `a` onto centered `b`.
    pub rotation: Vec<f64>,
}

/// Best proper rotation taking `a` onto `b` after both are centered (Kabsch).
///
/// For `D > 3` the reported angle is exact for a rotation acting in a single
/// plane; for `D = 2, 3` it is the usual rotation angle.
pub fn orthogonal_procrustes(a: &PointSet, b: &PointSet) -> Result<ProcrustesFit> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "procrustes needs matching sets, got {}x{} and {}x{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    let d = a.dim();
    let (ac, bc) = (a.centered(), b.centered());
    let n = a.len();
    let am = DMatrix::from_fn(n, d, |i, j| ac.points[i][j]);
    let bm = DMatrix::from_fn(n, d, |i, j| bc.points[i][j]);
    let h = am.transpose() * &bm;
    let svd = h.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested u");
    let v_t = svd.v_t.as_ref().expect("requested v_t");
    let v = v_t.transpose();
    let mut fix = DMatrix::<f64>::identity(d, d);
    if (&v * u.transpose()).determinant() < 0.0 {
        fix[(d - 1, d - 1)] = -1.0;
    }
    let r = &v * fix * u.transpose();

    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let degenerate = smax == 0.0 || smin <= 1e-12 * smax;

    let aligned = &am * r.transpose();
    let ss: f64 = (aligned - &bm).iter().map(|e| e * e).sum();
    let residual = (ss / n as f64).sqrt();

    let rotation_deg = if degenerate || d == 1 {
        0.0
    } else {
        // tr R - (D - 2) = 2 cos(theta), ||R - R^T||_F = 2 sqrt(2) sin(theta)
        let cos2 = r.trace() - (d as f64 - 2.0);
        let sin2 = (&r - r.transpose()).norm() / std::f64::consts::SQRT_2;
        sin2.atan2(cos2).to_degrees()
    };
    let rotation = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| r[(i, j)])
        .collect();
    Ok(ProcrustesFit {
        rotation_deg,
        residual,
        degenerate,
        rotation,
    })
}

/// Symmetric Euclidean distance matrix with zero diagonal.
pub fn pairwise_distances(p: &PointSet) -> Result<Tensor> {
    let n = p.len();
    if n < 2 {
        return Err(Error::InvalidArgument("pairwise distances need >= 2 points".into()));
    }
    let mut out = Tensor::zeros(&[n, n]);
    let data = out.data_mut();
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(&p.points[i], &p.points[j]).sqrt();
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Ok(out)
}

/// Upper-triangle (`i < j`) entries of the distance matrix, row-major.
pub fn upper_distances(p: &PointSet) -> Vec<f64> {
    let n = p.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(sq_dist(&p.points[i], &p.points[j]).sqrt());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_set(rng: &mut RngStream, n: usize, d: usize) -> PointSet {
        PointSet::new((0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()).unwrap()
    }

    #[test]
    fn identical_sets_align_trivially() {
        let a = random_set(&mut RngStream::new(1, 0), 12, 2);
        let fit = orthogonal_procrustes(&a, &a).unwrap();
        assert!(fit.rotation_deg.abs() < 1e-6);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn recovers_quarter_turn() {
        let a = random_set(&mut RngStream::new(2, 0), 10, 2);
        let b = a.rotated_2d(90.0, &a.centroid()).unwrap();
        let fit = orthogonal_procrustes(&a, &b).unwrap();
        assert!((fit.rotation_deg - 90.0).abs() < 1e-9, "{}", fit.rotation_deg);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn three_dimensional_angle() {
        let a = random_set(&mut RngStream::new(3, 0), 10, 3);
        let (s, c) = 30f64.to_radians().sin_cos();
        let b = a.map(|p| vec![c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]);
        let fit = orthogonal_procrustes(&a, &b).unwrap();
        assert!((fit.rotation_deg - 30.0).abs() < 1e-9);
    }

    #[test]
    fn matches_grid_search_residual() {
        let mut rng = RngStream::new(4, 0);
        let a = random_set(&mut rng, 8, 2);
        let b = random_set(&mut rng, 8, 2);
        let fit = orthogonal_procrustes(&a, &b).unwrap();
        let (ac, bc) = (a.centered(), b.centered());
        let grid_rms = |deg: f64| {
            let r = ac.rotated_2d(deg, &[0.0, 0.0]).unwrap();
            let ss: f64 = r.points().iter().zip(bc.points()).map(|(p, q)| sq_dist(p, q)).sum();
            (ss / 8.0).sqrt()
        };
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..3600 {
            let deg = k as f64 * 0.1;
            let e = grid_rms(deg);
            if e < best.0 {
                best = (e, deg);
            }
        }
        // refine the best grid cell by golden-section search
        let (mut lo, mut hi) = (best.1 - 0.1, best.1 + 0.1);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) * 0.382;
            let m2 = lo + (hi - lo) * 0.618;
            if grid_rms(m1) < grid_rms(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let oracle = grid_rms(0.5 * (lo + hi));
        assert!(best.0 >= fit.residual - 1e-12);
        assert!((oracle - fit.residual).abs() < 1e-6, "{oracle} vs {}", fit.residual);
    }

    #[test]
    fn residual_invariant_under_common_rotation() {
        let mut rng = RngStream::new(5, 0);
        let a = random_set(&mut rng, 10, 2);
        let b = random_set(&mut rng, 10, 2);
        let base = orthogonal_procrustes(&a, &b).unwrap().residual;
        for k in 0..10 {
            let deg = 37.0 * k as f64;
            let ra = a.rotated_2d(deg, &[0.3, -1.0]).unwrap();
            let rb = b.rotated_2d(deg, &[0.3, -1.0]).unwrap();
            let r = orthogonal_procrustes(&ra, &rb).unwrap().residual;
            assert!((r - base).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_sets_flag_degeneracy() {
        let a = PointSet::new(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let fit = orthogonal_procrustes(&a, &a).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.rotation_deg, 0.0);
    }

    #[test]
    fn three_four_five() {
        let p = PointSet::new(vec![vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let d = pairwise_distances(&p).unwrap();
        assert_eq!(d.data(), &[0.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn distances_match_double_loop_and_survive_rotation() {
        let mut rng = RngStream::new(6, 0);
        let p = random_set(&mut rng, 5, 2);
        let d = pairwise_distances(&p).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let dx = p.points()[i][0] - p.points()[j][0];
                let dy = p.points()[i][1] - p.points()[j][1];
                assert!((d.data()[i * 5 + j] - (dx * dx + dy * dy).sqrt()).abs() < 1e-15);
            }
        }
        let r = pairwise_distances(&p.rotated_2d(71.0, &[1.0, 2.0]).unwrap()).unwrap();
        assert!(d.max_abs_diff(&r).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_sets() {
        let a = PointSet::new(vec![vec![0.0, 0.0]]).unwrap();
        let b = PointSet::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(orthogonal_procrustes(&a, &b).is_err());
        assert!(PointSet::new(vec![]).is_err());
        assert!(PointSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
