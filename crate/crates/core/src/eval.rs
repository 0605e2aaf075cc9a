//! Accuracy, completion, precision, recall and F-score between point clouds.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meshing::TriangleMesh;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Distance threshold for precision and recall (meters).
    pub threshold: f64,
    /// Points sampled per mesh.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            n_samples: 100_000,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || self.n_samples == 0 {
            return Err(Error::InvalidConfig("threshold must be > 0 and n_samples >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub completion: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_mesh(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle(t);
        total += (b - a).cross(&(c - a)).norm() * 0.5;
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Empty("cannot sample an empty mesh".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.random::<f64>() * total;
        let t = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle(t);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        out.push(a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2));
    }
    Ok(out)
}

/// Exact nearest-neighbor index over a static point set.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Node order: each subtree occupies a contiguous slice whose middle
    /// element is the splitting point.
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        Self::build(points, &mut order, &mut axes);
        Self {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    fn build(points: &[Vector3<f64>], order: &mut [usize], axes: &mut [u8]) {
        if order.is_empty() {
            return;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in order.iter() {
            lo = lo.inf(&points[i]);
            hi = hi.sup(&points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        axes[mid] = axis as u8;
        let (left, right) = order.split_at_mut(mid);
        let (laxes, raxes) = axes.split_at_mut(mid);
        Self::build(points, left, laxes);
        Self::build(points, &mut right[1..], &mut raxes[1..]);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to the nearest indexed point.
    pub fn nearest_sq(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.order.len(), &mut best);
        best
    }

    fn search(&self, q: &Vector3<f64>, start: usize, end: usize, best: &mut f64) {
        if start >= end {
            return;
        }
        let mid = start + (end - start) / 2;
        let p = &self.points[self.order[mid]];
        let d = (p - q).norm_squared();
        if d < *best {
            *best = d;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((start, mid), (mid + 1, end)) } else { ((mid + 1, end), (start, mid)) };
        self.search(q, near.0, near.1, best);
        if diff * diff < *best {
            self.search(q, far.0, far.1, best);
        }
    }
}

/// Nearest distances from each query point to the index, in query order.
fn nearest_distances(index: &KdTree, queries: &[Vector3<f64>]) -> Vec<f64> {
    queries.par_iter().map(|q| index.nearest_sq(q).sqrt()).collect()
}

/// Metrics between a predicted cloud `pred` and a ground-truth cloud `gt`.
pub fn compute_metrics(pred: &[Vector3<f64>], gt: &[Vector3<f64>], config: &EvalConfig) -> Result<Metrics> {
    config.validate()?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty("metrics need two non-empty point clouds".into()));
    }
    let d_pred = nearest_distances(&KdTree::new(gt), pred);
    let d_gt = nearest_distances(&KdTree::new(pred), gt);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let within = |v: &[f64]| v.iter().filter(|d| **d < config.threshold).count() as f64 / v.len() as f64;
    let precision = within(&d_pred);
    let recall = within(&d_gt);
    Ok(Metrics {
        accuracy: mean(&d_pred),
        completion: mean(&d_gt),
        precision,
        recall,
        fscore: f_score(precision, recall),
    })
}

/// Sample both meshes and compare them.
pub fn evaluate_meshes(pred: &TriangleMesh, gt: &TriangleMesh, config: &EvalConfig) -> Result<Metrics> {
    let a = sample_mesh(pred, config.n_samples, config.seed)?;
    let b = sample_mesh(gt, config.n_samples, config.seed.wrapping_add(1))?;
    compute_metrics(&a, &b, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_cloud(n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.2)).collect()
    }

    fn brute(pred: &[Vector3<f64>], gt: &[Vector3<f64>], tau: f64) -> Metrics {
        let nn = |q: &Vector3<f64>, set: &[Vector3<f64>]| set.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
        let dp: Vec<f64> = pred.iter().map(|q| nn(q, gt)).collect();
        let dg: Vec<f64> = gt.iter().map(|q| nn(q, pred)).collect();
        let p = dp.iter().filter(|d| **d < tau).count() as f64 / dp.len() as f64;
        let r = dg.iter().filter(|d| **d < tau).count() as f64 / dg.len() as f64;
        Metrics {
            accuracy: dp.iter().sum::<f64>() / dp.len() as f64,
            completion: dg.iter().sum::<f64>() / dg.len() as f64,
            precision: p,
            recall: r,
            fscore: if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 },
        }
    }

    fn square() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            colors: None,
        }
    }

    #[test]
    fn table_harmonic_means() {
        assert!((f_score(0.648, 0.518) - 0.575).abs() < 1e-3);
        // The printed 0.409 sits 0.00103 below the harmonic mean of the
        // printed precision and recall, and stays out of reach even at the
        // low corner of their rounding intervals.
        assert!((f_score(0.448, 0.378) - 0.41003).abs() < 1e-5);
        assert!(f_score(0.4475, 0.3775) > 0.4095);
        assert_eq!(f_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(300, &mut rng);
        let m = compute_metrics(&c, &c, &EvalConfig::default()).unwrap();
        assert_eq!((m.accuracy, m.completion), (0.0, 0.0));
        assert_eq!((m.precision, m.recall, m.fscore), (1.0, 1.0, 1.0));
    }

    #[test]
    fn matches_pairwise_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = random_cloud(200, &mut rng);
            let b = random_cloud(200, &mut rng);
            let cfg = EvalConfig {
                threshold: 0.1,
                ..Default::default()
            };
            let m = compute_metrics(&a, &b, &cfg).unwrap();
            let o = brute(&a, &b, 0.1);
            for (x, y) in [
                (m.accuracy, o.accuracy),
                (m.completion, o.completion),
                (m.precision, o.precision),
                (m.recall, o.recall),
                (m.fscore, o.fscore),
            ] {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_inputs_error() {
        assert!(compute_metrics(&[], &[Vector3::zeros()], &EvalConfig::default()).is_err());
        assert!(sample_mesh(&TriangleMesh::default(), 10, 0).is_err());
    }

    #[test]
    fn square_sampling_is_area_weighted() {
        let mesh = TriangleMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.5, 0.0, 0.0),
            ],
            // Areas 0.25, 0.25 and 0.5.
            triangles: vec![[0, 4, 2], [4, 1, 2], [0, 2, 3]],
            colors: None,
        };
        let n = 10_000;
        let pts = sample_mesh(&mesh, n, 3).unwrap();
        let mut counts = [0usize; 3];
        for p in &pts {
            assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y) && p.z == 0.0);
            if p.y > p.x {
                counts[2] += 1;
            } else if p.x < 0.5 + 0.5 * p.y {
                counts[0] += 1;
            } else {
                counts[1] += 1;
            }
        }
        for (c, share) in counts.iter().zip([0.25, 0.25, 0.5]) {
            let sigma = (n as f64 * share * (1.0 - share)).sqrt();
            assert!((*c as f64 - n as f64 * share).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn single_triangle_barycentric() {
        let mesh = TriangleMesh {
            vertices: vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(2.0, 0.0, 1.0), Vector3::new(0.0, 1.0, 1.0)],
            triangles: vec![[0, 1, 2]],
            colors: None,
        };
        for p in sample_mesh(&mesh, 2000, 4).unwrap() {
            let (u, v) = (p.x / 2.0, p.y);
            assert!(u >= -1e-12 && v >= -1e-12 && u + v <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_mesh(&square(), 500, 9).unwrap(), sample_mesh(&square(), 500, 9).unwrap());
    }

    proptest! {
        #[test]
        fn index_matches_scan(seed in any::<u64>(), n in 1usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_cloud(n, &mut rng);
            let tree = KdTree::new(&pts);
            for _ in 0..20 {
                let q = Vector3::new(rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5), rng.random_range(-0.5..0.7));
                let brute = pts.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
                prop_assert_eq!(tree.nearest_sq(&q), brute);
            }
        }

        #[test]
        fn swapping_roles_swaps_metrics(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(80, &mut rng);
            let b = random_cloud(60, &mut rng);
            let cfg = EvalConfig { threshold: 0.1, ..Default::default() };
            let m = compute_metrics(&a, &b, &cfg).unwrap();
            let s = compute_metrics(&b, &a, &cfg).unwrap();
            prop_assert_eq!((m.accuracy, m.precision), (s.completion, s.recall));
            prop_assert_eq!((m.completion, m.recall), (s.accuracy, s.precision));
            prop_assert!((0.0..=1.0).contains(&m.fscore));
            prop_assert!(m.fscore <= 2.0 * m.precision.min(m.recall) + 1e-12);
        }
    }
}
