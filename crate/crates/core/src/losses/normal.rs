//! Normal-prior loss: L1 plus cosine distance between rendered and prior
//! camera-space normals.

use crate::grid::Grid;

use super::sign;

/// Rendered normals shorter than this are treated as empty pixels.
const MIN_NORM: f64 = 1e-6;

pub struct NormalLoss {
    /// `lambda_1 · l1 + lambda_cos · cos`.
    pub value: f64,
    pub l1: f64,
    pub cos: f64,
    pub valid: usize,
    /// d(value)/d(rendered normal).
    pub grad: Grid<[f64; 3]>,
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn normal_loss(
    rendered: &Grid<[f64; 3]>,
    prior: &Grid<[f64; 3]>,
    mask: &Grid<bool>,
    lambda_1: f64,
    lambda_cos: f64,
) -> NormalLoss {
    let mut grad = Grid::new(rendered.width, rendered.height, [0.0; 3]);
    let used: Vec<usize> = (0..mask.len())
        .filter(|&i| mask.data[i] && norm3(&rendered.data[i]) >= MIN_NORM && norm3(&prior.data[i]) >= MIN_NORM)
        .collect();
    if used.is_empty() {
        return NormalLoss {
            value: 0.0,
            l1: 0.0,
            cos: 0.0,
            valid: 0,
            grad,
        };
    }
    let inv = 1.0 / used.len() as f64;
    let (mut l1, mut cos) = (0.0, 0.0);
    for &i in &used {
        let n = rendered.data[i];
        let p = prior.data[i];
        let (ln, lp) = (norm3(&n), norm3(&p));
        let dot = n[0] * p[0] + n[1] * p[1] + n[2] * p[2];
        let c = dot / (ln * lp);
        cos += 1.0 - c;
        let g = &mut grad.data[i];
        for k in 0..3 {
            let d = n[k] - p[k];
            l1 += d.abs();
            // d(1 - c)/dn = -(p/|p| - c n/|n|) / |n|
            let dc = (p[k] / lp - c * n[k] / ln) / ln;
            g[k] = inv * (lambda_1 * sign(d) - lambda_cos * dc);
        }
    }
    l1 *= inv;
    cos *= inv;
    NormalLoss {
        value: lambda_1 * l1 + lambda_cos * cos,
        l1,
        cos,
        valid: used.len(),
        grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
        loop {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let l = norm3(&v);
            if l > 0.1 && l < 1.0 {
                return v.map(|c| c / l);
            }
        }
    }

    fn field(w: usize, h: usize, rng: &mut impl Rng) -> Grid<[f64; 3]> {
        Grid::from_vec(w, h, (0..w * h).map(|_| random_unit(rng)).collect())
    }

    #[test]
    fn equal_fields_are_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = field(6, 5, &mut rng);
        let l = normal_loss(&n, &n, &Grid::new(6, 5, true), 0.01, 0.01);
        assert!(l.value.abs() < 1e-15);
    }

    #[test]
    fn antipodal_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = field(4, 4, &mut rng);
        let n = p.map(|v| v.map(|c| -c));
        let l = normal_loss(&n, &p, &Grid::new(4, 4, true), 1.0, 1.0);
        assert!((l.cos - 2.0).abs() < 1e-12);
        let expected: f64 = p.data.iter().map(|v| v.iter().map(|c| (2.0 * c).abs()).sum::<f64>()).sum::<f64>() / 16.0;
        assert!((l.l1 - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = field(9, 7, &mut rng);
        let p = field(9, 7, &mut rng);
        let mask = Grid::from_vec(9, 7, (0..63).map(|_| rng.random_bool(0.7)).collect());
        let l = normal_loss(&n, &p, &mask, 0.01, 0.01);
        let (mut a, mut b, mut cnt) = (0.0, 0.0, 0.0);
        for i in 0..63 {
            if !mask.data[i] {
                continue;
            }
            cnt += 1.0;
            let (x, y) = (n.data[i], p.data[i]);
            a += (x[0] - y[0]).abs() + (x[1] - y[1]).abs() + (x[2] - y[2]).abs();
            b += 1.0 - (x[0] * y[0] + x[1] * y[1] + x[2] * y[2]);
        }
        assert!((l.value - (0.01 * a + 0.01 * b) / cnt).abs() < 1e-7);
    }

    #[test]
    fn short_normals_are_excluded() {
        let n = Grid::from_vec(2, 1, vec![[0.0; 3], [0.0, 0.0, -1.0]]);
        let p = Grid::new(2, 1, [0.0, 0.0, -1.0]);
        let l = normal_loss(&n, &p, &Grid::new(2, 1, true), 1.0, 1.0);
        assert_eq!(l.valid, 1);
        assert_eq!(l.grad.data[0], [0.0; 3]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Unnormalized render to exercise the cosine normalization.
        let n = Grid::from_vec(5, 5, (0..25).map(|_| random_unit(&mut rng).map(|c| c * 0.7)).collect());
        let p = field(5, 5, &mut rng);
        let mask = Grid::new(5, 5, true);
        let l = normal_loss(&n, &p, &mask, 0.3, 0.7);
        for i in 0..25 {
            for k in 0..3 {
                let h = 1e-6;
                let mut a = n.clone();
                a.data[i][k] += h;
                let mut b = n.clone();
                b.data[i][k] -= h;
                let fd = (normal_loss(&a, &p, &mask, 0.3, 0.7).value - normal_loss(&b, &p, &mask, 0.3, 0.7).value) / (2.0 * h);
                let an = l.grad.data[i][k];
                assert!((fd - an).abs() <= 1e-6 + 1e-4 * an.abs(), "{fd} vs {an}");
            }
        }
    }
}
