//! Seeded sampling shared by the model checkers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` Latin-hypercube points in `[0,1)^dims`: each axis hits every stratum `[k/n, (k+1)/n)` once.
pub fn latin_hypercube(n: usize, dims: usize, rng: &mut Rng64) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dims]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..dims {
        perm.shuffle(rng);
        for (i, p) in pts.iter_mut().enumerate() {
            p[k] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

/// Box-Muller draw.
fn standard_normal(rng: &mut Rng64) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform direction on the unit sphere in `R^n`.
pub fn unit_vector(n: usize, rng: &mut Rng64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strata_are_covered_once() {
        let mut rng = rng_from_seed(3);
        let pts = latin_hypercube(64, 5, &mut rng);
        for k in 0..5 {
            let mut seen = [false; 64];
            for p in &pts {
                let s = (p[k] * 64.0).floor() as usize;
                assert!(!seen[s]);
                seen[s] = true;
            }
        }
    }

    #[test]
    fn same_seed_same_points() {
        let a = latin_hypercube(16, 3, &mut rng_from_seed(9));
        let b = latin_hypercube(16, 3, &mut rng_from_seed(9));
        assert_eq!(a, b);
    }
}
