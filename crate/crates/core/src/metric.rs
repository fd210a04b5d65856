//! Cosine distance and the quality-aware distance that scales it by the
//! candidate's norm raised to a learned power.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{Tape, Var, POW_BASE_FLOOR};

/// One embedding split into unit direction and norm (the quality proxy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    direction: Vec<f64>,
    norm: f64,
}

impl Feature {
    /// Split a raw embedding. A zero vector keeps a zero direction.
    pub fn from_raw(raw: &[f64]) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let direction = if norm > 0.0 { raw.iter().map(|v| v / norm).collect() } else { vec![0.0; raw.len()] };
        Self { direction, norm }
    }

    /// Build from a direction (renormalized) and a norm.
    pub fn new(direction: &[f64], norm: f64) -> Result<Self> {
        if !(norm >= 0.0) || !norm.is_finite() {
            return Err(Error::Parameter(format!("feature norm must be finite and >= 0, got {norm}")));
        }
        let len = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || len == 0.0 {
            return Ok(Self { direction: vec![0.0; direction.len()], norm: if len == 0.0 { 0.0 } else { norm } });
        }
        Ok(Self { direction: direction.iter().map(|v| v / len).collect(), norm })
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.norm == 0.0
    }

    pub fn raw(&self) -> Vec<f64> {
        self.direction.iter().map(|v| v * self.norm).collect()
    }
}

/// Trainable quality exponent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gamma(f64);

impl Gamma {
    pub const DEFAULT_INIT: f64 = 1.0;

    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Parameter(format!("gamma must be finite, got {value}")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Gamma {
    fn default() -> Self {
        Self(Self::DEFAULT_INIT)
    }
}

/// `1 - u_i . u_j` clamped to `[0, 2]`; defined as 1 when either feature has
/// zero norm.
pub fn cosine_distance(fi: &Feature, fj: &Feature) -> f64 {
    if fi.is_degenerate() || fj.is_degenerate() {
        return 1.0;
    }
    (1.0 - dot(fi.direction(), fj.direction())).clamp(0.0, 2.0)
}

/// Cosine distance scaled by `max(||f_j||, 1e-8)^gamma`. Asymmetric: only the
/// candidate's norm enters.
pub fn quality_aware_distance(fi: &Feature, fj: &Feature, gamma: Gamma) -> f64 {
    cosine_distance(fi, fj) * fj.norm().max(POW_BASE_FLOOR).powf(gamma.value())
}

/// Distance from `fj` to its nearest member of `set`.
pub fn distance_to_set(fj: &Feature, set: &[Feature], gamma: Gamma) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Contract("distance to an empty core template".into()));
    }
    Ok(set.iter().map(|fi| quality_aware_distance(fi, fj, gamma)).fold(f64::INFINITY, f64::min))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Differentiable quality-aware distances from one candidate row to every
/// template row.
///
/// `directions` is `[n x c]`, `candidate` is `[1 x c]`, `quality` is the
/// precomputed `norms^gamma` vector `[n]`. Returns `[n]`.
pub fn quality_distances_on_tape(tape: &mut Tape, directions: Var, candidate: Var, quality: Var) -> Result<Var> {
    let n = tape.value(directions).dims2().0;
    let ct = tape.transpose(candidate);
    let inner = tape.matmul(directions, ct)?;
    let inner = tape.reshape(inner, vec![n])?;
    let neg = tape.scale(inner, -1.0);
    let cosine = tape.add_const(neg, 1.0);
    let cosine = tape.clamp(cosine, 0.0, 2.0);
    tape.counter_mut().distance_evals += n as u64;
    tape.mul(cosine, quality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{gradcheck, Tensor};
    use proptest::prelude::*;

    fn feat(d: &[f64], n: f64) -> Feature {
        Feature::new(d, n).unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        let a = feat(&[1.0, 0.0], 1.0);
        let b = feat(&[0.0, 1.0], 3.0);
        let c = feat(&[-1.0, 0.0], 0.5);
        assert_eq!(cosine_distance(&a, &a), 0.0);
        assert_eq!(cosine_distance(&a, &b), 1.0);
        assert_eq!(cosine_distance(&a, &c), 2.0);
    }

    #[test]
    fn zero_norm_is_neutral() {
        let a = feat(&[1.0, 0.0], 1.0);
        let z = Feature::from_raw(&[0.0, 0.0]);
        assert!(z.is_degenerate());
        assert_eq!(z.direction(), &[0.0, 0.0]);
        assert_eq!(cosine_distance(&a, &z), 1.0);
        // gamma < 0 on a zero norm stays finite thanks to the clamp
        let d = quality_aware_distance(&a, &z, Gamma::new(-2.0).unwrap());
        assert!(d.is_finite());
    }

    #[test]
    fn direct_substitution() {
        let a = feat(&[1.0, 0.0], 1.0);
        let b = feat(&[0.0, 1.0], 2.0);
        assert_eq!(quality_aware_distance(&a, &b, Gamma::new(1.0).unwrap()), 2.0);
    }

    #[test]
    fn distance_to_set_cases() {
        let a = feat(&[1.0, 0.0], 1.0);
        let b = feat(&[0.0, 1.0], 2.0);
        let x = feat(&[1.0, 1.0], 1.5);
        let g = Gamma::new(0.7).unwrap();
        assert_eq!(distance_to_set(&a, &[a.clone(), b.clone()], g).unwrap(), 0.0);
        assert_eq!(distance_to_set(&x, &[a.clone()], g).unwrap(), quality_aware_distance(&a, &x, g));
        let brute = [quality_aware_distance(&a, &x, g), quality_aware_distance(&b, &x, g)];
        let expect = if brute[0] < brute[1] { brute[0] } else { brute[1] };
        assert_eq!(distance_to_set(&x, &[a, b], g).unwrap(), expect);
        assert!(matches!(distance_to_set(&x, &[], g), Err(Error::Contract(_))));
    }

    #[test]
    fn gamma_rejects_nan() {
        assert!(Gamma::new(f64::NAN).is_err());
        assert!(Gamma::new(f64::INFINITY).is_err());
    }

    /// Large gamma: ordering of d_q equals ordering by norm when cosine
    /// distances sit in [0.1, 2] and norms in [0.5, 2] differ by >= 1.08x.
    #[test]
    fn large_gamma_ranks_by_norm() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = Gamma::new(50.0).unwrap();
        let mut checked = 0;
        while checked < 500 {
            let c = 8;
            let anchor: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let anchor = feat(&anchor, 1.0);
            // norms on a 1.08x grid over [0.5, 2]: d_c ratios are at most 20,
            // and 1.08^50 > 20, so any two distinct norms are far enough apart
            let mut grid: Vec<usize> = (0..19).collect();
            let cands: Vec<Feature> = (0..6)
                .map(|_| {
                    let d: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let j = grid.swap_remove(rng.random_range(0..grid.len()));
                    feat(&d, 0.5 * 1.08f64.powi(j as i32))
                })
                .collect();
            if cands.iter().any(|f| !(0.1..=2.0).contains(&cosine_distance(&anchor, f))) {
                continue;
            }
            // brute force: every pair ordered the same way under both keys
            for a in &cands {
                for b in &cands {
                    if a.norm() > b.norm() {
                        assert!(quality_aware_distance(&anchor, a, g) > quality_aware_distance(&anchor, b, g));
                    }
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn tape_distances_match_scalar_path() {
        let fs = [feat(&[1.0, 0.5, 0.0], 1.2), feat(&[0.0, 1.0, 0.2], 0.7), feat(&[-0.3, 0.1, 1.0], 2.0)];
        let g = Gamma::new(1.7).unwrap();
        let mut t = Tape::new();
        let dirs = t.constant(Tensor::from_rows(&fs.iter().map(|f| f.direction().to_vec()).collect::<Vec<_>>()).unwrap());
        let norms = t.constant(Tensor::vector(fs.iter().map(Feature::norm).collect()));
        let gv = t.constant(Tensor::scalar(g.value()));
        let q = t.pow(norms, gv).unwrap();
        let cand = t.constant(Tensor::matrix(1, 3, fs[0].direction().to_vec()).unwrap());
        let d = quality_distances_on_tape(&mut t, dirs, cand, q).unwrap();
        for (j, f) in fs.iter().enumerate() {
            assert!((t.value(d).data()[j] - quality_aware_distance(&fs[0], f, g)).abs() < 1e-14);
        }
        assert_eq!(t.counter().distance_evals, 3);
    }

    #[test]
    fn gamma_derivative_is_distance_times_log_norm() {
        let a = feat(&[1.0, 0.2], 1.0);
        let b = feat(&[0.3, 1.0], 1.8);
        let d_c = cosine_distance(&a, &b);
        let report = gradcheck(
            |t, v| {
                let n = t.constant(Tensor::scalar(b.norm()));
                let q = t.pow(n, v[0])?;
                Ok(t.scale(q, d_c))
            },
            &[("gamma".into(), Tensor::scalar(0.8))],
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-7);
        let analytic = quality_aware_distance(&a, &b, Gamma::new(0.8).unwrap()) * b.norm().ln();
        assert!((report.params[0].max_abs_grad - analytic).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gamma_zero_is_exact_cosine(
            d1 in proptest::collection::vec(-2.0f64..2.0, 4),
            d2 in proptest::collection::vec(-2.0f64..2.0, 4),
            n1 in 0.0f64..5.0, n2 in 0.0f64..5.0,
        ) {
            let (a, b) = (feat(&d1, n1), feat(&d2, n2));
            prop_assert_eq!(quality_aware_distance(&a, &b, Gamma::new(0.0).unwrap()), cosine_distance(&a, &b));
        }

        #[test]
        fn nonnegative_and_monotone(
            d1 in proptest::collection::vec(-2.0f64..2.0, 4),
            d2 in proptest::collection::vec(-2.0f64..2.0, 4),
            n in 0.1f64..5.0, bump in 0.01f64..2.0, gamma in -5.0f64..5.0,
        ) {
            let a = feat(&d1, 1.0);
            let lo = feat(&d2, n);
            let hi = feat(&d2, n + bump);
            let g = Gamma::new(gamma).unwrap();
            let (dlo, dhi) = (quality_aware_distance(&a, &lo, g), quality_aware_distance(&a, &hi, g));
            prop_assert!(dlo >= 0.0 && dhi >= 0.0);
            if cosine_distance(&a, &lo) > 1e-9 && gamma.abs() > 1e-6 {
                if gamma > 0.0 { prop_assert!(dhi > dlo); } else { prop_assert!(dhi < dlo); }
            }
        }
    }
}
