//! Differentiable core-template selection.
//!
//! A greedy farthest-point sweep whose argmax is replaced by a Gumbel-Softmax
//! draw. Step 0 draws over the feature norms, so with noise off it starts at
//! the highest-quality feature. Every later step draws over the running
//! quality-aware distance to the selected set, then folds the newly selected
//! feature into that distance with an elementwise minimum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{distance_to_set, quality_aware_distance, quality_distances_on_tape, Feature, Gamma};
use crate::numgrad::{argmax, softmax_row, Stage, Tape, Tensor, Var};

pub const TRAIN_TEMPERATURE: f64 = 1.0;
pub const INFER_TEMPERATURE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    /// Straight-through: one-hot forward, soft backward.
    pub hard: bool,
    pub noise: bool,
    pub seed: u64,
}

impl GumbelConfig {
    pub fn training(seed: u64) -> Self {
        Self { temperature: TRAIN_TEMPERATURE, hard: true, noise: true, seed }
    }

    /// Deterministic limit: no noise, near-zero temperature.
    pub fn inference() -> Self {
        Self { temperature: INFER_TEMPERATURE, hard: true, noise: false, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent RNG stream for one `(seed, template, step)` triple.
pub fn noise_stream(seed: u64, template: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ template) ^ step))
}

pub fn gumbel_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("standard gumbel");
    (0..n).map(|_| g.sample(rng)).collect()
}

/// Plain (non-differentiable) Gumbel-Softmax draw. With `hard` the result is
/// the one-hot argmax of the relaxed sample.
pub fn gumbel_softmax_sample(logits: &[f64], cfg: &GumbelConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("gumbel-softmax over zero logits".into()));
    }
    cfg.validate()?;
    let perturbed: Vec<f64> = if cfg.noise {
        logits.iter().zip(gumbel_noise(rng, logits.len())).map(|(l, g)| l + g).collect()
    } else {
        logits.to_vec()
    };
    let mut y = vec![0.0; logits.len()];
    softmax_row(&perturbed, cfg.temperature, &mut y);
    if cfg.hard {
        let i = argmax(&y);
        y.iter_mut().for_each(|v| *v = 0.0);
        y[i] = 1.0;
    }
    Ok(y)
}

/// Differentiable Gumbel-Softmax over `logits` (`[n]`).
pub fn gumbel_softmax_on_tape(tape: &mut Tape, logits: Var, cfg: &GumbelConfig, template: u64, step: u64) -> Result<Var> {
    let n = tape.value(logits).len();
    if n == 0 {
        return Err(Error::EmptyInput("gumbel-softmax over zero logits".into()));
    }
    cfg.validate()?;
    let x = if cfg.noise {
        let noise = gumbel_noise(&mut noise_stream(cfg.seed, template, step), n);
        let g = tape.constant(Tensor::vector(noise));
        tape.add(logits, g)?
    } else {
        logits
    };
    let soft = tape.softmax(x, cfg.temperature)?;
    tape.counter_mut().sampling_steps += 1;
    Ok(if cfg.hard { tape.straight_through(soft) } else { soft })
}

/// Per-step record of a selection sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    /// Selection weights per step (length `n` each).
    pub weights: Vec<Vec<f64>>,
    /// Argmax of each weights vector.
    pub indices: Vec<usize>,
    /// Logits each step sampled from: the norms for step 0, then the running
    /// distance to the selected set.
    pub distances_before: Vec<Vec<f64>>,
    /// Rows with zero norm, whose cosine distance is pinned to 1.
    pub degenerate: Vec<usize>,
}

impl SelectionTrace {
    /// Distance of each newly selected feature to the set selected before it
    /// (steps 1..k). Nonincreasing in the deterministic limit.
    pub fn selected_distances(&self) -> Vec<f64> {
        self.indices.iter().zip(&self.distances_before).skip(1).map(|(&i, d)| d[i]).collect()
    }
}

/// Tape handles produced by [`select_on_tape`].
pub struct SelectionVars {
    /// `[k x c]` selected (convex combinations of) directions.
    pub features: Var,
    /// `[k]` matching norms.
    pub norms: Var,
    pub trace: SelectionTrace,
}

/// Core-template selection on a tape.
///
/// `directions` is `[n x c]` unit rows, `norms` is `[n]`, `gamma` is a single
/// element. Exactly `n * k` point-to-set distance evaluations are made.
pub fn select_on_tape(
    tape: &mut Tape,
    directions: Var,
    norms: Var,
    gamma: Var,
    k: usize,
    cfg: &GumbelConfig,
    template: u64,
) -> Result<SelectionVars> {
    if k == 0 {
        return Err(Error::Parameter("core template size k must be >= 1".into()));
    }
    let (n, _) = tape.value(directions).dims2();
    if n == 0 || tape.value(directions).is_empty() {
        return Err(Error::EmptyInput("template has no features".into()));
    }
    if tape.value(norms).len() != n {
        return Err(Error::Dimension(format!("{} norms for {n} features", tape.value(norms).len())));
    }
    let prev = tape.set_stage(Stage::Select);
    let degenerate = tape.value(norms).data().iter().enumerate().filter(|(_, v)| **v == 0.0).map(|(i, _)| i).collect();
    let quality = tape.pow(norms, gamma)?;
    let norms_col = tape.reshape(norms, vec![n, 1])?;

    let mut trace = SelectionTrace { weights: Vec::with_capacity(k), indices: Vec::with_capacity(k), distances_before: Vec::with_capacity(k), degenerate };
    let mut rows = Vec::with_capacity(k);
    let mut row_norms = Vec::with_capacity(k);
    let mut dist = norms;
    for step in 0..k {
        trace.distances_before.push(tape.value(dist).data().to_vec());
        let w = gumbel_softmax_on_tape(tape, dist, cfg, template, step as u64)?;
        let w_row = tape.reshape(w, vec![1, n])?;
        let picked = tape.matmul(w_row, directions)?;
        let picked_norm = tape.matmul(w_row, norms_col)?;
        trace.weights.push(tape.value(w).data().to_vec());
        trace.indices.push(argmax(tape.value(w).data()));
        let fresh = quality_distances_on_tape(tape, directions, picked, quality)?;
        dist = if step == 0 { fresh } else { tape.min(dist, fresh)? };
        rows.push(picked);
        row_norms.push(picked_norm);
    }
    let features = tape.concat_rows(&rows)?;
    let norms_out = tape.concat_rows(&row_norms)?;
    let norms_out = tape.reshape(norms_out, vec![k])?;
    tape.set_stage(prev);
    Ok(SelectionVars { features, norms: norms_out, trace })
}

/// Fixed-size selected subset plus its trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreTemplate {
    pub features: Vec<Feature>,
    pub trace: SelectionTrace,
}

impl CoreTemplate {
    pub fn k(&self) -> usize {
        self.features.len()
    }
}

/// Stack features into `[n x c]` directions and `[n]` norms.
pub fn template_tensors(features: &[Feature]) -> Result<(Tensor, Tensor)> {
    let Some(first) = features.first() else {
        return Err(Error::EmptyInput("template has no features".into()));
    };
    let c = first.dim();
    if features.iter().any(|f| f.dim() != c) {
        return Err(Error::Dimension("features of mixed width".into()));
    }
    let dirs = Tensor::matrix(features.len(), c, features.iter().flat_map(|f| f.direction().iter().copied()).collect())?;
    let norms = Tensor::vector(features.iter().map(Feature::norm).collect());
    Ok((dirs, norms))
}

/// Select a core template of size `k` from `features` (no gradients kept).
pub fn select_core_template(features: &[Feature], k: usize, gamma: Gamma, cfg: &GumbelConfig, template: u64) -> Result<CoreTemplate> {
    if k == 0 {
        return Err(Error::Parameter("core template size k must be >= 1".into()));
    }
    let (dirs, norms) = template_tensors(features)?;
    let mut tape = Tape::new();
    let d = tape.constant(dirs);
    let nv = tape.constant(norms);
    let g = tape.constant(Tensor::scalar(gamma.value()));
    let sel = select_on_tape(&mut tape, d, nv, g, k, cfg, template)?;
    let rows = tape.value(sel.features);
    let nrm = tape.value(sel.norms);
    let features = (0..k).map(|i| Feature::new(rows.row(i), nrm.data()[i])).collect::<Result<Vec<_>>>()?;
    Ok(CoreTemplate { features, trace: sel.trace })
}

/// Exact greedy reference: start at the largest norm, then repeatedly take
/// the feature farthest (quality-aware) from the selected set. Ties go to the
/// lowest index.
pub fn fps_oracle(features: &[Feature], k: usize, gamma: Gamma) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Parameter("core template size k must be >= 1".into()));
    }
    if features.is_empty() {
        return Err(Error::EmptyInput("template has no features".into()));
    }
    let norms: Vec<f64> = features.iter().map(Feature::norm).collect();
    let mut picked = vec![argmax(&norms)];
    while picked.len() < k {
        let chosen: Vec<Feature> = picked.iter().map(|&i| features[i].clone()).collect();
        let dist = features.iter().map(|f| distance_to_set(f, &chosen, gamma)).collect::<Result<Vec<_>>>()?;
        picked.push(argmax(&dist));
    }
    Ok(picked)
}

/// Same as [`fps_oracle`] but returning the running distances it maximized,
/// one vector per step after the first.
pub fn fps_oracle_distances(features: &[Feature], k: usize, gamma: Gamma) -> Result<Vec<Vec<f64>>> {
    let picked = fps_oracle(features, k, gamma)?;
    Ok((1..picked.len())
        .map(|s| {
            features
                .iter()
                .map(|f| picked[..s].iter().map(|&i| quality_aware_distance(&features[i], f, gamma)).fold(f64::INFINITY, f64::min))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_template(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Feature> {
        (0..n)
            .map(|_| {
                let d: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                Feature::new(&d, rng.random_range(0.5..3.0)).unwrap()
            })
            .collect()
    }

    #[test]
    fn argmax_limit_hard_sample() {
        let mut rng = noise_stream(0, 0, 0);
        let y = gumbel_softmax_sample(&[1.0, 3.0, 2.0], &GumbelConfig::inference(), &mut rng).unwrap();
        assert_eq!(y, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_logits_rejected() {
        let mut rng = noise_stream(0, 0, 0);
        assert!(matches!(gumbel_softmax_sample(&[], &GumbelConfig::inference(), &mut rng), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn k_zero_rejected() {
        let f = vec![Feature::new(&[1.0, 0.0], 1.0).unwrap()];
        assert!(matches!(select_core_template(&f, 0, Gamma::default(), &GumbelConfig::inference(), 0), Err(Error::Parameter(_))));
        assert!(fps_oracle(&f, 0, Gamma::default()).is_err());
    }

    #[test]
    fn single_feature_fills_every_slot() {
        let f = vec![Feature::new(&[0.6, 0.8], 2.0).unwrap()];
        for cfg in [GumbelConfig::inference(), GumbelConfig::training(3)] {
            let ct = select_core_template(&f, 4, Gamma::default(), &cfg, 0).unwrap();
            assert_eq!(ct.k(), 4);
            for g in &ct.features {
                assert_eq!(g, &f[0]);
            }
        }
    }

    #[test]
    fn oracle_tie_and_exhaustion() {
        let a = Feature::new(&[1.0, 0.0], 1.0).unwrap();
        assert_eq!(fps_oracle(&[a.clone(), a.clone()], 2, Gamma::default()).unwrap(), vec![0, 0]);
        let mut rng = noise_stream(11, 0, 0);
        let t = random_template(&mut rng, 7, 5);
        let mut idx = fps_oracle(&t, 7, Gamma::new(0.5).unwrap()).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn k_larger_than_n_duplicates() {
        let mut rng = noise_stream(5, 0, 0);
        let t = random_template(&mut rng, 3, 4);
        let ct = select_core_template(&t, 5, Gamma::default(), &GumbelConfig::inference(), 0).unwrap();
        assert_eq!(ct.k(), 5);
        let mut first3 = ct.trace.indices[..3].to_vec();
        first3.sort_unstable();
        assert_eq!(first3, vec![0, 1, 2]);
    }

    #[test]
    fn inference_matches_oracle_and_norm_argmax() {
        let mut rng = noise_stream(1, 0, 0);
        for trial in 0..200 {
            let n = 1 + trial % 10;
            let t = random_template(&mut rng, n, 6);
            let k = 1 + trial % n;
            for gamma in [0.0, 1.0, 10.0] {
                let g = Gamma::new(gamma).unwrap();
                let ct = select_core_template(&t, k, g, &GumbelConfig::inference(), 0).unwrap();
                assert_eq!(ct.trace.indices, fps_oracle(&t, k, g).unwrap());
                let norms: Vec<f64> = t.iter().map(Feature::norm).collect();
                assert_eq!(ct.trace.indices[0], argmax(&norms));
                for (i, f) in ct.trace.indices.iter().zip(&ct.features) {
                    assert_eq!(f.norm(), t[*i].norm());
                }
            }
        }
    }

    #[test]
    fn selected_distances_nonincreasing() {
        let mut rng = noise_stream(2, 0, 0);
        for _ in 0..50 {
            let t = random_template(&mut rng, 10, 5);
            let ct = select_core_template(&t, 6, Gamma::default(), &GumbelConfig::inference(), 0).unwrap();
            let d = ct.trace.selected_distances();
            assert!(d.windows(2).all(|w| w[1] <= w[0]));
            let oracle = fps_oracle_distances(&t, 6, Gamma::default()).unwrap();
            for (s, step_d) in oracle.iter().enumerate() {
                assert!((step_d[ct.trace.indices[s + 1]] - d[s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cost_is_n_times_k_distance_evaluations() {
        let mut rng = noise_stream(3, 0, 0);
        for (n, k) in [(1, 1), (5, 3), (12, 4), (20, 7)] {
            let t = random_template(&mut rng, n, 4);
            let (dirs, norms) = template_tensors(&t).unwrap();
            let mut tape = Tape::new();
            let d = tape.constant(dirs);
            let nv = tape.constant(norms);
            let g = tape.constant(Tensor::scalar(1.0));
            select_on_tape(&mut tape, d, nv, g, k, &GumbelConfig::training(1), 0).unwrap();
            assert_eq!(tape.counter().distance_evals, (n * k) as u64);
            assert_eq!(tape.counter().sampling_steps, k as u64);
        }
    }

    #[test]
    fn weights_are_distributions() {
        let mut rng = noise_stream(4, 0, 0);
        let t = random_template(&mut rng, 9, 4);
        let soft = GumbelConfig { hard: false, ..GumbelConfig::training(9) };
        let ct = select_core_template(&t, 3, Gamma::default(), &soft, 0).unwrap();
        for w in &ct.trace.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let ct = select_core_template(&t, 3, Gamma::default(), &GumbelConfig::training(9), 0).unwrap();
        for w in &ct.trace.weights {
            assert_eq!(w.iter().filter(|v| **v != 0.0).count(), 1);
            assert_eq!(w.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn noise_is_keyed_by_seed_template_step() {
        let a = gumbel_noise(&mut noise_stream(1, 2, 3), 4);
        assert_eq!(a, gumbel_noise(&mut noise_stream(1, 2, 3), 4));
        assert_ne!(a, gumbel_noise(&mut noise_stream(1, 2, 4), 4));
        assert_ne!(a, gumbel_noise(&mut noise_stream(1, 3, 3), 4));
    }
}
