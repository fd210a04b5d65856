//! Synthetic embedding-space templates.
//!
//! Identities are random unit prototypes. Stills are the prototype rotated by
//! a Gaussian angle; a burst is one such rotation followed by near-duplicate
//! frames with small jitter and lower norms, the way video frames crowd a
//! template. Norms are lognormal and can be coupled to angular deviation so
//! that low-norm items also sit farther from their identity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::Feature;
use crate::template::{Dataset, Item, MediaKind, Template};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityModel {
    pub prototype: Vec<f64>,
    /// Angular stddev of stills around the prototype (radians).
    pub within_spread: f64,
}

/// Uniform random unit prototype, deterministic per seed.
pub fn gen_identity(seed: u64, channels: usize, within_spread: f64) -> IdentityModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    IdentityModel { prototype: random_unit(&mut rng, channels), within_spread }
}

fn random_unit(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..channels).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Rotate unit `base` by `angle` radians toward a uniformly random
/// orthogonal direction.
pub fn rotate(base: &[f64], angle: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if angle == 0.0 {
        return base.to_vec();
    }
    let tangent = loop {
        let g = random_unit(rng, base.len());
        let along: f64 = g.iter().zip(base).map(|(a, b)| a * b).sum();
        let t: Vec<f64> = g.iter().zip(base).map(|(a, b)| a - along * b).collect();
        let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            break t.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    base.iter().zip(&tangent).map(|(b, t)| angle.cos() * b + angle.sin() * t).collect()
}

/// Lognormal norm model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityDist {
    /// Mean of `ln(norm)`.
    pub log_mean: f64,
    /// Stddev of `ln(norm)`.
    pub log_std: f64,
}

impl QualityDist {
    pub fn median(&self) -> f64 {
        self.log_mean.exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub len: usize,
    /// Angular stddev of frames around the burst seed (radians).
    pub jitter: f64,
}

/// Composition of one template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub n_stills: usize,
    pub bursts: Vec<Burst>,
    pub quality: QualityDist,
    /// Added to `ln(norm)` of burst frames.
    pub frame_log_shift: f64,
    /// Exponent linking low norm to wider angular deviation; 0 disables it.
    pub pose_quality_coupling: f64,
    /// Stddev of a per-burst offset added to `ln(norm)` of its frames.
    pub burst_norm_spread: f64,
    /// Angular stddev of burst seeds around the prototype (radians).
    pub burst_spread: f64,
    /// Coupling exponent used for burst seeds instead of
    /// `pose_quality_coupling`.
    pub burst_coupling: f64,
    /// Isotropic direction noise stddev applied to every item.
    pub photometric_noise: f64,
}

impl TemplateSpec {
    pub fn len(&self) -> usize {
        self.n_stills + self.bursts.iter().map(|b| b.len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Parameter("template spec with no items".into()));
        }
        if !(self.quality.log_std >= 0.0) || !(self.photometric_noise >= 0.0) || self.bursts.iter().any(|b| !(b.jitter >= 0.0)) {
            return Err(Error::Parameter("negative spread in template spec".into()));
        }
        Ok(())
    }
}

fn perturb(dir: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return dir.to_vec();
    }
    let scale = sigma / (dir.len() as f64).sqrt();
    let v: Vec<f64> = dir.iter().map(|d| d + scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Generate one template; pure in `(id, spec, seed)`.
pub fn gen_template(id: &IdentityModel, spec: &TemplateSpec, seed: u64) -> Result<Vec<Item>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lognormal = |shift: f64| LogNormal::new(spec.quality.log_mean + shift, spec.quality.log_std).map_err(|e| Error::Parameter(e.to_string()));
    let still_q = lognormal(0.0)?;
    let frame_q = lognormal(spec.frame_log_shift)?;
    let median = spec.quality.median();
    let spread_for = |norm: f64, base: f64, coupling: f64| base * (median / norm).powf(coupling);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut items = Vec::with_capacity(spec.len());
    let mut media = 0u32;
    for _ in 0..spec.n_stills {
        let norm = still_q.sample(&mut rng);
        let angle = spread_for(norm, id.within_spread, spec.pose_quality_coupling) * unit.sample(&mut rng);
        let dir = perturb(&rotate(&id.prototype, angle, &mut rng), spec.photometric_noise, &mut rng);
        items.push(Item { feature: Feature::new(&dir, norm)?, media_id: media, kind: MediaKind::Still });
        media += 1;
    }
    for burst in &spec.bursts {
        let seed_norm = frame_q.sample(&mut rng) * (spec.burst_norm_spread * unit.sample(&mut rng)).exp();
        let angle = spread_for(seed_norm, spec.burst_spread, spec.burst_coupling) * unit.sample(&mut rng);
        let seed_dir = rotate(&id.prototype, angle, &mut rng);
        for _ in 0..burst.len {
            let norm = seed_norm * (0.05 * unit.sample(&mut rng)).exp();
            let frame = rotate(&seed_dir, burst.jitter * unit.sample(&mut rng), &mut rng);
            let dir = perturb(&frame, spec.photometric_noise, &mut rng);
            items.push(Item { feature: Feature::new(&dir, norm)?, media_id: media, kind: MediaKind::Frame });
        }
        media += 1;
    }
    Ok(items)
}

/// Knobs for drawing random template compositions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub within_spread: f64,
    pub n_min: usize,
    pub n_max: usize,
    /// Probability that the next block of a template is a burst.
    pub burst_prob: f64,
    pub burst_min: usize,
    pub burst_max: usize,
    pub jitter: f64,
    pub quality: QualityDist,
    pub frame_log_shift: f64,
    pub pose_quality_coupling: f64,
    pub burst_norm_spread: f64,
    pub burst_spread: f64,
    pub burst_coupling: f64,
    pub photometric_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            within_spread: 0.7,
            n_min: 1,
            n_max: 20,
            burst_prob: 0.7,
            burst_min: 6,
            burst_max: 15,
            jitter: 0.03,
            quality: QualityDist { log_mean: 3.0, log_std: 0.35 },
            frame_log_shift: -0.2,
            pose_quality_coupling: 1.5,
            burst_norm_spread: 1.4,
            burst_spread: 1.0,
            burst_coupling: 0.0,
            photometric_noise: 0.01,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::Config(format!("bad template size range [{}, {}] or channels {}", self.n_min, self.n_max, self.channels)));
        }
        if !(0.0..=1.0).contains(&self.burst_prob) || self.burst_min == 0 || self.burst_min > self.burst_max {
            return Err(Error::Config("bad burst settings".into()));
        }
        Ok(())
    }

    /// Random composition with `N` uniform in `[n_min, n_max]`.
    pub fn sample_spec(&self, rng: &mut ChaCha8Rng) -> TemplateSpec {
        let n = rng.random_range(self.n_min..=self.n_max);
        let mut remaining = n;
        let mut n_stills = 0;
        let mut bursts = Vec::new();
        while remaining > 0 {
            if remaining >= self.burst_min && rng.random_bool(self.burst_prob) {
                let len = rng.random_range(self.burst_min..=self.burst_max.min(remaining));
                bursts.push(Burst { len, jitter: self.jitter });
                remaining -= len;
            } else {
                n_stills += 1;
                remaining -= 1;
            }
        }
        TemplateSpec {
            n_stills,
            bursts,
            quality: self.quality,
            frame_log_shift: self.frame_log_shift,
            pose_quality_coupling: self.pose_quality_coupling,
            burst_norm_spread: self.burst_norm_spread,
            burst_spread: self.burst_spread,
            burst_coupling: self.burst_coupling,
            photometric_noise: self.photometric_noise,
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    rng.random()
}

/// Identity models for `n_ids` identities.
pub fn gen_identities(cfg: &GeneratorConfig, n_ids: usize, seed: u64) -> Vec<IdentityModel> {
    (0..n_ids).map(|i| gen_identity(mix(seed, 1, i as u64), cfg.channels, cfg.within_spread)).collect()
}

/// `templates_per_id` random templates for each of `n_ids` identities.
pub fn gen_dataset(cfg: &GeneratorConfig, n_ids: usize, templates_per_id: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let ids = gen_identities(cfg, n_ids, seed);
    let mut templates = Vec::with_capacity(n_ids * templates_per_id);
    for (i, id) in ids.iter().enumerate() {
        for t in 0..templates_per_id {
            let tid = (i * templates_per_id + t) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2, tid));
            let spec = cfg.sample_spec(&mut rng);
            let items = gen_template(id, &spec, mix(seed, 3, tid))?;
            templates.push(Template { id: tid, identity: i, items });
        }
    }
    Ok(Dataset { channels: cfg.channels, templates })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    /// Template ids.
    pub a: u64,
    pub b: u64,
    pub genuine: bool,
}

/// Sizes of a verification protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub n_ids: usize,
    pub templates_per_id: usize,
    /// Total genuine pairs, spread round-robin over identities.
    pub genuine_pairs: usize,
    /// Total impostor pairs, spread round-robin over identities.
    pub impostor_pairs: usize,
}

impl ProtocolSpec {
    /// Balanced protocol: `pairs_per_class` genuine and as many impostor pairs.
    pub fn balanced(n_ids: usize, pairs_per_class: usize) -> Self {
        let per_id = pairs_per_class.div_ceil(n_ids.max(1));
        Self { n_ids, templates_per_id: templates_for_pairs(per_id), genuine_pairs: pairs_per_class, impostor_pairs: pairs_per_class }
    }

    /// `genuine` genuine and `impostor` impostor pairs per identity.
    pub fn per_identity(n_ids: usize, genuine: usize, impostor: usize) -> Self {
        Self { n_ids, templates_per_id: templates_for_pairs(genuine), genuine_pairs: n_ids * genuine, impostor_pairs: n_ids * impostor }
    }
}

/// Smallest template count whose distinct pairs cover `pairs` (at least 2).
fn templates_for_pairs(pairs: usize) -> usize {
    let mut t = 2;
    while t * (t - 1) / 2 < pairs {
        t += 1;
    }
    t
}

/// Templates plus labelled comparison pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationSet {
    pub dataset: Dataset,
    pub pairs: Vec<Pair>,
}

/// Genuine pairs join two distinct templates of one identity; impostor pairs
/// join templates of two identities. Pure in `(cfg, spec, seed)`.
pub fn gen_verification_protocol(cfg: &GeneratorConfig, spec: &ProtocolSpec, seed: u64) -> Result<VerificationSet> {
    if spec.n_ids < 2 {
        return Err(Error::Parameter("verification protocol needs at least 2 identities".into()));
    }
    let t = spec.templates_per_id.max(2);
    let dataset = gen_dataset(cfg, spec.n_ids, t, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 4, 0));
    let tid = |identity: usize, j: usize| (identity * t + j) as u64;

    let mut within: Vec<Vec<(usize, usize)>> = (0..spec.n_ids)
        .map(|_| {
            let mut all: Vec<(usize, usize)> = (0..t).flat_map(|a| (a + 1..t).map(move |b| (a, b))).collect();
            all.shuffle(&mut rng);
            all
        })
        .collect();
    let mut pairs = Vec::with_capacity(spec.genuine_pairs + spec.impostor_pairs);
    for g in 0..spec.genuine_pairs {
        let i = g % spec.n_ids;
        let round = g / spec.n_ids;
        let list = &mut within[i];
        let (a, b) = list[round % list.len()];
        pairs.push(Pair { a: tid(i, a), b: tid(i, b), genuine: true });
    }
    for p in 0..spec.impostor_pairs {
        let i = p % spec.n_ids;
        let mut j = rng.random_range(0..spec.n_ids - 1);
        if j >= i {
            j += 1;
        }
        pairs.push(Pair { a: tid(i, rng.random_range(0..t)), b: tid(j, rng.random_range(0..t)), genuine: false });
    }
    Ok(VerificationSet { dataset, pairs })
}
