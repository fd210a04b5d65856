//! Verification ROC, ablation runs and operation-count scans.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attend::{mha, AttentionInit, AttentionParams, AttentionVars};
use crate::coreset::GumbelConfig;
use crate::loss::{margin_loss, LossParams};
use crate::error::{Error, Result};
use crate::metric::Feature;
use crate::model::{AblationFlags, GammaPolicy, Model, ModelConfig, ParamVars};
use crate::numgrad::{gradcheck, GradReport, Stage, Tape, Tensor, Var};
use crate::simdata::VerificationSet;
use crate::template::{Dataset, Template};
use crate::train::{class_mean_prototypes, LogRow, TrainConfig, TrainState, Trainer};

/// Desk-scale false-accept rates.
pub const FAR_GRID: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Sorted genuine and impostor similarity scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    impostor: Vec<f64>,
    genuine: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
    /// `far` is finer than one impostor pair can resolve.
    pub under_resolved: bool,
}

impl RocCurve {
    pub fn new(mut impostor: Vec<f64>, mut genuine: Vec<f64>) -> Result<Self> {
        if impostor.is_empty() || genuine.is_empty() {
            return Err(Error::EmptyInput("ROC needs genuine and impostor scores".into()));
        }
        if impostor.iter().chain(&genuine).any(|s| s.is_nan()) {
            return Err(Error::Parameter("NaN similarity score".into()));
        }
        impostor.sort_by(f64::total_cmp);
        genuine.sort_by(f64::total_cmp);
        Ok(Self { impostor, genuine })
    }

    pub fn impostor(&self) -> &[f64] {
        &self.impostor
    }

    pub fn genuine(&self) -> &[f64] {
        &self.genuine
    }

    /// Fraction of `sorted` at or above `t`.
    fn rate_at_or_above(sorted: &[f64], t: f64) -> f64 {
        (sorted.len() - sorted.partition_point(|&s| s < t)) as f64 / sorted.len() as f64
    }

    /// Accept rate of genuine pairs at the smallest impostor-score threshold
    /// whose impostor accept rate is at most `far`.
    pub fn tar_at_far(&self, far: f64) -> Result<RocPoint> {
        if !(far > 0.0 && far <= 1.0) {
            return Err(Error::Parameter(format!("far must be in (0, 1], got {far}")));
        }
        let n = self.impostor.len();
        let under_resolved = far < 1.0 / n as f64;
        let threshold = self
            .impostor
            .iter()
            .copied()
            .find(|&t| Self::rate_at_or_above(&self.impostor, t) <= far)
            .unwrap_or_else(|| self.impostor[n - 1].next_up());
        Ok(RocPoint { far, tar: Self::rate_at_or_above(&self.genuine, threshold), threshold, under_resolved })
    }
}

/// Cosine similarity of two templates' fused descriptors.
pub fn fuse_similarity(model: &Model, a: &Template, b: &Template) -> Result<f64> {
    let fa = model.fuse(&a.features())?.descriptor;
    let fb = model.fuse(&b.features())?.descriptor;
    Ok(dot(&fa, &fb))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fused descriptor of every template in `data`, keyed by template id.
pub fn fuse_all(model: &Model, data: &Dataset) -> Result<HashMap<u64, Vec<f64>>> {
    data.templates.par_iter().map(|t| Ok((t.id, model.fuse(&t.features())?.descriptor))).collect()
}

/// ROC of `model` on a labelled pair list.
pub fn score_protocol(model: &Model, set: &VerificationSet) -> Result<RocCurve> {
    let fused = fuse_all(model, &set.dataset)?;
    let get = |id: u64| fused.get(&id).ok_or_else(|| Error::Index(format!("pair references unknown template {id}")));
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for p in &set.pairs {
        let s = dot(get(p.a)?, get(p.b)?);
        if p.genuine {
            genuine.push(s);
        } else {
            impostor.push(s);
        }
    }
    RocCurve::new(impostor, genuine)
}

/// One `method,far,tar` result line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarRow {
    pub method: String,
    pub seed: u64,
    pub far: f64,
    pub tar: f64,
    pub under_resolved: bool,
}

pub fn tar_csv(rows: &[TarRow]) -> String {
    let mut s = String::from("method,far,tar\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.method, r.far, r.tar));
    }
    s
}

/// Shared settings of a trained-comparison experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fars: Vec<f64>,
}

/// Train one model variant from a fresh initialization.
pub fn train_variant(config: ModelConfig, train: &TrainConfig, data: &Dataset) -> Result<(Model, Vec<LogRow>)> {
    let protos = class_mean_prototypes(data, data.identities())?;
    let model = Model::init(config, protos, train.seed)?;
    let trainer = Trainer::new(train.clone(), data)?;
    let mut state = TrainState::new(model);
    let log = trainer.run(&mut state, |_| {})?;
    Ok((state.model, log))
}

fn run_variant(label: &str, config: ModelConfig, exp: &Experiment, data: &Dataset, set: &VerificationSet, seed: u64) -> Result<Vec<TarRow>> {
    let train = TrainConfig { seed, ..exp.train.clone() };
    let (model, _) = train_variant(config, &train, data)?;
    let roc = score_protocol(&model, set)?;
    exp.fars
        .iter()
        .map(|&far| {
            let p = roc.tar_at_far(far)?;
            Ok(TarRow { method: label.to_string(), seed, far, tar: p.tar, under_resolved: p.under_resolved })
        })
        .collect()
}

/// Train and evaluate every flag set in `variants` for every seed.
pub fn ablation_run(variants: &[AblationFlags], exp: &Experiment, data: &Dataset, set: &VerificationSet, seeds: &[u64]) -> Result<Vec<TarRow>> {
    let mut rows = Vec::new();
    for flags in variants {
        flags.validate()?;
        let config = ModelConfig { flags: *flags, ..exp.model.clone() };
        for &seed in seeds {
            rows.extend(run_variant(flags.label(), config.clone(), exp, data, set, seed)?);
        }
    }
    Ok(rows)
}

/// Trained gamma against fixed values, full model.
pub fn gamma_policy_run(fixed: &[f64], exp: &Experiment, data: &Dataset, set: &VerificationSet, seeds: &[u64]) -> Result<Vec<TarRow>> {
    let mut policies = vec![("trained".to_string(), GammaPolicy::Trained)];
    policies.extend(fixed.iter().map(|&g| (format!("fixed_{g}"), GammaPolicy::Fixed(g))));
    let mut rows = Vec::new();
    for (label, policy) in policies {
        let config = ModelConfig { gamma_policy: policy, flags: AblationFlags::FULL, ..exp.model.clone() };
        for &seed in seeds {
            rows.extend(run_variant(&label, config.clone(), exp, data, set, seed)?);
        }
    }
    Ok(rows)
}

/// Mean and population stddev of the TAR of `method` at `far`.
pub fn tar_summary(rows: &[TarRow], method: &str, far: f64) -> Option<(f64, f64)> {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == method && r.far == far).map(|r| r.tar).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMethod {
    /// Full selection plus attention fuse path.
    Coreset,
    /// One self-attention layer over the whole template with identity
    /// projections: only the `N x N` affinity map and value mixing.
    Affinity,
    /// Same layer with learned query/key/value/output projections.
    AffinityProjected,
}

impl ScanMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Coreset => "coreset",
            Self::Affinity => "affinity",
            Self::AffinityProjected => "affinity_projected",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub method: ScanMethod,
    pub n: usize,
    /// Mean multiply-accumulates over trials.
    pub ops: f64,
    /// Encoder-stage share of `ops` (coreset only).
    pub encode_ops: f64,
}

pub fn scan_csv(rows: &[ScanRow]) -> String {
    let mut s = String::from("method,N,ops\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.method.name(), r.n, r.ops));
    }
    s
}

fn random_template(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Feature>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            Ok(Feature::from_raw(&raw))
        })
        .collect()
}

/// MACs of one full-template self-attention layer, on the baseline stage.
pub fn baseline_ops(features: &[Feature], heads: usize, projections: Option<&AttentionParams>) -> Result<u64> {
    let (dirs, _) = crate::coreset::template_tensors(features)?;
    let mut tape = Tape::new();
    tape.set_stage(Stage::Baseline);
    let x = tape.constant(dirs);
    match projections {
        Some(p) => {
            let vars = p.on_tape(&mut tape);
            mha(&mut tape, x, x, &vars)?;
        }
        None => {
            let c = tape.value(x).dims2().1;
            if heads == 0 || c % heads != 0 {
                return Err(Error::Parameter(format!("{c} channels not divisible into {heads} heads")));
            }
            let dh = c / heads;
            for h in 0..heads {
                let xh = tape.slice_cols(x, h * dh, (h + 1) * dh)?;
                let xt = tape.transpose(xh);
                let scores = tape.matmul(xh, xt)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let attn = tape.softmax(scores, 1.0)?;
                tape.matmul(attn, xh)?;
            }
        }
    }
    Ok(tape.counter().get(Stage::Baseline))
}

/// Mean MAC counts of the coreset fuse path and the attention baselines
/// for each template size. Counts depend only on shapes, so results are
/// deterministic.
pub fn complexity_scan(model: &Model, sizes: &[usize], trials: usize, seed: u64) -> Result<Vec<ScanRow>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("sizes must be strictly ascending".into()));
    }
    if trials == 0 || sizes.first() == Some(&0) {
        return Err(Error::Parameter("need trials >= 1 and sizes >= 1".into()));
    }
    let c = model.config.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projected = AttentionParams::init(c, model.config.heads, &mut rng)?;
    let mut rows = Vec::new();
    for &n in sizes {
        let mut acc = [0.0; 4];
        for _ in 0..trials {
            let t = random_template(n, c, &mut rng)?;
            let (_, tape) = model.fuse_with_tape(&t)?;
            acc[0] += tape.counter().fuse_total() as f64;
            acc[1] += tape.counter().get(Stage::Encode) as f64;
            acc[2] += baseline_ops(&t, model.config.heads, None)? as f64;
            acc[3] += baseline_ops(&t, model.config.heads, Some(&projected))? as f64;
        }
        let k = trials as f64;
        rows.push(ScanRow { method: ScanMethod::Coreset, n, ops: acc[0] / k, encode_ops: acc[1] / k });
        rows.push(ScanRow { method: ScanMethod::Affinity, n, ops: acc[2] / k, encode_ops: 0.0 });
        rows.push(ScanRow { method: ScanMethod::AffinityProjected, n, ops: acc[3] / k, encode_ops: 0.0 });
    }
    Ok(rows)
}

/// Least-squares line `y = a x + b` with its coefficient of determination.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - a * xi - b).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|yi| (yi - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (a, b, r2)
}

/// Ops of `method` at each size, in scan order.
pub fn scan_series(rows: &[ScanRow], method: ScanMethod) -> Vec<(usize, f64)> {
    rows.iter().filter(|r| r.method == method).map(|r| (r.n, r.ops)).collect()
}

/// Instance shape of the full-pipeline gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradcheckSpec {
    pub n: usize,
    pub k: usize,
    pub channels: usize,
    pub identities: usize,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self { n: 8, k: 3, channels: 16, identities: 3, seed: 0 }
    }
}

/// Check loss gradients with respect to gamma, all attention matrices and
/// the prototypes against central differences on a random batch of one
/// template per identity. The sampler runs soft with its noise keyed by
/// template, so repeated evaluations see identical noise; norm statistics are
/// frozen after one forward pass.
pub fn pipeline_gradcheck(spec: &GradcheckSpec) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut config = ModelConfig::new(spec.channels, spec.k)?;
    config.attention_init = AttentionInit::Uniform;
    config.encoding.scale = 0.5;
    let protos = LossParams::random(spec.identities, spec.channels, &mut rng)?.prototypes;
    let mut model = Model::init(config, protos, spec.seed)?;
    model.params.gamma = rng.random_range(0.5..2.0);
    let batch: Vec<(Tensor, Tensor)> = (0..spec.identities)
        .map(|_| {
            let feats: Vec<Feature> = (0..spec.n)
                .map(|_| {
                    let dir: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Feature::new(&dir, rng.random_range(0.5..2.0))
                })
                .collect::<Result<_>>()?;
            crate::coreset::template_tensors(&feats)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..spec.identities).collect();
    let gumbel = GumbelConfig { temperature: 1.0, hard: false, noise: true, seed: spec.seed };

    let forward = |model: &Model, tape: &mut Tape, vars: &ParamVars| -> Result<(Var, Var)> {
        let mut feats = Vec::new();
        let mut mags = Vec::new();
        for (b, (dirs, norms)) in batch.iter().enumerate() {
            let d = tape.constant(dirs.clone());
            let n = tape.constant(norms.clone());
            let fused = model.fuse_on_tape(tape, vars, d, n, &gumbel, b as u64)?;
            feats.push(fused.feature);
            mags.push(tape.reshape(fused.magnitude, vec![1, 1])?);
        }
        let f = tape.concat_rows(&feats)?;
        let m = tape.concat_rows(&mags)?;
        let m = tape.reshape(m, vec![batch.len()])?;
        Ok((f, m))
    };

    {
        let mut tape = Tape::new();
        let vars = model.on_tape(&mut tape);
        let (_, m) = forward(&model, &mut tape, &vars)?;
        let mags = tape.value(m).data().to_vec();
        model.params.loss.norm_stats.update(&mags);
    }
    let enc = &model.params.encoder;
    let dec = &model.params.decoder;
    let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let block = |p: &AttentionParams, at: usize| AttentionVars { heads: p.heads, wq: v[at], wk: v[at + 1], wv: v[at + 2], wo: v[at + 3], layer_norm: p.layer_norm };
        let vars = ParamVars { gamma: v[0], encoder: block(enc, 1), decoder: block(dec, 5), prototypes: v[9] };
        let (feats, mags) = forward(&model, tape, &vars)?;
        margin_loss(tape, feats, mags, &labels, vars.prototypes, &model.params.loss)
    };
    gradcheck(f, &model.param_tensors())
}
