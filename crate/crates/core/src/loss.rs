//! Quality-adaptive margin classification loss on fused template features.
//!
//! The target logit is `s * (cos(theta_y + g_angle) - g_add)` with
//! `g_angle = -m * q` and `g_add = m * q + m`, where `q` in `[-1, 1]` is the
//! standardized template magnitude. High-quality templates get an additive
//! margin, low-quality templates an angular one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{Stage, Tape, Tensor, Var};

pub const DEFAULT_SCALE: f64 = 48.0;
pub const DEFAULT_MARGIN: f64 = 0.8;
pub const DEFAULT_CONCENTRATION: f64 = 0.333;
pub const EMA_MOMENTUM: f64 = 0.01;
pub const MIN_STD: f64 = 1e-3;

/// Running statistics of template magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub momentum: f64,
    /// False until the first batch seeds the statistics.
    pub initialized: bool,
}

impl Default for NormStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0, momentum: EMA_MOMENTUM, initialized: false }
    }
}

impl NormStats {
    /// Fold one batch of magnitudes into the running mean and std.
    pub fn update(&mut self, magnitudes: &[f64]) {
        if magnitudes.is_empty() {
            return;
        }
        let n = magnitudes.len() as f64;
        let mean = magnitudes.iter().sum::<f64>() / n;
        // unbiased, like torch.std; a single sample contributes no spread
        let std = if magnitudes.len() > 1 {
            (magnitudes.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        if self.initialized {
            self.mean = (1.0 - self.momentum) * self.mean + self.momentum * mean;
            self.std = (1.0 - self.momentum) * self.std + self.momentum * std;
        } else {
            self.mean = mean;
            self.std = std;
            self.initialized = true;
        }
        self.std = self.std.max(MIN_STD);
    }

    pub fn clamped_std(&self) -> f64 {
        self.std.max(MIN_STD)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// `[identities x c]`; rows are normalized again inside the forward pass.
    pub prototypes: Tensor,
    pub s: f64,
    pub m: f64,
    pub h: f64,
    pub norm_stats: NormStats,
}

impl LossParams {
    pub fn new(prototypes: Tensor) -> Result<Self> {
        let mut p = Self { prototypes, s: DEFAULT_SCALE, m: DEFAULT_MARGIN, h: DEFAULT_CONCENTRATION, norm_stats: NormStats::default() };
        p.renormalize();
        p.validate()?;
        Ok(p)
    }

    /// Random unit prototypes.
    pub fn random(identities: usize, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let normal = rand_distr::StandardNormal;
        let data = (0..identities * channels).map(|_| rng.sample::<f64, _>(normal)).collect();
        Self::new(Tensor::matrix(identities, channels, data)?)
    }

    pub fn identities(&self) -> usize {
        self.prototypes.dims2().0
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototypes.shape().len() != 2 || self.identities() == 0 {
            return Err(Error::Dimension("prototypes must be a non-empty matrix".into()));
        }
        if !(self.s > 0.0) || !(self.h > 0.0) || !(self.m >= 0.0) {
            return Err(Error::Parameter(format!("loss params s={} m={} h={}", self.s, self.m, self.h)));
        }
        Ok(())
    }

    /// Rescale prototype rows to unit length.
    pub fn renormalize(&mut self) {
        let (r, c) = self.prototypes.dims2();
        let data = self.prototypes.data_mut();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
}

/// Margin-driving quality of one fused template.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateQuality {
    pub magnitude: f64,
    pub normalized: f64,
}

impl TemplateQuality {
    pub fn new(magnitude: f64, stats: &NormStats, h: f64) -> Self {
        let normalized = ((magnitude - stats.mean) / (stats.clamped_std() / h)).clamp(-1.0, 1.0);
        Self { magnitude, normalized }
    }
}

/// Differentiable standardized quality: `clip((mag - mean) / (std / h), -1, 1)`.
pub fn quality_on_tape(tape: &mut Tape, magnitudes: Var, stats: &NormStats, h: f64) -> Var {
    let centered = tape.add_const(magnitudes, -stats.mean);
    let scaled = tape.scale(centered, h / stats.clamped_std());
    tape.clamp(scaled, -1.0, 1.0)
}

/// Adaptive-margin logits `[b x identities]`.
///
/// `features` is `[b x c]` with unit rows, `quality` is `[b]` standardized
/// quality, `prototypes` is `[identities x c]`.
pub fn adaptive_margin_logits(
    tape: &mut Tape,
    features: Var,
    quality: Var,
    labels: &[usize],
    prototypes: Var,
    p: &LossParams,
) -> Result<Var> {
    let (b, _) = tape.value(features).dims2();
    let m_ids = tape.value(prototypes).dims2().0;
    if labels.len() != b || tape.value(quality).len() != b {
        return Err(Error::Dimension(format!("{} labels / {} qualities for {b} features", labels.len(), tape.value(quality).len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= m_ids) {
        return Err(Error::Index(format!("label {bad} with {m_ids} identities")));
    }
    let unit_protos = tape.normalize_rows(prototypes);
    let pt = tape.transpose(unit_protos);
    let cos = tape.matmul(features, pt)?;

    let mut onehot = Tensor::zeros(&[b, m_ids]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * m_ids + y] = 1.0;
    }
    let mut offhot = onehot.clone();
    offhot.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    let offhot = tape.constant(offhot);
    let onehot = tape.constant(onehot);
    let ones_col = tape.constant(Tensor::filled(&[m_ids, 1], 1.0));
    let masked = tape.mul(cos, onehot)?;
    let cos_y = tape.matmul(masked, ones_col)?;
    let cos_y = tape.reshape(cos_y, vec![b])?;

    let g_angle = tape.scale(quality, -p.m);
    let g_add = tape.scale(quality, p.m);
    let g_add = tape.add_const(g_add, p.m);

    let cos_sq = tape.mul(cos_y, cos_y)?;
    let one_minus = tape.scale(cos_sq, -1.0);
    let one_minus = tape.add_const(one_minus, 1.0);
    let one_minus = tape.clamp(one_minus, 0.0, 1.0);
    let sin_y = tape.sqrt(one_minus);

    let cg = tape.cos(g_angle);
    let sg = tape.sin(g_angle);
    let a = tape.mul(cos_y, cg)?;
    let bterm = tape.mul(sin_y, sg)?;
    let shifted = tape.sub(a, bterm)?;
    let target = tape.sub(shifted, g_add)?;
    let target = tape.scale(target, p.s);

    let base = tape.scale(cos, p.s);
    let others = tape.mul(base, offhot)?;
    let target = tape.reshape(target, vec![b, 1])?;
    let ones_row = tape.constant(Tensor::filled(&[1, m_ids], 1.0));
    let spread = tape.matmul(target, ones_row)?;
    let on_target = tape.mul(spread, onehot)?;
    tape.add(others, on_target)
}

/// Mean cross-entropy over adaptive-margin logits for a batch of fused
/// features (`[b x c]`) with magnitudes (`[b]`). Statistics are read, never
/// updated here.
pub fn margin_loss(
    tape: &mut Tape,
    features: Var,
    magnitudes: Var,
    labels: &[usize],
    prototypes: Var,
    p: &LossParams,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let prev = tape.set_stage(Stage::Loss);
    let quality = quality_on_tape(tape, magnitudes, &p.norm_stats, p.h);
    let logits = adaptive_margin_logits(tape, features, quality, labels, prototypes, p)?;
    let loss = tape.cross_entropy(logits, labels)?;
    tape.set_stage(prev);
    Ok(loss)
}
