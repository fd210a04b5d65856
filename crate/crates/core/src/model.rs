//! The full fusion model: selection, attention, aggregation and loss head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attend::{attend_and_aggregate, AttendFlags, AttentionInit, AttentionParams, AttentionVars, NormEncodingConfig, DEFAULT_HEADS};
use crate::coreset::{select_on_tape, template_tensors, GumbelConfig, SelectionTrace, INFER_TEMPERATURE};
use crate::error::{Error, Result};
use crate::loss::LossParams;
use crate::metric::{Feature, Gamma};
use crate::numgrad::{Stage, Tape, Tensor, Var};

/// Cumulative component switches. Valid settings form a prefix of
/// selection, self-attention, cross-attention, norm encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub selection: bool,
    pub self_attention: bool,
    pub cross_attention: bool,
    pub norm_encoding: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self { selection: true, self_attention: true, cross_attention: true, norm_encoding: true };
    pub const SELECTION_ONLY: Self = Self { selection: true, self_attention: false, cross_attention: false, norm_encoding: false };
    pub const AVERAGE_POOL: Self = Self { selection: false, self_attention: false, cross_attention: false, norm_encoding: false };

    /// The `depth` first components switched on (0..=4).
    pub fn prefix(depth: usize) -> Result<Self> {
        if depth > 4 {
            return Err(Error::Config(format!("ablation depth {depth} > 4")));
        }
        Ok(Self { selection: depth >= 1, self_attention: depth >= 2, cross_attention: depth >= 3, norm_encoding: depth >= 4 })
    }

    pub fn depth(&self) -> usize {
        [self.selection, self.self_attention, self.cross_attention, self.norm_encoding].iter().filter(|b| **b).count()
    }

    pub fn validate(&self) -> Result<()> {
        if Self::prefix(self.depth())? != *self {
            return Err(Error::Config(format!("ablation flags {self:?} are not a cumulative prefix")));
        }
        Ok(())
    }

    pub fn attend(&self) -> AttendFlags {
        AttendFlags { self_attention: self.self_attention, cross_attention: self.cross_attention, norm_encoding: self.norm_encoding }
    }

    pub fn label(&self) -> &'static str {
        match self.depth() {
            0 => "average_pool",
            1 => "selection",
            2 => "selection+self",
            3 => "selection+self+cross",
            _ => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum GammaPolicy {
    Trained,
    Fixed(f64),
}

/// Weight of the norm encoding relative to unit directions.
pub const DEFAULT_ENCODING_SCALE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub k: usize,
    pub heads: usize,
    pub flags: AblationFlags,
    pub gamma_policy: GammaPolicy,
    pub encoding: NormEncodingConfig,
    #[serde(default = "default_attention_init")]
    pub attention_init: AttentionInit,
    /// Sampler temperature of inference-mode fusion.
    #[serde(default = "default_infer_temperature")]
    pub infer_temperature: f64,
}

fn default_attention_init() -> AttentionInit {
    AttentionInit::DEFAULT
}

fn default_infer_temperature() -> f64 {
    INFER_TEMPERATURE
}

impl ModelConfig {
    pub fn new(channels: usize, k: usize) -> Result<Self> {
        let cfg = Self {
            channels,
            k,
            heads: DEFAULT_HEADS,
            flags: AblationFlags::FULL,
            gamma_policy: GammaPolicy::Trained,
            encoding: NormEncodingConfig { scale: DEFAULT_ENCODING_SCALE, ..NormEncodingConfig::new(channels)? },
            attention_init: AttentionInit::DEFAULT,
            infer_temperature: INFER_TEMPERATURE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Parameter("core template size k must be >= 1".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Parameter(format!("{} channels not divisible into {} heads", self.channels, self.heads)));
        }
        if self.encoding.channels != self.channels {
            return Err(Error::Parameter("encoding width must match channels".into()));
        }
        self.encoding.validate()?;
        if !(self.infer_temperature > 0.0) || !self.infer_temperature.is_finite() {
            return Err(Error::Parameter(format!("inference temperature must be > 0, got {}", self.infer_temperature)));
        }
        self.flags.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub gamma: f64,
    pub encoder: AttentionParams,
    pub decoder: AttentionParams,
    pub loss: LossParams,
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Tape handles for every parameter of a [`Model`].
pub struct ParamVars {
    pub gamma: Var,
    pub encoder: AttentionVars,
    pub decoder: AttentionVars,
    pub prototypes: Var,
}

/// Fused descriptor on a tape.
pub struct FusedVars {
    /// `[1 x c]` unit row.
    pub feature: Var,
    /// `[1]` pre-normalization magnitude.
    pub magnitude: Var,
    pub trace: Option<SelectionTrace>,
}

/// Fused descriptor as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedTemplate {
    pub descriptor: Vec<f64>,
    pub magnitude: f64,
    pub selected: Vec<usize>,
}

impl Model {
    /// Fresh model; `prototypes` seeds the classification head.
    pub fn init(config: ModelConfig, prototypes: Tensor, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = match config.gamma_policy {
            GammaPolicy::Trained => Gamma::DEFAULT_INIT,
            GammaPolicy::Fixed(g) => Gamma::new(g)?.value(),
        };
        let encoder = config.attention_init.build(config.channels, config.heads, &mut rng)?;
        let decoder = config.attention_init.build(config.channels, config.heads, &mut rng)?;
        if prototypes.dims2().1 != config.channels {
            return Err(Error::Dimension("prototype width must match channels".into()));
        }
        let loss = LossParams::new(prototypes)?;
        Ok(Self { config, params: ModelParams { gamma, encoder, decoder, loss } })
    }

    pub fn gamma(&self) -> Gamma {
        Gamma::new(self.params.gamma).expect("gamma kept finite")
    }

    /// Register parameters on a tape. A fixed gamma enters as a constant.
    pub fn on_tape(&self, tape: &mut Tape) -> ParamVars {
        let g = Tensor::scalar(self.params.gamma);
        let gamma = match self.config.gamma_policy {
            GammaPolicy::Trained => tape.leaf(g),
            GammaPolicy::Fixed(_) => tape.constant(g),
        };
        ParamVars {
            gamma,
            encoder: self.params.encoder.on_tape(tape),
            decoder: self.params.decoder.on_tape(tape),
            prototypes: tape.leaf(self.params.loss.prototypes.clone()),
        }
    }

    /// Fuse one template on a tape. `template` is `[n x c]` unit directions
    /// with norms `[n]`; `key` selects the sampler noise stream.
    pub fn fuse_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        directions: Var,
        norms: Var,
        gumbel: &GumbelConfig,
        key: u64,
    ) -> Result<FusedVars> {
        let cfg = &self.config;
        if !cfg.flags.selection {
            return average_pool_on_tape(tape, directions, norms);
        }
        let sel = select_on_tape(tape, directions, norms, vars.gamma, cfg.k, gumbel, key)?;
        let agg = attend_and_aggregate(
            tape,
            sel.features,
            sel.norms,
            directions,
            norms,
            &vars.encoder,
            &vars.decoder,
            &cfg.encoding,
            cfg.flags.attend(),
        )?;
        Ok(FusedVars { feature: agg.feature, magnitude: agg.magnitude, trace: Some(sel.trace) })
    }

    /// Deterministic inference-mode fusion.
    pub fn fuse(&self, features: &[Feature]) -> Result<FusedTemplate> {
        self.fuse_with_tape(features).map(|(f, _)| f)
    }

    /// [`Model::fuse`] that also returns the tape, for op counting.
    pub fn fuse_with_tape(&self, features: &[Feature]) -> Result<(FusedTemplate, Tape)> {
        let (dirs, norms) = template_tensors(features)?;
        if dirs.dims2().1 != self.config.channels {
            return Err(Error::Dimension(format!("features have {} channels, model expects {}", dirs.dims2().1, self.config.channels)));
        }
        let mut tape = Tape::new();
        let vars = self.on_tape(&mut tape);
        let d = tape.constant(dirs);
        let n = tape.constant(norms);
        let fused = self.fuse_on_tape(&mut tape, &vars, d, n, &GumbelConfig { temperature: self.config.infer_temperature, ..GumbelConfig::inference() }, 0)?;
        let out = FusedTemplate {
            descriptor: tape.value(fused.feature).data().to_vec(),
            magnitude: tape.value(fused.magnitude).item(),
            selected: fused.trace.map(|t| t.indices).unwrap_or_default(),
        };
        Ok((out, tape))
    }

    /// Named parameter tensors in a fixed order.
    pub fn param_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("gamma".to_string(), Tensor::scalar(self.params.gamma))];
        for (block, p) in [("encoder", &self.params.encoder), ("decoder", &self.params.decoder)] {
            for (name, m) in ["wq", "wk", "wv", "wo"].iter().zip(p.matrices()) {
                out.push((format!("{block}.{name}"), m.clone()));
            }
        }
        out.push(("prototypes".into(), self.params.loss.prototypes.clone()));
        out
    }

    /// Inverse of [`Model::param_tensors`].
    pub fn set_param_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != 10 {
            return Err(Error::Dimension(format!("expected 10 parameter tensors, got {}", tensors.len())));
        }
        self.params.gamma = tensors[0].item();
        for (i, m) in self.params.encoder.matrices_mut().into_iter().enumerate() {
            *m = tensors[1 + i].clone();
        }
        for (i, m) in self.params.decoder.matrices_mut().into_iter().enumerate() {
            *m = tensors[5 + i].clone();
        }
        self.params.loss.prototypes = tensors[9].clone();
        Ok(())
    }
}

impl ParamVars {
    /// Handles in [`Model::param_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.gamma];
        v.extend(self.encoder.params());
        v.extend(self.decoder.params());
        v.push(self.prototypes);
        v
    }
}

/// Mean of raw features (direction times norm), normalized.
pub fn average_pool_on_tape(tape: &mut Tape, directions: Var, norms: Var) -> Result<FusedVars> {
    let n = tape.value(directions).dims2().0;
    if n == 0 {
        return Err(Error::EmptyInput("template has no features".into()));
    }
    let prev = tape.set_stage(Stage::Aggregate);
    let w = tape.reshape(norms, vec![1, n])?;
    let summed = tape.matmul(w, directions)?;
    let mean = tape.scale(summed, 1.0 / n as f64);
    let magnitude = tape.l2norm(mean);
    let feature = tape.normalize(mean);
    tape.set_stage(prev);
    Ok(FusedVars { feature, magnitude, trace: None })
}

/// Plain average pooling: normalized mean of raw features.
pub fn average_pool(features: &[Feature]) -> Result<Vec<f64>> {
    let Some(first) = features.first() else {
        return Err(Error::EmptyInput("template has no features".into()));
    };
    let mut acc = vec![0.0; first.dim()];
    for f in features {
        for (a, v) in acc.iter_mut().zip(f.direction()) {
            *a += v * f.norm();
        }
    }
    acc.iter_mut().for_each(|a| *a /= features.len() as f64);
    let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(acc)
}
