//! Mini-batch training of a [`Model`] with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coreset::{template_tensors, GumbelConfig, TRAIN_TEMPERATURE};
use crate::error::{Error, Result};
use crate::loss::margin_loss;
use crate::model::{average_pool, GammaPolicy, Model};
use crate::numgrad::{Tape, Tensor};
use crate::template::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// L2 penalty added to the gradient of every weight except gamma.
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub temperature: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 1e-3, batch: 20, epochs: 2, seed: 0, temperature: TRAIN_TEMPERATURE, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("bad optimizer settings".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("training temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub gamma: f64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let zeros: Vec<Tensor> = model.param_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { model, adam: AdamState { m: zeros.clone(), v: zeros }, step: 0 }
    }
}

/// Which of the [`Model::param_tensors`] a model variant actually uses.
pub fn trainable_mask(model: &Model) -> [bool; 10] {
    let f = model.config.flags;
    let gamma = f.selection && model.config.gamma_policy == GammaPolicy::Trained;
    let enc = f.selection && f.self_attention;
    let dec = f.selection && f.cross_attention;
    [gamma, enc, enc, enc, enc, dec, dec, dec, dec, true]
}

/// Optimizer steps per epoch for `n` templates.
pub fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

/// Template order of one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0xA076_1D64_78BD_642F));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Prototype rows set to the average-pooled direction of each identity's
/// training items. Identities without data keep a unit basis row.
pub fn class_mean_prototypes(data: &Dataset, identities: usize) -> Result<Tensor> {
    let c = data.channels;
    let mut rows = vec![0.0; identities * c];
    for i in 0..identities {
        let items: Vec<_> = data.templates.iter().filter(|t| t.identity == i).flat_map(|t| t.features()).collect();
        if items.is_empty() {
            rows[i * c + i % c] = 1.0;
        } else {
            rows[i * c..(i + 1) * c].copy_from_slice(&average_pool(&items)?);
        }
    }
    Tensor::matrix(identities, c, rows)
}

/// Drives optimization over a fixed dataset.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    data: &'a Dataset,
    tensors: Vec<(Tensor, Tensor)>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if data.templates.is_empty() {
            return Err(Error::EmptyInput("training set has no templates".into()));
        }
        let tensors = data.templates.iter().map(|t| template_tensors(&t.features())).collect::<Result<Vec<_>>>()?;
        Ok(Self { config, data, tensors })
    }

    pub fn total_steps(&self) -> u64 {
        steps_per_epoch(self.data.templates.len(), self.config.batch) * self.config.epochs as u64
    }

    /// Template indices of global step `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.data.templates.len();
        let per = steps_per_epoch(n, self.config.batch);
        let order = epoch_order(n, self.config.seed, step / per);
        let start = (step % per) as usize * self.config.batch;
        order[start..(start + self.config.batch).min(n)].to_vec()
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&self, state: &mut TrainState) -> Result<LogRow> {
        let idx = self.batch_indices(state.step);
        let model = &state.model;
        let n_ids = model.params.loss.identities();
        let labels: Vec<usize> = idx.iter().map(|&i| self.data.templates[i].identity).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_ids) {
            return Err(Error::Index(format!("identity {bad} has no prototype ({n_ids} prototypes)")));
        }
        let gumbel = GumbelConfig { temperature: self.config.temperature, ..GumbelConfig::training(self.config.seed) };
        let mut tape = Tape::new();
        let vars = model.on_tape(&mut tape);
        let mut feats = Vec::with_capacity(idx.len());
        let mut mags = Vec::with_capacity(idx.len());
        for (b, &i) in idx.iter().enumerate() {
            let (dirs, norms) = &self.tensors[i];
            let d = tape.constant(dirs.clone());
            let nv = tape.constant(norms.clone());
            let key = state.step * self.config.batch as u64 + b as u64;
            let fused = model.fuse_on_tape(&mut tape, &vars, d, nv, &gumbel, key)?;
            feats.push(fused.feature);
            mags.push(tape.reshape(fused.magnitude, vec![1, 1])?);
        }
        let features = tape.concat_rows(&feats)?;
        let stacked = tape.concat_rows(&mags)?;
        let magnitudes = tape.reshape(stacked, vec![idx.len()])?;

        let mut loss_params = model.params.loss.clone();
        loss_params.norm_stats.update(tape.value(magnitudes).data());
        let loss = margin_loss(&mut tape, features, magnitudes, &labels, vars.prototypes, &loss_params)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Contract(format!("non-finite loss at step {}", state.step)));
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.all().into_iter().map(|v| grads.get(v)).collect();

        let mask = trainable_mask(model);
        let mut params: Vec<Tensor> = model.param_tensors().into_iter().map(|(_, t)| t).collect();
        let t = (state.step + 1) as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (p, ((param, grad), (m, v))) in params.iter_mut().zip(&grads).zip(state.adam.m.iter_mut().zip(state.adam.v.iter_mut())).enumerate() {
            if !mask[p] {
                continue;
            }
            let wd = if p == 0 { 0.0 } else { self.config.weight_decay };
            let (pd, gd) = (param.data_mut(), grad.data());
            for j in 0..pd.len() {
                let g = gd[j] + wd * pd[j];
                let mj = &mut m.data_mut()[j];
                *mj = b1 * *mj + (1.0 - b1) * g;
                let mhat = *mj / c1;
                let vj = &mut v.data_mut()[j];
                *vj = b2 * *vj + (1.0 - b2) * g * g;
                let vhat = *vj / c2;
                pd[j] -= self.config.lr * mhat / (vhat.sqrt() + self.config.eps);
            }
        }
        state.model.set_param_tensors(&params)?;
        state.model.params.loss.norm_stats = loss_params.norm_stats;
        state.model.params.loss.renormalize();
        state.step += 1;
        Ok(LogRow { step: state.step, loss: loss_value, gamma: state.model.params.gamma })
    }

    /// Run until `total_steps`, calling `on_step` after each step.
    pub fn run(&self, state: &mut TrainState, mut on_step: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        let mut log = Vec::new();
        while state.step < self.total_steps() {
            let row = self.step(state)?;
            on_step(&row);
            log.push(row);
        }
        Ok(log)
    }
}

/// Training log as CSV with header `step,loss,gamma`.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,gamma\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.gamma));
    }
    s
}
