//! Norm encoding, multi-head attention blocks and the sum-normalize
//! aggregate that turns the enriched core template into one descriptor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{sinusoid_freqs, Stage, Tape, Tensor, Var};

pub const DEFAULT_HEADS: usize = 4;
pub const ENCODING_BASE: f64 = 10_000.0;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How attention projections start out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionInit {
    /// [`AttentionParams::init`].
    Uniform,
    /// [`AttentionParams::pooling`].
    Pooling { sharpness: f64, gain: f64 },
}

impl AttentionInit {
    pub const DEFAULT: Self = Self::Pooling { sharpness: 3.0, gain: 3.0 };

    pub fn build(&self, channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<AttentionParams> {
        match *self {
            Self::Uniform => AttentionParams::init(channels, heads, rng),
            Self::Pooling { sharpness, gain } => AttentionParams::pooling(channels, heads, sharpness, gain),
        }
    }
}

/// Projection matrices of one attention block. Rows are features, so a block
/// computes `X W` for each projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// Standardize `residual + attention` per row.
    pub layer_norm: bool,
}

impl AttentionParams {
    /// Uniform init in `+-1/sqrt(fan_in)`.
    pub fn init(channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_heads(channels, heads)?;
        let bound = 1.0 / (channels as f64).sqrt();
        let mut mat = || {
            let data = (0..channels * channels).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::matrix(channels, channels, data)
        };
        Ok(Self { heads, wq: mat()?, wk: mat()?, wv: mat()?, wo: mat()?, layer_norm: true })
    }

    /// Similarity-weighted pooling: `Wq = Wk = sharpness * I`, `Wv = I`,
    /// `Wo = gain * I`, no layer norm. Each query starts out as itself plus
    /// `gain` times an average of the context rows that resemble it.
    pub fn pooling(channels: usize, heads: usize, sharpness: f64, gain: f64) -> Result<Self> {
        check_heads(channels, heads)?;
        let scaled = |c: f64| {
            let mut t = Tensor::identity(channels);
            t.data_mut().iter_mut().for_each(|v| *v *= c);
            t
        };
        Ok(Self { heads, wq: scaled(sharpness), wk: scaled(sharpness), wv: scaled(1.0), wo: scaled(gain), layer_norm: false })
    }

    /// All four projections set to the identity.
    pub fn identity(channels: usize, heads: usize) -> Result<Self> {
        check_heads(channels, heads)?;
        let i = Tensor::identity(channels);
        Ok(Self { heads, wq: i.clone(), wk: i.clone(), wv: i.clone(), wo: i, layer_norm: true })
    }

    pub fn zeros(channels: usize, heads: usize) -> Result<Self> {
        check_heads(channels, heads)?;
        let z = Tensor::zeros(&[channels, channels]);
        Ok(Self { heads, wq: z.clone(), wk: z.clone(), wv: z.clone(), wo: z, layer_norm: true })
    }

    pub fn channels(&self) -> usize {
        self.wq.dims2().0
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_heads(c, self.heads)?;
        for m in self.matrices() {
            if m.shape() != [c, c] {
                return Err(Error::Dimension(format!("projection shape {:?}, expected [{c}, {c}]", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::Parameter("non-finite projection entry".into()));
            }
        }
        Ok(())
    }

    pub fn matrices(&self) -> [&Tensor; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn matrices_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    /// Register the projections as tape leaves.
    pub fn on_tape(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            heads: self.heads,
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
            layer_norm: self.layer_norm,
        }
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Parameter(format!("{channels} channels not divisible into {heads} heads")));
    }
    Ok(())
}

/// Tape handles for one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub heads: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub layer_norm: bool,
}

impl AttentionVars {
    pub fn params(&self) -> [Var; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEncodingConfig {
    pub channels: usize,
    pub base: f64,
    /// Weight applied to the encoding before it is added to a direction.
    pub scale: f64,
}

impl NormEncodingConfig {
    pub fn new(channels: usize) -> Result<Self> {
        let cfg = Self { channels, base: ENCODING_BASE, scale: 1.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Parameter(format!("encoding channels must be even and > 0, got {}", self.channels)));
        }
        if !(self.base > 0.0) {
            return Err(Error::Parameter(format!("encoding base must be > 0, got {}", self.base)));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of a scalar: channel `2i` is `sin(q / base^(2i/C))`,
/// channel `2i+1` the matching cosine.
pub fn norm_encode(q: f64, cfg: &NormEncodingConfig) -> Vec<f64> {
    sinusoid_freqs(cfg.channels, cfg.base).iter().flat_map(|w| [(q * w).sin(), (q * w).cos()]).collect()
}

/// Multi-head scaled dot-product attention of `queries` (`[a x c]`) over
/// `context` (`[b x c]`), output projection, residual, optional layer norm.
/// No feed-forward block follows.
pub fn mha(tape: &mut Tape, queries: Var, context: Var, p: &AttentionVars) -> Result<Var> {
    Ok(mha_with_weights(tape, queries, context, p)?.0)
}

/// [`mha`] that also returns each head's `[a x b]` attention matrix.
pub fn mha_with_weights(tape: &mut Tape, queries: Var, context: Var, p: &AttentionVars) -> Result<(Var, Vec<Var>)> {
    let (b, cb) = tape.value(context).dims2();
    if b == 0 || tape.value(context).is_empty() {
        return Err(Error::EmptyInput("attention over an empty context".into()));
    }
    let (_, c) = tape.value(queries).dims2();
    if c != cb || tape.value(p.wq).dims2().0 != c {
        return Err(Error::Dimension(format!("attention widths: queries {c}, context {cb}")));
    }
    check_heads(c, p.heads)?;
    let dh = c / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(queries, p.wq)?;
    let k = tape.matmul(context, p.wk)?;
    let v = tape.matmul(context, p.wv)?;
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1.0)?;
        heads.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let joined = tape.concat_cols(&heads)?;
    let projected = tape.matmul(joined, p.wo)?;
    let out = tape.add(queries, projected)?;
    let out = if p.layer_norm { tape.layer_norm_rows(out, LAYER_NORM_EPS) } else { out };
    Ok((out, weights))
}

/// Which attend-stage components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendFlags {
    pub self_attention: bool,
    pub cross_attention: bool,
    pub norm_encoding: bool,
}

impl AttendFlags {
    pub const ALL: Self = Self { self_attention: true, cross_attention: true, norm_encoding: true };
    pub const NONE: Self = Self { self_attention: false, cross_attention: false, norm_encoding: false };
}

/// Output of [`attend_and_aggregate`].
pub struct Aggregate {
    /// `[1 x c]` unit-length fused descriptor.
    pub feature: Var,
    /// Magnitude of the summed rows before normalization.
    pub magnitude: Var,
}

fn add_encoding(tape: &mut Tape, rows: Var, norms: Var, cfg: &NormEncodingConfig) -> Result<Var> {
    let enc = tape.sinusoidal(norms, cfg.channels, cfg.base)?;
    let enc = if cfg.scale == 1.0 { enc } else { tape.scale(enc, cfg.scale) };
    tape.add(rows, enc)
}

/// Enrich the core template with self-attention, let it query the full
/// template with cross-attention, then sum and normalize.
///
/// `core` is `[k x c]` with norms `[k]`; `template` is `[n x c]` with norms
/// `[n]`. Norm encodings are added to both before attention.
#[allow(clippy::too_many_arguments)]
pub fn attend_and_aggregate(
    tape: &mut Tape,
    core: Var,
    core_norms: Var,
    template: Var,
    template_norms: Var,
    encoder: &AttentionVars,
    decoder: &AttentionVars,
    enc_cfg: &NormEncodingConfig,
    flags: AttendFlags,
) -> Result<Aggregate> {
    let prev = tape.set_stage(Stage::Encode);
    let mut h = if flags.norm_encoding { add_encoding(tape, core, core_norms, enc_cfg)? } else { core };
    if flags.self_attention {
        h = mha(tape, h, h, encoder)?;
    }
    tape.set_stage(Stage::Decode);
    if flags.cross_attention {
        let ctx = if flags.norm_encoding { add_encoding(tape, template, template_norms, enc_cfg)? } else { template };
        h = mha(tape, h, ctx, decoder)?;
    }
    tape.set_stage(Stage::Aggregate);
    let summed = tape.sum_rows(h);
    let magnitude = tape.l2norm(summed);
    let feature = tape.normalize(summed);
    tape.set_stage(prev);
    Ok(Aggregate { feature, magnitude })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coreset::noise_stream;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Triple-loop reference attention (no layer norm).
    fn naive_mha(q: &Tensor, kv: &Tensor, p: &AttentionParams) -> Vec<Vec<f64>> {
        let (a, c) = q.dims2();
        let b = kv.dims2().0;
        let proj = |x: &Tensor, w: &Tensor, i: usize| -> Vec<f64> {
            (0..c).map(|j| (0..c).map(|t| x.row(i)[t] * w.data()[t * c + j]).sum()).collect()
        };
        let dh = c / p.heads;
        let mut out = Vec::new();
        for i in 0..a {
            let qi = proj(q, &p.wq, i);
            let mut concat = vec![0.0; c];
            for h in 0..p.heads {
                let r = h * dh..(h + 1) * dh;
                let mut s: Vec<f64> = (0..b)
                    .map(|j| {
                        let kj = proj(kv, &p.wk, j);
                        r.clone().map(|t| qi[t] * kj[t]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                s.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let z: f64 = s.iter().sum();
                for j in 0..b {
                    let vj = proj(kv, &p.wv, j);
                    for t in r.clone() {
                        concat[t] += s[j] / z * vj[t];
                    }
                }
            }
            let o: Vec<f64> = (0..c).map(|j| (0..c).map(|t| concat[t] * p.wo.data()[t * c + j]).sum()).collect();
            out.push(q.row(i).iter().zip(&o).map(|(x, y)| x + y).collect());
        }
        out
    }

    #[test]
    fn encoding_at_zero() {
        let cfg = NormEncodingConfig::new(8).unwrap();
        let e = norm_encode(0.0, &cfg);
        for i in 0..4 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
        let e = norm_encode(std::f64::consts::PI, &cfg);
        assert!(e[0].abs() < 1e-15);
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(NormEncodingConfig::new(7).is_err());
        assert!(AttentionParams::zeros(6, 4).is_err());
    }

    #[test]
    fn distinct_norms_encode_distinctly() {
        let cfg = NormEncodingConfig::new(64).unwrap();
        let qs: Vec<f64> = (0..=400).map(|i| i as f64 * 0.25).collect();
        let enc: Vec<Vec<f64>> = qs.iter().map(|q| norm_encode(*q, &cfg)).collect();
        for i in 0..enc.len() {
            for j in i + 1..enc.len() {
                let linf = enc[i].iter().zip(&enc[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(linf > 1e-6, "{} vs {}", qs[i], qs[j]);
            }
        }
    }

    #[test]
    fn tape_encoding_matches_plain() {
        let cfg = NormEncodingConfig::new(6).unwrap();
        let mut t = Tape::new();
        let q = t.constant(Tensor::vector(vec![0.3, 2.5]));
        let e = t.sinusoidal(q, 6, cfg.base).unwrap();
        assert_eq!(t.value(e).row(1), norm_encode(2.5, &cfg).as_slice());
    }

    #[test]
    fn uniform_attention_returns_residual_plus_mean() {
        let mut p = AttentionParams::identity(4, 1).unwrap();
        p.layer_norm = false;
        let mut t = Tape::new();
        let vars = p.on_tape(&mut t);
        let q = t.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0]]).unwrap());
        // keys all equal once projected: equal rows in the key dims would
        // still differ as values, so use a rank-one context and zero queries
        let zero_q = t.constant(Tensor::zeros(&[2, 4]));
        let ctx = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![3.0, 2.0, 1.0, 0.0]]).unwrap());
        let (out, w) = mha_with_weights(&mut t, zero_q, ctx, &vars).unwrap();
        for v in t.value(w[0]).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert_eq!(t.value(out).row(0), &[2.0, 2.0, 2.0, 2.0]);
        let out = mha(&mut t, q, ctx, &vars).unwrap();
        assert!(t.value(out).is_finite());
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = noise_stream(42, 0, 0);
        for heads in [1, 2, 4] {
            let mut p = AttentionParams::init(8, heads, &mut rng).unwrap();
            p.layer_norm = false;
            let q = random_matrix(&mut rng, 3, 8);
            let kv = random_matrix(&mut rng, 7, 8);
            let mut t = Tape::new();
            let vars = p.on_tape(&mut t);
            let qv = t.constant(q.clone());
            let kvv = t.constant(kv.clone());
            let (out, w) = mha_with_weights(&mut t, qv, kvv, &vars).unwrap();
            let expect = naive_mha(&q, &kv, &p);
            for i in 0..3 {
                for (a, b) in t.value(out).row(i).iter().zip(&expect[i]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            for wh in w {
                for r in 0..3 {
                    assert!((t.value(wh).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn empty_context_rejected() {
        let p = AttentionParams::identity(4, 1).unwrap();
        let mut t = Tape::new();
        let vars = p.on_tape(&mut t);
        let q = t.constant(Tensor::zeros(&[1, 4]));
        let ctx = t.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(mha(&mut t, q, ctx, &vars), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn degenerate_wiring_single_core_feature() {
        let c = 8;
        let mut enc = AttentionParams::zeros(c, 2).unwrap();
        let mut dec = AttentionParams::zeros(c, 2).unwrap();
        enc.layer_norm = false;
        dec.layer_norm = false;
        let cfg = NormEncodingConfig::new(c).unwrap();
        let mut rng = noise_stream(3, 0, 0);
        let core = random_matrix(&mut rng, 1, c);
        let tmpl = random_matrix(&mut rng, 5, c);
        let mut t = Tape::new();
        let (ev, dv) = (enc.on_tape(&mut t), dec.on_tape(&mut t));
        let cv = t.constant(core.clone());
        let cn = t.constant(Tensor::vector(vec![1.7]));
        let tv = t.constant(tmpl);
        let tn = t.constant(Tensor::vector(vec![1.0; 5]));
        let agg = attend_and_aggregate(&mut t, cv, cn, tv, tn, &ev, &dv, &cfg, AttendFlags::ALL).unwrap();
        let e = norm_encode(1.7, &cfg);
        let sum: Vec<f64> = core.data().iter().zip(&e).map(|(a, b)| a + b).collect();
        let nrm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in t.value(agg.feature).data().iter().zip(&sum) {
            assert!((a - b / nrm).abs() < 1e-12);
        }
        assert!((t.value(agg.magnitude).item() - nrm).abs() < 1e-12);
    }

    #[test]
    fn decoder_ignores_context_order() {
        let mut rng = noise_stream(8, 0, 0);
        let p = AttentionParams::init(8, 4, &mut rng).unwrap();
        let q = random_matrix(&mut rng, 3, 8);
        let kv = random_matrix(&mut rng, 6, 8);
        let perm = [4, 2, 0, 5, 1, 3];
        let kv_perm = Tensor::from_rows(&perm.iter().map(|&i| kv.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |ctx: Tensor| {
            let mut t = Tape::new();
            let vars = p.on_tape(&mut t);
            let qv = t.constant(q.clone());
            let c = t.constant(ctx);
            let out = mha(&mut t, qv, c, &vars).unwrap();
            t.value(out).clone()
        };
        let (a, b) = (run(kv), run(kv_perm));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
