//! Toy decoder-only causal transformer with dual point/quantile heads.
//!
//! Pre-layer-norm blocks, GELU (tanh form) feed-forward, causal
//! multi-head attention, trained by AdamW with warmup plus cosine decay
//! under teacher forcing. Everything is plain f64 loops with a
//! hand-written backward pass, verified elementwise against central
//! finite differences.

use crate::error::{Error, Result};
use crate::forecaster::imputer::FeatureImputer;
use crate::forecaster::{
    pinball_loss, rearrange_quantiles, sample_from_quantiles, Forecaster, QuantileForecast,
    QUANTILE_LEVELS,
};
use crate::math;
use crate::panel::{log_value, AnnualRecord, IndividualHistory};
use crate::rng::{tag, Stream};
use crate::tensor::Mat;
use crate::tokenizer::TokenizerState;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_context: usize,
    pub dropout: f64,
    pub stochastic_depth: f64,
    pub seed: u64,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        ToyTransformerConfig {
            layers: 2,
            heads: 4,
            model_dim: 32,
            ff_dim: 128,
            max_context: 45,
            dropout: 0.0,
            stochastic_depth: 0.0,
            seed: 1,
        }
    }
}

impl ToyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::Parameter("transformer dims must be >= 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.stochastic_depth) {
            return Err(Error::Parameter("dropout rates must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// One transformer block's weights. Also reused as the gradient holder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub w_ff1: Mat,
    pub b_ff1: Mat,
    pub w_ff2: Mat,
    pub b_ff2: Mat,
}

impl BlockParams {
    fn init(d: usize, ff: usize, s: &mut Stream) -> Self {
        let w = |rows: usize, cols: usize, s: &mut Stream| {
            Mat::uniform(rows, cols, 1.0 / (cols as f64).sqrt(), s)
        };
        let ones = |n: usize| Mat { rows: 1, cols: n, data: vec![1.0; n] };
        BlockParams {
            ln1_g: ones(d),
            ln1_b: Mat::zeros(1, d),
            wq: w(d, d, s),
            bq: Mat::zeros(1, d),
            wk: w(d, d, s),
            bk: Mat::zeros(1, d),
            wv: w(d, d, s),
            bv: Mat::zeros(1, d),
            wo: w(d, d, s),
            bo: Mat::zeros(1, d),
            ln2_g: ones(d),
            ln2_b: Mat::zeros(1, d),
            w_ff1: w(ff, d, s),
            b_ff1: Mat::zeros(1, ff),
            w_ff2: w(d, ff, s),
            b_ff2: Mat::zeros(1, d),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        BlockParams {
            ln1_g: z(&self.ln1_g),
            ln1_b: z(&self.ln1_b),
            wq: z(&self.wq),
            bq: z(&self.bq),
            wk: z(&self.wk),
            bk: z(&self.bk),
            wv: z(&self.wv),
            bv: z(&self.bv),
            wo: z(&self.wo),
            bo: z(&self.bo),
            ln2_g: z(&self.ln2_g),
            ln2_b: z(&self.ln2_b),
            w_ff1: z(&self.w_ff1),
            b_ff1: z(&self.b_ff1),
            w_ff2: z(&self.w_ff2),
            b_ff2: z(&self.b_ff2),
        }
    }
}

/// Trainable tokenizer tensors (gradient holder).
#[derive(Debug, Clone, PartialEq)]
pub struct TokGrads {
    pub cont_proj: Mat,
    pub cat_tables: Vec<Mat>,
    pub missing_proj: Mat,
    pub age_table: Mat,
    pub year_table: Mat,
    pub final_proj: Mat,
    pub final_bias: Mat,
}

impl TokGrads {
    fn zeros_like(tok: &TokenizerState) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        TokGrads {
            cont_proj: z(&tok.cont_proj),
            cat_tables: tok.cat_tables.iter().map(z).collect(),
            missing_proj: z(&tok.missing_proj),
            age_table: z(&tok.age_table),
            year_table: z(&tok.year_table),
            final_proj: z(&tok.final_proj),
            final_bias: z(&tok.final_bias),
        }
    }
}

/// All model weights: the tokenizer's tables and projections plus the
/// transformer blocks and the two output heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ToyTransformerConfig,
    pub tokenizer: TokenizerState,
    pub blocks: Vec<BlockParams>,
    pub final_ln_g: Mat,
    pub final_ln_b: Mat,
    pub point_w: Mat,
    pub point_b: Mat,
    pub quant_w: Mat,
    pub quant_b: Mat,
}

/// Gradients aligned with [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub tok: TokGrads,
    pub blocks: Vec<BlockParams>,
    pub final_ln_g: Mat,
    pub final_ln_b: Mat,
    pub point_w: Mat,
    pub point_b: Mat,
    pub quant_w: Mat,
    pub quant_b: Mat,
}

impl ModelParams {
    /// Fresh weights around a fitted tokenizer. The tokenizer's
    /// `model_dim` must match the transformer's.
    pub fn init(config: ToyTransformerConfig, tokenizer: TokenizerState) -> Result<Self> {
        config.validate()?;
        if tokenizer.config.model_dim != config.model_dim {
            return Err(Error::Parameter(format!(
                "tokenizer model_dim {} != transformer model_dim {}",
                tokenizer.config.model_dim, config.model_dim
            )));
        }
        let d = config.model_dim;
        let ff = config.ff_dim;
        let mut s = Stream::new(config.seed, &[tag::TRAIN_INIT, 7]);
        let blocks = (0..config.layers).map(|_| BlockParams::init(d, ff, &mut s)).collect();
        let w = |rows: usize, cols: usize, s: &mut Stream| {
            Mat::uniform(rows, cols, 1.0 / (cols as f64).sqrt(), s)
        };
        Ok(ModelParams {
            final_ln_g: Mat { rows: 1, cols: d, data: vec![1.0; d] },
            final_ln_b: Mat::zeros(1, d),
            point_w: w(1, d, &mut s),
            point_b: Mat::zeros(1, 1),
            quant_w: w(7, d, &mut s),
            quant_b: Mat::zeros(1, 7),
            blocks,
            tokenizer,
            config,
        })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        ModelGrads {
            tok: TokGrads::zeros_like(&self.tokenizer),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            final_ln_g: z(&self.final_ln_g),
            final_ln_b: z(&self.final_ln_b),
            point_w: z(&self.point_w),
            point_b: z(&self.point_b),
            quant_w: z(&self.quant_w),
            quant_b: z(&self.quant_b),
        }
    }
}

/// Visit every (name, tensor) pair of the parameters and the aligned
/// entries of up to three companion gradient/state holders.
fn zip_tensors<F: FnMut(&str, &mut Mat, &mut Mat, &mut Mat, &mut Mat)>(
    p: &mut ModelParams,
    g: &mut ModelGrads,
    m: &mut ModelGrads,
    v: &mut ModelGrads,
    mut f: F,
) {
    macro_rules! tok_field {
        ($name:expr, $field:ident) => {
            f($name, &mut p.tokenizer.$field, &mut g.tok.$field, &mut m.tok.$field, &mut v.tok.$field)
        };
    }
    tok_field!("tok.cont_proj", cont_proj);
    for i in 0..p.tokenizer.cat_tables.len() {
        f(
            &format!("tok.cat{i}"),
            &mut p.tokenizer.cat_tables[i],
            &mut g.tok.cat_tables[i],
            &mut m.tok.cat_tables[i],
            &mut v.tok.cat_tables[i],
        );
    }
    tok_field!("tok.missing_proj", missing_proj);
    tok_field!("tok.age_table", age_table);
    tok_field!("tok.year_table", year_table);
    tok_field!("tok.final_proj", final_proj);
    tok_field!("tok.final_bias", final_bias);
    for l in 0..p.blocks.len() {
        macro_rules! blk_field {
            ($suffix:expr, $field:ident) => {
                f(
                    &format!("blk{l}.{}", $suffix),
                    &mut p.blocks[l].$field,
                    &mut g.blocks[l].$field,
                    &mut m.blocks[l].$field,
                    &mut v.blocks[l].$field,
                )
            };
        }
        blk_field!("ln1_g", ln1_g);
        blk_field!("ln1_b", ln1_b);
        blk_field!("wq", wq);
        blk_field!("bq", bq);
        blk_field!("wk", wk);
        blk_field!("bk", bk);
        blk_field!("wv", wv);
        blk_field!("bv", bv);
        blk_field!("wo", wo);
        blk_field!("bo", bo);
        blk_field!("ln2_g", ln2_g);
        blk_field!("ln2_b", ln2_b);
        blk_field!("w_ff1", w_ff1);
        blk_field!("b_ff1", b_ff1);
        blk_field!("w_ff2", w_ff2);
        blk_field!("b_ff2", b_ff2);
    }
    macro_rules! top_field {
        ($name:expr, $field:ident) => {
            f($name, &mut p.$field, &mut g.$field, &mut m.$field, &mut v.$field)
        };
    }
    top_field!("final_ln_g", final_ln_g);
    top_field!("final_ln_b", final_ln_b);
    top_field!("point_w", point_w);
    top_field!("point_b", point_b);
    top_field!("quant_w", quant_w);
    top_field!("quant_b", quant_b);
}

fn accumulate(into: &mut ModelGrads, from: &ModelGrads, scale: f64) {
    let add = |a: &mut Mat, b: &Mat| {
        for (x, y) in a.data.iter_mut().zip(&b.data) {
            *x += scale * y;
        }
    };
    add(&mut into.tok.cont_proj, &from.tok.cont_proj);
    for (a, b) in into.tok.cat_tables.iter_mut().zip(&from.tok.cat_tables) {
        add(a, b);
    }
    add(&mut into.tok.missing_proj, &from.tok.missing_proj);
    add(&mut into.tok.age_table, &from.tok.age_table);
    add(&mut into.tok.year_table, &from.tok.year_table);
    add(&mut into.tok.final_proj, &from.tok.final_proj);
    add(&mut into.tok.final_bias, &from.tok.final_bias);
    for (a, b) in into.blocks.iter_mut().zip(&from.blocks) {
        add(&mut a.ln1_g, &b.ln1_g);
        add(&mut a.ln1_b, &b.ln1_b);
        add(&mut a.wq, &b.wq);
        add(&mut a.bq, &b.bq);
        add(&mut a.wk, &b.wk);
        add(&mut a.bk, &b.bk);
        add(&mut a.wv, &b.wv);
        add(&mut a.bv, &b.bv);
        add(&mut a.wo, &b.wo);
        add(&mut a.bo, &b.bo);
        add(&mut a.ln2_g, &b.ln2_g);
        add(&mut a.ln2_b, &b.ln2_b);
        add(&mut a.w_ff1, &b.w_ff1);
        add(&mut a.b_ff1, &b.b_ff1);
        add(&mut a.w_ff2, &b.w_ff2);
        add(&mut a.b_ff2, &b.b_ff2);
    }
    add(&mut into.final_ln_g, &from.final_ln_g);
    add(&mut into.final_ln_b, &from.final_ln_b);
    add(&mut into.point_w, &from.point_w);
    add(&mut into.point_b, &from.point_b);
    add(&mut into.quant_w, &from.quant_w);
    add(&mut into.quant_b, &from.quant_b);
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LnCache {
    normed: Vec<f64>,
    rstd: Vec<f64>,
}

/// x: T x d, gain/bias: 1 x d. Returns gained output and cache.
fn layer_norm_forward(x: &[f64], t: usize, d: usize, gain: &Mat, bias: &Mat) -> (Vec<f64>, LnCache) {
    let mut out = vec![0.0; t * d];
    let mut normed = vec![0.0; t * d];
    let mut rstds = vec![0.0; t];
    for p in 0..t {
        let row = &x[p * d..(p + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstds[p] = rstd;
        for i in 0..d {
            let n = (row[i] - mean) * rstd;
            normed[p * d + i] = n;
            out[p * d + i] = gain.data[i] * n + bias.data[i];
        }
    }
    (out, LnCache { normed, rstd: rstds })
}

/// Backward through layer norm: accumulates input grads into `dx`, and
/// gain/bias grads into `dgain`/`dbias`. `dout` is the gradient of the
/// gained output.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dout: &[f64],
    cache: &LnCache,
    t: usize,
    d: usize,
    gain: &Mat,
    dgain: &mut Mat,
    dbias: &mut Mat,
    dx: &mut [f64],
) {
    for p in 0..t {
        let n = &cache.normed[p * d..(p + 1) * d];
        let dout_row = &dout[p * d..(p + 1) * d];
        let mut dn = vec![0.0; d];
        for i in 0..d {
            dgain.data[i] += dout_row[i] * n[i];
            dbias.data[i] += dout_row[i];
            dn[i] = dout_row[i] * gain.data[i];
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rstd = cache.rstd[p];
        for i in 0..d {
            dx[p * d + i] += rstd * (dn[i] - mean_dn - n[i] * mean_dn_n);
        }
    }
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1: LnCache,
    normed1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: LnCache,
    normed2: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    /// Per-element residual-branch multipliers (dropout x stochastic
    /// depth); all ones at inference.
    drop_attn: Vec<f64>,
    drop_ff: Vec<f64>,
}

struct ForwardCache {
    t: usize,
    std_vals: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
    cat_rows: Vec<Vec<usize>>,
    age_rows: Vec<usize>,
    year_rows: Vec<usize>,
    concats: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    y: Vec<f64>,
}

/// Raw per-position outputs: point and unrearranged quantiles.
pub struct RawOutputs {
    pub points: Vec<f64>,
    pub quants: Vec<[f64; 7]>,
}

fn forward_cached(
    params: &ModelParams,
    records: &[AnnualRecord],
    dropout_stream: Option<&mut Stream>,
) -> Result<(RawOutputs, ForwardCache)> {
    let cfg = &params.config;
    let t = records.len();
    if t == 0 {
        return Err(Error::Parameter("empty token sequence".into()));
    }
    if t > cfg.max_context {
        return Err(Error::Decode(format!(
            "sequence length {t} exceeds max_context {}",
            cfg.max_context
        )));
    }
    let d = cfg.model_dim;
    let h = cfg.heads;
    let dh = d / h;
    let ff = cfg.ff_dim;
    let tok = &params.tokenizer;

    // Tokenization with cached intermediates.
    let mut std_vals = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    let mut cat_rows = Vec::with_capacity(t);
    let mut age_rows = Vec::with_capacity(t);
    let mut year_rows = Vec::with_capacity(t);
    let mut concats = Vec::with_capacity(t);
    let mut x = vec![0.0; t * d];
    for (p, rec) in records.iter().enumerate() {
        let (sv, mask) = tok.standardize(rec)?;
        let rows: Vec<usize> =
            (0..tok.cat_tables.len()).map(|f| tok.cat_row(rec, f)).collect::<Result<_>>()?;
        let age_row = tok.age_row(rec.age)?;
        let year_row = tok.year_row(rec.year)?;
        let mut concat = Vec::with_capacity(tok.config.concat_dim());
        concat.extend(tok.cont_proj.matvec(&sv));
        for (f, &row) in rows.iter().enumerate() {
            concat.extend_from_slice(tok.cat_tables[f].row(row));
        }
        concat.extend(tok.missing_proj.matvec(&mask));
        concat.extend_from_slice(tok.age_table.row(age_row));
        concat.extend_from_slice(tok.year_table.row(year_row));
        let token = tok.final_proj.matvec(&concat);
        for i in 0..d {
            x[p * d + i] = token[i] + tok.final_bias.data[i];
        }
        std_vals.push(sv);
        masks.push(mask);
        cat_rows.push(rows);
        age_rows.push(age_row);
        year_rows.push(year_row);
        concats.push(concat);
    }

    let mut drop_stream = dropout_stream;
    let mut layers = Vec::with_capacity(cfg.layers);
    for block in &params.blocks {
        let x_in = x.clone();
        let (normed1, ln1) = layer_norm_forward(&x_in, t, d, &block.ln1_g, &block.ln1_b);
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        for p in 0..t {
            let row = &normed1[p * d..(p + 1) * d];
            let qp = block.wq.matvec(row);
            let kp = block.wk.matvec(row);
            let vp = block.wv.matvec(row);
            for i in 0..d {
                q[p * d + i] = qp[i] + block.bq.data[i];
                k[p * d + i] = kp[i] + block.bk.data[i];
                v[p * d + i] = vp[i] + block.bv.data[i];
            }
        }
        // Causal attention per head.
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; h * t * t];
        let mut attn = vec![0.0; t * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..t {
                let qi = &q[i * d + off..i * d + off + dh];
                let mut logits = vec![0.0; i + 1];
                let mut max_logit = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += qi[c] * kj[c];
                    }
                    logits[j] = dot * scale;
                    max_logit = max_logit.max(logits[j]);
                }
                let mut denom = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max_logit).exp();
                    denom += *l;
                }
                for j in 0..=i {
                    let p_ij = logits[j] / denom;
                    probs[(head * t + i) * t + j] = p_ij;
                    let vj = &v[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        attn[i * d + off + c] += p_ij * vj[c];
                    }
                }
            }
        }
        // Residual-branch multipliers.
        let mk_drop = |stream: &mut Option<&mut Stream>, n: usize| -> Vec<f64> {
            match stream {
                Some(s) if cfg.dropout > 0.0 || cfg.stochastic_depth > 0.0 => {
                    let branch = if cfg.stochastic_depth > 0.0 {
                        if s.next_f64() < cfg.stochastic_depth {
                            0.0
                        } else {
                            1.0 / (1.0 - cfg.stochastic_depth)
                        }
                    } else {
                        1.0
                    };
                    (0..n)
                        .map(|_| {
                            if cfg.dropout > 0.0 {
                                if s.next_f64() < cfg.dropout {
                                    0.0
                                } else {
                                    branch / (1.0 - cfg.dropout)
                                }
                            } else {
                                branch
                            }
                        })
                        .collect()
                }
                _ => vec![1.0; n],
            }
        };
        let drop_attn = mk_drop(&mut drop_stream, t * d);
        let mut x_mid = vec![0.0; t * d];
        for p in 0..t {
            let op = block.wo.matvec(&attn[p * d..(p + 1) * d]);
            for i in 0..d {
                x_mid[p * d + i] =
                    x_in[p * d + i] + drop_attn[p * d + i] * (op[i] + block.bo.data[i]);
            }
        }
        let (normed2, ln2) = layer_norm_forward(&x_mid, t, d, &block.ln2_g, &block.ln2_b);
        let mut h_pre = vec![0.0; t * ff];
        let mut h_act = vec![0.0; t * ff];
        for p in 0..t {
            let hp = block.w_ff1.matvec(&normed2[p * d..(p + 1) * d]);
            for i in 0..ff {
                let pre = hp[i] + block.b_ff1.data[i];
                h_pre[p * ff + i] = pre;
                h_act[p * ff + i] = gelu(pre);
            }
        }
        let drop_ff = mk_drop(&mut drop_stream, t * d);
        let mut x_out = vec![0.0; t * d];
        for p in 0..t {
            let out = block.w_ff2.matvec(&h_act[p * ff..(p + 1) * ff]);
            for i in 0..d {
                x_out[p * d + i] =
                    x_mid[p * d + i] + drop_ff[p * d + i] * (out[i] + block.b_ff2.data[i]);
            }
        }
        layers.push(LayerCache {
            x_in,
            ln1,
            normed1,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            ln2,
            normed2,
            h_pre,
            h_act,
            drop_attn,
            drop_ff,
        });
        x = x_out;
    }

    let (y, final_ln) = layer_norm_forward(&x, t, d, &params.final_ln_g, &params.final_ln_b);
    let mut points = Vec::with_capacity(t);
    let mut quants = Vec::with_capacity(t);
    for p in 0..t {
        let row = &y[p * d..(p + 1) * d];
        let mut pt = params.point_b.data[0];
        for i in 0..d {
            pt += params.point_w.data[i] * row[i];
        }
        points.push(pt);
        let mut qv = [0.0; 7];
        for (kq, qvk) in qv.iter_mut().enumerate() {
            let mut acc = params.quant_b.data[kq];
            let wrow = params.quant_w.row(kq);
            for i in 0..d {
                acc += wrow[i] * row[i];
            }
            *qvk = acc;
        }
        quants.push(qv);
    }

    Ok((
        RawOutputs { points, quants },
        ForwardCache {
            t,
            std_vals,
            masks,
            cat_rows,
            age_rows,
            year_rows,
            concats,
            layers,
            final_ln,
            y,
        },
    ))
}

/// Inference forward pass: per-position point forecast and rearranged
/// quantiles. Position `p`'s outputs depend only on tokens `0..=p` and
/// forecast the following year.
pub fn forward(
    params: &ModelParams,
    records: &[AnnualRecord],
) -> Result<Vec<(f64, QuantileForecast)>> {
    let (raw, _) = forward_cached(params, records, None)?;
    Ok(raw
        .points
        .iter()
        .zip(&raw.quants)
        .map(|(&point, q)| {
            (point, QuantileForecast { point, quantiles: rearrange_quantiles(q) })
        })
        .collect())
}

/// Backward pass from per-position output gradients; accumulates into
/// `grads`.
fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dpoints: &[f64],
    dquants: &[[f64; 7]],
    grads: &mut ModelGrads,
) {
    let cfg = &params.config;
    let t = cache.t;
    let d = cfg.model_dim;
    let h = cfg.heads;
    let dh = d / h;
    let ff = cfg.ff_dim;

    // Heads.
    let mut dy = vec![0.0; t * d];
    for p in 0..t {
        let yrow = &cache.y[p * d..(p + 1) * d];
        let dp = dpoints[p];
        if dp != 0.0 {
            grads.point_b.data[0] += dp;
            for i in 0..d {
                grads.point_w.data[i] += dp * yrow[i];
                dy[p * d + i] += dp * params.point_w.data[i];
            }
        }
        for kq in 0..7 {
            let dq = dquants[p][kq];
            if dq == 0.0 {
                continue;
            }
            grads.quant_b.data[kq] += dq;
            let wrow = params.quant_w.row(kq);
            for i in 0..d {
                grads.quant_w.data[kq * d + i] += dq * yrow[i];
                dy[p * d + i] += dq * wrow[i];
            }
        }
    }

    // Final layer norm.
    let mut dx = vec![0.0; t * d];
    layer_norm_backward(
        &dy,
        &cache.final_ln,
        t,
        d,
        &params.final_ln_g,
        &mut grads.final_ln_g,
        &mut grads.final_ln_b,
        &mut dx,
    );

    // Blocks in reverse.
    for (block, (bg, lc)) in params
        .blocks
        .iter()
        .zip(grads.blocks.iter_mut().zip(&cache.layers))
        .rev()
    {
        // Feed-forward branch.
        let mut dnormed2 = vec![0.0; t * d];
        let mut dx_mid = dx.clone(); // residual skip
        for p in 0..t {
            let mut dh2 = vec![0.0; d];
            for i in 0..d {
                dh2[i] = dx[p * d + i] * lc.drop_ff[p * d + i];
                bg.b_ff2.data[i] += dh2[i];
            }
            let act = &lc.h_act[p * ff..(p + 1) * ff];
            let mut dact = vec![0.0; ff];
            for i in 0..d {
                let g = dh2[i];
                if g == 0.0 {
                    continue;
                }
                let wrow = block.w_ff2.row(i);
                for j in 0..ff {
                    bg.w_ff2.data[i * ff + j] += g * act[j];
                    dact[j] += g * wrow[j];
                }
            }
            let normed2 = &lc.normed2[p * d..(p + 1) * d];
            for j in 0..ff {
                let dpre = dact[j] * gelu_grad(lc.h_pre[p * ff + j]);
                bg.b_ff1.data[j] += dpre;
                if dpre == 0.0 {
                    continue;
                }
                let wrow = block.w_ff1.row(j);
                for i in 0..d {
                    bg.w_ff1.data[j * d + i] += dpre * normed2[i];
                    dnormed2[p * d + i] += dpre * wrow[i];
                }
            }
        }
        layer_norm_backward(
            &dnormed2,
            &lc.ln2,
            t,
            d,
            &block.ln2_g,
            &mut bg.ln2_g,
            &mut bg.ln2_b,
            &mut dx_mid,
        );

        // Attention branch.
        let mut dnormed1 = vec![0.0; t * d];
        let mut dx_in = dx_mid.clone(); // residual skip
        let mut dattn = vec![0.0; t * d];
        for p in 0..t {
            let mut do_vec = vec![0.0; d];
            for i in 0..d {
                do_vec[i] = dx_mid[p * d + i] * lc.drop_attn[p * d + i];
                bg.bo.data[i] += do_vec[i];
            }
            let attn_row = &lc.attn[p * d..(p + 1) * d];
            for i in 0..d {
                let g = do_vec[i];
                if g == 0.0 {
                    continue;
                }
                let wrow = block.wo.row(i);
                for j in 0..d {
                    bg.wo.data[i * d + j] += g * attn_row[j];
                    dattn[p * d + j] += g * wrow[j];
                }
            }
        }
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let scale = 1.0 / (dh as f64).sqrt();
        for head in 0..h {
            let off = head * dh;
            for i in 0..t {
                let da = &dattn[i * d + off..i * d + off + dh];
                // dprobs over j <= i, then softmax backward.
                let mut dprobs = vec![0.0; i + 1];
                for j in 0..=i {
                    let vj = &lc.v[j * d + off..j * d + off + dh];
                    let p_ij = lc.probs[(head * t + i) * t + j];
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += da[c] * vj[c];
                        dv[j * d + off + c] += p_ij * da[c];
                    }
                    dprobs[j] = dot;
                }
                let mut inner = 0.0;
                for j in 0..=i {
                    inner += lc.probs[(head * t + i) * t + j] * dprobs[j];
                }
                for j in 0..=i {
                    let p_ij = lc.probs[(head * t + i) * t + j];
                    let dlogit = p_ij * (dprobs[j] - inner);
                    if dlogit == 0.0 {
                        continue;
                    }
                    let kj = &lc.k[j * d + off..j * d + off + dh];
                    let qi = &lc.q[i * d + off..i * d + off + dh];
                    for c in 0..dh {
                        dq[i * d + off + c] += dlogit * kj[c] * scale;
                        dk[j * d + off + c] += dlogit * qi[c] * scale;
                    }
                }
            }
        }
        // Project q/k/v grads back to weights and normed1.
        for p in 0..t {
            let normed1 = &lc.normed1[p * d..(p + 1) * d];
            for i in 0..d {
                let (gq, gk, gv) = (dq[p * d + i], dk[p * d + i], dv[p * d + i]);
                bg.bq.data[i] += gq;
                bg.bk.data[i] += gk;
                bg.bv.data[i] += gv;
                if gq != 0.0 {
                    let wrow = block.wq.row(i);
                    for j in 0..d {
                        bg.wq.data[i * d + j] += gq * normed1[j];
                        dnormed1[p * d + j] += gq * wrow[j];
                    }
                }
                if gk != 0.0 {
                    let wrow = block.wk.row(i);
                    for j in 0..d {
                        bg.wk.data[i * d + j] += gk * normed1[j];
                        dnormed1[p * d + j] += gk * wrow[j];
                    }
                }
                if gv != 0.0 {
                    let wrow = block.wv.row(i);
                    for j in 0..d {
                        bg.wv.data[i * d + j] += gv * normed1[j];
                        dnormed1[p * d + j] += gv * wrow[j];
                    }
                }
            }
        }
        layer_norm_backward(
            &dnormed1,
            &lc.ln1,
            t,
            d,
            &block.ln1_g,
            &mut bg.ln1_g,
            &mut bg.ln1_b,
            &mut dx_in,
        );
        dx = dx_in;
    }

    // Tokenizer backward: dx is the token gradient.
    let tok = &params.tokenizer;
    let concat_dim = tok.config.concat_dim();
    for p in 0..t {
        let dtok = &dx[p * d..(p + 1) * d];
        let concat = &cache.concats[p];
        for i in 0..d {
            let g = dtok[i];
            grads.tok.final_bias.data[i] += g;
            if g == 0.0 {
                continue;
            }
            let grow = grads.tok.final_proj.row_mut(i);
            for j in 0..concat_dim {
                grow[j] += g * concat[j];
            }
        }
        let mut dconcat = vec![0.0; concat_dim];
        tok.final_proj.matvec_transpose_acc(dtok, &mut dconcat);
        let mut offset = 0usize;
        // Continuous projection.
        let cd = tok.config.continuous_dim;
        let sv = &cache.std_vals[p];
        for r in 0..cd {
            let g = dconcat[offset + r];
            if g != 0.0 {
                let grow = grads.tok.cont_proj.row_mut(r);
                for (gslot, s) in grow.iter_mut().zip(sv) {
                    *gslot += g * s;
                }
            }
        }
        offset += cd;
        // Categorical embeddings.
        for (f, &row) in cache.cat_rows[p].iter().enumerate() {
            let dim = tok.config.categorical_dims[f];
            let grow = grads.tok.cat_tables[f].row_mut(row);
            for c in 0..dim {
                grow[c] += dconcat[offset + c];
            }
            offset += dim;
        }
        // Missingness projection.
        let md = tok.config.missing_dim;
        let mask = &cache.masks[p];
        for r in 0..md {
            let g = dconcat[offset + r];
            if g != 0.0 {
                let grow = grads.tok.missing_proj.row_mut(r);
                for (gslot, m) in grow.iter_mut().zip(mask) {
                    *gslot += g * m;
                }
            }
        }
        offset += md;
        // Age and year embeddings.
        let ad = tok.config.age_dim;
        let arow = grads.tok.age_table.row_mut(cache.age_rows[p]);
        for c in 0..ad {
            arow[c] += dconcat[offset + c];
        }
        offset += ad;
        let yd = tok.config.year_dim;
        let yrow = grads.tok.year_table.row_mut(cache.year_rows[p]);
        for c in 0..yd {
            yrow[c] += dconcat[offset + c];
        }
        offset += yd;
        debug_assert_eq!(offset, concat_dim);
    }
}

/// Forecast target positions of a sequence: output position `p` is paired
/// with record `p + 1` when that record is exactly one year ahead and its
/// index is at or beyond the conditioning length.
fn target_positions(records: &[AnnualRecord], conditioning_len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for p in 0..records.len().saturating_sub(1) {
        if p + 1 >= conditioning_len && records[p + 1].year == records[p].year + 1 {
            out.push(p);
        }
    }
    out
}

/// Mean joint loss over a sequence's forecast positions, plus output
/// gradients. Returns `None` when the sequence has no forecast positions.
fn seq_loss(
    raw: &RawOutputs,
    records: &[AnnualRecord],
    conditioning_len: usize,
) -> Option<(f64, Vec<f64>, Vec<[f64; 7]>)> {
    let positions = target_positions(records, conditioning_len);
    if positions.is_empty() {
        return None;
    }
    let scale = 1.0 / positions.len() as f64;
    let t = records.len();
    let mut loss = 0.0;
    let mut dpoints = vec![0.0; t];
    let mut dquants = vec![[0.0; 7]; t];
    for &p in &positions {
        let target = log_value(records[p + 1].earnings);
        let point = raw.points[p];
        loss += 0.5 * (target - point) * (target - point) * scale;
        dpoints[p] = (point - target) * scale;
        for k in 0..7 {
            let q = raw.quants[p][k];
            let u = target - q;
            let alpha = QUANTILE_LEVELS[k];
            loss += pinball_loss(u, alpha) * scale;
            // d/dq pinball(target - q, alpha) = -(alpha - 1[u<0]).
            dquants[p][k] = if u < 0.0 { -(alpha - 1.0) * scale } else { -alpha * scale };
        }
    }
    Some((loss, dpoints, dquants))
}

/// Training settings for [`train_toy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Validation cadence in steps; early stopping patience in checks.
    pub val_every: usize,
    pub patience: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 3e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 100,
            total_steps: 2_000,
            batch_size: 32,
            val_every: 200,
            patience: 5,
        }
    }
}

fn schedule(settings: &TrainSettings, step: usize) -> f64 {
    let lr = settings.learning_rate;
    if settings.warmup_steps > 0 && step < settings.warmup_steps {
        return lr * (step + 1) as f64 / settings.warmup_steps as f64;
    }
    let total = settings.total_steps.max(settings.warmup_steps + 1);
    let progress =
        (step - settings.warmup_steps) as f64 / (total - settings.warmup_steps) as f64;
    0.5 * lr * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

fn decayable(name: &str) -> bool {
    !(name.contains("ln") || name.ends_with('b') || name.contains("bias"))
}

/// Mean pinball loss (7 levels summed) over the forecast positions of a
/// sequence set; the early-stopping criterion.
pub fn validation_pinball(params: &ModelParams, sequences: &[&IndividualHistory]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for hist in sequences {
        let records = clipped(hist, params.config.max_context);
        let (raw, _) = forward_cached(params, records, None)?;
        for p in target_positions(records, hist.conditioning_len) {
            let target = log_value(records[p + 1].earnings);
            let mut loss = 0.0;
            for k in 0..7 {
                loss += pinball_loss(target - raw.quants[p][k], QUANTILE_LEVELS[k]);
            }
            total += loss;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Training("no validation forecast positions".into()));
    }
    Ok(total / count as f64)
}

fn clipped(hist: &IndividualHistory, max_context: usize) -> &[AnnualRecord] {
    let n = hist.records.len().min(max_context);
    &hist.records[..n]
}

/// Per-step training telemetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub val_losses: Vec<(usize, f64)>,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// Teacher-forced AdamW training of the toy transformer.
///
/// Minimizes the mean joint loss over forecast positions. Validation
/// pinball loss is checked every `val_every` steps with early stopping;
/// the best-validation parameters are returned.
pub fn train_toy(
    train_panel: &[IndividualHistory],
    val_panel: &[IndividualHistory],
    tokenizer: TokenizerState,
    config: ToyTransformerConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(ModelParams, TrainReport)> {
    let mut params = ModelParams::init(config, tokenizer)?;
    let usable: Vec<&IndividualHistory> = train_panel
        .iter()
        .filter(|hist| {
            !target_positions(clipped(hist, params.config.max_context), hist.conditioning_len)
                .is_empty()
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Training("no trainable sequences".into()));
    }
    let val: Vec<&IndividualHistory> = val_panel
        .iter()
        .filter(|hist| {
            !target_positions(clipped(hist, params.config.max_context), hist.conditioning_len)
                .is_empty()
        })
        .collect();

    let mut m = params.zero_grads();
    let mut v = params.zero_grads();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut bad_checks = 0usize;
    let mut report = TrainReport {
        step_losses: Vec::new(),
        val_losses: Vec::new(),
        best_val: f64::INFINITY,
        stopped_early: false,
    };

    let mut stopped = false;
    for step in 0..settings.total_steps {
        let mut batch_stream = Stream::new(seed, &[tag::TRAIN_BATCH, step as u64]);
        let batch: Vec<usize> =
            (0..settings.batch_size).map(|_| batch_stream.next_index(usable.len())).collect();

        let results: Vec<Result<(f64, ModelGrads)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let hist = usable[idx];
                let records = clipped(hist, params.config.max_context);
                let mut dropout_stream =
                    Stream::new(seed, &[tag::DROPOUT, step as u64, slot as u64]);
                let use_dropout =
                    params.config.dropout > 0.0 || params.config.stochastic_depth > 0.0;
                let (raw, cache) = forward_cached(
                    &params,
                    records,
                    if use_dropout { Some(&mut dropout_stream) } else { None },
                )?;
                let (loss, dpoints, dquants) = seq_loss(&raw, records, hist.conditioning_len)
                    .expect("usable sequences have forecast positions");
                let mut grads = params.zero_grads();
                backward(&params, &cache, &dpoints, &dquants, &mut grads);
                Ok((loss, grads))
            })
            .collect();

        let mut grads = params.zero_grads();
        let mut batch_loss = 0.0;
        let weight = 1.0 / settings.batch_size as f64;
        for r in results {
            let (loss, g) = r?;
            batch_loss += loss * weight;
            accumulate(&mut grads, &g, weight);
        }
        if !batch_loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite batch loss at step {step}: {batch_loss}"
            )));
        }
        report.step_losses.push(batch_loss);

        let lr = schedule(settings, step);
        let t_adam = (step + 1) as f64;
        let bc1 = 1.0 - settings.beta1.powf(t_adam);
        let bc2 = 1.0 - settings.beta2.powf(t_adam);
        let (b1, b2, wd) = (settings.beta1, settings.beta2, settings.weight_decay);
        zip_tensors(&mut params, &mut grads, &mut m, &mut v, |name, p, g, m, v| {
            let decay = if decayable(name) { wd } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * (m_hat / (v_hat.sqrt() + 1e-8) + decay * p.data[i]);
            }
        });

        if !val.is_empty() && (step + 1) % settings.val_every == 0 {
            let val_loss = validation_pinball(&params, &val)?;
            report.val_losses.push((step + 1, val_loss));
            let improved = best.as_ref().map_or(true, |(b, _)| val_loss < *b);
            if improved {
                best = Some((val_loss, params.clone()));
                bad_checks = 0;
            } else {
                bad_checks += 1;
                if bad_checks >= settings.patience {
                    stopped = true;
                    break;
                }
            }
        }
    }

    report.stopped_early = stopped;
    if let Some((val_loss, best_params)) = best {
        report.best_val = val_loss;
        Ok((best_params, report))
    } else {
        Ok((params, report))
    }
}

/// Relative-error report of analytic versus central-finite-difference
/// gradients, per named tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

/// Batch loss used by training and by the gradient check: mean over
/// sequences of the per-sequence mean joint loss.
fn batch_loss(params: &ModelParams, sequences: &[&IndividualHistory]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for hist in sequences {
        let records = clipped(hist, params.config.max_context);
        let (raw, _) = forward_cached(params, records, None)?;
        if let Some((loss, _, _)) = seq_loss(&raw, records, hist.conditioning_len) {
            total += loss;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Training("no forecast positions in gradient check".into()));
    }
    Ok(total / n as f64)
}

/// Elementwise central finite-difference check of every parameter tensor.
/// Requires dropout and stochastic depth disabled.
pub fn gradient_check(
    params: &ModelParams,
    sequences: &[&IndividualHistory],
    eps: f64,
) -> Result<GradCheckReport> {
    if params.config.dropout != 0.0 || params.config.stochastic_depth != 0.0 {
        return Err(Error::Parameter(
            "gradient check requires dropout and stochastic depth disabled".into(),
        ));
    }
    // Analytic gradients.
    let mut analytic = params.zero_grads();
    let mut n_seq = 0usize;
    for hist in sequences {
        let records = clipped(hist, params.config.max_context);
        let (raw, cache) = forward_cached(params, records, None)?;
        if let Some((_, dpoints, dquants)) = seq_loss(&raw, records, hist.conditioning_len) {
            backward(params, &cache, &dpoints, &dquants, &mut analytic);
            n_seq += 1;
        }
    }
    if n_seq == 0 {
        return Err(Error::Training("no forecast positions in gradient check".into()));
    }
    let scale = 1.0 / n_seq as f64;

    let mut work = params.clone();
    let mut g_ref = params.zero_grads();
    let mut m = params.zero_grads();
    let mut v = params.zero_grads();
    // Collect tensor names and shapes first.
    let mut names: Vec<(String, usize)> = Vec::new();
    zip_tensors(&mut work, &mut g_ref, &mut m, &mut v, |name, p, _, _, _| {
        names.push((name.to_string(), p.data.len()));
    });

    let mut per_tensor = Vec::with_capacity(names.len());
    let mut max_rel = 0.0f64;
    for (tensor_idx, (name, len)) in names.iter().enumerate() {
        let mut tensor_max = 0.0f64;
        for elem in 0..*len {
            // Perturb one element through the visitor.
            let mut val = 0.0;
            let mut visit_idx = 0usize;
            zip_tensors(&mut work, &mut g_ref, &mut m, &mut v, |_, p, _, _, _| {
                if visit_idx == tensor_idx {
                    val = p.data[elem];
                }
                visit_idx += 1;
            });
            let h = eps * val.abs().max(1.0);
            let set = |target: &mut ModelParams, x: f64, g: &mut ModelGrads, m: &mut ModelGrads, v: &mut ModelGrads| {
                let mut visit = 0usize;
                zip_tensors(target, g, m, v, |_, p, _, _, _| {
                    if visit == tensor_idx {
                        p.data[elem] = x;
                    }
                    visit += 1;
                });
            };
            set(&mut work, val + h, &mut g_ref, &mut m, &mut v);
            let up = batch_loss(&work, sequences)?;
            set(&mut work, val - h, &mut g_ref, &mut m, &mut v);
            let down = batch_loss(&work, sequences)?;
            set(&mut work, val, &mut g_ref, &mut m, &mut v);
            let numeric = (up - down) / (2.0 * h);

            // Analytic gradient entry for this element.
            let mut a = 0.0;
            let mut visit = 0usize;
            zip_tensors(&mut work, &mut analytic, &mut m, &mut v, |_, _, g, _, _| {
                if visit == tensor_idx {
                    a = g.data[elem] * scale;
                }
                visit += 1;
            });

            let diff = (a - numeric).abs();
            let rel = if diff < 1e-8 { 0.0 } else { diff / a.abs().max(numeric.abs()) };
            tensor_max = tensor_max.max(rel);
        }
        max_rel = max_rel.max(tensor_max);
        per_tensor.push((name.clone(), tensor_max));
    }
    Ok(GradCheckReport { per_tensor, max_rel_err: max_rel })
}

/// Autoregressive decoding: sample one future path of `horizon` years from
/// the conditioning window, imputing features step by step.
pub fn decode_autoregressive(
    params: &ModelParams,
    imputer: &FeatureImputer,
    history: &IndividualHistory,
    horizon: u32,
    seed: u64,
    path_id: u64,
) -> Result<Vec<AnnualRecord>> {
    if history.records.len() < history.conditioning_len {
        return Err(Error::Decode(format!(
            "history of individual {} has {} records, conditioning needs {}",
            history.id,
            history.records.len(),
            history.conditioning_len
        )));
    }
    let mut records: Vec<AnnualRecord> = history.conditioning_window().to_vec();
    let mut out = Vec::with_capacity(horizon as usize);
    for step in 1..=horizon as u64 {
        if records.len() > params.config.max_context {
            return Err(Error::Decode(format!(
                "decode context {} exceeds max_context {}",
                records.len(),
                params.config.max_context
            )));
        }
        let (raw, _) = forward_cached(params, &records, None)?;
        let last = records.len() - 1;
        let qf = QuantileForecast {
            point: raw.points[last],
            quantiles: rearrange_quantiles(&raw.quants[last]),
        };
        let mut draw_stream =
            Stream::new(seed, &[history.id, path_id, step, tag::DECODE]);
        let log_draw = sample_from_quantiles(&qf, draw_stream.next_open_f64())?;
        let prev = records.last().unwrap();
        let next = imputer.impute_next(
            prev,
            log_draw.exp(),
            log_draw - log_value(prev.earnings),
            seed,
            history.id,
            path_id,
        );
        out.push(next.clone());
        records.push(next);
    }
    Ok(out)
}

/// Mean attention weight per conditioning position when forecasting
/// `horizon` years past the conditioning window, averaged over layers,
/// heads, and individuals, renormalized over the window.
pub fn attention_average(
    params: &ModelParams,
    panel: &[IndividualHistory],
    horizon: u32,
) -> Result<Vec<f64>> {
    let mut total: Option<Vec<f64>> = None;
    let mut n_used = 0usize;
    for hist in panel {
        let t_c = hist.conditioning_len;
        let need = t_c + horizon as usize - 1;
        if hist.records.len() < need || need > params.config.max_context {
            continue;
        }
        let records = &hist.records[..need];
        let (_, cache) = forward_cached(params, records, None)?;
        let query = need - 1;
        let t = cache.t;
        let h = params.config.heads;
        let mut row = vec![0.0; t_c];
        for lc in &cache.layers {
            for head in 0..h {
                for j in 0..t_c {
                    row[j] += lc.probs[(head * t + query) * t + j];
                }
            }
        }
        let norm: f64 = row.iter().sum();
        if norm <= 0.0 {
            continue;
        }
        for r in row.iter_mut() {
            *r /= norm;
        }
        match &mut total {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&row) {
                    *a += b;
                }
            }
            None => total = Some(row),
        }
        n_used += 1;
    }
    let mut avg = total.ok_or_else(|| {
        Error::Parameter("no individual has enough records for attention averaging".into())
    })?;
    for a in avg.iter_mut() {
        *a /= n_used as f64;
    }
    Ok(avg)
}

/// The trained toy transformer exposed through the [`Forecaster`]
/// contract. Horizon quantiles are empirical quantiles over decoded
/// sample paths.
#[derive(Debug, Clone)]
pub struct ToyForecaster {
    pub model: ModelParams,
    pub imputer: FeatureImputer,
    /// Decoded paths per individual used to form horizon quantiles.
    pub n_quantile_samples: usize,
}

impl Forecaster for ToyForecaster {
    fn name(&self) -> &str {
        "toy_transformer"
    }

    fn horizon_quantiles(
        &self,
        history: &IndividualHistory,
        max_horizon: u32,
        seed: u64,
    ) -> Result<Vec<QuantileForecast>> {
        let n = self.n_quantile_samples;
        let mut per_h: Vec<Vec<f64>> = vec![Vec::with_capacity(n); max_horizon as usize];
        for path_id in 0..n as u64 {
            let path = decode_autoregressive(
                &self.model,
                &self.imputer,
                history,
                max_horizon,
                seed,
                path_id,
            )?;
            for (h, rec) in path.iter().enumerate() {
                per_h[h].push(log_value(rec.earnings));
            }
        }
        Ok(per_h
            .iter_mut()
            .map(|vals| {
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut quantiles = [0.0; 7];
                for (k, &level) in QUANTILE_LEVELS.iter().enumerate() {
                    quantiles[k] = math::quantile_type7(vals, level);
                }
                QuantileForecast { point: math::mean(vals), quantiles }
            })
            .collect())
    }

    fn sample_paths(
        &self,
        history: &IndividualHistory,
        horizon: u32,
        n_paths: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let base = tag::LIFETIME_PATH << 16;
        (0..n_paths as u64)
            .map(|p| {
                decode_autoregressive(&self.model, &self.imputer, history, horizon, seed, base | p)
                    .map(|recs| recs.iter().map(|r| r.earnings).collect())
            })
            .collect()
    }
}
