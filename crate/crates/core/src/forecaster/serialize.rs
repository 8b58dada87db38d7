//! Versioned binary container for model weights: magic bytes `SAGA`, a
//! little-endian `u32` version, then length-prefixed named tensors of
//! little-endian 64-bit floats. A JSON manifest mirrors the tensor shapes
//! and carries the non-tensor state needed to rebuild the model.

use crate::error::{Error, Result};
use crate::forecaster::transformer::{BlockParams, ModelParams, ToyTransformerConfig};
use crate::tensor::Mat;
use crate::tokenizer::{FeatureStats, TokenizerConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const MAGIC: &[u8; 4] = b"SAGA";
pub const VERSION: u32 = 1;

/// Ordered (name, tensor) view of the model weights.
fn named_tensors(p: &ModelParams) -> Vec<(String, &Mat)> {
    let mut out: Vec<(String, &Mat)> = Vec::new();
    let tok = &p.tokenizer;
    out.push(("tok.cont_proj".into(), &tok.cont_proj));
    for (i, t) in tok.cat_tables.iter().enumerate() {
        out.push((format!("tok.cat{i}"), t));
    }
    out.push(("tok.missing_proj".into(), &tok.missing_proj));
    out.push(("tok.age_table".into(), &tok.age_table));
    out.push(("tok.year_table".into(), &tok.year_table));
    out.push(("tok.final_proj".into(), &tok.final_proj));
    out.push(("tok.final_bias".into(), &tok.final_bias));
    for (l, b) in p.blocks.iter().enumerate() {
        for (suffix, m) in [
            ("ln1_g", &b.ln1_g),
            ("ln1_b", &b.ln1_b),
            ("wq", &b.wq),
            ("bq", &b.bq),
            ("wk", &b.wk),
            ("bk", &b.bk),
            ("wv", &b.wv),
            ("bv", &b.bv),
            ("wo", &b.wo),
            ("bo", &b.bo),
            ("ln2_g", &b.ln2_g),
            ("ln2_b", &b.ln2_b),
            ("w_ff1", &b.w_ff1),
            ("b_ff1", &b.b_ff1),
            ("w_ff2", &b.w_ff2),
            ("b_ff2", &b.b_ff2),
        ] {
            out.push((format!("blk{l}.{suffix}"), m));
        }
    }
    out.push(("final_ln_g".into(), &p.final_ln_g));
    out.push(("final_ln_b".into(), &p.final_ln_b));
    out.push(("point_w".into(), &p.point_w));
    out.push(("point_b".into(), &p.point_b));
    out.push(("quant_w".into(), &p.quant_w));
    out.push(("quant_b".into(), &p.quant_b));
    out
}

/// Encode all weights into the binary container.
pub fn encode_weights(params: &ModelParams) -> Vec<u8> {
    let tensors = named_tensors(params);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, mat) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(mat.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(mat.cols as u64).to_le_bytes());
        for v in &mat.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Decode the binary container into named tensors.
pub fn decode_weights(bytes: &[u8]) -> Result<BTreeMap<String, Mat>> {
    let bad = |what: &str| Error::Serialize(format!("weight container: {what}"));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(bad("truncated"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| bad("tensor name not UTF-8"))?;
        let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| bad("shape overflow"))?;
        let raw = take(&mut pos, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, Mat { rows, cols, data });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON manifest mirroring the container's shapes plus the non-tensor
/// state (architecture config, tokenizer config/statistics).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub transformer: ToyTransformerConfig,
    pub tokenizer_config: TokenizerConfig,
    pub stats: FeatureStats,
    pub cardinalities: Vec<u32>,
    pub tensors: Vec<TensorShape>,
}

pub fn manifest(params: &ModelParams) -> ModelManifest {
    ModelManifest {
        format: "saga-tensors".into(),
        version: VERSION,
        transformer: params.config.clone(),
        tokenizer_config: params.tokenizer.config.clone(),
        stats: params.tokenizer.stats.clone(),
        cardinalities: params.tokenizer.cardinalities.clone(),
        tensors: named_tensors(params)
            .iter()
            .map(|(name, m)| TensorShape { name: name.clone(), rows: m.rows, cols: m.cols })
            .collect(),
    }
}

/// Rebuild a model from its manifest and weight container.
pub fn rebuild(manifest: &ModelManifest, bytes: &[u8]) -> Result<ModelParams> {
    let mut tensors = decode_weights(bytes)?;
    let mut grab = |name: &str| -> Result<Mat> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Serialize(format!("missing tensor '{name}'")))
    };
    let n_cat = manifest.cardinalities.len();
    let tokenizer = crate::tokenizer::TokenizerState {
        config: manifest.tokenizer_config.clone(),
        stats: manifest.stats.clone(),
        cardinalities: manifest.cardinalities.clone(),
        cont_proj: grab("tok.cont_proj")?,
        cat_tables: (0..n_cat)
            .map(|i| grab(&format!("tok.cat{i}")))
            .collect::<Result<_>>()?,
        missing_proj: grab("tok.missing_proj")?,
        age_table: grab("tok.age_table")?,
        year_table: grab("tok.year_table")?,
        final_proj: grab("tok.final_proj")?,
        final_bias: grab("tok.final_bias")?,
    };
    let blocks = (0..manifest.transformer.layers)
        .map(|l| -> Result<BlockParams> {
            Ok(BlockParams {
                ln1_g: grab(&format!("blk{l}.ln1_g"))?,
                ln1_b: grab(&format!("blk{l}.ln1_b"))?,
                wq: grab(&format!("blk{l}.wq"))?,
                bq: grab(&format!("blk{l}.bq"))?,
                wk: grab(&format!("blk{l}.wk"))?,
                bk: grab(&format!("blk{l}.bk"))?,
                wv: grab(&format!("blk{l}.wv"))?,
                bv: grab(&format!("blk{l}.bv"))?,
                wo: grab(&format!("blk{l}.wo"))?,
                bo: grab(&format!("blk{l}.bo"))?,
                ln2_g: grab(&format!("blk{l}.ln2_g"))?,
                ln2_b: grab(&format!("blk{l}.ln2_b"))?,
                w_ff1: grab(&format!("blk{l}.w_ff1"))?,
                b_ff1: grab(&format!("blk{l}.b_ff1"))?,
                w_ff2: grab(&format!("blk{l}.w_ff2"))?,
                b_ff2: grab(&format!("blk{l}.b_ff2"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ModelParams {
        config: manifest.transformer.clone(),
        tokenizer,
        blocks,
        final_ln_g: grab("final_ln_g")?,
        final_ln_b: grab("final_ln_b")?,
        point_w: grab("point_w")?,
        point_b: grab("point_b")?,
        quant_w: grab("quant_w")?,
        quant_b: grab("quant_b")?,
    })
}

/// Write `model.bin` and `model.json` into a directory.
pub fn save_model(params: &ModelParams, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("model.bin"), encode_weights(params))?;
    let m = manifest(params);
    let json =
        serde_json::to_string_pretty(&m).map_err(|e| Error::Serialize(e.to_string()))?;
    std::fs::write(dir.join("model.json"), json)?;
    Ok(())
}

/// Load a model saved by [`save_model`].
pub fn load_model(dir: &std::path::Path) -> Result<ModelParams> {
    let bytes = std::fs::read(dir.join("model.bin"))?;
    let json = std::fs::read_to_string(dir.join("model.json"))?;
    let m: ModelManifest =
        serde_json::from_str(&json).map_err(|e| Error::Serialize(e.to_string()))?;
    rebuild(&m, &bytes)
}
