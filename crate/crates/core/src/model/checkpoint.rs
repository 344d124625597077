//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header describing
//! every tensor (name, shape, dtype, byte offset into the payload), then the
//! payload of little-endian `f32` values. Attention weights are split into
//! per-head `w_q`, `w_k`, `w_v` (`d_model × d_head`) and `w_o`
//! (`d_head × d_model`) so the file reads naturally head by head.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParameters};
use crate::error::{LabError, Result};
use crate::io::write_atomic;

pub const FORMAT: &str = "induction-lab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte range within the payload.
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Free-form provenance (training step, seed, config hash, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// How one named tensor maps onto the flat buffer: `rows` strided slices of
/// `cols` contiguous values starting at `start`, `stride` apart.
struct Piece {
    name: String,
    shape: Vec<usize>,
    start: usize,
    rows: usize,
    cols: usize,
    stride: usize,
}

fn whole(name: String, r: &Range<usize>, shape: Vec<usize>) -> Piece {
    debug_assert_eq!(shape.iter().product::<usize>(), r.len());
    Piece {
        name,
        start: r.start,
        rows: 1,
        cols: r.len(),
        stride: r.len(),
        shape,
    }
}

fn pieces(c: &ModelConfig, params_layout: &super::Layout) -> Vec<Piece> {
    let (d, dh, v) = (c.d_model, c.d_head(), c.vocab_size);
    let mut out = vec![
        whole("embed.token".into(), &params_layout.tok_emb, vec![v, d]),
        whole("embed.pos".into(), &params_layout.pos_emb, vec![c.max_seq_len, d]),
    ];
    for (l, ll) in params_layout.layers.iter().enumerate() {
        out.push(whole(format!("blocks.{l}.ln1.scale"), &ll.ln_scale, vec![d]));
        out.push(whole(format!("blocks.{l}.ln1.bias"), &ll.ln_bias, vec![d]));
        for h in 0..c.n_heads {
            for (k, which) in ["w_q", "w_k", "w_v"].iter().enumerate() {
                out.push(Piece {
                    name: format!("blocks.{l}.attn.{h}.{which}"),
                    shape: vec![d, dh],
                    start: ll.w_qkv.start + k * d + h * dh,
                    rows: d,
                    cols: dh,
                    stride: 3 * d,
                });
            }
            out.push(Piece {
                name: format!("blocks.{l}.attn.{h}.w_o"),
                shape: vec![dh, d],
                start: ll.w_o.start + h * dh * d,
                rows: dh,
                cols: d,
                stride: d,
            });
        }
        if let Some(m) = &ll.mlp {
            out.push(whole(format!("blocks.{l}.ln2.scale"), &m.ln_scale, vec![d]));
            out.push(whole(format!("blocks.{l}.ln2.bias"), &m.ln_bias, vec![d]));
            out.push(whole(format!("blocks.{l}.mlp.w_in"), &m.w_in, vec![d, c.d_mlp]));
            out.push(whole(format!("blocks.{l}.mlp.b_in"), &m.b_in, vec![c.d_mlp]));
            out.push(whole(format!("blocks.{l}.mlp.w_out"), &m.w_out, vec![c.d_mlp, d]));
            out.push(whole(format!("blocks.{l}.mlp.b_out"), &m.b_out, vec![d]));
        }
    }
    out.push(whole("ln_f.scale".into(), &params_layout.lnf_scale, vec![d]));
    out.push(whole("ln_f.bias".into(), &params_layout.lnf_bias, vec![d]));
    out.push(whole("unembed".into(), &params_layout.unembed, vec![d, v]));
    out
}

/// Serialize to the checkpoint byte format.
pub fn encode_checkpoint(params: &ModelParameters<f32>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let ps = pieces(&params.config, &params.layout);
    let mut tensors = Vec::with_capacity(ps.len());
    let mut payload = Vec::with_capacity(params.data.len() * 4);
    for p in &ps {
        let offset = payload.len();
        for r in 0..p.rows {
            let s = p.start + r * p.stride;
            for x in &params.data[s..s + p.cols] {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            dtype: "f32".into(),
            offset,
            nbytes: payload.len() - offset,
        });
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config.clone(),
        meta: meta.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let bad = |m: String| LabError::Checkpoint(m);
    if bytes.len() < 8 {
        return Err(bad("file shorter than its length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let rest = &bytes[8..];
    if hlen > rest.len() {
        return Err(bad(format!("header length {hlen} exceeds file size")));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| bad(format!("malformed header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown format `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(bad(format!(
            "unsupported version {} (expected {VERSION})",
            header.version
        )));
    }
    Ok((header, &rest[hlen..]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParameters<f32>, serde_json::Value)> {
    let bad = |m: String| LabError::Checkpoint(m);
    let (header, payload) = split_header(bytes)?;
    let mut params = ModelParameters::<f32>::zeros(header.config.clone())
        .map_err(|e| bad(format!("header config invalid: {e}")))?;
    let ps = pieces(&params.config, &params.layout);
    if ps.len() != header.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors for this config, header lists {}",
            ps.len(),
            header.tensors.len()
        )));
    }
    let mut expected_offset = 0;
    for (p, t) in ps.iter().zip(&header.tensors) {
        if t.name != p.name || t.shape != p.shape {
            return Err(bad(format!(
                "tensor mismatch: header has {} {:?}, config expects {} {:?}",
                t.name, t.shape, p.name, p.shape
            )));
        }
        if t.dtype != "f32" {
            return Err(bad(format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
        }
        let nbytes = p.rows * p.cols * 4;
        if t.offset != expected_offset || t.nbytes != nbytes {
            return Err(bad(format!("tensor {} has inconsistent byte range", t.name)));
        }
        if t.offset + nbytes > payload.len() {
            return Err(bad(format!(
                "payload truncated: tensor {} needs bytes up to {}, payload has {}",
                t.name,
                t.offset + nbytes,
                payload.len()
            )));
        }
        let mut src = payload[t.offset..t.offset + nbytes].chunks_exact(4);
        for r in 0..p.rows {
            let s = p.start + r * p.stride;
            for x in &mut params.data[s..s + p.cols] {
                *x = f32::from_le_bytes(src.next().unwrap().try_into().unwrap());
            }
        }
        expected_offset += nbytes;
    }
    if expected_offset != payload.len() {
        return Err(bad(format!(
            "payload has {} trailing bytes",
            payload.len() - expected_offset
        )));
    }
    if !params.all_finite() {
        return Err(bad("checkpoint contains non-finite weights".into()));
    }
    Ok((params, header.meta))
}

pub fn save_checkpoint(params: &ModelParameters<f32>, path: &Path) -> Result<()> {
    save_checkpoint_with_meta(params, &serde_json::Value::Null, path)
}

pub fn save_checkpoint_with_meta(
    params: &ModelParameters<f32>,
    meta: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters<f32>> {
    load_checkpoint_with_meta(path).map(|(p, _)| p)
}

pub fn load_checkpoint_with_meta(path: &Path) -> Result<(ModelParameters<f32>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        LabError::Checkpoint(m) => LabError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Header only, without touching the payload.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    split_header(&bytes).map(|(h, _)| h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::rng::rng_from_seed;

    fn attn_only(l: usize, h: usize) -> ModelConfig {
        ModelConfig {
            n_layers: l,
            n_heads: h,
            d_model: 4 * h,
            d_mlp: 0,
            vocab_size: 11,
            max_seq_len: 9,
            layernorm_eps: 1e-5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let config = ModelConfig {
            d_mlp: 12,
            ..attn_only(2, 3)
        };
        let p = init_model(&config, &mut rng_from_seed(5)).unwrap();
        let meta = serde_json::json!({"step": 7});
        let a = encode_checkpoint(&p, &meta).unwrap();
        let (q, m) = decode_checkpoint(&a).unwrap();
        assert_eq!(p.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), q.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(m, meta);
        assert_eq!(a, encode_checkpoint(&q, &m).unwrap());
    }

    #[test]
    fn per_head_slices_land_in_place() {
        let config = attn_only(1, 2);
        let mut p = ModelParameters::<f32>::zeros(config.clone()).unwrap();
        for (i, x) in p.data.iter_mut().enumerate() {
            *x = i as f32;
        }
        let (q, _) = decode_checkpoint(&encode_checkpoint(&p, &serde_json::Value::Null).unwrap()).unwrap();
        assert_eq!(p.data, q.data);
        let bytes = encode_checkpoint(&p, &serde_json::Value::Null).unwrap();
        let (header, payload) = split_header(&bytes).unwrap();
        // head 1's W_K column block starts at column d + d_head of w_qkv
        let t = header.tensors.iter().find(|t| t.name == "blocks.0.attn.1.w_k").unwrap();
        let first = f32::from_le_bytes(payload[t.offset..t.offset + 4].try_into().unwrap());
        let d = config.d_model;
        assert_eq!(first, (p.layout.layers[0].w_qkv.start + d + config.d_head()) as f32);
    }

    #[test]
    fn attention_only_tensor_count() {
        for (l, h) in [(1, 1), (2, 4), (3, 2)] {
            let p = ModelParameters::<f32>::zeros(attn_only(l, h)).unwrap();
            let (header, _) = split_header(&encode_checkpoint(&p, &serde_json::Value::Null).unwrap()).unwrap();
            // token/pos embeddings, final norm scale/bias, unembedding: 5;
            // per layer two norm tensors; per head Q, K, V, O
            assert_eq!(header.tensors.len(), l * h * 4 + 2 * l + 5);
        }
    }

    #[test]
    fn truncated_and_mismatched_files_are_rejected() {
        let p = init_model(&attn_only(1, 2), &mut rng_from_seed(1)).unwrap();
        let bytes = encode_checkpoint(&p, &serde_json::Value::Null).unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 400, 20, 3] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(LabError::Checkpoint(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());

        let (mut header, payload) = split_header(&bytes).unwrap();
        let reencode = |h: &CheckpointHeader| {
            let hb = serde_json::to_vec(h).unwrap();
            let mut out = (hb.len() as u64).to_le_bytes().to_vec();
            out.extend_from_slice(&hb);
            out.extend_from_slice(payload);
            out
        };
        header.version = 99;
        assert!(decode_checkpoint(&reencode(&header)).is_err());
        header.version = VERSION;
        header.tensors[3].shape = vec![1, 1];
        assert!(decode_checkpoint(&reencode(&header)).is_err());
        header.tensors[3].shape = vec![p.config.d_model];
        assert!(decode_checkpoint(&reencode(&header)).is_ok());
        header.config.n_heads = 1;
        assert!(decode_checkpoint(&reencode(&header)).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_model(&attn_only(2, 2), &mut rng_from_seed(2)).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        save_checkpoint(&q, &path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        assert_eq!(read_checkpoint_header(&path).unwrap().config, p.config);
    }
}
