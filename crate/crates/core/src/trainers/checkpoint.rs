//! Binary checkpoint container.
//!
//! Layout: magic (8 bytes), version (u32), SHA-256 of the body (32 bytes),
//! body length (u64), body. The body holds model metadata, a shape table with
//! one entry per layer, the trace as JSON, and every parameter as a
//! little-endian f64.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainTrace;
use crate::fusion::{EbrAttachment, FusionKind, FusionModel};
use crate::neurocore::{Activation, DenseLayer, Matrix, Mlp};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLABCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 32 + 8;

pub fn checkpoint(model: &FusionModel, trace: &TrainTrace, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, trace)?)?;
    Ok(())
}

pub fn restore(path: &Path) -> Result<(FusionModel, TrainTrace)> {
    decode(&std::fs::read(path)?)
}

pub(crate) fn encode(model: &FusionModel, trace: &TrainTrace) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    body.push(match model.fusion_kind {
        FusionKind::Concat => 0u8,
        FusionKind::MeanPool => 1,
    });
    put_u32(&mut body, model.num_modalities() as u32);
    body.push(model.ebr.is_some() as u8);
    put_u32(&mut body, model.ebr.as_ref().map_or(0, |e| e.latent_dim) as u32);

    let mlps = model.mlps();
    put_u32(&mut body, mlps.len() as u32);
    for mlp in &mlps {
        put_u32(&mut body, mlp.layers().len() as u32);
        for l in mlp.layers() {
            put_u32(&mut body, l.out_dim() as u32);
            put_u32(&mut body, l.in_dim() as u32);
            body.push(l.activation.code());
        }
    }

    let json = serde_json::to_vec(trace)?;
    put_u64(&mut body, json.len() as u64);
    body.extend_from_slice(&json);

    let params: Vec<f64> = mlps.iter().flat_map(|m| m.parameters()).collect();
    put_u64(&mut body, params.len() as u64);
    for p in params {
        body.extend_from_slice(&p.to_le_bytes());
    }

    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&Sha256::digest(&body));
    put_u64(&mut out, body.len() as u64);
    out.extend_from_slice(&body);
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(FusionModel, TrainTrace)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Integrity("checkpoint shorter than its header".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let digest = &bytes[12..44];
    let len = u64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != len {
        return Err(Error::Integrity(format!(
            "checkpoint body is {} bytes, header says {len}",
            body.len()
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checkpoint checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, pos: 0 };
    let fusion_kind = match r.u8()? {
        0 => FusionKind::Concat,
        1 => FusionKind::MeanPool,
        k => return Err(Error::Integrity(format!("unknown fusion kind {k}"))),
    };
    let m = r.u32()? as usize;
    let has_ebr = r.u8()? != 0;
    let latent_dim = r.u32()? as usize;

    let n_mlps = r.u32()? as usize;
    let expected = m + 2 + if has_ebr { 2 * m + 1 } else { 0 };
    if n_mlps != expected || m == 0 {
        return Err(Error::Integrity(format!(
            "shape table has {n_mlps} networks, expected {expected}"
        )));
    }
    let mut shapes = Vec::with_capacity(n_mlps);
    for _ in 0..n_mlps {
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            let act = Activation::from_code(r.u8()?)
                .ok_or_else(|| Error::Integrity("unknown activation code".into()))?;
            layers.push((out, inp, act));
        }
        shapes.push(layers);
    }

    let json_len = r.u64()? as usize;
    let trace: TrainTrace = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::Integrity(format!("trace payload: {e}")))?;

    let n_params = r.u64()? as usize;
    let declared: usize = shapes
        .iter()
        .flatten()
        .map(|(o, i, _)| o * i + o)
        .sum();
    if n_params != declared {
        return Err(Error::Integrity(format!(
            "payload has {n_params} parameters, shape table needs {declared}"
        )));
    }
    let mut mlps = Vec::with_capacity(n_mlps);
    for layers in &shapes {
        let mut dense = Vec::with_capacity(layers.len());
        for &(out, inp, act) in layers {
            let w = (0..out * inp).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let b = (0..out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            dense.push(DenseLayer::new(Matrix::new(out, inp, w)?, b, act)?);
        }
        mlps.push(Mlp::new(dense).map_err(|e| Error::Integrity(e.to_string()))?);
    }
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after payload".into()));
    }

    let mut it = mlps.into_iter();
    let encoders: Vec<Mlp> = it.by_ref().take(m).collect();
    let fusion = it.next().expect("counted");
    let classifier = it.next().expect("counted");
    let ebr = if has_ebr {
        let heads: Vec<Mlp> = it.by_ref().take(m).collect();
        let decoders: Vec<Mlp> = it.by_ref().take(m).collect();
        let discriminator = it.next().expect("counted");
        Some(EbrAttachment {
            heads,
            decoders,
            discriminator,
            latent_dim,
        })
    } else {
        None
    };
    Ok((
        FusionModel {
            encoders,
            fusion,
            classifier,
            fusion_kind,
            ebr,
        },
        trace,
    ))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("checkpoint body truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Architecture;
    use crate::neurocore::RandomStream;

    fn model() -> FusionModel {
        let arch = Architecture::default();
        let s = RandomStream::new(9);
        let mut m = FusionModel::new(&arch, &[5, 6], 3, &s).unwrap();
        m.attach_ebr(&arch, &s).unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let trace = TrainTrace {
            kd_alignment: vec![0.1, 0.30000000000000004],
            ..TrainTrace::default()
        };
        let (m2, t2) = decode(&encode(&m, &trace).unwrap()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(trace, t2);
    }

    #[test]
    fn truncation_is_integrity_error() {
        let bytes = encode(&model(), &TrainTrace::default()).unwrap();
        for cut in [4, HEADER_LEN - 1, HEADER_LEN + 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
    }

    #[test]
    fn flipped_byte_is_integrity_error() {
        let mut bytes = encode(&model(), &TrainTrace::default()).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&model(), &TrainTrace::default()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::Version {
                found: 7,
                expected: CHECKPOINT_VERSION
            })
        ));
    }
}
