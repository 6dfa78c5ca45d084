//! Flat binary parameter files: `u64` LE header length, JSON header, LE f64 data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Group, ParamSet};

const FORMAT: &str = "inflow-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeaderEntry {
    pub name: String,
    pub group: Group,
    pub trainable: bool,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub params: Vec<HeaderEntry>,
}

pub fn to_bytes(params: &ParamSet) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(params.len());
    for (_, e) in params.iter() {
        entries.push(HeaderEntry {
            name: e.name.clone(),
            group: e.group,
            trainable: e.trainable,
            shape: e.value.shape().to_vec(),
            offset,
            len: e.value.numel(),
        });
        offset += e.value.numel() * 8;
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        params: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, e) in params.iter() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let short = || Error::Checkpoint("file is truncated".into());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(short)?.try_into().expect("8 bytes");
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| short())?;
    let header_bytes = bytes.get(8..8usize.checked_add(len).ok_or_else(short)?).ok_or_else(short)?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    Ok((header, &bytes[8 + len..]))
}

/// Overwrite every entry of `params` from `bytes`. Names, groups and shapes
/// must match exactly.
pub fn load_from_bytes(params: &mut ParamSet, bytes: &[u8]) -> Result<()> {
    let (header, data) = read_header(bytes)?;
    if header.params.len() != params.len() {
        let extra = header
            .params
            .iter()
            .find(|h| params.find(&h.name).is_none())
            .map(|h| format!("; unexpected parameter `{}`", h.name))
            .unwrap_or_default();
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}{extra}",
            header.params.len(),
            params.len()
        )));
    }
    let mut updates = Vec::with_capacity(params.len());
    for (id, e) in params.iter() {
        let h = header
            .params
            .iter()
            .find(|h| h.name == e.name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{}` missing from checkpoint", e.name)))?;
        if h.shape != e.value.shape() || h.group != e.group {
            return Err(Error::Checkpoint(format!(
                "parameter `{}`: checkpoint has {} {:?}, model expects {} {:?}",
                e.name,
                h.group.as_str(),
                h.shape,
                e.group.as_str(),
                e.value.shape()
            )));
        }
        let raw = data
            .get(h.offset..h.offset + h.len * 8)
            .ok_or_else(|| Error::Checkpoint(format!("data for `{}` is truncated", e.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = crate::autodiff::Tensor::new(h.shape.clone(), values)
            .map_err(|err| Error::Checkpoint(format!("parameter `{}`: {err}", e.name)))?;
        updates.push((id, t));
    }
    for (id, t) in updates {
        params.set(id, t)?;
    }
    Ok(())
}

pub fn save(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(params: &mut ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_from_bytes(params, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.add("theta.w", Group::Theta, Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, 1e-300, 7.0, -0.0]).unwrap());
        p.add("phi.g", Group::Phi, Tensor::vector(&[std::f64::consts::PI]).unwrap());
        p.add_buffer("phi.rm", Group::Phi, Tensor::zeros(vec![1]));
        p
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let p = sample();
        let bytes = to_bytes(&p).unwrap();
        let mut q = sample();
        for (id, _) in p.iter() {
            q.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 9.0);
        }
        load_from_bytes(&mut q, &bytes).unwrap();
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(to_bytes(&q).unwrap(), bytes);
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let bytes = to_bytes(&sample()).unwrap();
        let mut other = ParamSet::new();
        other.add("theta.w", Group::Theta, Tensor::zeros(vec![3, 2]));
        other.add("phi.g", Group::Phi, Tensor::zeros(vec![1]));
        other.add_buffer("phi.rm", Group::Phi, Tensor::zeros(vec![1]));
        let err = load_from_bytes(&mut other, &bytes).unwrap_err();
        assert!(err.to_string().contains("`theta.w`"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = to_bytes(&sample()).unwrap();
        assert!(load_from_bytes(&mut sample(), &bytes[..bytes.len() - 3]).is_err());
        assert!(load_from_bytes(&mut sample(), &bytes[..4]).is_err());
    }
}
