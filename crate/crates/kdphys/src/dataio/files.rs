//! On-disk formats: binary tensors, pulse-trace tables, and checkpoints.
//! Every format ends in a checksum so corruption is an error, never garbage.

use crate::diffcore::Tensor;
use crate::error::{Error, FormatError, Result};
use crate::signal::PpgSignal;
use serde::{Deserialize, Serialize};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 8] = b"KDTENSR1";
const CKPT_MAGIC: &[u8; 8] = b"KDCKPT01";
const DTYPE_F64: u8 = 1;
const FORMAT_VERSION: u8 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Content digest of a file, matching the checksum used inside the binary
/// formats, so run records can pin their inputs.
pub fn file_digest(path: &Path) -> Result<u64> {
    Ok(fnv1a64(&std::fs::read(path)?))
}

/// Little-endian cursor with truncation accounting.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated { needed: self.pos + n - self.buf.len() });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, count: usize) -> std::result::Result<Vec<f64>, FormatError> {
        let raw = self.take(count * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn check_magic(r: &mut Reader, magic: &'static [u8; 8], name: &'static str) -> std::result::Result<(), FormatError> {
    let got = r.take(8)?;
    if got != magic {
        return Err(FormatError::BadMagic { expected: name });
    }
    Ok(())
}

/// The payload length is known from the header, so length errors and
/// checksum errors stay distinct: a short file is `Truncated`, a long one is
/// `Malformed`, and only a right-sized file with flipped bits reaches
/// `ChecksumMismatch`.
fn check_length_and_checksum(buf: &[u8], expected: usize) -> std::result::Result<(), FormatError> {
    if buf.len() < expected {
        return Err(FormatError::Truncated { needed: expected - buf.len() });
    }
    if buf.len() > expected {
        return Err(FormatError::Malformed(format!(
            "{} trailing byte(s) after the payload",
            buf.len() - expected
        )));
    }
    let (body, tail) = buf.split_at(expected - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    Ok(())
}

fn finish(mut bytes: Vec<u8>) -> Vec<u8> {
    let sum = fnv1a64(&bytes);
    bytes.extend_from_slice(&sum.to_le_bytes());
    bytes
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 3 + tensor.shape.len() * 8 + tensor.numel() * 8 + 8);
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.push(FORMAT_VERSION);
    bytes.push(DTYPE_F64);
    bytes.push(tensor.shape.len() as u8);
    for &d in &tensor.shape {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &tensor.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, finish(bytes))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    check_magic(&mut r, TENSOR_MAGIC, "tensor")?;
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Malformed(format!("unsupported tensor version {version}")).into());
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F64 {
        return Err(FormatError::Malformed(format!("unsupported dtype code {dtype}")).into());
    }
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let numel: usize = shape.iter().product();
    check_length_and_checksum(&buf, r.pos + numel * 8 + 8)?;
    let data = r.f64_vec(numel)?;
    Tensor::new(data, shape)
}

/// Two-column table `time_seconds,value`, one header line.
pub fn write_ppg(path: &Path, signal: &PpgSignal) -> Result<()> {
    let mut out = String::from("time_seconds,value\n");
    for (i, v) in signal.samples().iter().enumerate() {
        out.push_str(&format!("{},{}\n", i as f64 / signal.fs(), v));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_ppg(path: &Path) -> Result<PpgSignal> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("time_seconds,value") => {}
        _ => return Err(FormatError::BadMagic { expected: "pulse-trace" }.into()),
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| FormatError::Malformed(format!("row {row}: expected two columns")))?;
        let t: f64 = t
            .trim()
            .parse()
            .map_err(|_| FormatError::Malformed(format!("row {row}: bad timestamp {t:?}")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| FormatError::Malformed(format!("row {row}: bad value {v:?}")))?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(FormatError::NonMonotoneTime(row).into());
            }
        }
        times.push(t);
        values.push(v);
    }
    if times.len() < 2 {
        return Err(FormatError::Malformed("a pulse trace needs at least 2 rows".into()).into());
    }
    let span = times[times.len() - 1] - times[0];
    let mut fs = (times.len() - 1) as f64 / span;
    // Written timestamps are i/fs, so recovering fs divides rounded values;
    // snap to the integer rate when the result is within float noise of one.
    if (fs - fs.round()).abs() < 1e-9 * fs {
        fs = fs.round();
    }
    let step = span / (times.len() - 1) as f64;
    for (i, pair) in times.windows(2).enumerate() {
        if ((pair[1] - pair[0]) - step).abs() > 1e-6 * step {
            return Err(FormatError::Malformed(format!(
                "uneven sampling between rows {i} and {}",
                i + 1
            ))
            .into());
        }
    }
    PpgSignal::new(values, fs)
}

/// Everything needed to rebuild a model, minus the weights themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Opaque architecture description owned by the model layer.
    pub architecture: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl CheckpointHeader {
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, blob: &[f64]) -> Result<()> {
    if blob.len() != header.total_len() {
        return Err(Error::Dimension(format!(
            "weight blob holds {} values, the manifest declares {}",
            blob.len(),
            header.total_len()
        )));
    }
    let json = serde_json::to_vec(header)
        .map_err(|e| FormatError::Malformed(format!("header serialization: {e}")))?;
    let mut bytes = Vec::with_capacity(8 + 8 + json.len() + blob.len() * 8 + 8);
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for &v in blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, finish(bytes))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    check_magic(&mut r, CKPT_MAGIC, "checkpoint")?;
    let json_len = r.u64()? as usize;
    let json = r.take(json_len)?;
    let header: CheckpointHeader = serde_json::from_slice(json)
        .map_err(|e| FormatError::Malformed(format!("header: {e}")))?;
    check_length_and_checksum(&buf, r.pos + header.total_len() * 8 + 8)?;
    let blob = r.f64_vec(header.total_len())?;
    Ok((header, blob))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use tempfile::tempdir;

    #[test]
    fn tensor_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kdt");
        let t = Tensor::new(
            vec![0.1, -2.5, 1e-300, f64::MAX, 0.0, -0.0],
            vec![2, 3],
        )
        .unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape, t.shape);
        let bits = |xs: &[f64]| xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&t.data));
    }

    #[test]
    fn corruption_classes_are_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kdt");
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], vec![4]).unwrap();
        write_tensor(&path, &t).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] ^= 0xff;
            b
        };
        std::fs::write(&path, &bad_magic).unwrap();
        match read_tensor(&path) {
            Err(Error::Format(FormatError::BadMagic { expected: "tensor" })) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }

        let truncated = &good[..good.len() - 11];
        std::fs::write(&path, truncated).unwrap();
        match read_tensor(&path) {
            Err(Error::Format(FormatError::Truncated { needed: 11 })) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }

        let flipped_payload = {
            let mut b = good.clone();
            let mid = b.len() / 2;
            b[mid] ^= 0x01;
            b
        };
        std::fs::write(&path, &flipped_payload).unwrap();
        match read_tensor(&path) {
            Err(Error::Format(FormatError::ChecksumMismatch { .. })) => {}
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn ppg_round_trip_recovers_samples_and_rate() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let samples = vec![0.25, -1.5, 0.3333333333333333, 2e-7, 5.0];
        let sig = PpgSignal::new(samples.clone(), 30.0).unwrap();
        write_ppg(&path, &sig).unwrap();
        let back = read_ppg(&path).unwrap();
        let bits = |xs: &[f64]| xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.samples()), bits(&samples));
        assert_eq!(back.fs(), 30.0);
    }

    #[test]
    fn ppg_rejects_non_monotone_time() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "time_seconds,value\n0.0,1.0\n0.2,2.0\n0.1,3.0\n").unwrap();
        match read_ppg(&path) {
            Err(Error::Format(FormatError::NonMonotoneTime(2))) => {}
            other => panic!("expected non-monotone error, got {other:?}"),
        }
    }

    #[test]
    fn ppg_rejects_missing_header_and_uneven_sampling() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "0.0,1.0\n0.1,2.0\n").unwrap();
        assert!(matches!(
            read_ppg(&path),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        std::fs::write(&path, "time_seconds,value\n0.0,1.0\n0.1,2.0\n0.5,3.0\n").unwrap();
        assert!(matches!(
            read_ppg(&path),
            Err(Error::Format(FormatError::Malformed(_)))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.kdc");
        let header = CheckpointHeader {
            architecture: json!({"kind": "demo", "channels": [4, 8]}),
            seed: 42,
            epoch: 17,
            tensors: vec![
                TensorEntry { name: "w1".into(), shape: vec![2, 3] },
                TensorEntry { name: "b1".into(), shape: vec![3] },
            ],
        };
        let blob: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 2.0).collect();
        write_checkpoint(&path, &header, &blob).unwrap();
        let (h2, b2) = read_checkpoint(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(b2, blob);
    }

    #[test]
    fn checkpoint_blob_must_match_manifest() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.kdc");
        let header = CheckpointHeader {
            architecture: json!("x"),
            seed: 0,
            epoch: 0,
            tensors: vec![TensorEntry { name: "w".into(), shape: vec![4] }],
        };
        assert!(write_checkpoint(&path, &header, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn checkpoint_detects_tampered_weights() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.kdc");
        let header = CheckpointHeader {
            architecture: json!(null),
            seed: 1,
            epoch: 2,
            tensors: vec![TensorEntry { name: "w".into(), shape: vec![2] }],
        };
        write_checkpoint(&path, &header, &[1.0, -1.0]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 12] ^= 0x80;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Format(FormatError::ChecksumMismatch { .. }))
        ));
    }
}
