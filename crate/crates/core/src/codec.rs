//! Little-endian binary encodings for everything that crosses the simulated
//! wire or lands on disk: statistics, parameter sets, deltas, frames and
//! checkpoints.

use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::params::ModelParams;
use crate::stats::EncodingStats;
use crate::tensor::Tensor;

pub const STATS_VERSION: u8 = 1;
pub const PARAMS_MAGIC: &[u8; 4] = b"DCPM";
pub const PARAMS_VERSION: u8 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Cursor over a byte slice that reports offsets in its errors.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::parse(format!("{} byte {}", self.what, self.pos), msg)
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("needs {n} more bytes, {} left", self.buf.len() - self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| self.fail("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != magic {
            self.pos -= 4;
            return Err(self.fail(format!("bad magic {got:?}")));
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u8) -> Result<()> {
        let v = self.u8()?;
        if v != expected {
            self.pos -= 1;
            return Err(self.fail(format!("unsupported version {v}, expected {expected}")));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Version byte, `d` (u32), count (u64), then `mean_f`, `mean_f2`, `mean_g`,
/// `mean_g2` (d values each) and `cross` (d*d values, row-major).
pub fn encode_stats(stats: &EncodingStats) -> Vec<u8> {
    let d = stats.dim();
    let mut out = Vec::with_capacity(13 + 8 * (4 * d + d * d));
    out.push(STATS_VERSION);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&stats.count.to_le_bytes());
    for field in [&stats.mean_f, &stats.mean_f2, &stats.mean_g, &stats.mean_g2, &stats.cross] {
        put_f64s(&mut out, field);
    }
    out
}

pub fn decode_stats(bytes: &[u8]) -> Result<EncodingStats> {
    let mut r = Reader::new(bytes, "stats");
    r.version(STATS_VERSION)?;
    let d = r.u32()? as usize;
    let count = r.u64()?;
    let stats = EncodingStats {
        mean_f: r.f64s(d)?,
        mean_f2: r.f64s(d)?,
        mean_g: r.f64s(d)?,
        mean_g2: r.f64s(d)?,
        cross: r.f64s(d * d)?,
        count,
    };
    r.finish()?;
    stats.validate()?;
    Ok(stats)
}

fn put_params(out: &mut Vec<u8>, params: &ModelParams) {
    out.extend_from_slice(PARAMS_MAGIC);
    out.push(PARAMS_VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &s in t.shape() {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        put_f64s(out, t.data());
    }
}

fn read_params(r: &mut Reader) -> Result<ModelParams> {
    r.magic(PARAMS_MAGIC)?;
    r.version(PARAMS_VERSION)?;
    let n = r.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.bytes(len)?)
            .map_err(|_| r.fail("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &s| a.checked_mul(s))
            .filter(|&n| n <= r.remaining() / 8)
            .ok_or_else(|| r.fail(format!("shape {shape:?} of {name} exceeds the buffer")))?;
        params.insert(name, Tensor::new(shape, r.f64s(numel)?)?);
    }
    Ok(params)
}

/// Magic `DCPM`, version byte, record count (u32), then per record: name
/// length (u32), UTF-8 name, rank (u8), dims (u64 each), f64 payload.
pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * 8 + params.len() * 48);
    put_params(&mut out, params);
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes, "params");
    let p = read_params(&mut r)?;
    r.finish()?;
    Ok(p)
}

/// Weight (u64) followed by a parameter container.
pub fn encode_delta(params: &ModelParams, weight: u64) -> Vec<u8> {
    let mut out = weight.to_le_bytes().to_vec();
    put_params(&mut out, params);
    out
}

pub fn decode_delta(bytes: &[u8]) -> Result<(ModelParams, u64)> {
    let mut r = Reader::new(bytes, "delta");
    let w = r.u64()?;
    let p = read_params(&mut r)?;
    r.finish()?;
    Ok((p, w))
}

/// Server state needed to resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Rounds completed so far.
    pub round: u64,
    pub model: ModelParams,
    pub optimizer_kind: OptimizerKind,
    pub optimizer_step: u64,
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
}

impl Checkpoint {
    pub fn new(round: u64, model: &ModelParams, optimizer: &OptimizerState) -> Self {
        Checkpoint {
            round,
            model: model.clone(),
            optimizer_kind: optimizer.config.kind,
            optimizer_step: optimizer.step,
            first_moment: optimizer.first.clone(),
            second_moment: optimizer.second.clone(),
        }
    }

    /// Restores optimizer state onto a freshly configured optimizer.
    pub fn restore_optimizer(&self, optimizer: &mut OptimizerState) -> Result<()> {
        if optimizer.config.kind != self.optimizer_kind {
            return Err(Error::InvalidConfig(format!(
                "checkpoint optimizer {:?} does not match configured {:?}",
                self.optimizer_kind, optimizer.config.kind
            )));
        }
        optimizer.step = self.optimizer_step;
        optimizer.first = self.first_moment.clone();
        optimizer.second = self.second_moment.clone();
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.push(self.optimizer_kind.code());
        out.extend_from_slice(&self.optimizer_step.to_le_bytes());
        put_params(&mut out, &self.model);
        put_params(&mut out, &self.first_moment);
        put_params(&mut out, &self.second_moment);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let round = r.u64()?;
        let code = r.u8()?;
        let optimizer_kind = OptimizerKind::from_code(code).ok_or_else(|| r.fail(format!("unknown optimizer code {code}")))?;
        let optimizer_step = r.u64()?;
        let ck = Checkpoint {
            round,
            optimizer_kind,
            optimizer_step,
            model: read_params(&mut r)?,
            first_moment: read_params(&mut r)?,
            second_moment: read_params(&mut r)?,
        };
        r.finish()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stats() -> EncodingStats {
        EncodingStats {
            mean_f: vec![0.1, -2.0],
            mean_f2: vec![1.0, 4.5],
            mean_g: vec![f64::MIN_POSITIVE, 3.0],
            mean_g2: vec![2.0, 9.5],
            cross: vec![0.25, -0.5, 1e-300, 7.0],
            count: 17,
        }
    }

    #[test]
    fn stats_round_trip_is_exact() {
        let s = sample_stats();
        let bytes = encode_stats(&s);
        assert_eq!(bytes.len(), 1 + 4 + 8 + 8 * (4 * 2 + 4));
        assert_eq!(decode_stats(&bytes).unwrap(), s);
    }

    #[test]
    fn truncated_and_trailing_bytes_fail() {
        let bytes = encode_stats(&sample_stats());
        assert!(decode_stats(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_stats(&longer).is_err());
        let mut bad = bytes;
        bad[0] = 9;
        let msg = decode_stats(&bad).unwrap_err().to_string();
        assert!(msg.contains("byte 0"), "{msg}");
    }

    #[test]
    fn params_round_trip() {
        let mut p = ModelParams::new();
        p.insert("a.weight", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.5, 1e-17]).unwrap());
        p.insert("a.bias", Tensor::vector(vec![0.0, -0.0, 9.0]));
        let bytes = encode_params(&p);
        assert_eq!(decode_params(&bytes).unwrap(), p);
        let (q, w) = decode_delta(&encode_delta(&p, 42)).unwrap();
        assert_eq!((q, w), (p, 42));
    }

    #[test]
    fn oversized_shape_is_rejected_without_allocating() {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::vector(vec![1.0]));
        let mut bytes = encode_params(&p);
        // rank byte sits after magic(4) version(1) count(4) len(4) name(1)
        let dim_at = 4 + 1 + 4 + 4 + 1 + 1;
        bytes[dim_at..dim_at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_params(&bytes).is_err());
    }
}
