//! Sectioned little-endian checkpoint container.
//!
//! Layout: magic `SOLARCKP`, `u32` version, `u32` section count, then per section
//! `u32` name length + UTF-8 name, `u32` header length + UTF-8 header text,
//! `u64` value count and that many `f64` values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::costmodel::{CostParam, QuadraticCost};
use crate::ctrl::LinearGaussianPolicy;
use crate::error::{Result, SolarError};
use crate::lingauss::MniwParams;
use crate::localdyn::{DynStep, TvlgDynamics};

const MAGIC: &[u8; 8] = b"SOLARCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            SolarError::Parse(format!("file truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| SolarError::Parse(e.to_string()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub header: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, header: impl Into<String>, values: Vec<f64>) {
        self.sections.push(Section { name: name.into(), header: header.into(), values });
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| SolarError::Parse(format!("checkpoint has no section {name:?}")))
    }

    /// Sections whose name starts with `prefix`, in file order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with_version(CHECKPOINT_VERSION)
    }

    #[doc(hidden)]
    pub fn to_bytes_with_version(&self, version: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            for text in [&s.name, &s.header] {
                out.extend_from_slice(&(text.len() as u32).to_le_bytes());
                out.extend_from_slice(text.as_bytes());
            }
            out.extend_from_slice(&(s.values.len() as u64).to_le_bytes());
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.take(8)? != MAGIC {
            return Err(SolarError::Parse("not a checkpoint file".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(SolarError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let count = cur.u32()?;
        let mut ck = Self::default();
        for _ in 0..count {
            let name = cur.string()?;
            let header = cur.string()?;
            let n = cur.u64()? as usize;
            if n > bytes.len() / 8 {
                return Err(SolarError::Parse(format!("section {name:?} claims {n} values")));
            }
            let values = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            ck.sections.push(Section { name, header, values });
        }
        if !cur.at_end() {
            return Err(SolarError::Parse("trailing bytes after last section".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}


/// Parses a `key=value,key=value` section header.
pub fn parse_header(header: &str) -> Result<BTreeMap<String, String>> {
    header
        .split(',')
        .filter(|kv| !kv.is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| SolarError::Parse(format!("malformed header entry {kv:?}")))
        })
        .collect()
}

fn header_usize(map: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| SolarError::Parse(format!("header lacks {key}")))?
        .parse()
        .map_err(|e| SolarError::Parse(format!("header field {key}: {e}")))
}

struct Reader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(values: &'a [f64]) -> Self {
        Self { values, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        let out = self
            .values
            .get(self.pos..self.pos + n)
            .ok_or_else(|| SolarError::Parse("section shorter than its header implies".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn matrix(&mut self, r: usize, c: usize) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_column_slice(r, c, self.take(r * c)?))
    }

    fn vector(&mut self, n: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_column_slice(self.take(n)?))
    }

    fn scalar(&mut self) -> Result<f64> {
        Ok(self.take(1)?[0])
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.values.len() {
            return Err(SolarError::Parse("section longer than its header implies".into()));
        }
        Ok(())
    }
}

fn mniw_values(p: &MniwParams, out: &mut Vec<f64>) {
    out.extend(p.psi().iter());
    out.push(p.nu());
    out.extend(p.m0().iter());
    out.extend(p.v().iter());
}

fn read_mniw(r: &mut Reader<'_>, d: usize, n: usize) -> Result<MniwParams> {
    let psi = r.matrix(d, d)?;
    let nu = r.scalar()?;
    let m0 = r.matrix(d, n)?;
    let v = r.matrix(n, n)?;
    MniwParams::new(psi, nu, m0, v)
}

pub fn put_mniw(ck: &mut Checkpoint, name: &str, p: &MniwParams) {
    let mut values = Vec::new();
    mniw_values(p, &mut values);
    ck.push(name, format!("d={},n={}", p.out_dim(), p.in_dim()), values);
}

pub fn get_mniw(ck: &Checkpoint, name: &str) -> Result<MniwParams> {
    let sec = ck.get(name)?;
    let h = parse_header(&sec.header)?;
    let mut r = Reader::new(&sec.values);
    let p = read_mniw(&mut r, header_usize(&h, "d")?, header_usize(&h, "n")?)?;
    r.finish()?;
    Ok(p)
}

pub fn put_cost(ck: &mut Checkpoint, name: &str, cost: &QuadraticCost) {
    let param = match cost.param() {
        CostParam::Full => "full",
        CostParam::PsdCholesky => "psd_cholesky",
    };
    let mut values = cost.to_flat();
    values.push(cost.alpha);
    ck.push(name, format!("param={param},d={}", cost.state_dim()), values);
}

pub fn get_cost(ck: &Checkpoint, name: &str) -> Result<QuadraticCost> {
    let sec = ck.get(name)?;
    let h = parse_header(&sec.header)?;
    let d = header_usize(&h, "d")?;
    let (&alpha, flat) = sec
        .values
        .split_last()
        .ok_or_else(|| SolarError::Parse(format!("section {name:?} is empty")))?;
    let mut cost = match h.get("param").map(String::as_str) {
        Some("full") => QuadraticCost::zeros(d, alpha),
        Some("psd_cholesky") => QuadraticCost::from_factor(DMatrix::zeros(d, d), DVector::zeros(d), alpha, 0.0)?,
        other => return Err(SolarError::Parse(format!("unknown cost parameterisation {other:?}"))),
    };
    cost.set_flat(flat)?;
    Ok(cost)
}

pub fn put_policy(ck: &mut Checkpoint, name: &str, policy: &LinearGaussianPolicy) {
    let mut values = Vec::new();
    for t in 0..policy.horizon() {
        values.extend(policy.gains[t].iter());
        values.extend(policy.offsets[t].iter());
        values.extend(policy.covs[t].iter());
    }
    let header = format!("t={},ds={},da={}", policy.horizon(), policy.state_dim(), policy.action_dim());
    ck.push(name, header, values);
}

pub fn get_policy(ck: &Checkpoint, name: &str) -> Result<LinearGaussianPolicy> {
    let sec = ck.get(name)?;
    let h = parse_header(&sec.header)?;
    let (t_len, ds, da) = (header_usize(&h, "t")?, header_usize(&h, "ds")?, header_usize(&h, "da")?);
    let mut r = Reader::new(&sec.values);
    let (mut gains, mut offsets, mut covs) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..t_len {
        gains.push(r.matrix(da, ds)?);
        offsets.push(r.vector(da)?);
        covs.push(r.matrix(da, da)?);
    }
    r.finish()?;
    LinearGaussianPolicy::new(gains, offsets, covs)
}

/// Per step: `F`, `Σ`, a presence flag and, when present, the MNIW posterior.
pub fn put_dynamics(ck: &mut Checkpoint, name: &str, dynamics: &TvlgDynamics) {
    let mut values = Vec::new();
    for step in &dynamics.steps {
        values.extend(step.f.iter());
        values.extend(step.sigma.iter());
        match &step.posterior {
            Some(p) => {
                values.push(1.0);
                mniw_values(p, &mut values);
            }
            None => values.push(0.0),
        }
    }
    let header = format!("steps={},ds={},da={}", dynamics.len(), dynamics.state_dim(), dynamics.action_dim());
    ck.push(name, header, values);
}

pub fn get_dynamics(ck: &Checkpoint, name: &str) -> Result<TvlgDynamics> {
    let sec = ck.get(name)?;
    let h = parse_header(&sec.header)?;
    let (steps, ds, da) = (header_usize(&h, "steps")?, header_usize(&h, "ds")?, header_usize(&h, "da")?);
    let mut r = Reader::new(&sec.values);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let f = r.matrix(ds, ds + da)?;
        let sigma = r.matrix(ds, ds)?;
        let posterior = if r.scalar()? != 0.0 { Some(read_mniw(&mut r, ds, ds + da)?) } else { None };
        out.push(DynStep { f, sigma, posterior });
    }
    r.finish()?;
    TvlgDynamics::new(out, ds, da)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("a", "rows=2", vec![1.0, -0.5, f64::MIN_POSITIVE]);
        ck.push("b", "", vec![]);
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = sample().to_bytes();
        for cut in [3, 12, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(SolarError::Parse(_))));
        }
    }

    #[test]
    fn newer_version_names_both_versions() {
        let err = Checkpoint::from_bytes(&sample().to_bytes_with_version(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
        assert!(matches!(err, SolarError::VersionMismatch { found: 2, expected: 1 }));
    }
}
