//! Reproducibility snapshots: models and eigensystems in packed little-endian
//! binary or JSON, and an eigensystem cache keyed by a SHA-256 of the model.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{CMat, SiteOperator, C64};
use crate::model::MagneticModel;
use crate::spectral::{diagonalize, EigenSystem};

const MODEL_MAGIC: &[u8; 8] = b"HKMODEL1";
const EIGEN_MAGIC: &[u8; 8] = b"HKEIGEN1";

/// Position data: site coordinates, or a dense Hermitian matrix in row-major re/im pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coordinates {
    Diagonal { values: Vec<f64> },
    Dense { packed: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub dim: usize,
    pub field_b: f64,
    pub lambda: f64,
    pub x1: Coordinates,
    pub x2: Coordinates,
    /// H in row-major order as interleaved (re, im).
    pub hamiltonian: Vec<f64>,
}

fn pack(m: &CMat) -> Vec<f64> {
    m.iter().flat_map(|z| [z.re, z.im]).collect()
}

fn unpack(dim: usize, data: &[f64]) -> Result<CMat> {
    if data.len() != 2 * dim * dim {
        return Err(Error::InvalidArgument(format!("packed matrix has {} values, expected {}", data.len(), 2 * dim * dim)));
    }
    Ok(Array2::from_shape_fn((dim, dim), |(i, j)| {
        let k = 2 * (i * dim + j);
        C64::new(data[k], data[k + 1])
    }))
}

fn coordinates(op: &SiteOperator) -> Coordinates {
    match op {
        SiteOperator::Diagonal(d) => Coordinates::Diagonal { values: d.to_vec() },
        SiteOperator::Dense { matrix, .. } => Coordinates::Dense { packed: pack(matrix) },
    }
}

impl ModelSnapshot {
    pub fn of(model: &MagneticModel) -> ModelSnapshot {
        ModelSnapshot {
            dim: model.dim(),
            field_b: model.field_b,
            lambda: model.lambda,
            x1: coordinates(&model.x1_op),
            x2: coordinates(&model.x2_op),
            hamiltonian: pack(&model.hamiltonian),
        }
    }

    pub fn hamiltonian(&self) -> Result<CMat> {
        unpack(self.dim, &self.hamiltonian)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.hamiltonian.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.field_b.to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        for c in [&self.x1, &self.x2] {
            let (tag, values) = match c {
                Coordinates::Diagonal { values } => (0u8, values),
                Coordinates::Dense { packed } => (1u8, packed),
            };
            out.push(tag);
            put_f64s(&mut out, values);
        }
        put_f64s(&mut out, &self.hamiltonian);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelSnapshot> {
        let mut r = Reader { bytes, at: 0 };
        r.magic(MODEL_MAGIC)?;
        let dim = r.u64()? as usize;
        let field_b = r.f64()?;
        let lambda = r.f64()?;
        let mut coords = Vec::with_capacity(2);
        for _ in 0..2 {
            let tag = r.u8()?;
            let values = r.f64s()?;
            coords.push(match tag {
                0 => Coordinates::Diagonal { values },
                1 => Coordinates::Dense { packed: values },
                t => return Err(Error::InvalidArgument(format!("unknown coordinate tag {t}"))),
            });
        }
        let hamiltonian = r.f64s()?;
        r.finish()?;
        let x2 = coords.pop().unwrap();
        let x1 = coords.pop().unwrap();
        Ok(ModelSnapshot { dim, field_b, lambda, x1, x2, hamiltonian })
    }

    /// Hex SHA-256 of the binary form.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

pub fn model_hash(model: &MagneticModel) -> String {
    ModelSnapshot::of(model).content_hash()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::InvalidArgument("truncated snapshot".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 8]) -> Result<()> {
        if self.take(8)? != m {
            return Err(Error::InvalidArgument("bad snapshot header".into()));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.at) / 8 {
            return Err(Error::InvalidArgument("truncated snapshot".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::InvalidArgument("trailing bytes in snapshot".into()));
        }
        Ok(())
    }
}

pub fn eigensystem_to_bytes(eig: &EigenSystem) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * eig.dim() * (2 * eig.dim() + 1));
    out.extend_from_slice(EIGEN_MAGIC);
    out.extend_from_slice(&(eig.dim() as u64).to_le_bytes());
    out.extend_from_slice(&eig.residual.to_le_bytes());
    put_f64s(&mut out, eig.energies.as_slice().unwrap_or(&eig.energies.to_vec()));
    put_f64s(&mut out, &pack(&eig.vectors));
    out
}

pub fn eigensystem_from_bytes(bytes: &[u8]) -> Result<EigenSystem> {
    let mut r = Reader { bytes, at: 0 };
    r.magic(EIGEN_MAGIC)?;
    let dim = r.u64()? as usize;
    let residual = r.f64()?;
    let energies = Array1::from(r.f64s()?);
    let vectors = unpack(dim, &r.f64s()?)?;
    r.finish()?;
    if energies.len() != dim {
        return Err(Error::InvalidArgument("energy count does not match dimension".into()));
    }
    Ok(EigenSystem { energies, vectors, residual })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &MagneticModel) -> Result<()> {
    write_atomic(path, &ModelSnapshot::of(model).to_bytes())
}

pub fn save_model_json(path: &Path, model: &MagneticModel) -> Result<()> {
    write_atomic(path, serde_json::to_string(&ModelSnapshot::of(model))?.as_bytes())
}

pub fn load_model_snapshot(path: &Path) -> Result<ModelSnapshot> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MODEL_MAGIC) {
        ModelSnapshot::from_bytes(&bytes)
    } else {
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Eigensystems stored as `<hash>.eig` under a directory.
#[derive(Clone, Debug)]
pub struct EigenCache {
    pub dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
}

impl EigenCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<EigenCache> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(EigenCache { dir })
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.eig"))
    }

    /// Loads the cached eigensystem of `model` or diagonalizes and stores it.
    pub fn get_or_compute(&self, model: &MagneticModel) -> Result<(EigenSystem, CacheOutcome)> {
        let path = self.path_for(&model_hash(model));
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(eig) = eigensystem_from_bytes(&bytes) {
                if eig.dim() == model.dim() {
                    return Ok((eig, CacheOutcome::Hit));
                }
            }
        }
        let eig = diagonalize(model)?;
        write_atomic(&path, &eigensystem_to_bytes(&eig))?;
        Ok((eig, CacheOutcome::Miss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_hofstadter, Boundary, LatticeSpec, PotentialSpec};

    #[test]
    fn binary_roundtrip_is_exact() {
        let spec = LatticeSpec::new(6, 1, 3, Boundary::Open);
        let m = build_hofstadter(&spec, &PotentialSpec::zero(), 0.0, None).unwrap();
        let snap = ModelSnapshot::of(&m);
        let back = ModelSnapshot::from_bytes(&snap.to_bytes()).unwrap();
        assert_eq!(snap, back);
        assert_eq!(back.hamiltonian().unwrap(), m.hamiltonian);
        let eig = diagonalize(&m).unwrap();
        let e2 = eigensystem_from_bytes(&eigensystem_to_bytes(&eig)).unwrap();
        assert_eq!(e2.energies, eig.energies);
        assert_eq!(e2.vectors, eig.vectors);
        assert!(ModelSnapshot::from_bytes(&snap.to_bytes()[..40]).is_err());
    }
}
