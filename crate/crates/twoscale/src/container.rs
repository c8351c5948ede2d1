//! Self-describing binary field container.
//!
//! Layout (little-endian): magic `DHFC`, format version (u32), d, n_x, n_t
//! (u32 each), L and T_env (f64), seed (u64), array count (u32), then per
//! array its name (u32 length + UTF-8 bytes), element count (u64) and the
//! values as f64. Field arrays are row-major with time slowest.

use crate::environment::{DriftSeries, EnvError, EnvironmentRealization, SpectralParams};
use crate::grid::{GridError, MatrixField, SpaceTimeGrid};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DHFC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a field container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("missing array `{0}`")]
    Missing(String),
    #[error("array `{name}` has {got} values, expected {expected}")]
    Length { name: String, got: usize, expected: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContainerHeader {
    pub version: u32,
    pub d: usize,
    pub n_x: usize,
    pub n_t: usize,
    pub length: f64,
    pub period: f64,
    pub seed: u64,
}

impl ContainerHeader {
    pub fn for_grid(grid: &SpaceTimeGrid, seed: u64) -> Self {
        Self { version: FORMAT_VERSION, d: grid.d, n_x: grid.n_x, n_t: grid.n_t, length: grid.length, period: grid.period, seed }
    }

    pub fn grid(&self) -> Result<SpaceTimeGrid, ContainerError> {
        Ok(SpaceTimeGrid::new(self.d, self.n_x, self.n_t, self.length, self.period)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldContainer {
    pub header: ContainerHeader,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl FieldContainer {
    pub fn new(header: ContainerHeader) -> Self {
        Self { header, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.arrays.push((name.into(), values));
    }

    pub fn get(&self, name: &str) -> Result<&[f64], ContainerError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    fn get_len(&self, name: &str, expected: usize) -> Result<&[f64], ContainerError> {
        let v = self.get(name)?;
        if v.len() != expected {
            return Err(ContainerError::Length { name: name.to_string(), got: v.len(), expected });
        }
        Ok(v)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ContainerError> {
        let h = &self.header;
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [h.d, h.n_x, h.n_t] {
            w.write_all(&u32::try_from(v).map_err(|_| ContainerError::Malformed("dimension too large".into()))?.to_le_bytes())?;
        }
        w.write_all(&h.length.to_le_bytes())?;
        w.write_all(&h.period.to_le_bytes())?;
        w.write_all(&h.seed.to_le_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, values) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(8 * values.len());
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ContainerError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::Version(version));
        }
        let d = read_u32(&mut r)? as usize;
        let n_x = read_u32(&mut r)? as usize;
        let n_t = read_u32(&mut r)? as usize;
        let length = read_f64(&mut r)?;
        let period = read_f64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let header = ContainerHeader { version, d, n_x, n_t, length, period, seed };
        let count = read_u32(&mut r)?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| ContainerError::Malformed("array name is not UTF-8".into()))?;
            let len = usize::try_from(read_u64(&mut r)?).map_err(|_| ContainerError::Malformed("array too long".into()))?;
            let mut bytes = Vec::new();
            (&mut r).take(8 * len as u64).read_to_end(&mut bytes)?;
            if bytes.len() != 8 * len {
                return Err(ContainerError::Malformed(format!("array `{name}` truncated")));
            }
            let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push((name, values));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(file))
    }

    /// Pack an environment: `a:i:j`, `s:i:j`, `bbar`, `bbar_meta` = [dt,
    /// periodic], `params` in declaration order.
    pub fn from_environment(env: &EnvironmentRealization) -> Self {
        let d = env.grid.d;
        let mut c = Self::new(ContainerHeader::for_grid(&env.grid, env.seed));
        for i in 0..d {
            for j in 0..d {
                c.push(format!("a:{i}:{j}"), env.a.comp(i, j).to_vec());
            }
        }
        for i in 0..d {
            for j in 0..d {
                c.push(format!("s:{i}:{j}"), env.s.comp(i, j).to_vec());
            }
        }
        c.push("bbar", env.bbar.values.clone());
        c.push("bbar_meta", vec![env.bbar.dt, if env.bbar.periodic { 1.0 } else { 0.0 }]);
        let p = &env.params;
        c.push("params", vec![p.ell_x, p.ell_t, p.beta_decay, p.sigma_s, p.sigma_a, p.lambda, p.big_lambda]);
        c
    }

    /// Rebuild an environment, re-running its validation.
    pub fn to_environment(&self) -> Result<EnvironmentRealization, ContainerError> {
        let grid = self.header.grid()?;
        let (d, len) = (grid.d, grid.len());
        let field = |prefix: &str| -> Result<MatrixField, ContainerError> {
            let mut m = MatrixField::zeros(d, len);
            for i in 0..d {
                for j in 0..d {
                    *m.comp_mut(i, j) = self.get_len(&format!("{prefix}:{i}:{j}"), len)?.to_vec();
                }
            }
            Ok(m)
        };
        let a = field("a")?;
        let s = field("s")?;
        let p = self.get_len("params", 7)?;
        let params = SpectralParams {
            ell_x: p[0],
            ell_t: p[1],
            beta_decay: p[2],
            sigma_s: p[3],
            sigma_a: p[4],
            lambda: p[5],
            big_lambda: p[6],
        };
        let meta = self.get_len("bbar_meta", 2)?;
        let values = self.get("bbar")?.to_vec();
        if d == 0 || values.len() % d != 0 {
            return Err(ContainerError::Malformed("bbar length is not a multiple of d".into()));
        }
        let bbar = DriftSeries { d, dt: meta[0], periodic: meta[1] != 0.0, values };
        Ok(EnvironmentRealization::from_fields(grid, params, a, s, bbar, self.header.seed)?)
    }

    /// Vector field `prefix:i` (i < d) with one value per grid node.
    pub fn vector_field(&self, prefix: &str) -> Result<Vec<Vec<f64>>, ContainerError> {
        let len = self.header.grid()?.len();
        (0..self.header.d).map(|i| Ok(self.get_len(&format!("{prefix}:{i}"), len)?.to_vec())).collect()
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ContainerError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ContainerError::Malformed("unexpected end of file".into()),
        _ => ContainerError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ContainerError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, ContainerError> {
    Ok(f64::from_bits(read_u64(r)?))
}
