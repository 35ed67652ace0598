//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "RCAPCKPT"
//! version  u32      1
//! count    u32      number of tensors
//! tensor*  name_len u16, name (UTF-8), rows u32, cols u32, rows·cols f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.
//! Tensors: `w1 c1 w2 c2 gamma beta` (backbone), `head.a head.b`, and
//! optionally `region.sigma`, `region.tau`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use recap_core::model::TinyBackbone;
use recap_core::{AffineHead, Matrix, RegionSpec};

pub const MAGIC: &[u8; 8] = b"RCAPCKPT";
pub const VERSION: u32 = 1;
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: TinyBackbone,
    pub head: AffineHead,
    pub region: Option<RegionSpec>,
}

struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, usize, usize, Vec<f64>)> {
        let mut out: Vec<_> = self
            .backbone
            .tensors()
            .iter()
            .map(|(name, (r, c), data)| (name.to_string(), *r, *c, data.to_vec()))
            .collect();
        let a = self.head.weights();
        out.push(("head.a".into(), a.rows(), a.cols(), a.as_slice().to_vec()));
        out.push(("head.b".into(), 1, self.head.classes(), self.head.bias().to_vec()));
        if let Some(r) = &self.region {
            out.push(("region.sigma".into(), 1, r.dim(), r.sigma_diag().to_vec()));
            out.push(("region.tau".into(), 1, 1, vec![r.tau()]));
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let tensors = self.tensors();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, rows, cols, data) in &tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(*rows as u32).to_le_bytes())?;
            w.write_all(&(*cols as u32).to_le_bytes())?;
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).context("reading checkpoint magic")?;
        ensure!(&magic == MAGIC, "not a checkpoint file (bad magic)");
        let version = read_u32(&mut r)?;
        ensure!(version == VERSION, "unsupported checkpoint version {version} (expected {VERSION})");
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).context("tensor name is not UTF-8")?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let n = rows as u64 * cols as u64;
            ensure!(n <= MAX_ELEMENTS, "tensor `{name}` too large: {rows}x{cols}");
            let mut data = Vec::with_capacity(n as usize);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf).with_context(|| format!("truncated tensor `{name}`"))?;
                data.push(f64::from_le_bytes(buf));
            }
            if tensors.insert(name.clone(), Tensor { rows, cols, data }).is_some() {
                bail!("duplicate tensor `{name}`");
            }
        }
        let mut trailing = [0u8; 1];
        ensure!(r.read(&mut trailing)? == 0, "trailing bytes after last tensor");

        let mut take = |name: &str| tensors.remove(name).with_context(|| format!("checkpoint lacks tensor `{name}`"));
        let matrix = |t: Tensor| Matrix::from_vec(t.rows, t.cols, t.data);
        let w1 = matrix(take("w1")?)?;
        let c1 = take("c1")?.data;
        let w2 = matrix(take("w2")?)?;
        let c2 = take("c2")?.data;
        let gamma = take("gamma")?.data;
        let beta = take("beta")?.data;
        let backbone = TinyBackbone::from_parts(w1, c1, w2, c2, gamma, beta)?;
        let head = AffineHead::new(matrix(take("head.a")?)?, take("head.b")?.data)?;
        let region = match (tensors.remove("region.sigma"), tensors.remove("region.tau")) {
            (Some(s), Some(t)) => {
                ensure!(t.data.len() == 1, "region.tau must be a scalar");
                Some(RegionSpec::new(s.data, t.data[0])?)
            }
            (None, None) => None,
            _ => bail!("region.sigma and region.tau must appear together"),
        };
        if let Some(extra) = tensors.keys().next() {
            bail!("unknown tensor `{extra}`");
        }
        Ok(Checkpoint { backbone, head, region })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).with_context(|| format!("checkpoint not found: expected {}", path.display()))?;
        Self::read_from(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
