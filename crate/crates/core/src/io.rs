//! Lossless binary formats: grid sidecars and weight checkpoints.
//!
//! Sidecar layout (little-endian throughout):
//!
//! ```text
//! magic   8 bytes  "VXGRID\0\0"
//! version u32      currently 1
//! ndim    u32
//! dims    u32 × ndim
//! data    f32 × product(dims)
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! magic   8 bytes  "VXCKPT\0\0"
//! version u32      currently 1
//! count   u32      number of entries
//! entry   count ×  { name_len u32, name utf-8, ndim u32, dims u32×ndim, data f32×n }
//! ```
//!
//! Entries keep insertion order, so writing the same state twice produces
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Grid;

const GRID_MAGIC: &[u8; 8] = b"VXGRID\0\0";
const CKPT_MAGIC: &[u8; 8] = b"VXCKPT\0\0";
const FORMAT_VERSION: u32 = 1;

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(GRID_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_shape_and_data(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(Error::Format(format!("{}: not a grid sidecar", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported sidecar version {version}")));
    }
    read_shape_and_data(&mut r)
}

/// An ordered collection of named grids (weights, optimizer moments,
/// counters). Scalar metadata rides along as 1-element grids.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Grid)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grid: Grid) {
        self.entries.push((name.into(), grid));
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.insert(name, Grid::new(vec![1], vec![value as f32]).unwrap());
    }

    /// Store a u64 losslessly as two f32-encoded 32-bit halves.
    pub fn insert_u64(&mut self, name: impl Into<String>, value: u64) {
        let lo = (value & 0xFFFF_FFFF) as u32;
        let hi = (value >> 32) as u32;
        let data = vec![f32::from_bits(lo), f32::from_bits(hi)];
        self.insert(name, Grid::new(vec![2], data).unwrap());
    }

    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn require(&self, name: &str) -> Result<&Grid> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing entry '{name}'")))
    }

    pub fn require_scalar(&self, name: &str) -> Result<f64> {
        let g = self.require(name)?;
        if g.len() != 1 {
            return Err(Error::Format(format!("'{name}' is not a scalar")));
        }
        Ok(g.data()[0] as f64)
    }

    pub fn require_u64(&self, name: &str) -> Result<u64> {
        let g = self.require(name)?;
        if g.len() != 2 {
            return Err(Error::Format(format!("'{name}' is not a packed u64")));
        }
        let lo = g.data()[0].to_bits() as u64;
        let hi = g.data()[1].to_bits() as u64;
        Ok((hi << 32) | lo)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, grid) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_shape_and_data(&mut w, grid)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format(format!("{}: not a checkpoint", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("checkpoint entry name is not utf-8".into()))?;
            let grid = read_shape_and_data(&mut r)?;
            entries.push((name, grid));
        }
        Ok(Checkpoint { entries })
    }
}

fn write_shape_and_data<W: Write>(w: &mut W, grid: &Grid) -> Result<()> {
    w.write_all(&(grid.shape().len() as u32).to_le_bytes())?;
    for &d in grid.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in grid.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_shape_and_data<R: Read>(r: &mut R) -> Result<Grid> {
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("implausible ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Grid::new(shape, data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    #[test]
    fn grid_sidecar_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.vxg");
        let g = RngState::seeded(1).gaussian(vec![3, 5, 2]);
        write_grid(&path, &g).unwrap();
        let back = read_grid(&path).unwrap();
        assert_eq!(g.shape(), back.shape());
        assert_eq!(g.data(), back.data());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_order_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.vxc");
        let mut ck = Checkpoint::new();
        ck.insert("b.weight", RngState::seeded(2).gaussian(vec![4, 4]));
        ck.insert("a.weight", RngState::seeded(3).gaussian(vec![2]));
        ck.insert_scalar("step", 1234.0);
        ck.insert_u64("rng_pos", u64::MAX - 5);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let names: Vec<&str> = back.names().collect();
        assert_eq!(names, vec!["b.weight", "a.weight", "step", "rng_pos"]);
        assert_eq!(back.require("b.weight").unwrap().data(),
                   ck.require("b.weight").unwrap().data());
        assert_eq!(back.require_scalar("step").unwrap(), 1234.0);
        assert_eq!(back.require_u64("rng_pos").unwrap(), u64::MAX - 5);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOTAMAGICFILE....").unwrap();
        assert!(read_grid(&path).is_err());
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn identical_checkpoints_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.vxc");
        let p2 = dir.path().join("b.vxc");
        let mut ck = Checkpoint::new();
        ck.insert("w", RngState::seeded(6).gaussian(vec![8, 8]));
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
