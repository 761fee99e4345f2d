//! Binary snapshot of `(t, n, c)` on a periodic grid.
//!
//! Layout: the magic bytes `KSLB1`, then little-endian `u32 d`, `u32 n_axis`,
//! `f64 box_len`, `f64 t`, the `n_axis^d` samples of `n` and then those of
//! `c`, each row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{KslbError, Result};
use crate::fields::{Grid, ScalarField};

pub const MAGIC: &[u8; 5] = b"KSLB1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub t: f64,
    pub n: ScalarField,
    pub c: ScalarField,
}

impl Checkpoint {
    pub fn new(t: f64, n: ScalarField, c: ScalarField) -> Result<Self> {
        if n.grid() != c.grid() {
            return Err(KslbError::ShapeMismatch("n and c live on different grids".into()));
        }
        Ok(Self { t, n, c })
    }

    pub fn grid(&self) -> &Grid {
        self.n.grid()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let g = self.grid();
        w.write_all(MAGIC)?;
        w.write_all(&(g.dim() as u32).to_le_bytes())?;
        w.write_all(&(g.n_axis() as u32).to_le_bytes())?;
        w.write_all(&g.box_len().to_le_bytes())?;
        w.write_all(&self.t.to_le_bytes())?;
        for v in self.n.values().iter().chain(self.c.values()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| KslbError::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(KslbError::Checkpoint("bad magic bytes".into()));
        }
        let d = read_u32(&mut r)? as usize;
        let n_axis = read_u32(&mut r)? as usize;
        let box_len = read_f64(&mut r)?;
        let t = read_f64(&mut r)?;
        let grid = Grid::new(d, n_axis, box_len)?;
        let mut field = || -> Result<ScalarField> {
            let values = (0..grid.len())
                .map(|_| read_f64(&mut r))
                .collect::<Result<Vec<_>>>()?;
            ScalarField::new(grid, values)
        };
        let n = field()?;
        let c = field()?;
        Ok(Self { t, n, c })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| KslbError::Checkpoint("truncated data".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| KslbError::Checkpoint("truncated data".into()))?;
    Ok(f64::from_le_bytes(b))
}
