//! Binary field snapshots.
//!
//! Layout (little-endian): `"SNSF"`, `u8` dim, `u8` reserved (0), `u16`
//! points per axis, `f64` box length, then `re, im` as `f64` pairs in
//! row-major site order.

use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, GridSpec};
use crate::scalar::Real;

pub const MAGIC: [u8; 4] = *b"SNSF";
pub const HEADER_LEN: usize = 16;

pub fn encode_header<R: Real>(spec: &GridSpec<R>) -> [u8; HEADER_LEN] {
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&MAGIC);
    header[4] = spec.dim() as u8;
    header[5] = 0;
    header[6..8].copy_from_slice(&(spec.points_per_axis() as u16).to_le_bytes());
    header[8..16].copy_from_slice(&spec.box_length().as_f64().to_le_bytes());
    header
}

pub fn write_snapshot<R: Real, W: Write>(field: &Field<R>, mut out: W) -> Result<()> {
    out.write_all(&encode_header(field.grid().spec()))?;
    let mut buf = Vec::with_capacity(field.values().len() * 16);
    for z in field.values() {
        buf.extend_from_slice(&z.re.as_f64().to_le_bytes());
        buf.extend_from_slice(&z.im.as_f64().to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_header(bytes: &[u8; HEADER_LEN]) -> Result<(usize, usize, f64)> {
    if bytes[..4] != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let dim = bytes[4] as usize;
    let n = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let mut l = [0u8; 8];
    l.copy_from_slice(&bytes[8..16]);
    Ok((dim, n, f64::from_le_bytes(l)))
}

/// Reads one snapshot. Reuses `grid` when its description matches the
/// header, otherwise builds a fresh grid.
pub fn read_snapshot<R: Real, Rd: Read>(
    mut input: Rd,
    grid: Option<&Arc<Grid<R>>>,
) -> Result<Field<R>> {
    let mut header = [0u8; HEADER_LEN];
    input.read_exact(&mut header)?;
    let (dim, n, length) = read_header(&header)?;
    let spec = GridSpec::new(dim, n, R::lit(length)).map_err(|e| Error::Snapshot(e.to_string()))?;
    let grid = match grid {
        Some(g) if *g.spec() == spec => Arc::clone(g),
        _ => Grid::new(spec),
    };
    let mut data = vec![0u8; grid.len() * 16];
    input.read_exact(&mut data)?;
    let values = data
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            Complex::new(R::lit(re), R::lit(im))
        })
        .collect();
    Field::from_values(&grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let spec = GridSpec::<f64>::new(2, 64, 20.0).unwrap();
        let h = encode_header(&spec);
        assert_eq!(&h[..4], b"SNSF");
        assert_eq!(h[4], 2);
        assert_eq!(h[5], 0);
        assert_eq!(&h[6..8], &[64, 0]);
        assert_eq!(&h[8..16], &20.0f64.to_le_bytes());
    }

    #[test]
    fn roundtrip_preserves_values() {
        let g = Grid::<f64>::build(1, 32, 12.5).unwrap();
        let u = Field::from_fn(&g, |x| Complex::new(x[0].sin(), x[0].cos() * 0.5));
        let mut bytes = Vec::new();
        write_snapshot(&u, &mut bytes).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 32 * 16);
        let back: Field<f64> = read_snapshot(bytes.as_slice(), Some(&g)).unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = vec![0u8; 16 + 8 * 16];
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(read_snapshot::<f64, _>(bytes.as_slice(), None).is_err());
    }
}
