//! Binary container for named float64 arrays.
//!
//! Layout (little-endian): magic `WVLPCKPT`, u32 format version, u32 array
//! count, then per array: u32 name length, UTF-8 name, u64 rows, u64 cols,
//! rows*cols f64 values in row-major order.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autograd::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"WVLPCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_arrays<'a>(path: &Path, arrays: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> Result<()> {
    let arrays: Vec<_> = arrays.into_iter().collect();
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, m) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated array file: {e}")))?;
    Ok(buf)
}

pub fn read_arrays(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut r = BufReader::new(
        fs::File::open(path).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?,
    );
    if &read_exact::<8>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not an array file", path.display())));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported array format version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated array name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let rows = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let cols = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        let m = Matrix::from_shape_vec((rows, cols), data).expect("rows*cols values read");
        out.push((name, m));
    }
    Ok(out)
}

pub fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    write_arrays(path, params.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, m) in read_arrays(path)? {
        if store.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.insert(name, m);
    }
    Ok(store)
}
