//! Binary persistence for series (`DFTS`) and matrices (`DFM1`), plus the
//! plain `key=value` sidecar files that carry their metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::datasets::{Origin, TimeSeries};
use crate::error::{Error, Result};

const SERIES_MAGIC: &[u8; 4] = b"DFTS";
const MATRIX_MAGIC: &[u8; 4] = b"DFM1";
const VERSION: u32 = 1;

fn read_exact<const K: usize>(r: &mut impl Read) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let got = read_exact::<4>(r)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![
        0u8;
        count
            .checked_mul(8)
            .ok_or_else(|| Error::Format("size overflow".into()))?
    ];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_f64s(w: &mut impl Write, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_series(path: impl AsRef<Path>, series: &TimeSeries) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(SERIES_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(series.n_dim() as u64).to_le_bytes())?;
    w.write_all(&(series.len() as u64).to_le_bytes())?;
    w.write_all(&series.tau().to_le_bytes())?;
    write_f64s(&mut w, series.as_slice().iter().copied())?;
    w.flush()?;
    Ok(())
}

/// Reads a series; the origin is not stored in the binary and comes back as
/// [`Origin::External`].
pub fn read_series(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_header(&mut r, SERIES_MAGIC)?;
    let n_dim = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let len = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let tau = f64::from_le_bytes(read_exact(&mut r)?);
    let data = read_f64s(&mut r, n_dim.saturating_mul(len))?;
    TimeSeries::new(data, n_dim, tau, Origin::External)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    write_f64s(
        &mut w,
        m.row_iter()
            .flat_map(|r| r.iter().copied().collect::<Vec<_>>()),
    )?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_header(&mut r, MATRIX_MAGIC)?;
    let rows = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let cols = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let data = read_f64s(&mut r, rows.saturating_mul(cols))?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Vectors are stored as `len x 1` matrices.
pub fn write_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    write_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v))
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::Format(format!(
            "expected a column vector, found {} columns",
            m.ncols()
        )));
    }
    Ok(m.as_slice().to_vec())
}

/// Ordered `key=value` metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata(BTreeMap<String, String>);

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("missing metadata key `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("metadata line without `=`: {line}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Metadata(map))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Metadata::from_text(&fs::read_to_string(path)?)
    }
}

/// `foo.dfm` -> `foo.dfm.<suffix>`.
pub fn sidecar(path: impl AsRef<Path>, suffix: &str) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub(crate) fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn split_f64(text: &str) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad number `{s}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.dfts");
        let s = TimeSeries::new(
            vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 7.0, 1e300],
            3,
            0.05,
            Origin::External,
        )
        .unwrap();
        write_series(&p, &s).unwrap();
        assert_eq!(read_series(&p).unwrap(), s);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DFTS");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 8 + 8 + 6 * 8);
    }

    #[test]
    fn matrix_is_row_major_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dfm");
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        write_matrix(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DFM1");
        let second = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
        assert_eq!(second, 2.0);
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dfm");
        write_matrix(&p, &DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(read_series(&p), Err(Error::Format(_))));
    }

    #[test]
    fn metadata_round_trip() {
        let mut m = Metadata::new();
        m.set("epsilon", 0.125).set("selection", "random:7");
        let back = Metadata::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.parse::<f64>("epsilon").unwrap(), 0.125);
        assert!(back.require("missing").is_err());
        assert_eq!(
            split_f64(&join_f64(&[1.5, -2e-9])).unwrap(),
            vec![1.5, -2e-9]
        );
    }
}
