use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::SensorGrid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FNENSMBL";
const VERSION: u32 = 1;

/// Sampled functions on a common grid, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionEnsemble {
    grid: SensorGrid,
    /// Row-major `[n_samples, grid.len()]`.
    values: Vec<f64>,
    n_samples: usize,
    /// Row-major `[n_samples, latent_width]` random coordinates, if known.
    latent: Option<(usize, Vec<f64>)>,
}

impl FunctionEnsemble {
    pub fn new(grid: SensorGrid, values: Vec<f64>) -> Result<Self> {
        let m = grid.len();
        if m == 0 || values.len() % m != 0 {
            return Err(Error::InvalidShape {
                shape: vec![values.len()],
                reason: format!("value count is not a multiple of grid size {m}"),
            });
        }
        Ok(Self {
            n_samples: values.len() / m,
            grid,
            values,
            latent: None,
        })
    }

    pub fn from_rows(grid: SensorGrid, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != grid.len()) {
            return Err(Error::invalid("row length differs from grid size"));
        }
        Self::new(grid, rows.concat())
    }

    pub fn with_latent(mut self, width: usize, latent: Vec<f64>) -> Result<Self> {
        if latent.len() != width * self.n_samples {
            return Err(Error::InvalidShape {
                shape: vec![latent.len()],
                reason: format!("expected {} x {width} latent values", self.n_samples),
            });
        }
        self.latent = Some((width, latent));
        Ok(self)
    }

    pub fn grid(&self) -> &SensorGrid {
        &self.grid
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_sensors(&self) -> usize {
        self.grid.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let m = self.n_sensors();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn latent_width(&self) -> usize {
        self.latent.as_ref().map_or(0, |l| l.0)
    }

    pub fn latent(&self, i: usize) -> Option<&[f64]> {
        self.latent.as_ref().map(|(w, v)| &v[i * w..(i + 1) * w])
    }

    /// `[n, sensors]` tensor of the samples at `rows`.
    pub fn rows_tensor(&self, rows: &[usize]) -> Result<Tensor> {
        let data = rows.iter().flat_map(|&i| self.sample(i).iter().copied()).collect();
        Tensor::new([rows.len(), self.n_sensors()], data)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new([self.n_samples, self.n_sensors()], self.values.clone())
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let values = rows.iter().flat_map(|&i| self.sample(i).iter().copied()).collect();
        let latent = self.latent.as_ref().map(|(w, _)| {
            let lat = rows
                .iter()
                .flat_map(|&i| self.latent(i).unwrap().iter().copied())
                .collect();
            (*w, lat)
        });
        Self {
            grid: self.grid.clone(),
            values,
            n_samples: rows.len(),
            latent,
        }
    }

    /// Per-sensor sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let m = self.n_sensors();
        let mut out = vec![0.0; m];
        for i in 0..self.n_samples {
            for (o, v) in out.iter_mut().zip(self.sample(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.n_samples.max(1) as f64);
        out
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.encode(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        let u64le = |v: usize| (v as u64).to_le_bytes();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        match &self.grid {
            SensorGrid::Line(x) => {
                w.write_all(&1u32.to_le_bytes())?;
                w.write_all(&u64le(x.len()))?;
                w.write_all(&u64le(1))?;
            }
            SensorGrid::Tensor { x, y } => {
                w.write_all(&2u32.to_le_bytes())?;
                w.write_all(&u64le(x.len()))?;
                w.write_all(&u64le(y.len()))?;
            }
        }
        w.write_all(&u64le(self.n_samples))?;
        w.write_all(&u64le(self.latent_width()))?;
        let coords: Vec<f64> = match &self.grid {
            SensorGrid::Line(x) => x.clone(),
            SensorGrid::Tensor { x, y } => [x.as_slice(), y.as_slice()].concat(),
        };
        for c in coords {
            w.write_all(&c.to_le_bytes())?;
        }
        // columnar: sensor by sensor
        let m = self.n_sensors();
        for j in 0..m {
            for i in 0..self.n_samples {
                w.write_all(&self.values[i * m + j].to_le_bytes())?;
            }
        }
        if let Some((width, lat)) = &self.latent {
            for j in 0..*width {
                for i in 0..self.n_samples {
                    w.write_all(&lat[i * width + j].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }

    fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err("not a function-ensemble file".into());
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let kind = cur.u32()?;
        let (nx, ny) = (cur.u64()? as usize, cur.u64()? as usize);
        let n = cur.u64()? as usize;
        let width = cur.u64()? as usize;
        let grid = match kind {
            1 => SensorGrid::Line(cur.f64s(nx)?),
            2 => SensorGrid::Tensor {
                x: cur.f64s(nx)?,
                y: cur.f64s(ny)?,
            },
            k => return Err(format!("unknown grid kind {k}")),
        };
        let m = grid.len();
        if m == 0 {
            return Err("empty grid".into());
        }
        let cols = cur.f64s(m * n)?;
        let mut values = vec![0.0; m * n];
        for j in 0..m {
            for i in 0..n {
                values[i * m + j] = cols[j * n + i];
            }
        }
        let latent = if width > 0 {
            let cols = cur.f64s(width * n)?;
            let mut lat = vec![0.0; width * n];
            for j in 0..width {
                for i in 0..n {
                    lat[i * width + j] = cols[j * n + i];
                }
            }
            Some((width, lat))
        } else {
            None
        };
        if cur.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
        }
        Ok(Self {
            grid,
            values,
            n_samples: n,
            latent,
        })
    }

    /// One row per sample. The header names each sensor by its coordinates.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = vec!["sample".to_string()];
        for p in self.grid.points() {
            let name: Vec<String> = p.iter().map(|c| format!("{c:.6}")).collect();
            header.push(format!("s[{}]", name.join(";")));
        }
        for j in 0..self.latent_width() {
            header.push(format!("xi{j}"));
        }
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for i in 0..self.n_samples {
            let mut line = i.to_string();
            for v in self.sample(i).iter().chain(self.latent(i).unwrap_or(&[])) {
                line.push(',');
                line.push_str(&format!("{v:e}"));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let len = n.checked_mul(8).ok_or("length overflow")?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_ensemble() -> FunctionEnsemble {
        let g = SensorGrid::uniform_2d((0.0, 1.0, 2), (0.0, 1.0, 3));
        let values: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        FunctionEnsemble::new(g, values)
            .unwrap()
            .with_latent(2, (0..6).map(f64::from).collect())
            .unwrap()
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let e = sample_ensemble();
        e.write_binary(&path).unwrap();
        assert_eq!(FunctionEnsemble::read_binary(&path).unwrap(), e);

        let line = FunctionEnsemble::new(SensorGrid::uniform(0.0, 1.0, 4), vec![1.0; 8]).unwrap();
        line.write_binary(&path).unwrap();
        assert_eq!(FunctionEnsemble::read_binary(&path).unwrap(), line);
    }

    #[test]
    fn corrupt_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        sample_ensemble().write_binary(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        let err = FunctionEnsemble::read_binary(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let missing = dir.path().join("none.bin");
        assert!(matches!(FunctionEnsemble::read_binary(&missing), Err(Error::MissingFile(_))));
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        sample_ensemble().write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 1 + 6 + 2);
    }

    #[test]
    fn select_keeps_latent_rows() {
        let e = sample_ensemble().select(&[2, 0]);
        assert_eq!(e.n_samples(), 2);
        assert_eq!(e.latent(0).unwrap(), &[4.0, 5.0]);
        assert_eq!(e.sample(1)[0], -3.0);
    }
}
