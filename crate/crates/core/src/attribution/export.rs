use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 2-D view of a map: `[n]` becomes one row, `[c, h, w]` is averaged over channels.
pub fn map_grid(map: &Tensor) -> Result<Tensor> {
    match map.shape() {
        [n] => map.reshape(&[1, *n]),
        [_, _] => Ok(map.clone()),
        [c, h, w] => {
            let plane = h * w;
            let mut out = vec![0.0; plane];
            for chan in map.data().chunks(plane) {
                out.iter_mut().zip(chan).for_each(|(o, v)| *o += v / *c as f64);
            }
            Tensor::new(vec![*h, *w], out)
        }
        s => Err(Error::Shape(format!("cannot lay out a map of shape {s:?} on a grid"))),
    }
}

pub fn write_csv_grid(path: &Path, map: &Tensor) -> Result<()> {
    let grid = map_grid(map)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    for r in 0..grid.rows() {
        w.write_record(grid.row_slice(r).iter().map(|v| format!("{v:.16e}")))
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Binary 8-bit PGM, linearly rescaled so the minimum is black and the maximum white.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let grid = map_grid(map)?;
    let (lo, hi) = grid.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", grid.cols(), grid.rows())?;
    let bytes: Vec<u8> = grid
        .data()
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}
