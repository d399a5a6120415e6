use super::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

/// Zero-pads the spatial axes by `(m - 1) / 2` on every side. The result is
/// `(rows + m - 1) × (cols + m - 1) × bands`, band fastest.
pub fn pad_cube(cube: &HsiCube, m: usize) -> Result<Vec<f32>> {
    let r = pad_radius(m)?;
    let (pr, pc) = (cube.rows + 2 * r, cube.cols + 2 * r);
    let mut out = vec![0f32; pr * pc * cube.bands];
    for i in 0..cube.rows {
        let dst = ((i + r) * pc + r) * cube.bands;
        out[dst..dst + cube.cols * cube.bands]
            .copy_from_slice(&cube.values[i * cube.cols * cube.bands..(i + 1) * cube.cols * cube.bands]);
    }
    Ok(out)
}

fn pad_radius(m: usize) -> Result<usize> {
    if m == 0 || m % 2 == 0 {
        return Err(Error::config(format!("patch size {m} must be odd")));
    }
    Ok((m - 1) / 2)
}

/// Per-band standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    /// Statistics over the spectra of the given flat pixel indices (the
    /// training split). Bands with zero spread get a unit deviation.
    pub fn from_pixels(cube: &HsiCube, pixels: &[usize]) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::config("band statistics need at least one pixel"));
        }
        let n = pixels.len() as f64;
        let mut mean = vec![0.0; cube.bands];
        for &p in pixels {
            for (m, v) in mean.iter_mut().zip(&cube.values[p * cube.bands..(p + 1) * cube.bands]) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cube.bands];
        for &p in pixels {
            for ((s, v), m) in var
                .iter_mut()
                .zip(&cube.values[p * cube.bands..(p + 1) * cube.bands])
                .zip(&mean)
            {
                *s += (*v as f64 - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

/// One network input: an `m × m × bands` block centered on a labeled pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `(1, 1, bands, m, m)`
    pub patch: Tensor5,
    /// Zero-based class (`label - 1`).
    pub label: usize,
    pub row: usize,
    pub col: usize,
}

/// Normalized, zero-padded copy of a cube from which patches are cut.
///
/// Normalization happens before padding, so padding cells are exactly zero
/// in the normalized domain.
#[derive(Clone, Debug)]
pub struct PatchExtractor {
    m: usize,
    rows: usize,
    cols: usize,
    bands: usize,
    padded: Vec<f64>,
    labels: Vec<u16>,
}

impl PatchExtractor {
    pub fn new(cube: &HsiCube, m: usize, stats: &BandStats) -> Result<Self> {
        let r = pad_radius(m)?;
        if stats.mean.len() != cube.bands || stats.std.len() != cube.bands {
            return Err(Error::Shape {
                op: "patch extractor",
                axis: "bands",
                expected: cube.bands,
                found: stats.mean.len(),
            });
        }
        let (pr, pc, b) = (cube.rows + 2 * r, cube.cols + 2 * r, cube.bands);
        let mut padded = vec![0.0; pr * pc * b];
        for i in 0..cube.rows {
            for j in 0..cube.cols {
                let dst = ((i + r) * pc + j + r) * b;
                for (k, v) in cube.spectrum(i, j).iter().enumerate() {
                    padded[dst + k] = (*v as f64 - stats.mean[k]) / stats.std[k];
                }
            }
        }
        Ok(Self {
            m,
            rows: cube.rows,
            cols: cube.cols,
            bands: b,
            padded,
            labels: cube.labels.clone(),
        })
    }

    pub fn patch_size(&self) -> usize {
        self.m
    }

    pub fn padded_extent(&self) -> (usize, usize) {
        (self.rows + self.m - 1, self.cols + self.m - 1)
    }

    pub fn extract(&self, row: usize, col: usize) -> Result<PatchSample> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::config(format!("pixel ({row}, {col}) outside the raster")));
        }
        let label = self.labels[row * self.cols + col];
        if label == 0 {
            return Err(Error::config(format!("pixel ({row}, {col}) is unlabeled")));
        }
        let (m, b) = (self.m, self.bands);
        let pc = self.cols + m - 1;
        let shape = Shape5::new(1, 1, b, m, m);
        let mut data = vec![0.0; shape.numel()];
        // padded coordinates of the patch's top-left corner are (row, col)
        for di in 0..m {
            for dj in 0..m {
                let src = ((row + di) * pc + col + dj) * b;
                for k in 0..b {
                    data[(k * m + di) * m + dj] = self.padded[src + k];
                }
            }
        }
        Ok(PatchSample {
            patch: Tensor5::from_vec(shape, data)?,
            label: label as usize - 1,
            row,
            col,
        })
    }

    /// Zero-based class of a flat pixel index.
    pub fn label_of(&self, pixel: usize) -> Result<usize> {
        match self.labels.get(pixel) {
            None => Err(Error::config(format!("pixel {pixel} outside the raster"))),
            Some(0) => Err(Error::config(format!("pixel {pixel} is unlabeled"))),
            Some(&l) => Ok(l as usize - 1),
        }
    }

    pub fn extract_pixel(&self, pixel: usize) -> Result<PatchSample> {
        self.extract(pixel / self.cols, pixel % self.cols)
    }
}
