use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::HsiCube;
use crate::error::{Error, Result};

/// A synthetic cube together with the clean class signatures it was drawn from.
#[derive(Clone, Debug)]
pub struct SynthCube {
    pub cube: HsiCube,
    /// `signatures[k]` is the spectrum of class `k + 1`.
    pub signatures: Vec<Vec<f32>>,
}

/// Smooth random spectrum: a baseline plus three Gaussian bumps.
fn signature<R: Rng>(rng: &mut R, bands: usize) -> Vec<f32> {
    let base = rng.random_range(0.1..0.4);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.15..0.6),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.25),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
            let v = base
                + bumps
                    .iter()
                    .map(|(a, mu, sd)| a * (-0.5 * ((t - mu) / sd).powi(2)).exp())
                    .sum::<f64>();
            v as f32
        })
        .collect()
}

/// Desk-scale stand-in for a real scene.
///
/// Classes occupy the Voronoi cells of `classes` well-separated random
/// centers, so every class region is contiguous. The outermost pixel ring is
/// left unlabeled. Each pixel is its region's signature plus i.i.d. Gaussian
/// noise with standard deviation `noise`.
pub fn synth_cube(seed: u64, rows: usize, cols: usize, bands: usize, classes: usize, noise: f64) -> Result<HsiCube> {
    synth_cube_with_signatures(seed, rows, cols, bands, classes, noise).map(|s| s.cube)
}

pub fn synth_cube_with_signatures(
    seed: u64,
    rows: usize,
    cols: usize,
    bands: usize,
    classes: usize,
    noise: f64,
) -> Result<SynthCube> {
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    if rows * cols < 10 * classes {
        return Err(Error::config(format!(
            "{rows}×{cols} raster is too small for {classes} classes (need rows·cols ≥ 10·classes)"
        )));
    }
    if rows < 3 || cols < 3 || bands == 0 {
        return Err(Error::config("raster needs at least 3×3 pixels and one band"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config(format!("noise {noise} must be finite and non-negative")));
    }
    let interior = (rows - 2) * (cols - 2);
    if interior < classes {
        return Err(Error::config("interior too small to hold every class"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signatures: Vec<Vec<f32>> = (0..classes).map(|_| signature(&mut rng, bands)).collect();

    let min_sep = ((interior as f64 / classes as f64).sqrt() / 2.0).max(1.0);
    let mut centers: Vec<(f64, f64)> = Vec::new();
    for _attempt in 0..1000 {
        centers.clear();
        for _ in 0..classes {
            centers.push((
                rng.random_range(1..rows - 1) as f64,
                rng.random_range(1..cols - 1) as f64,
            ));
        }
        let separated = centers.iter().enumerate().all(|(a, p)| {
            centers[a + 1..]
                .iter()
                .all(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() >= min_sep)
        });
        if separated {
            break;
        }
    }

    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut values = Vec::with_capacity(rows * cols * bands);
    let mut labels = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let nearest = centers
                .iter()
                .enumerate()
                .map(|(k, c)| (k, (i as f64 - c.0).powi(2) + (j as f64 - c.1).powi(2)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0;
            let border = i == 0 || j == 0 || i == rows - 1 || j == cols - 1;
            labels.push(if border { 0 } else { nearest as u16 + 1 });
            for &s in &signatures[nearest] {
                let v = if noise > 0.0 {
                    (s as f64 + normal.sample(&mut rng)) as f32
                } else {
                    s
                };
                values.push(v);
            }
        }
    }
    let cube = HsiCube::new(rows, cols, bands, classes, values, labels, None)?;
    Ok(SynthCube { cube, signatures })
}
