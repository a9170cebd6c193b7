//! Reconstruction quality: MSE, PSNR, SSIM, and batch scoring under the
//! slot matching that maximises mean PSNR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageBatch, ImageShape};

/// Reported for identical images, where PSNR diverges.
pub const PSNR_CAP_DB: f64 = 100.0;
/// PSNR above which a reconstruction counts as excellent.
pub const EXCELLENT_PSNR_DB: f64 = 30.0;

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("images of {} and {} values", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(())
}

/// Mean of squared differences over every C·H·W entry.
pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

pub fn psnr_from_mse(mse: f64, max_i: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (20.0 * (max_i / mse.sqrt()).log10()).min(PSNR_CAP_DB)
    }
}

/// `20·log10(max_i / √MSE)` in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &[f64], y: &[f64], max_i: f64) -> Result<f64> {
    if !(max_i > 0.0) {
        return Err(Error::InvalidArgument(format!("max_i = {max_i} must be > 0")));
    }
    Ok(psnr_from_mse(mse(x, y)?, max_i))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    /// Gaussian window side; shrunk to the largest odd size that fits.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_i: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            max_i: 1.0,
        }
    }
}

impl SsimParams {
    pub fn effective_window(&self, shape: ImageShape) -> usize {
        let fit = shape.height.min(shape.width);
        let fit = if fit % 2 == 0 { fit - 1 } else { fit };
        self.window.min(fit).max(1)
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Mean local SSIM over every valid window position and channel.
pub fn ssim(x: &[f64], y: &[f64], shape: ImageShape, params: &SsimParams) -> Result<f64> {
    same_len(x, y)?;
    if x.len() != shape.len() {
        return Err(Error::Shape(format!("{} values for a {shape} image", x.len())));
    }
    let win = params.effective_window(shape);
    let weights = gaussian_window(win, params.sigma);
    let c1 = (params.k1 * params.max_i).powi(2);
    let c2 = (params.k2 * params.max_i).powi(2);
    let (h, w) = (shape.height, shape.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for (px, py) in x.chunks_exact(h * w).zip(y.chunks_exact(h * w)) {
        for oy in 0..=(h - win) {
            for ox in 0..=(w - win) {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..win {
                    for kx in 0..win {
                        let wt = weights[ky * win + kx];
                        let i = (oy + ky) * w + ox + kx;
                        let (a, b) = (px[i], py[i]);
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    /// Slot of the original image.
    pub slot: usize,
    /// Reconstruction slot assigned to it.
    pub matched_slot: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub excellent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScore>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    /// How reconstruction slots were paired with originals.
    pub matching: String,
}

/// Scores `recon` against `original` under the slot permutation maximising
/// the sum of PSNRs.
pub fn batch_match_metrics(recon: &ImageBatch, original: &ImageBatch, max_i: f64) -> Result<MetricReport> {
    if recon.batch() != original.batch() {
        return Err(Error::Shape(format!(
            "{} reconstructions for {} originals",
            recon.batch(),
            original.batch()
        )));
    }
    if recon.shape() != original.shape() {
        return Err(Error::Shape(format!("{} vs {} images", recon.shape(), original.shape())));
    }
    if recon.batch() == 0 {
        return Err(Error::Empty("image batch"));
    }
    let b = recon.batch();
    let mut table = vec![vec![0.0; b]; b];
    for (i, row) in table.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = psnr(recon.image(j), original.image(i), max_i)?;
        }
    }
    let assignment = max_weight_assignment(&table);
    let params = SsimParams {
        max_i,
        ..SsimParams::default()
    };
    let mut per_image = Vec::with_capacity(b);
    for (i, &j) in assignment.iter().enumerate() {
        let p = table[i][j];
        per_image.push(ImageScore {
            slot: i,
            matched_slot: j,
            psnr_db: p,
            ssim: ssim(recon.image(j), original.image(i), original.shape(), &params)?,
            excellent: p > EXCELLENT_PSNR_DB,
        });
    }
    let mean_psnr_db = per_image.iter().map(|s| s.psnr_db).sum::<f64>() / b as f64;
    let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / b as f64;
    Ok(MetricReport {
        per_image,
        mean_psnr_db,
        mean_ssim,
        matching: "optimal-assignment-max-psnr".to_string(),
    })
}

/// Hungarian algorithm (shortest augmenting paths with potentials) on the
/// negated weights. `result[row] = column`.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -weights[i][j];
    // 1-based arrays; index 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}
