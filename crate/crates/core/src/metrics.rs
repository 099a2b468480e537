//! Reconstruction quality metrics, communication accounting and a forgetting
//! diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mri::Image;

/// PSNR reported for identical images; keeps CSV values finite.
pub const PSNR_CAP_DB: f64 = 200.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl MetricReport {
    pub fn compute(reference: &Image, reconstruction: &Image) -> Result<Self> {
        Ok(Self {
            psnr: psnr(reference, reconstruction)?,
            ssim: ssim(reference, reconstruction)?,
            nmse: nmse(reference, reconstruction)?,
        })
    }

    /// Component-wise mean; `None` for an empty slice.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(MetricReport {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            nmse: reports.iter().map(|r| r.nmse).sum::<f64>() / n,
        })
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `‖rec − ref‖² / ‖ref‖²`. Not symmetric in its arguments.
pub fn nmse(reference: &Image, reconstruction: &Image) -> Result<f64> {
    same_shape(reference, reconstruction)?;
    let denom = reference.energy();
    if denom == 0.0 {
        return Err(Error::invalid("NMSE reference image is all zeros"));
    }
    let num: f64 = reference
        .pixels()
        .iter()
        .zip(reconstruction.pixels())
        .map(|(r, x)| (x - r) * (x - r))
        .sum();
    Ok(num / denom)
}

/// `10·log₁₀(peak²/MSE)` with `peak = max(ref) − min(ref)`, capped at 200 dB.
pub fn psnr(reference: &Image, reconstruction: &Image) -> Result<f64> {
    same_shape(reference, reconstruction)?;
    let peak = reference.max() - reference.min();
    if peak <= 0.0 {
        return Err(Error::invalid("PSNR reference has zero dynamic range"));
    }
    let n = reference.pixels().len() as f64;
    let mse = reference
        .pixels()
        .iter()
        .zip(reconstruction.pixels())
        .map(|(r, x)| (x - r) * (x - r))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - center;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable valid-mode filtering with the same taps on both axes.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(t, g)| g * data[r * w + c + t])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(t, g)| g * rows[(r + t) * ow + c])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows (σ = 1.5).
pub fn ssim(reference: &Image, reconstruction: &Image) -> Result<f64> {
    same_shape(reference, reconstruction)?;
    let (h, w) = reference.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let range = reference.max() - reference.min();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);

    let x = reference.pixels();
    let y = reconstruction.pixels();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();

    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let e_xx = filter_valid(&xx, h, w, &taps);
    let e_yy = filter_valid(&yy, h, w, &taps);
    let e_xy = filter_valid(&xy, h, w, &taps);

    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += if den == 0.0 { 1.0 } else { num / den };
    }
    Ok(total / mu_x.len() as f64)
}

/// Which parameters travel between clients and server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommMode {
    FullFinetune,
    PromptOnly,
}

/// Scalar counts of the communicated model pieces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSize {
    pub prompt_scalars: u64,
    pub backbone_scalars: u64,
}

/// Running tally of scalars sent between server and clients.
///
/// `per_round_scalars_*` are per client and round; `total_scalars` sums both
/// directions over every recorded client exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommLedger {
    pub per_round_scalars_up: u64,
    pub per_round_scalars_down: u64,
    pub total_scalars: u64,
    pub trainable_scalars: u64,
    pub rounds: u64,
}

impl CommLedger {
    /// Adds one round in which `clients` clients each download and upload once.
    pub fn record_round(&mut self, clients: usize) {
        let per_client = self.per_round_scalars_up + self.per_round_scalars_down;
        self.total_scalars += per_client * clients as u64;
        self.rounds += 1;
    }

    /// Adds scalars sent outside the regular exchange, e.g. broadcast bases.
    pub fn record_extra(&mut self, scalars: u64) {
        self.total_scalars += scalars;
    }
}

/// Empty ledger with the per-exchange counts for `mode`.
pub fn count_communication(mode: CommMode, size: ModelSize) -> CommLedger {
    let per_direction = match mode {
        CommMode::PromptOnly => size.prompt_scalars,
        CommMode::FullFinetune => size.prompt_scalars + size.backbone_scalars,
    };
    CommLedger {
        per_round_scalars_up: per_direction,
        per_round_scalars_down: per_direction,
        total_scalars: 0,
        trainable_scalars: per_direction,
        rounds: 0,
    }
}

/// Mean over clients of how far the latest global loss sits above the best
/// earlier one. `history[round][client]`.
pub fn forgetting_gap(history: &[Vec<f64>]) -> Result<f64> {
    if history.len() < 2 {
        return Err(Error::invalid(
            "forgetting gap needs at least two rounds of history",
        ));
    }
    let clients = history[0].len();
    if clients == 0 || history.iter().any(|r| r.len() != clients) {
        return Err(Error::invalid(
            "history rows must share a non-zero client count",
        ));
    }
    let (last, prior) = history.split_last().expect("checked length");
    let total: f64 = (0..clients)
        .map(|k| {
            let best = prior.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
            (last[k] - best).max(0.0)
        })
        .sum();
    Ok(total / clients as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, |_, _| rng.random_range(0.0..1.0)).unwrap()
    }

    /// Direct per-window SSIM with the full 2D Gaussian kernel.
    fn naive_ssim(x: &Image, y: &Image) -> f64 {
        let (h, w) = x.shape();
        let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        let range = x.max() - x.min();
        let c1 = (SSIM_K1 * range).powi(2);
        let c2 = (SSIM_K2 * range).powi(2);
        let mut acc = 0.0;
        let mut count = 0;
        for r0 in 0..=(h - SSIM_WINDOW) {
            for c0 in 0..=(w - SSIM_WINDOW) {
                let weight = |i: usize, j: usize| taps[i] * taps[j];
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        mx += weight(i, j) * x.get(r0 + i, c0 + j);
                        my += weight(i, j) * y.get(r0 + i, c0 + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let dx = x.get(r0 + i, c0 + j) - mx;
                        let dy = y.get(r0 + i, c0 + j) - my;
                        vx += weight(i, j) * dx * dx;
                        vy += weight(i, j) * dy * dy;
                        cov += weight(i, j) * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn nmse_examples_and_asymmetry() {
        let x = random_image(1, 8);
        let two = x.map(|v| 2.0 * v).unwrap();
        let zero = Image::zeros(8, 8).unwrap();
        assert_eq!(nmse(&x, &x).unwrap(), 0.0);
        assert_eq!(nmse(&x, &two).unwrap(), 1.0);
        assert_eq!(nmse(&x, &zero).unwrap(), 1.0);
        assert_eq!(nmse(&two, &x).unwrap(), 0.25);
        assert!(nmse(&zero, &x).is_err());
    }

    #[test]
    fn psnr_examples() {
        let x = random_image(2, 8);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);

        let unit = Image::from_fn(4, 4, |r, c| ((r * 4 + c) as f64) / 15.0).unwrap();
        let shifted = unit.map(|v| v + 0.1).unwrap();
        assert!((psnr(&unit, &shifted).unwrap() - 20.0).abs() < 1e-9);

        let wide = unit.map(|v| 2.0 * v).unwrap();
        let off = wide.map(|v| v - 0.2).unwrap();
        assert!((psnr(&wide, &off).unwrap() - 20.0).abs() < 1e-9);

        let flat = Image::new(4, 4, vec![1.0; 16]).unwrap();
        assert!(psnr(&flat, &unit).is_err());
        assert!(psnr(&unit, &Image::zeros(8, 8).unwrap()).is_err());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let x = random_image(3, 16);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);

        // checkerboard windows are zero-mean up to ~1e-10 under the Gaussian taps
        let board =
            Image::from_fn(16, 16, |r, c| if (r + c) % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        let neg = board.map(|v| -v).unwrap();
        assert!(ssim(&board, &neg).unwrap() < -0.99);

        assert!(ssim(&Image::zeros(8, 8).unwrap(), &Image::zeros(8, 8).unwrap()).is_err());
    }

    #[test]
    fn ssim_matches_naive_windows() {
        for seed in 0..5 {
            let x = random_image(10 + seed, 16);
            let y = random_image(20 + seed, 16);
            assert!((ssim(&x, &y).unwrap() - naive_ssim(&x, &y)).abs() < 1e-8);
        }
    }

    #[test]
    fn ssim_constant_offset_is_luminance_only() {
        let x = random_image(4, 16);
        let c = 0.3;
        let y = x.map(|v| v + c).unwrap();
        let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        let c1 = (SSIM_K1 * (x.max() - x.min())).powi(2);
        let mut acc = 0.0;
        for r0 in 0..6 {
            for c0 in 0..6 {
                let mut mu = 0.0;
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        mu += taps[i] * taps[j] * x.get(r0 + i, c0 + j);
                    }
                }
                acc += (2.0 * mu * (mu + c) + c1) / (mu * mu + (mu + c) * (mu + c) + c1);
            }
        }
        let expected = acc / 36.0;
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-10);
        assert!((naive_ssim(&x, &y) - expected).abs() < 1e-10);
    }

    #[test]
    fn communication_counts() {
        let large = ModelSize {
            prompt_scalars: 8 * 20 * 256,
            backbone_scalars: 1_000_000,
        };
        let ledger = count_communication(CommMode::PromptOnly, large);
        assert_eq!(ledger.per_round_scalars_up, 40_960);
        assert_eq!(ledger.per_round_scalars_down, 40_960);
        assert_eq!(ledger.total_scalars, 0);

        let mut full = count_communication(CommMode::FullFinetune, large);
        assert_eq!(full.per_round_scalars_up, 1_040_960);
        full.record_round(3);
        full.record_round(3);
        assert_eq!(full.total_scalars, 2 * 3 * 2 * 1_040_960);
        assert_eq!(full.rounds, 2);
    }

    #[test]
    fn forgetting_examples() {
        let improving = vec![vec![1.0, 2.0], vec![0.5, 1.0], vec![0.2, 0.9]];
        assert_eq!(forgetting_gap(&improving).unwrap(), 0.0);
        let regress = vec![vec![1.0], vec![0.5], vec![0.8]];
        assert!((forgetting_gap(&regress).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(forgetting_gap(&[vec![0.4], vec![0.4]]).unwrap(), 0.0);
        assert!(forgetting_gap(&[]).is_err());
        assert!(forgetting_gap(&[vec![1.0]]).is_err());
    }
}
