//! Cartesian undersampling forward model: `x = F⁻¹(M ⊙ F(y) + ε)`.

mod fft;

use num_complex::Complex64;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use fft::{fft_in_place, Direction};

/// Default width fraction of always-sampled low-frequency columns.
pub const DEFAULT_CENTER_FRACTION: f64 = 0.08;

/// Real-valued image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < 4 || width < 4 {
            return Err(Error::invalid(format!(
                "images must be at least 4x4, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("image contains non-finite pixels"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn min(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.pixels
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn energy(&self) -> f64 {
        self.pixels.iter().map(|p| p * p).sum()
    }

    /// Pixel-wise `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Image, b: f64) -> Result<Image> {
        if self.shape() != other.shape() {
            return Err(Error::invalid("image shapes differ"));
        }
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Image::new(self.height, self.width, pixels)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::new(
            self.height,
            self.width,
            self.pixels.iter().map(|&p| f(p)).collect(),
        )
    }
}

/// Complex `H x W` grid, row-major. Holds k-space or a complex image.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: Complex64) {
        self.data[row * self.width + col] = v;
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Real part as an image.
    pub fn real(&self) -> Result<Image> {
        Image::new(
            self.height,
            self.width,
            self.data.iter().map(|z| z.re).collect(),
        )
    }

    /// Magnitude as an image.
    pub fn magnitude(&self) -> Result<Image> {
        Image::new(
            self.height,
            self.width,
            self.data.iter().map(|z| z.norm()).collect(),
        )
    }
}

fn check_pow2(height: usize, width: usize) -> Result<()> {
    if !height.is_power_of_two() || !width.is_power_of_two() {
        return Err(Error::invalid(format!(
            "FFT sizes must be powers of two, got {height}x{width}"
        )));
    }
    Ok(())
}

fn transform_2d(grid: &mut ComplexGrid, dir: Direction) {
    let (h, w) = (grid.height, grid.width);
    for row in grid.data.chunks_exact_mut(w) {
        fft_in_place(row, dir);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for (r, z) in column.iter_mut().enumerate() {
            *z = grid.data[r * w + c];
        }
        fft_in_place(&mut column, dir);
        for (r, z) in column.iter().enumerate() {
            grid.data[r * w + c] = *z;
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for z in &mut grid.data {
        *z *= scale;
    }
}

/// Unitary 2D DFT of a real image.
pub fn dft2(img: &Image) -> Result<ComplexGrid> {
    check_pow2(img.height, img.width)?;
    let mut grid = ComplexGrid {
        height: img.height,
        width: img.width,
        data: img.pixels.iter().map(|&p| Complex64::new(p, 0.0)).collect(),
    };
    transform_2d(&mut grid, Direction::Forward);
    Ok(grid)
}

/// Unitary inverse 2D DFT.
pub fn idft2(k: &ComplexGrid) -> Result<ComplexGrid> {
    check_pow2(k.height, k.width)?;
    if k.data.len() != k.height * k.width {
        return Err(Error::invalid("k-space buffer does not match its shape"));
    }
    let mut grid = k.clone();
    transform_2d(&mut grid, Direction::Inverse);
    Ok(grid)
}

/// 1D Cartesian sampling pattern: whole k-space columns are kept or dropped.
///
/// Columns are indexed in centered k-space: mask column `c` addresses DFT
/// column `(c + W/2) mod W`, so the DC column sits at `W/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub columns_kept: Vec<bool>,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub seed: u64,
}

impl SamplingMask {
    pub fn width(&self) -> usize {
        self.columns_kept.len()
    }

    pub fn kept_count(&self) -> usize {
        self.columns_kept.iter().filter(|&&k| k).count()
    }

    /// Keeps every column.
    pub fn full(width: usize) -> Self {
        Self {
            columns_kept: vec![true; width],
            acceleration: 1.0,
            center_fraction: 1.0,
            seed: 0,
        }
    }
}

/// Random 1D mask with a fully sampled low-frequency band.
///
/// The central `floor(center_fraction·W)` columns are always kept; the rest
/// of the `round(W/acceleration)` budget is drawn uniformly without
/// replacement from the remaining columns.
pub fn make_mask(
    width: usize,
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if width == 0 {
        return Err(Error::invalid("mask width must be positive"));
    }
    if !acceleration.is_finite() || acceleration <= 1.0 {
        return Err(Error::invalid(format!(
            "acceleration must exceed 1, got {acceleration}"
        )));
    }
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "center fraction must lie in (0, 1), got {center_fraction}"
        )));
    }
    let center = (center_fraction * width as f64).floor() as usize;
    let total = ((width as f64 / acceleration).round() as usize).min(width);
    if total < center {
        return Err(Error::invalid(format!(
            "budget of {total} columns cannot cover the {center} central columns"
        )));
    }

    let start = width / 2 - center / 2;
    let mut kept = vec![false; width];
    for k in kept.iter_mut().skip(start).take(center) {
        *k = true;
    }
    let others: Vec<usize> = (0..width).filter(|&c| !kept[c]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, others.len(), total - center) {
        kept[others[i]] = true;
    }

    Ok(SamplingMask {
        columns_kept: kept,
        acceleration,
        center_fraction,
        seed,
    })
}

/// Masks k-space, adds complex Gaussian noise on the sampled entries and
/// returns the real part of the zero-filled reconstruction.
pub fn undersample(y: &Image, mask: &SamplingMask, noise_std: f64, seed: u64) -> Result<Image> {
    undersample_complex(y, mask, noise_std, seed)?.real()
}

/// Same pipeline as [`undersample`], keeping the complex result.
pub fn undersample_complex(
    y: &Image,
    mask: &SamplingMask,
    noise_std: f64,
    seed: u64,
) -> Result<ComplexGrid> {
    if !noise_std.is_finite() || noise_std < 0.0 {
        return Err(Error::invalid(format!(
            "noise std must be finite and non-negative, got {noise_std}"
        )));
    }
    if mask.width() != y.width() {
        return Err(Error::invalid(format!(
            "mask width {} does not match image width {}",
            mask.width(),
            y.width()
        )));
    }
    let mut k = dft2(y)?;
    apply_mask(&mut k, mask);
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std)
            .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in 0..k.height {
            for c in 0..k.width {
                if mask.columns_kept[centered_column(c, k.width)] {
                    let eps = Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
                    let v = k.get(r, c) + eps;
                    k.set(r, c, v);
                }
            }
        }
    }
    idft2(&k)
}

/// Mask column of DFT column `c`, and the reverse map for even `width`.
fn centered_column(c: usize, width: usize) -> usize {
    (c + width / 2) % width
}

/// Zeroes every dropped column in place.
pub fn apply_mask(k: &mut ComplexGrid, mask: &SamplingMask) {
    for r in 0..k.height {
        for c in 0..k.width {
            if !mask.columns_kept[centered_column(c, k.width)] {
                k.set(r, c, Complex64::new(0.0, 0.0));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn max_abs_diff(a: &Image, b: &Image) -> f64 {
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn image_validation() {
        assert!(Image::zeros(3, 8).is_err());
        assert!(Image::new(4, 4, vec![0.0; 15]).is_err());
        assert!(Image::new(4, 4, vec![f64::INFINITY; 16]).is_err());
    }

    #[test]
    fn constant_image_lands_on_dc() {
        let c = 0.75;
        let img = Image::new(4, 4, vec![c; 16]).unwrap();
        let k = dft2(&img).unwrap();
        assert!((k.get(0, 0) - Complex64::new(4.0 * c, 0.0)).norm() < 1e-12);
        for (i, z) in k.data.iter().enumerate().skip(1) {
            assert!(z.norm() < 1e-12, "bin {i}");
        }
    }

    #[test]
    fn dc_bin_inverts_to_constant() {
        let c = -1.25;
        let mut k = ComplexGrid::zeros(4, 4);
        k.set(0, 0, Complex64::new(4.0 * c, 0.0));
        let img = idft2(&k).unwrap().real().unwrap();
        assert!(img.pixels().iter().all(|p| (p - c).abs() < 1e-12));
    }

    #[test]
    fn zeros_stay_zero() {
        let z = Image::zeros(8, 8).unwrap();
        assert!(dft2(&z).unwrap().data.iter().all(|v| v.norm() == 0.0));
        let back = idft2(&ComplexGrid::zeros(8, 8)).unwrap();
        assert!(back.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn non_power_of_two_rejected() {
        let img = Image::zeros(6, 8).unwrap();
        assert!(matches!(dft2(&img), Err(Error::InvalidInput(_))));
        assert!(idft2(&ComplexGrid::zeros(8, 12)).is_err());
    }

    #[test]
    fn roundtrip_and_parseval() {
        let img = random_image(5, 8, 8);
        let k = dft2(&img).unwrap();
        assert!((img.energy() - k.energy()).abs() < 1e-9);
        let back = idft2(&k).unwrap();
        assert!(max_abs_diff(&back.real().unwrap(), &img) < 1e-10);
        assert!(back.data.iter().all(|z| z.im.abs() < 1e-10));

        let rect = random_image(6, 16, 4);
        let back = idft2(&dft2(&rect).unwrap()).unwrap().real().unwrap();
        assert!(max_abs_diff(&back, &rect) < 1e-10);
    }

    #[test]
    fn mask_counts() {
        let m = make_mask(16, 2.0, 0.25, 1).unwrap();
        assert_eq!(m.kept_count(), 8);
        assert!(m.columns_kept[6..10].iter().all(|&k| k));

        let all = make_mask(16, 1.0 + 1e-9, 0.08, 1).unwrap();
        assert_eq!(all.kept_count(), 16);

        assert_eq!(
            make_mask(32, 3.0, 0.08, 9).unwrap(),
            make_mask(32, 3.0, 0.08, 9).unwrap()
        );
        assert_ne!(
            make_mask(32, 3.0, 0.08, 9).unwrap().columns_kept,
            make_mask(32, 3.0, 0.08, 10).unwrap().columns_kept
        );
    }

    #[test]
    fn mask_errors() {
        assert!(make_mask(16, 1.0, 0.1, 0).is_err());
        assert!(make_mask(16, 2.0, 0.0, 0).is_err());
        assert!(make_mask(16, 2.0, 1.0, 0).is_err());
        // 2 columns of budget against 8 central ones
        assert!(make_mask(16, 8.0, 0.5, 0).is_err());
    }

    #[test]
    fn full_mask_without_noise_is_identity() {
        let y = random_image(2, 16, 16);
        let x = undersample(&y, &SamplingMask::full(16), 0.0, 0).unwrap();
        assert!(max_abs_diff(&x, &y) < 1e-10);
    }

    #[test]
    fn central_band_holds_the_low_frequencies() {
        // a constant image lives entirely in the DC column
        let y = Image::from_fn(8, 8, |_, _| 0.7).unwrap();
        let mask = make_mask(8, 8.0, 0.125, 0).unwrap();
        assert_eq!(mask.kept_count(), 1);
        assert!(mask.columns_kept[4]);
        let x = undersample(&y, &mask, 0.0, 0).unwrap();
        assert!(max_abs_diff(&x, &y) < 1e-12);

        // a vertical stripe pattern at the Nyquist column is dropped
        let stripes = Image::from_fn(8, 8, |_, c| if c % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        let x = undersample(&stripes, &mask, 0.0, 0).unwrap();
        assert!(x.pixels().iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn zero_image_stays_zero() {
        let y = Image::zeros(8, 8).unwrap();
        let mask = make_mask(8, 2.0, 0.25, 4).unwrap();
        let x = undersample(&y, &mask, 0.0, 0).unwrap();
        assert!(x.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn masked_parseval() {
        let y = random_image(8, 8, 8);
        let mask = make_mask(8, 2.0, 0.25, 3).unwrap();
        let x = undersample_complex(&y, &mask, 0.0, 0).unwrap();
        let mut expected = dft2(&y).unwrap();
        apply_mask(&mut expected, &mask);
        let kx = {
            let mut g = x.clone();
            transform_2d(&mut g, Direction::Forward);
            g
        };
        assert!((kx.energy() - expected.energy()).abs() < 1e-9);
        assert!((x.energy() - expected.energy()).abs() < 1e-9);
    }

    #[test]
    fn noise_is_seeded_and_rejects_negative() {
        let y = random_image(1, 8, 8);
        let mask = make_mask(8, 2.0, 0.25, 3).unwrap();
        let a = undersample(&y, &mask, 0.05, 77).unwrap();
        let b = undersample(&y, &mask, 0.05, 77).unwrap();
        let c = undersample(&y, &mask, 0.05, 78).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(undersample(&y, &mask, -0.1, 0).is_err());
        assert!(undersample(&y, &make_mask(16, 2.0, 0.25, 3).unwrap(), 0.0, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn undersampling_is_linear_and_idempotent(s1 in any::<u64>(), s2 in any::<u64>(), ms in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let y1 = random_image(s1, 8, 16);
            let y2 = random_image(s2, 8, 16);
            let mask = make_mask(16, 3.0, 0.125, ms).unwrap();
            let lhs = undersample(&y1.combine(a, &y2, b).unwrap(), &mask, 0.0, 0).unwrap();
            let rhs = undersample(&y1, &mask, 0.0, 0).unwrap()
                .combine(a, &undersample(&y2, &mask, 0.0, 0).unwrap(), b).unwrap();
            prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-10);

            // the real part drops the imaginary leakage, so idempotence holds
            // for the complex pipeline
            let once = undersample_complex(&y1, &mask, 0.0, 0).unwrap();
            let mut k = once.clone();
            transform_2d(&mut k, Direction::Forward);
            apply_mask(&mut k, &mask);
            let twice = idft2(&k).unwrap();
            let err = once.data.iter().zip(&twice.data).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
            prop_assert!(err < 1e-10);
        }

        #[test]
        fn parseval_random(seed in any::<u64>()) {
            let img = random_image(seed, 16, 8);
            let k = dft2(&img).unwrap();
            prop_assert!((img.energy() - k.energy()).abs() < 1e-9);
        }
    }
}
