//! In-place iterative radix-2 FFT on power-of-two lengths.

use std::f64::consts::PI;

use num_complex::Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    Forward,
    Inverse,
}

/// Unnormalized transform: the forward kernel is `exp(-2πi jk/n)`.
pub(crate) fn fft_in_place(buf: &mut [Complex64], dir: Direction) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }

    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }

    let sign = match dir {
        Direction::Forward => -1.0,
        Direction::Inverse => 1.0,
    };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        // twiddles evaluated directly, not by repeated multiplication
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| {
                let (s, c) = (sign * 2.0 * PI * k as f64 / len as f64).sin_cos();
                Complex64::new(c, s)
            })
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(input: &[Complex64]) -> Vec<Complex64> {
        let n = input.len();
        (0..n)
            .map(|k| {
                input
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let ang = -2.0 * PI * (j * k) as f64 / n as f64;
                        x * Complex64::new(ang.cos(), ang.sin())
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        for n in [1usize, 2, 4, 8, 16, 64] {
            let input: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()))
                .collect();
            let expected = naive_dft(&input);
            let mut got = input.clone();
            fft_in_place(&mut got, Direction::Forward);
            for (a, b) in got.iter().zip(&expected) {
                assert!((a - b).norm() < 1e-11, "n={n}");
            }
            fft_in_place(&mut got, Direction::Inverse);
            for (a, b) in got.iter().zip(&input) {
                assert!((a / n as f64 - b).norm() < 1e-12);
            }
        }
    }
}
