use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Orthogonal columns/rows scaled by `gain`.
    Orthogonal(f64),
    Zeros,
}

impl Init {
    pub fn tensor<R: Rng + ?Sized>(self, rows: usize, cols: usize, rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(&[rows, cols]),
            Init::Orthogonal(gain) => orthogonal(rows, cols, gain, rng),
        }
    }
}

/// `rows x cols` matrix with orthonormal rows (if `rows <= cols`) or columns.
///
/// Gaussian columns are orthonormalized with modified Gram-Schmidt; the
/// result matches QR of a Gaussian matrix up to column signs.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    let (tall, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // `short` orthonormal vectors of length `tall`.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..tall).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            if rows >= cols {
                data[i * cols + j] = gain * x;
            } else {
                data[j * cols + i] = gain * x;
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_gram_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (r, c) in [(6, 4), (4, 6), (5, 5)] {
            let w = orthogonal(r, c, 1.0, &mut rng);
            let d = w.data();
            // Gram matrix over the short side.
            let (short, tall) = (r.min(c), r.max(c));
            for a in 0..short {
                for b in 0..short {
                    let dot: f64 = (0..tall)
                        .map(|k| {
                            if r >= c {
                                d[k * c + a] * d[k * c + b]
                            } else {
                                d[a * c + k] * d[b * c + k]
                            }
                        })
                        .sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10);
                }
            }
        }
    }
}
