//! Weight initialization: semi-orthogonal matrices via Householder QR, and
//! plain Gaussian draws.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// How weight matrices are drawn. Conv kernels are flattened to
/// `(F, C*kh*kw)` before orthogonalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Semi-orthogonal with the given gain: the smaller Gram matrix equals
    /// gain²·I.
    Orthogonal { gain: f64 },
    /// I.i.d. normal entries with the given standard deviation.
    Normal { std: f64 },
}

impl InitScheme {
    pub fn label(&self) -> String {
        match self {
            InitScheme::Orthogonal { gain } => format!("orthogonal({gain})"),
            InitScheme::Normal { std } => format!("normal({std})"),
        }
    }
}

/// Draws a `rows x cols` weight matrix under the scheme.
pub fn init_matrix(rows: usize, cols: usize, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Tensor {
    let data = match scheme {
        InitScheme::Orthogonal { gain } => orthogonal(rows, cols, gain, rng),
        InitScheme::Normal { std } => (0..rows * cols)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect(),
    };
    Tensor::from_vec(vec![rows, cols], data).expect("init matrix")
}

/// Draws an `[f, c, kh, kw]` conv kernel; orthogonalization happens on the
/// `(f, c*kh*kw)` flattening.
pub fn init_conv_kernel(
    f: usize,
    c: usize,
    kh: usize,
    kw: usize,
    scheme: InitScheme,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    init_matrix(f, c * kh * kw, scheme, rng)
        .reshaped(vec![f, c, kh, kw])
        .expect("conv kernel reshape")
}

/// Gain-scaled semi-orthogonal matrix: orthonormal columns when
/// rows >= cols, orthonormal rows otherwise. Sign-corrected so the
/// distribution over orthogonal matrices is uniform.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let transpose_out = rows < cols;
    let (n, m) = if transpose_out { (cols, rows) } else { (rows, cols) };
    // Householder QR of a Gaussian n x m matrix, n >= m.
    let mut a: Vec<f64> = (0..n * m)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let mut householders: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut diag_sign = vec![1.0f64; m];
    for j in 0..m {
        let mut norm_sq = 0.0;
        for i in j..n {
            norm_sq += a[i * m + j] * a[i * m + j];
        }
        let norm = norm_sq.sqrt();
        let ajj = a[j * m + j];
        // alpha = R[j][j]; choose the stable sign.
        let alpha = if ajj >= 0.0 { -norm } else { norm };
        diag_sign[j] = if alpha >= 0.0 { 1.0 } else { -1.0 };
        let mut v: Vec<f64> = (j..n).map(|i| a[i * m + j]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            for x in v.iter_mut() {
                *x /= vnorm;
            }
            // Reflect the trailing block of A.
            for col in j..m {
                let mut dot = 0.0;
                for (vi, i) in (j..n).enumerate() {
                    dot += v[vi] * a[i * m + col];
                }
                for (vi, i) in (j..n).enumerate() {
                    a[i * m + col] -= 2.0 * dot * v[vi];
                }
            }
        }
        householders.push(v);
    }
    // Q = H_0 .. H_{m-1} applied to the thin identity.
    let mut q = vec![0.0f64; n * m];
    for j in 0..m {
        q[j * m + j] = 1.0;
    }
    for j in (0..m).rev() {
        let v = &householders[j];
        if v.iter().all(|&x| x == 0.0) {
            continue;
        }
        for col in 0..m {
            let mut dot = 0.0;
            for (vi, i) in (j..n).enumerate() {
                dot += v[vi] * q[i * m + col];
            }
            for (vi, i) in (j..n).enumerate() {
                q[i * m + col] -= 2.0 * dot * v[vi];
            }
        }
    }
    // Make the factorization canonical (R diagonal positive) and scale.
    for col in 0..m {
        let s = gain * diag_sign[col];
        for i in 0..n {
            q[i * m + col] *= s;
        }
    }
    if transpose_out {
        crate::tensor::kernels::transpose(&q, n, m)
    } else {
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_gram_identity_tall() {
        // W: [n, m], n >= m: WᵀW = gain² I to 1e-10
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gain = 0.37;
        let (n, m) = (20, 7);
        let w = init_matrix(n, m, InitScheme::Orthogonal { gain }, &mut rng);
        for i in 0..m {
            for j in 0..m {
                let mut dot = 0.0;
                for r in 0..n {
                    dot += w.data()[r * m + i] * w.data()[r * m + j];
                }
                let expect = if i == j { gain * gain } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "({i},{j}): {dot}");
            }
        }
    }

    #[test]
    fn orthogonal_gram_identity_wide() {
        // rows < cols: orthonormal rows, W·Wᵀ = gain² I
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gain = 2.0;
        let (n, m) = (3, 11);
        let w = init_matrix(n, m, InitScheme::Orthogonal { gain }, &mut rng);
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for c in 0..m {
                    dot += w.data()[i * m + c] * w.data()[j * m + c];
                }
                let expect = if i == j { gain * gain } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "({i},{j}): {dot}");
            }
        }
    }

    #[test]
    fn conv_kernel_flattened_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = init_conv_kernel(4, 3, 3, 3, InitScheme::Orthogonal { gain: 0.01 }, &mut rng);
        assert_eq!(w.shape(), &[4, 3, 3, 3]);
        // rows of the (4, 27) flattening are orthogonal with norm gain
        let flat = w.data();
        for i in 0..4 {
            for j in 0..4 {
                let mut dot = 0.0;
                for c in 0..27 {
                    dot += flat[i * 27 + c] * flat[j * 27 + c];
                }
                let expect = if i == j { 1e-4 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normal_std_is_respected() {
        // sample std within 5% of 5.0 for >= 1e4 entries
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = init_matrix(120, 100, InitScheme::Normal { std: 5.0 }, &mut rng);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((std - 5.0).abs() / 5.0 < 0.05, "sample std {std}");
    }

    #[test]
    fn same_seed_same_weights() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            init_matrix(8, 8, InitScheme::Orthogonal { gain: 1.0 }, &mut rng)
        };
        assert_eq!(mk().data(), mk().data());
    }
}
