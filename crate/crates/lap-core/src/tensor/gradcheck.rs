//! Central-difference gradient checking.
//!
//! Compares tape gradients against (f(θ+h) - f(θ-h)) / 2h coordinate by
//! coordinate. Above a coordinate-count threshold a seeded random subset is
//! probed instead of the full sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape};
use super::{Tensor, TensorError};

/// Settings for [`grad_check`]. `subset_threshold` is the coordinate count
/// above which only `subset_size` seeded random coordinates are probed.
#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    pub h: f64,
    pub subset_threshold: usize,
    pub subset_size: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            h: 1e-5,
            subset_threshold: 10_000,
            subset_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over probed coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub coords_total: usize,
}

/// Checks tape gradients of `build` against central finite differences.
///
/// `build` receives a fresh tape and one parameter leaf per entry of
/// `params`, in order, and returns the scalar loss node.
pub fn grad_check<F>(
    build: F,
    params: &[Tensor],
    settings: &GradCheckSettings,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    if settings.h <= 0.0 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("h must be positive, got {}", settings.h),
        });
    }
    // FD probes register leaves as constants so their tapes skip backward
    // bookkeeping entirely.
    let forward_loss = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).len() != 1 {
            return Err(TensorError::Invalid {
                op: "grad_check",
                msg: "build must return a scalar loss".into(),
            });
        }
        Ok(tape.value(loss).item())
    };

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).len() != 1 {
            return Err(TensorError::Invalid {
                op: "grad_check",
                msg: "build must return a scalar loss".into(),
            });
        }
        let grads = tape.backward(loss)?;
        ids.iter()
            .map(|id| grads.get(*id).cloned().expect("param leaf gradient"))
            .collect()
    };

    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            coords.push((pi, j));
        }
    }
    if total > settings.subset_threshold {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        coords.shuffle(&mut rng);
        coords.truncate(settings.subset_size);
    }

    let mut scratch: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for &(pi, j) in &coords {
        let orig = scratch[pi].data()[j];
        scratch[pi].data_mut()[j] = orig + settings.h;
        let loss_plus = forward_loss(&scratch)?;
        scratch[pi].data_mut()[j] = orig - settings.h;
        let loss_minus = forward_loss(&scratch)?;
        scratch[pi].data_mut()[j] = orig;
        let g_fd = (loss_plus - loss_minus) / (2.0 * settings.h);
        let g_ad = analytic[pi].data()[j];
        let rel = (g_ad - g_fd).abs() / (1e-8f64).max(g_ad.abs() + g_fd.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: coords.len(),
        coords_total: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn affine_network_passes_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_tensor(vec![4, 3], &mut rng);
        let labels = vec![0usize, 1, 0, 1];
        let params = vec![
            random_tensor(vec![3, 2], &mut rng),
            random_tensor(vec![2], &mut rng),
        ];
        let report = grad_check(
            |tape, ids| {
                let xv = tape.leaf(x.clone());
                let y = tape.affine(xv, ids[0], ids[1])?;
                tape.softmax_cross_entropy(y, &labels)
            },
            &params,
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{}", report.max_rel_err);
        assert_eq!(report.coords_checked, 8);
    }

    #[test]
    fn relu_network_passes_at_kink_free_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(vec![4, 3], &mut rng);
        let labels = vec![1usize, 0, 1, 0];
        let params = vec![
            random_tensor(vec![3, 4], &mut rng),
            random_tensor(vec![4], &mut rng),
            random_tensor(vec![4, 2], &mut rng),
            random_tensor(vec![2], &mut rng),
        ];
        let report = grad_check(
            |tape, ids| {
                let xv = tape.leaf(x.clone());
                let h = tape.affine(xv, ids[0], ids[1])?;
                let h = tape.relu(h);
                let y = tape.affine(h, ids[2], ids[3])?;
                tape.softmax_cross_entropy(y, &labels)
            },
            &params,
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
    }

    #[test]
    fn zero_function_reports_zero_error()  {
        let params = vec![Tensor::zeros(vec![3])];
        let report = grad_check(
            |tape, ids| {
                let s = tape.scale(ids[0], 0.0)?;
                tape.mean_sq_norm(s)
            },
            &params,
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn rejects_non_positive_h() {
        let params = vec![Tensor::zeros(vec![1])];
        let settings = GradCheckSettings {
            h: 0.0,
            ..Default::default()
        };
        assert!(grad_check(|tape, ids| tape.mean_sq_norm(ids[0]), &params, &settings).is_err());
    }
}
