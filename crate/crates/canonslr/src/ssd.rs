//! Sequence-level soft-target distillation from a frozen frontal-view
//! teacher into the multi-view student.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::numutil::softmax_rows_with_temperature;
use crate::synthviews::ViewName;

/// Distillation hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct DistillConfig {
    /// Softening temperature for both logit streams.
    pub temperature: f64,
    /// Loss weight applied by the trainer.
    pub weight: f64,
    /// Canonical anchor view; samples from it receive no distillation.
    pub frontal_view: ViewName,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 8.0,
            weight: 40.0,
            frontal_view: ViewName::Front,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("distillation temperature must be positive"));
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::invalid("distillation weight must be non-negative"));
        }
        Ok(())
    }
}

/// Resamples a [T, C] logit sequence to `target_len` frames by per-class
/// linear interpolation on the raw logits, endpoints to endpoints. A single
/// input frame extends as a constant.
pub fn align_temporal(teacher_logits: &ArrayView2<f64>, target_len: usize) -> Result<Array2<f64>> {
    if target_len < 1 {
        return Err(Error::invalid("alignment target length must be at least 1"));
    }
    let (t_in, classes) = teacher_logits.dim();
    if t_in < 1 {
        return Err(Error::invalid("teacher logit sequence must not be empty"));
    }
    let mut out = Array2::<f64>::zeros((target_len, classes));
    for ti in 0..target_len {
        let pos = if target_len == 1 || t_in == 1 {
            0.0
        } else {
            ti as f64 * (t_in - 1) as f64 / (target_len - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t_in - 1);
        let frac = pos - lo as f64;
        for c in 0..classes {
            out[[ti, c]] =
                (1.0 - frac) * teacher_logits[[lo, c]] + frac * teacher_logits[[hi, c]];
        }
    }
    Ok(out)
}

/// Temperature-scaled distillation loss with its gradient to the student.
///
/// Both streams are softened per frame at `cfg.temperature`; the KL
/// divergence from teacher to student is summed over classes, averaged over
/// frames, and scaled by temperature squared. Frontal-view samples return
/// zero loss and zero gradient. The teacher side is treated as constant.
pub fn ssd_loss_grad(
    teacher_aligned: &ArrayView2<f64>,
    student_logits: &ArrayView2<f64>,
    view: ViewName,
    cfg: &DistillConfig,
) -> Result<(f64, Array2<f64>)> {
    cfg.validate()?;
    if teacher_aligned.dim() != student_logits.dim() {
        return Err(Error::invalid(format!(
            "teacher shape {:?} does not match student shape {:?}",
            teacher_aligned.dim(),
            student_logits.dim()
        )));
    }
    let (t_len, _classes) = student_logits.dim();
    if t_len == 0 {
        return Err(Error::invalid("logit sequences must not be empty"));
    }
    if view == cfg.frontal_view {
        return Ok((0.0, Array2::zeros(student_logits.raw_dim())));
    }

    let td = cfg.temperature;
    let q = softmax_rows_with_temperature(teacher_aligned, td);
    let p = softmax_rows_with_temperature(student_logits, td);

    let mut loss = 0.0;
    for t in 0..t_len {
        for (qv, pv) in q.row(t).iter().zip(p.row(t).iter()) {
            if *qv > 0.0 {
                loss += qv * (qv.ln() - pv.ln());
            }
        }
    }
    loss *= td * td / t_len as f64;

    // d/dz of T^2 * mean_t KL(q || softmax(z/T)) is (T / t_len) * (p - q).
    let scale = td / t_len as f64;
    let grad = (&p - &q).mapv(|v| v * scale);
    Ok((loss.max(0.0), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, grad_rel_err};
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(t: f64) -> DistillConfig {
        DistillConfig {
            temperature: t,
            weight: 40.0,
            frontal_view: ViewName::Front,
        }
    }

    fn random_logits(t: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, c), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn identity_resampling_returns_input() {
        let x = random_logits(4, 5, 1);
        let y = align_temporal(&x.view(), 4).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn single_frame_extends_as_constant() {
        let x = random_logits(1, 3, 2);
        let y = align_temporal(&x.view(), 3).unwrap();
        for t in 0..3 {
            for c in 0..3 {
                assert_eq!(y[[t, c]], x[[0, c]]);
            }
        }
    }

    #[test]
    fn linear_interpolation_hits_midpoint() {
        let x = arr2(&[[0.0], [2.0]]);
        let y = align_temporal(&x.view(), 3).unwrap();
        assert_eq!(y.column(0).to_vec(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn downsampling_keeps_endpoints() {
        let x = arr2(&[[0.0], [1.0], [2.0], [3.0], [4.0]]);
        let y = align_temporal(&x.view(), 2).unwrap();
        assert_eq!(y[[0, 0]], 0.0);
        assert_eq!(y[[1, 0]], 4.0);
    }

    #[test]
    fn zero_target_length_rejected() {
        let x = random_logits(4, 3, 3);
        assert!(align_temporal(&x.view(), 0).is_err());
    }

    #[test]
    fn identical_streams_give_zero_loss() {
        let x = random_logits(5, 4, 4);
        let (loss, grad) = ssd_loss_grad(&x.view(), &x.view(), ViewName::R45, &cfg(8.0)).unwrap();
        assert!(loss.abs() < 1e-12);
        for g in grad.iter() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn frontal_view_is_gated_off() {
        let teacher = random_logits(5, 4, 5);
        let student = random_logits(5, 4, 6);
        let (loss, grad) =
            ssd_loss_grad(&teacher.view(), &student.view(), ViewName::Front, &cfg(8.0)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));

        let (loss_nf, _) =
            ssd_loss_grad(&teacher.view(), &student.view(), ViewName::L60, &cfg(8.0)).unwrap();
        assert!(loss_nf > 0.0);
    }

    #[test]
    fn hand_computed_kl_oracle() {
        // teacher softmax (0.8, 0.2), student (0.5, 0.5), T_d = 1:
        // KL = 0.8 ln(0.8/0.5) + 0.2 ln(0.2/0.5) = 0.19274...
        let teacher = arr2(&[[0.8f64.ln(), 0.2f64.ln()]]);
        let student = arr2(&[[0.0, 0.0]]);
        let (loss, _) =
            ssd_loss_grad(&teacher.view(), &student.view(), ViewName::R90, &cfg(1.0)).unwrap();
        let oracle = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 0.19274).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let teacher = random_logits(4, 3, 7);
        let student = random_logits(5, 3, 8);
        assert!(ssd_loss_grad(&teacher.view(), &student.view(), ViewName::R45, &cfg(8.0)).is_err());
        let student = random_logits(4, 4, 9);
        assert!(ssd_loss_grad(&teacher.view(), &student.view(), ViewName::R45, &cfg(8.0)).is_err());
    }

    #[test]
    fn loss_non_negative_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..20 {
            let teacher = random_logits(4, 5, 100 + seed);
            let student = random_logits(4, 5, 200 + seed);
            let (loss, _) =
                ssd_loss_grad(&teacher.view(), &student.view(), ViewName::U30, &cfg(8.0)).unwrap();
            assert!(loss >= 0.0);

            let shift_t: f64 = rng.gen_range(-5.0..5.0);
            let shift_s: f64 = rng.gen_range(-5.0..5.0);
            let teacher_shifted = teacher.mapv(|v| v + shift_t);
            let student_shifted = student.mapv(|v| v + shift_s);
            let (loss_shifted, _) = ssd_loss_grad(
                &teacher_shifted.view(),
                &student_shifted.view(),
                ViewName::U30,
                &cfg(8.0),
            )
            .unwrap();
            assert!(
                (loss - loss_shifted).abs() < 1e-9,
                "shift changed loss: {loss} vs {loss_shifted}"
            );
        }
    }

    #[test]
    fn student_gradient_matches_finite_differences() {
        let teacher = random_logits(3, 4, 11);
        let student = random_logits(3, 4, 12);
        for td in [1.0, 8.0] {
            let (_, grad) =
                ssd_loss_grad(&teacher.view(), &student.view(), ViewName::D30, &cfg(td)).unwrap();
            let mut flat: Vec<f64> = student.iter().copied().collect();
            let fd = finite_difference(&mut flat, 1e-6, |p| {
                let s = Array2::from_shape_vec((3, 4), p.to_vec()).unwrap();
                ssd_loss_grad(&teacher.view(), &s.view(), ViewName::D30, &cfg(td))
                    .unwrap()
                    .0
            });
            for (a, f) in grad.iter().zip(fd.iter()) {
                assert!(grad_rel_err(*a, *f) < 1e-5, "T_d={td}: analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn high_temperature_loss_approaches_finite_limit() {
        let teacher = random_logits(4, 5, 13);
        let student = random_logits(4, 5, 14);
        let losses: Vec<f64> = [1.0, 10.0, 100.0, 1000.0]
            .iter()
            .map(|&td| {
                let (loss, _) =
                    ssd_loss_grad(&teacher.view(), &student.view(), ViewName::L30, &cfg(td))
                        .unwrap();
                assert!(loss.is_finite() && loss >= 0.0);
                loss
            })
            .collect();
        // The temperature-squared scaling balances the vanishing KL, so the
        // loss settles instead of exploding or dying.
        let l100 = losses[2];
        let l1000 = losses[3];
        assert!(l1000 > 0.0);
        assert!((l100 - l1000).abs() / l1000 < 0.1, "no limit: {losses:?}");
    }

    #[test]
    fn invalid_config_rejected() {
        let x = random_logits(2, 3, 15);
        let bad = DistillConfig {
            temperature: 0.0,
            weight: 40.0,
            frontal_view: ViewName::Front,
        };
        assert!(ssd_loss_grad(&x.view(), &x.view(), ViewName::R45, &bad).is_err());
        let bad = DistillConfig {
            temperature: 8.0,
            weight: -1.0,
            frontal_view: ViewName::Front,
        };
        assert!(ssd_loss_grad(&x.view(), &x.view(), ViewName::R45, &bad).is_err());
    }
}
