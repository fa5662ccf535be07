//! Rigid viewpoint rotation of skeleton sequences.

use ndarray::Array3;

use super::SkeletonSequence;

/// Composed view rotation: yaw about the vertical axis followed by pitch
/// about the horizontal axis, `R = R_y(yaw) * R_x(pitch)`.
///
/// With column vectors `(x, y, z)`:
/// `R_y = [[cos a, 0, sin a], [0, 1, 0], [-sin a, 0, cos a]]` and
/// `R_x = [[1, 0, 0], [0, cos b, -sin b], [0, sin b, cos b]]`.
pub fn rotation_matrix(yaw_deg: f64, pitch_deg: f64) -> [[f64; 3]; 3] {
    let a = yaw_deg.to_radians();
    let b = pitch_deg.to_radians();
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    [
        [ca, sa * sb, sa * cb],
        [0.0, cb, -sb],
        [-sa, ca * sb, ca * cb],
    ]
}

/// Applies the same view rotation to every joint of every frame. The motion
/// itself is untouched; only the observation angle changes, so inter-joint
/// distances are preserved and the pelvis stays at the origin.
pub fn rotate_view(skel: &SkeletonSequence, yaw_deg: f64, pitch_deg: f64) -> SkeletonSequence {
    let r = rotation_matrix(yaw_deg, pitch_deg);
    let (t, j, _) = skel.joints.dim();
    let mut out = Array3::<f64>::zeros((t, j, 3));
    for ti in 0..t {
        for ji in 0..j {
            let p = [
                skel.joints[[ti, ji, 0]],
                skel.joints[[ti, ji, 1]],
                skel.joints[[ti, ji, 2]],
            ];
            for row in 0..3 {
                out[[ti, ji, row]] = r[row][0] * p[0] + r[row][1] * p[1] + r[row][2] * p[2];
            }
        }
    }
    SkeletonSequence { joints: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn apply(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for row in 0..3 {
            out[row] = r[row][0] * p[0] + r[row][1] * p[1] + r[row][2] * p[2];
        }
        out
    }

    fn random_skeleton(t: usize, j: usize, seed: u64) -> SkeletonSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut joints = Array3::from_shape_fn((t, j, 3), |_| rng.gen_range(-1.0..1.0));
        for ti in 0..t {
            for c in 0..3 {
                joints[[ti, 0, c]] = 0.0;
            }
        }
        SkeletonSequence { joints }
    }

    #[test]
    fn identity_rotation_is_exact() {
        let skel = random_skeleton(4, 11, 1);
        let out = rotate_view(&skel, 0.0, 0.0);
        assert_eq!(out.joints, skel.joints);
    }

    #[test]
    fn yaw_90_sends_x_axis_to_negative_z() {
        let r = rotation_matrix(90.0, 0.0);
        let p = apply(&r, [1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-12);
        assert!((p[1]).abs() < 1e-12);
        assert!((p[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pitch_30_tilts_y_axis() {
        let r = rotation_matrix(0.0, 30.0);
        let p = apply(&r, [0.0, 1.0, 0.0]);
        let cos30 = 3f64.sqrt() / 2.0;
        assert!((p[0]).abs() < 1e-12);
        assert!((p[1] - cos30).abs() < 1e-9);
        assert!((p[1] - 0.86603).abs() < 1e-5);
        assert!((p[2] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rotation_matrices_are_orthonormal_with_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let yaw = rng.gen_range(-360.0..360.0);
            let pitch = rng.gen_range(-360.0..360.0);
            let r = rotation_matrix(yaw, pitch);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (dot - expect).abs() < 1e-9,
                        "R^T R deviates at ({i},{j}): {dot}"
                    );
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-9, "det(R) = {det}");
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let skel = random_skeleton(3, 11, 2);
        let out = rotate_view(&skel, 37.0, -22.0);
        let j = skel.joints.shape()[1];
        for ti in 0..3 {
            for a in 0..j {
                for b in (a + 1)..j {
                    let d0: f64 = (0..3)
                        .map(|c| {
                            let d = skel.joints[[ti, a, c]] - skel.joints[[ti, b, c]];
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt();
                    let d1: f64 = (0..3)
                        .map(|c| {
                            let d = out.joints[[ti, a, c]] - out.joints[[ti, b, c]];
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt();
                    assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn yaw_rotation_inverts_cleanly() {
        let skel = random_skeleton(2, 11, 3);
        for yaw in [30.0, 90.0, -60.0, 145.0] {
            let there = rotate_view(&skel, yaw, 0.0);
            let back = rotate_view(&there, -yaw, 0.0);
            for (a, b) in back.joints.iter().zip(skel.joints.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_matrix_applied_to_all_frames() {
        let skel = random_skeleton(5, 11, 4);
        let whole = rotate_view(&skel, 45.0, 30.0);
        for ti in 0..5 {
            let single = SkeletonSequence {
                joints: skel
                    .joints
                    .slice(ndarray::s![ti..ti + 1, .., ..])
                    .to_owned(),
            };
            let one = rotate_view(&single, 45.0, 30.0);
            for ji in 0..11 {
                for c in 0..3 {
                    assert_eq!(one.joints[[0, ji, c]], whole.joints[[ti, ji, c]]);
                }
            }
        }
    }

    #[test]
    fn pelvis_stays_at_origin() {
        let skel = random_skeleton(4, 11, 5);
        let out = rotate_view(&skel, 71.0, -13.0);
        for ti in 0..4 {
            for c in 0..3 {
                assert_eq!(out.joints[[ti, 0, c]], 0.0);
            }
        }
    }
}
