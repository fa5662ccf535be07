//! Rasterization of skeleton sequences to small RGB frames.
//!
//! Weak-perspective projection: a fixed global scale maps canonical
//! coordinates to pixels and the depth axis is dropped, surviving only as
//! the occlusion order. Joints are drawn far to near as Gaussian-shaded
//! opaque discs with per-group colors, so nearer joints overwrite farther
//! ones wherever their discs cover them (view-dependent occlusion).

use ndarray::Array4;

use super::motion::{HEAD, L_ELBOW, L_TIP, L_WRIST, R_ELBOW, R_TIP, R_WRIST};
use super::SkeletonSequence;
use crate::error::{Error, Result};

/// Image-plane scale relative to min(H, W).
const PROJECTION_SCALE: f64 = 0.36;
/// Horizontal image center as a fraction of W.
const CENTER_X_FRAC: f64 = 0.5;
/// Vertical position of the pelvis as a fraction of H.
const CENTER_Y_FRAC: f64 = 0.75;
/// Opacity floor of a blob: pixels whose Gaussian falloff is at least this
/// value belong to the blob and overwrite anything farther; fainter skirt
/// pixels leave the canvas untouched. The implied disc radius is
/// sigma * sqrt(2 ln(1/floor)).
const STAMP_FLOOR: f64 = 0.35;

fn group_color(joint: usize) -> [f64; 3] {
    match joint {
        HEAD => [0.95, 0.85, 0.3],
        L_ELBOW | L_WRIST | L_TIP => [0.2, 0.85, 0.35],
        R_ELBOW | R_WRIST | R_TIP => [0.9, 0.25, 0.25],
        _ => [0.25, 0.3, 0.85],
    }
}

fn group_sigma(joint: usize) -> f64 {
    match joint {
        HEAD => 0.07,
        L_ELBOW | L_WRIST | L_TIP | R_ELBOW | R_WRIST | R_TIP => 0.05,
        _ => 0.09,
    }
}

/// Projects one canonical-space point to (column, row, depth). Larger depth
/// is nearer to the camera.
pub(crate) fn project(p: [f64; 3], height: usize, width: usize) -> (f64, f64, f64) {
    let s = PROJECTION_SCALE * height.min(width) as f64;
    let u = CENTER_X_FRAC * width as f64 + s * p[0];
    let v = CENTER_Y_FRAC * height as f64 - s * p[1];
    (u, v, p[2])
}

/// Renders every frame of a skeleton sequence to `[T, 3, H, W]` RGB in
/// `[0, 1]`.
pub fn render_frames(skel: &SkeletonSequence, height: usize, width: usize) -> Result<Array4<f32>> {
    if height < 16 || width < 16 {
        return Err(Error::invalid(format!(
            "frame geometry must be at least 16x16, got {height}x{width}"
        )));
    }
    if skel.joints.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("skeleton contains non-finite coordinates"));
    }
    let (t, j, _) = skel.joints.dim();
    let mut frames = Array4::<f32>::zeros((t, 3, height, width));
    let mut canvas = vec![0.0f64; 3 * height * width];
    for ti in 0..t {
        canvas.iter_mut().for_each(|p| *p = 0.0);

        // Stable far-to-near order; equal depths draw in joint-index order,
        // so the highest-index joint of a tie ends up on top.
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_by(|&a, &b| {
            let da = skel.joints[[ti, a, 2]];
            let db = skel.joints[[ti, b, 2]];
            da.partial_cmp(&db).unwrap()
        });

        for &ji in &order {
            let p = [
                skel.joints[[ti, ji, 0]],
                skel.joints[[ti, ji, 1]],
                skel.joints[[ti, ji, 2]],
            ];
            let (u, v, _) = project(p, height, width);
            let color = group_color(ji);
            let sigma = group_sigma(ji) * height.min(width) as f64;
            let radius = (2.0 * (1.0 / STAMP_FLOOR).ln()).sqrt() * sigma;

            let x0 = ((u - radius).floor().max(0.0)) as usize;
            let x1 = ((u + radius).ceil().min((width - 1) as f64)) as usize;
            let y0 = ((v - radius).floor().max(0.0)) as usize;
            let y1 = ((v + radius).ceil().min((height - 1) as f64)) as usize;
            if u + radius < 0.0 || v + radius < 0.0 {
                continue;
            }
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let dx = px as f64 - u;
                    let dy = py as f64 - v;
                    let d2 = dx * dx + dy * dy;
                    if d2 > radius * radius {
                        continue;
                    }
                    let alpha = (-d2 / (2.0 * sigma * sigma)).exp();
                    for c in 0..3 {
                        let idx = (c * height + py) * width + px;
                        canvas[idx] = alpha * color[c];
                    }
                }
            }
        }

        for c in 0..3 {
            for py in 0..height {
                for px in 0..width {
                    let v = canvas[(c * height + py) * width + px].clamp(0.0, 1.0);
                    frames[[ti, c, py, px]] = v as f32;
                }
            }
        }
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthviews::{build_vocabulary, rotate_view, synthesize_motion, JOINT_COUNT};
    use ndarray::Array3;

    #[test]
    fn small_geometry_rejected() {
        let skel = SkeletonSequence {
            joints: Array3::zeros((1, JOINT_COUNT, 3)),
        };
        assert!(render_frames(&skel, 15, 64).is_err());
        assert!(render_frames(&skel, 64, 8).is_err());
        assert!(render_frames(&skel, 16, 16).is_ok());
    }

    #[test]
    fn non_finite_coordinates_rejected() {
        let mut joints = Array3::zeros((1, JOINT_COUNT, 3));
        joints[[0, 3, 1]] = f64::NAN;
        let skel = SkeletonSequence { joints };
        assert!(render_frames(&skel, 32, 32).is_err());
    }

    #[test]
    fn stacked_joints_leave_only_topmost_color_at_center() {
        // All joints at the origin share one projected point; with equal
        // depth the highest joint index (right hand tip) draws last, so the
        // exact center pixel carries pure right-hand color.
        let skel = SkeletonSequence {
            joints: Array3::zeros((1, JOINT_COUNT, 3)),
        };
        let frames = render_frames(&skel, 64, 64).unwrap();
        let (u, v, _) = project([0.0, 0.0, 0.0], 64, 64);
        assert_eq!(u, 32.0);
        assert_eq!(v, 48.0);
        let expected = group_color(R_TIP);
        for c in 0..3 {
            assert_eq!(frames[[0, c, 48, 32]], expected[c] as f32);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let v = build_vocabulary(4, 2).unwrap();
        let skel = synthesize_motion(&[0, 2], &v, 6, 2, 3).unwrap();
        let a = render_frames(&skel, 32, 32).unwrap();
        let b = render_frames(&skel, 32, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn yaw_90_collapses_horizontal_hand_separation() {
        let mut joints = Array3::zeros((1, JOINT_COUNT, 3));
        joints[[0, L_TIP, 0]] = -0.5;
        joints[[0, L_TIP, 1]] = 0.8;
        joints[[0, L_TIP, 2]] = 0.1;
        joints[[0, R_TIP, 0]] = 0.5;
        joints[[0, R_TIP, 1]] = 0.8;
        joints[[0, R_TIP, 2]] = 0.1;
        let skel = SkeletonSequence { joints };

        let (ul, _, _) = project([-0.5, 0.8, 0.1], 64, 64);
        let (ur, _, _) = project([0.5, 0.8, 0.1], 64, 64);
        let front_sep = (ur - ul).abs();
        assert!((front_sep - 0.36 * 64.0).abs() < 1e-9);

        let turned = rotate_view(&skel, 90.0, 0.0);
        let l = [
            turned.joints[[0, L_TIP, 0]],
            turned.joints[[0, L_TIP, 1]],
            turned.joints[[0, L_TIP, 2]],
        ];
        let r = [
            turned.joints[[0, R_TIP, 0]],
            turned.joints[[0, R_TIP, 1]],
            turned.joints[[0, R_TIP, 2]],
        ];
        let (ul90, _, _) = project(l, 64, 64);
        let (ur90, _, _) = project(r, 64, 64);
        let turned_sep = (ur90 - ul90).abs();
        assert!(turned_sep < 1e-9, "separation after yaw 90: {turned_sep}");
        assert!(turned_sep < front_sep);
    }

    #[test]
    fn frames_bounded_and_finite() {
        let v = build_vocabulary(4, 2).unwrap();
        let skel = synthesize_motion(&[0, 1, 3], &v, 6, 2, 9).unwrap();
        for (yaw, pitch) in [(0.0, 0.0), (90.0, 0.0), (-60.0, 0.0), (0.0, 30.0)] {
            let frames = render_frames(&rotate_view(&skel, yaw, pitch), 32, 32).unwrap();
            for &x in frames.iter() {
                assert!(x.is_finite());
                assert!((0.0..=1.0).contains(&x));
            }
        }
    }

    #[test]
    fn nearer_joint_occludes_farther_at_shared_pixel() {
        // Left tip behind, right tip in front, both projecting to the same
        // pixel: the pixel must show the right-hand color.
        let mut joints = Array3::zeros((1, JOINT_COUNT, 3));
        for j in 0..JOINT_COUNT {
            joints[[0, j, 0]] = 10.0;
        }
        joints[[0, L_TIP, 0]] = 0.0;
        joints[[0, L_TIP, 2]] = -0.5;
        joints[[0, R_TIP, 0]] = 0.0;
        joints[[0, R_TIP, 2]] = 0.5;
        let skel = SkeletonSequence { joints };
        let frames = render_frames(&skel, 64, 64).unwrap();
        let expected = group_color(R_TIP);
        for c in 0..3 {
            assert_eq!(frames[[0, c, 48, 32]], expected[c] as f32);
        }

        // Swapping depths flips the visible color.
        let mut joints2 = skel.joints.clone();
        joints2[[0, L_TIP, 2]] = 0.5;
        joints2[[0, R_TIP, 2]] = -0.5;
        let frames2 = render_frames(&SkeletonSequence { joints: joints2 }, 64, 64).unwrap();
        let expected2 = group_color(L_TIP);
        for c in 0..3 {
            assert_eq!(frames2[[0, c, 48, 32]], expected2[c] as f32);
        }
    }
}
