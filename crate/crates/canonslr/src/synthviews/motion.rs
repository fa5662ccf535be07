//! Per-gloss 3D motion primitive synthesis.
//!
//! Each gloss owns a deterministic pair of cubic Bezier trajectories, one
//! per hand tip, drawn once from the gloss primitive seed. A sequence is
//! the concatenation of its gloss segments with short linear transitions,
//! mirroring the coarticulation of continuous signing.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GlossVocabulary, SkeletonSequence};
use crate::error::{Error, Result};

/// Joint layout: pelvis, spine, head, shoulders, elbows, wrists, hand tips.
pub const JOINT_COUNT: usize = 11;

pub(crate) const PELVIS: usize = 0;
pub(crate) const SPINE: usize = 1;
pub(crate) const HEAD: usize = 2;
pub(crate) const L_SHOULDER: usize = 3;
pub(crate) const R_SHOULDER: usize = 4;
pub(crate) const L_ELBOW: usize = 5;
pub(crate) const R_ELBOW: usize = 6;
pub(crate) const L_WRIST: usize = 7;
pub(crate) const R_WRIST: usize = 8;
pub(crate) const L_TIP: usize = 9;
pub(crate) const R_TIP: usize = 10;

const SHOULDER_X: f64 = 0.28;
const SHOULDER_Y: f64 = 0.75;

/// One hand-tip trajectory: cubic Bezier control points scaled around the
/// signing-space center of that hand.
#[derive(Clone, Debug)]
struct HandCurve {
    control: [[f64; 3]; 4],
}

impl HandCurve {
    fn at(&self, u: f64) -> [f64; 3] {
        let v = 1.0 - u;
        let w = [v * v * v, 3.0 * v * v * u, 3.0 * v * u * u, u * u * u];
        let mut p = [0.0; 3];
        for (wi, ctrl) in w.iter().zip(self.control.iter()) {
            for c in 0..3 {
                p[c] += wi * ctrl[c];
            }
        }
        p
    }
}

/// Deterministic motion primitive for one gloss: a curve per hand, with one
/// dominant hand moving through the full signing space and the other making
/// a reduced motion near its rest side.
#[derive(Clone, Debug)]
struct Primitive {
    left: HandCurve,
    right: HandCurve,
}

fn draw_point(rng: &mut ChaCha8Rng, amplitude: f64, side: f64) -> [f64; 3] {
    [
        side * 0.25 + amplitude * rng.gen_range(-0.85..0.85),
        0.55 + amplitude * rng.gen_range(-0.55..0.75),
        0.25 + amplitude * rng.gen_range(-0.2..0.35),
    ]
}

fn build_primitive(primitive_seed: u64) -> Primitive {
    let mut rng = ChaCha8Rng::seed_from_u64(primitive_seed);
    let right_dominant = rng.gen_bool(0.5);
    let (amp_l, amp_r) = if right_dominant { (0.3, 1.0) } else { (1.0, 0.3) };
    let mut curve = |amplitude: f64, side: f64| HandCurve {
        control: [
            draw_point(&mut rng, amplitude, side),
            draw_point(&mut rng, amplitude, side),
            draw_point(&mut rng, amplitude, side),
            draw_point(&mut rng, amplitude, side),
        ],
    };
    let left = curve(amp_l, -1.0);
    let right = curve(amp_r, 1.0);
    Primitive { left, right }
}

fn smoothstep(x: f64) -> f64 {
    x * x * (3.0 - 2.0 * x)
}

/// Places the static torso joints and derives elbow and wrist positions
/// from the two hand tips for a single frame.
fn pose_frame(tip_l: [f64; 3], tip_r: [f64; 3]) -> [[f64; 3]; JOINT_COUNT] {
    let mut joints = [[0.0; 3]; JOINT_COUNT];
    joints[PELVIS] = [0.0, 0.0, 0.0];
    joints[SPINE] = [0.0, 0.45, 0.0];
    joints[HEAD] = [0.0, 0.95, 0.0];
    joints[L_SHOULDER] = [-SHOULDER_X, SHOULDER_Y, 0.0];
    joints[R_SHOULDER] = [SHOULDER_X, SHOULDER_Y, 0.0];

    for (shoulder, tip, elbow_i, wrist_i, tip_i) in [
        (joints[L_SHOULDER], tip_l, L_ELBOW, L_WRIST, L_TIP),
        (joints[R_SHOULDER], tip_r, R_ELBOW, R_WRIST, R_TIP),
    ] {
        let mut dir = [0.0; 3];
        let mut norm = 0.0;
        for c in 0..3 {
            dir[c] = shoulder[c] - tip[c];
            norm += dir[c] * dir[c];
        }
        let norm = norm.sqrt();
        let mut wrist = tip;
        if norm > 1e-9 {
            for c in 0..3 {
                wrist[c] = tip[c] + 0.12 * dir[c] / norm;
            }
        }
        let elbow = [
            (shoulder[0] + wrist[0]) / 2.0,
            (shoulder[1] + wrist[1]) / 2.0 - 0.18,
            (shoulder[2] + wrist[2]) / 2.0 + 0.05,
        ];
        joints[elbow_i] = elbow;
        joints[wrist_i] = wrist;
        joints[tip_i] = tip;
    }
    joints
}

/// Synthesizes the skeleton trajectory for a gloss sequence.
///
/// Output length is `M * frames_per_gloss + (M - 1) * transition`: each
/// gloss contributes `frames_per_gloss` frames of its primitive, and
/// consecutive glosses are bridged by `transition` linearly interpolated
/// frames. `rng_seed` only jitters the global body scale, so the same gloss
/// always traces the same trajectory up to that uniform scale.
pub fn synthesize_motion(
    glosses: &[usize],
    vocab: &GlossVocabulary,
    frames_per_gloss: usize,
    transition: usize,
    rng_seed: u64,
) -> Result<SkeletonSequence> {
    if glosses.is_empty() {
        return Err(Error::invalid("gloss sequence must not be empty"));
    }
    if frames_per_gloss == 0 {
        return Err(Error::invalid("frames_per_gloss must be positive"));
    }
    for &g in glosses {
        if g >= vocab.size() {
            return Err(Error::invalid(format!(
                "gloss index {g} out of range for vocabulary of size {}",
                vocab.size()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let scale = rng.gen_range(0.92..1.08);

    let m = glosses.len();
    let t_total = m * frames_per_gloss + (m - 1) * transition;
    let mut tips: Vec<([f64; 3], [f64; 3])> = Vec::with_capacity(t_total);

    for (k, &g) in glosses.iter().enumerate() {
        let prim = build_primitive(vocab.primitive_seeds[g]);
        for t in 0..frames_per_gloss {
            let x = if frames_per_gloss > 1 {
                t as f64 / (frames_per_gloss - 1) as f64
            } else {
                0.0
            };
            let u = smoothstep(x);
            tips.push((prim.left.at(u), prim.right.at(u)));
        }
        if k + 1 < m && transition > 0 {
            let next = build_primitive(vocab.primitive_seeds[glosses[k + 1]]);
            let from = *tips.last().unwrap();
            let to = (next.left.at(0.0), next.right.at(0.0));
            for i in 1..=transition {
                let w = i as f64 / (transition + 1) as f64;
                let lerp = |a: [f64; 3], b: [f64; 3]| {
                    [
                        a[0] + w * (b[0] - a[0]),
                        a[1] + w * (b[1] - a[1]),
                        a[2] + w * (b[2] - a[2]),
                    ]
                };
                tips.push((lerp(from.0, to.0), lerp(from.1, to.1)));
            }
        }
    }
    debug_assert_eq!(tips.len(), t_total);

    let mut joints = Array3::<f64>::zeros((t_total, JOINT_COUNT, 3));
    for (ti, (tip_l, tip_r)) in tips.into_iter().enumerate() {
        let frame = pose_frame(tip_l, tip_r);
        for (ji, p) in frame.iter().enumerate() {
            for c in 0..3 {
                joints[[ti, ji, c]] = scale * p[c];
            }
        }
    }
    Ok(SkeletonSequence { joints })
}
