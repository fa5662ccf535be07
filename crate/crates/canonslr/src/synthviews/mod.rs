//! Synthetic multi-view sign sequence generation.
//!
//! A signer is modeled as an 11-joint skeleton whose two hand tips trace
//! per-gloss cubic Bezier trajectories. Each source sequence is rotated
//! rigidly into seven camera viewpoints and rasterized to small RGB frames
//! with depth-ordered occlusion, so all views share gloss labels and length.

mod dataset;
mod framefile;
mod motion;
mod render;
mod rotate;
mod vocab;

pub use dataset::{
    generate_dataset, load_frames, load_manifest, load_sample, DatasetManifest,
    GenerationConfig, ManifestEntry, VideoSample,
};
pub(crate) use dataset::fnv1a64;
pub use framefile::{read_frames, write_frames};
pub use motion::{synthesize_motion, JOINT_COUNT};
pub use render::render_frames;
pub use rotate::{rotate_view, rotation_matrix};
pub use vocab::{build_vocabulary, GlossVocabulary};

use ndarray::Array3;

use crate::error::{Error, Result};

/// The seven camera viewpoints, named as yaw/pitch offsets from the
/// frontal canonical view.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum ViewName {
    Front,
    R45,
    R90,
    L30,
    L60,
    U30,
    D30,
}

/// Grouping of viewpoints by deviation from the canonical view, used for
/// aggregate error reporting.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum ViewCategory {
    Front,
    SmallYaw,
    LargeYaw,
    Pitch,
}

impl ViewName {
    /// All seven views in canonical report order.
    pub const ALL: [ViewName; 7] = [
        ViewName::Front,
        ViewName::R45,
        ViewName::R90,
        ViewName::L30,
        ViewName::L60,
        ViewName::U30,
        ViewName::D30,
    ];

    /// (yaw, pitch) in degrees for this viewpoint.
    pub fn angles(self) -> (f64, f64) {
        match self {
            ViewName::Front => (0.0, 0.0),
            ViewName::R45 => (45.0, 0.0),
            ViewName::R90 => (90.0, 0.0),
            ViewName::L30 => (-30.0, 0.0),
            ViewName::L60 => (-60.0, 0.0),
            ViewName::U30 => (0.0, 30.0),
            ViewName::D30 => (0.0, -30.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewName::Front => "Front",
            ViewName::R45 => "R45",
            ViewName::R90 => "R90",
            ViewName::L30 => "L30",
            ViewName::L60 => "L60",
            ViewName::U30 => "U30",
            ViewName::D30 => "D30",
        }
    }

    pub fn parse(s: &str) -> Result<ViewName> {
        ViewName::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown view name: {s}")))
    }

    pub fn category(self) -> ViewCategory {
        match self {
            ViewName::Front => ViewCategory::Front,
            ViewName::R45 | ViewName::L30 => ViewCategory::SmallYaw,
            ViewName::R90 | ViewName::L60 => ViewCategory::LargeYaw,
            ViewName::U30 | ViewName::D30 => ViewCategory::Pitch,
        }
    }
}

impl ViewCategory {
    pub const ALL: [ViewCategory; 4] = [
        ViewCategory::Front,
        ViewCategory::SmallYaw,
        ViewCategory::LargeYaw,
        ViewCategory::Pitch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewCategory::Front => "Front",
            ViewCategory::SmallYaw => "SmallYaw",
            ViewCategory::LargeYaw => "LargeYaw",
            ViewCategory::Pitch => "Pitch",
        }
    }

    /// Member views in report order.
    pub fn members(self) -> &'static [ViewName] {
        match self {
            ViewCategory::Front => &[ViewName::Front],
            ViewCategory::SmallYaw => &[ViewName::R45, ViewName::L30],
            ViewCategory::LargeYaw => &[ViewName::R90, ViewName::L60],
            ViewCategory::Pitch => &[ViewName::U30, ViewName::D30],
        }
    }
}

/// Dataset split membership.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split name: {s}")))
    }
}

/// Pelvis-centered joint trajectories, shape [T, J, 3].
#[derive(Clone, Debug)]
pub struct SkeletonSequence {
    pub joints: Array3<f64>,
}

impl SkeletonSequence {
    pub fn frame_count(&self) -> usize {
        self.joints.shape()[0]
    }
}

/// Derives an independent RNG stream seed from a base seed and a tag path,
/// so each (source, view, purpose) combination draws from its own stream.
pub(crate) fn mix_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = state.wrapping_add(t).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}
