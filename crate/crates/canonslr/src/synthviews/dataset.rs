//! Dataset generation, manifest serialization, and sample loading.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{
    build_vocabulary, mix_seed, read_frames, render_frames, rotate_view, synthesize_motion,
    write_frames, GlossVocabulary, Split, ViewName,
};
use crate::error::{Error, Result};

const TAG_VOCAB: u64 = 1;
const TAG_SOURCE: u64 = 2;
const TAG_NOISE: u64 = 3;

/// Parameters controlling synthetic dataset generation.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub vocab_size: usize,
    pub train_sources: usize,
    pub dev_sources: usize,
    pub test_sources: usize,
    pub min_glosses: usize,
    pub max_glosses: usize,
    pub frames_per_gloss: usize,
    pub transition_frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            vocab_size: 20,
            train_sources: 80,
            dev_sources: 10,
            test_sources: 10,
            min_glosses: 3,
            max_glosses: 5,
            frames_per_gloss: 8,
            transition_frames: 2,
            height: 64,
            width: 64,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_sources == 0 || self.dev_sources == 0 || self.test_sources == 0 {
            return Err(Error::invalid("every split needs at least one source"));
        }
        if self.min_glosses == 0 {
            return Err(Error::invalid("min_glosses must be positive"));
        }
        if self.max_glosses < self.min_glosses {
            return Err(Error::invalid("max_glosses must be >= min_glosses"));
        }
        if self.frames_per_gloss == 0 {
            return Err(Error::invalid("frames_per_gloss must be positive"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid(format!(
                "frame geometry must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be finite and non-negative"));
        }
        Ok(())
    }

    /// Canonical `key=value` header lines, excluding the hash itself.
    fn header_lines(&self) -> Vec<String> {
        vec![
            format!("vocab_size={}", self.vocab_size),
            format!("train_sources={}", self.train_sources),
            format!("dev_sources={}", self.dev_sources),
            format!("test_sources={}", self.test_sources),
            format!("min_glosses={}", self.min_glosses),
            format!("max_glosses={}", self.max_glosses),
            format!("frames_per_gloss={}", self.frames_per_gloss),
            format!("transition_frames={}", self.transition_frames),
            format!("height={}", self.height),
            format!("width={}", self.width),
            format!("noise_std={}", self.noise_std),
            format!("seed={}", self.seed),
        ]
    }

    /// Stable hash of the generation parameters.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.header_lines().join("\n").as_bytes())
    }

    /// Sets one field from its text form; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let parse_usize = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("invalid value for {key}: {value:?}")))
        };
        match key {
            "vocab_size" => self.vocab_size = parse_usize()?,
            "train_sources" => self.train_sources = parse_usize()?,
            "dev_sources" => self.dev_sources = parse_usize()?,
            "test_sources" => self.test_sources = parse_usize()?,
            "min_glosses" => self.min_glosses = parse_usize()?,
            "max_glosses" => self.max_glosses = parse_usize()?,
            "frames_per_gloss" => self.frames_per_gloss = parse_usize()?,
            "transition_frames" => self.transition_frames = parse_usize()?,
            "height" => self.height = parse_usize()?,
            "width" => self.width = parse_usize()?,
            "noise_std" => {
                self.noise_std = value
                    .parse()
                    .map_err(|_| Error::invalid(format!("invalid value for {key}: {value:?}")))?
            }
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::invalid(format!("invalid value for {key}: {value:?}")))?
            }
            _ => return Err(Error::invalid(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// All fields as `key=value` lines, parseable back through `apply`.
    pub fn to_file_string(&self) -> String {
        let mut s = self.header_lines().join("\n");
        s.push('\n');
        s
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One manifest record: a single rendered view of a source sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub source_id: String,
    pub view: ViewName,
    pub split: Split,
    pub t: usize,
    pub glosses: Vec<usize>,
    pub frame_path: String,
}

/// In-memory view of a generated dataset.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub vocab: GlossVocabulary,
    pub height: usize,
    pub width: usize,
    pub config_hash: u64,
}

impl DatasetManifest {
    /// Entries filtered by split and view, in manifest order.
    pub fn select(&self, split: Split, view: Option<ViewName>) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == split && view.map_or(true, |v| e.view == v))
            .collect()
    }
}

/// A loaded sample ready for the recognizer.
#[derive(Clone, Debug)]
pub struct VideoSample {
    pub frames: Array4<f32>,
    pub view: ViewName,
    pub glosses: Vec<usize>,
    pub source_id: String,
    pub split: Split,
}

struct SourcePlan {
    index: usize,
    source_id: String,
    split: Split,
    glosses: Vec<usize>,
    motion_seed: u64,
}

/// Generates the full seven-view dataset under `out_dir` and returns its
/// manifest. Writing the same config and seed twice produces byte-identical
/// frame files and manifest.
pub fn generate_dataset(config: &GenerationConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let vocab_seed = mix_seed(config.seed, &[TAG_VOCAB]);
    let vocab = build_vocabulary(config.vocab_size, vocab_seed)?;

    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let total = config.train_sources + config.dev_sources + config.test_sources;
    let plans: Vec<SourcePlan> = (0..total)
        .map(|i| {
            let split = if i < config.train_sources {
                Split::Train
            } else if i < config.train_sources + config.dev_sources {
                Split::Dev
            } else {
                Split::Test
            };
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[TAG_SOURCE, i as u64]));
            let m = rng.gen_range(config.min_glosses..=config.max_glosses);
            let glosses: Vec<usize> = (0..m).map(|_| rng.gen_range(0..config.vocab_size)).collect();
            SourcePlan {
                index: i,
                source_id: format!("s{i:04}"),
                split,
                glosses,
                motion_seed: rng.gen(),
            }
        })
        .collect();

    let per_source: Vec<Vec<ManifestEntry>> = plans
        .par_iter()
        .map(|plan| render_source(config, &vocab, plan, out_dir))
        .collect::<Result<Vec<_>>>()?;

    let entries: Vec<ManifestEntry> = per_source.into_iter().flatten().collect();

    let manifest_path = out_dir.join("manifest.txt");
    write_manifest(&manifest_path, config, vocab_seed, &vocab, &entries)?;

    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        vocab,
        height: config.height,
        width: config.width,
        config_hash: config.hash(),
    })
}

fn render_source(
    config: &GenerationConfig,
    vocab: &GlossVocabulary,
    plan: &SourcePlan,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    let skel = synthesize_motion(
        &plan.glosses,
        vocab,
        config.frames_per_gloss,
        config.transition_frames,
        plan.motion_seed,
    )?;
    let mut entries = Vec::with_capacity(ViewName::ALL.len());
    for (vi, view) in ViewName::ALL.iter().enumerate() {
        let (yaw, pitch) = view.angles();
        let rotated = rotate_view(&skel, yaw, pitch);
        let mut frames = render_frames(&rotated, config.height, config.width)?;
        if config.noise_std > 0.0 {
            let noise_seed = mix_seed(config.seed, &[TAG_NOISE, plan.index as u64, vi as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let normal = Normal::new(0.0, config.noise_std)
                .map_err(|_| Error::invalid("invalid noise_std"))?;
            frames.mapv_inplace(|v| {
                let n: f64 = normal.sample(&mut rng);
                ((v as f64 + n).clamp(0.0, 1.0)) as f32
            });
        }
        let rel_path = format!("frames/{}_{}.bin", plan.source_id, view.as_str());
        write_frames(&out_dir.join(&rel_path), &frames)?;
        entries.push(ManifestEntry {
            source_id: plan.source_id.clone(),
            view: *view,
            split: plan.split,
            t: skel.frame_count(),
            glosses: plan.glosses.clone(),
            frame_path: rel_path,
        });
    }
    Ok(entries)
}

fn write_manifest(
    path: &Path,
    config: &GenerationConfig,
    vocab_seed: u64,
    vocab: &GlossVocabulary,
    entries: &[ManifestEntry],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: String| -> Result<()> {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))
    };
    emit("# format=canonslr-manifest-v1".to_string())?;
    emit(format!("# config_hash={:016x}", config.hash()))?;
    emit(format!("# vocab_seed={vocab_seed}"))?;
    emit(format!("# blank_index={}", vocab.blank_index))?;
    for line in config.header_lines() {
        emit(format!("# {line}"))?;
    }
    for e in entries {
        let glosses: Vec<String> = e.glosses.iter().map(|g| g.to_string()).collect();
        emit(format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.source_id,
            e.view.as_str(),
            e.split.as_str(),
            e.t,
            glosses.join(","),
            e.frame_path
        ))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parses a manifest file and validates dataset-wide invariants: unique
/// (source, view) pairs, all seven views per source, and identical labels,
/// split, and length across the views of each source.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header: BTreeMap<String, String> = BTreeMap::new();
    let mut entries: Vec<ManifestEntry> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some((k, v)) = rest.split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::format(
                path,
                format!("line {}: expected 6 tab-separated fields", lineno + 1),
            ));
        }
        let t: usize = fields[3]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad frame count", lineno + 1)))?;
        let glosses: Vec<usize> = fields[4]
            .split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::format(path, format!("line {}: bad gloss id", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        entries.push(ManifestEntry {
            source_id: fields[0].to_string(),
            view: ViewName::parse(fields[1])?,
            split: Split::parse(fields[2])?,
            t,
            glosses,
            frame_path: fields[5].to_string(),
        });
    }

    let get = |key: &str| -> Result<String> {
        header
            .get(key)
            .cloned()
            .ok_or_else(|| Error::format(path, format!("missing header key {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(path, format!("bad header value for {key}")))
    };
    if get("format")? != "canonslr-manifest-v1" {
        return Err(Error::format(path, "unsupported manifest format"));
    }
    let vocab_size = parse_usize("vocab_size")?;
    let vocab_seed: u64 = get("vocab_seed")?
        .parse()
        .map_err(|_| Error::format(path, "bad header value for vocab_seed"))?;
    let blank_index = parse_usize("blank_index")?;
    let height = parse_usize("height")?;
    let width = parse_usize("width")?;
    let config_hash = u64::from_str_radix(&get("config_hash")?, 16)
        .map_err(|_| Error::format(path, "bad header value for config_hash"))?;

    let vocab = build_vocabulary(vocab_size, vocab_seed)?;
    if vocab.blank_index != blank_index {
        return Err(Error::integrity(format!(
            "manifest blank_index {blank_index} does not match vocabulary size {vocab_size}"
        )));
    }

    validate_entries(&entries, &vocab)?;

    Ok(DatasetManifest {
        root: path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
        entries,
        vocab,
        height,
        width,
        config_hash,
    })
}

fn validate_entries(entries: &[ManifestEntry], vocab: &GlossVocabulary) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::integrity("manifest contains no entries"));
    }
    let mut seen: HashSet<(String, ViewName)> = HashSet::new();
    let mut by_source: BTreeMap<String, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in entries {
        if e.glosses.is_empty() {
            return Err(Error::integrity(format!(
                "{}: empty gloss sequence",
                e.source_id
            )));
        }
        if e.glosses.iter().any(|&g| g >= vocab.size()) {
            return Err(Error::integrity(format!(
                "{}: gloss id out of vocabulary range",
                e.source_id
            )));
        }
        if e.t == 0 {
            return Err(Error::integrity(format!("{}: zero-length sample", e.source_id)));
        }
        if !seen.insert((e.source_id.clone(), e.view)) {
            return Err(Error::integrity(format!(
                "duplicate (source, view) pair: ({}, {})",
                e.source_id,
                e.view.as_str()
            )));
        }
        by_source.entry(e.source_id.clone()).or_default().push(e);
    }
    for (sid, group) in &by_source {
        if group.len() != ViewName::ALL.len() {
            return Err(Error::integrity(format!(
                "{sid}: expected {} views, found {}",
                ViewName::ALL.len(),
                group.len()
            )));
        }
        let first = group[0];
        for e in group.iter().skip(1) {
            if e.glosses != first.glosses {
                return Err(Error::integrity(format!(
                    "{sid}: gloss sequences differ across views"
                )));
            }
            if e.t != first.t {
                return Err(Error::integrity(format!("{sid}: frame counts differ across views")));
            }
            if e.split != first.split {
                return Err(Error::integrity(format!("{sid}: split differs across views")));
            }
        }
    }
    Ok(())
}

/// Loads the frame tensor for one manifest entry, verifying its shape
/// against the manifest record.
pub fn load_frames(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Array4<f32>> {
    let path = manifest.root.join(&entry.frame_path);
    let frames = read_frames(&path)?;
    let (t, c, h, w) = frames.dim();
    if t != entry.t || c != 3 || h != manifest.height || w != manifest.width {
        return Err(Error::integrity(format!(
            "{}: frame file shape [{t}, {c}, {h}, {w}] does not match manifest ({}, 3, {}, {})",
            entry.source_id, entry.t, manifest.height, manifest.width
        )));
    }
    Ok(frames)
}

/// Loads one manifest entry as a [`VideoSample`].
pub fn load_sample(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<VideoSample> {
    Ok(VideoSample {
        frames: load_frames(manifest, entry)?,
        view: entry.view,
        glosses: entry.glosses.clone(),
        source_id: entry.source_id.clone(),
        split: entry.split,
    })
}
