//! Two-stage training: a frontal-view teacher, then a multi-view student
//! regularized by sequence-level distillation from the frozen teacher, plus
//! per-view evaluation of trained checkpoints.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::backbone::{ArchConfig, Recognizer, ENHANCEMENT_STAGES};
use crate::checkpoint::{expect_eof, read_entries, write_entries};
use crate::ctc;
use crate::error::{Error, Result};
use crate::metrics::{corpus_wer, EditBreakdown, ReportRow};
use crate::nn::{
    accumulate_grads, gather_param_grads, lr_at_epoch, scale_grads, Adam, AdamConfig,
};
use crate::ssd::{align_temporal, ssd_loss_grad, DistillConfig};
use crate::synthviews::{
    fnv1a64, load_sample, mix_seed, DatasetManifest, ManifestEntry, Split, ViewCategory, ViewName,
};

const CHECKPOINT_MAGIC: &[u8; 8] = b"SLRTRN01";
const ORDER_TAG: u64 = 0x747261696e; // epoch shuffle stream

/// Hyperparameters for one training stage. The same structure drives both
/// the teacher and the student; the teacher ignores `tme_stages` and the
/// distillation weight since it trains on frontal samples alone.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stage II epoch budget; 0 means "same as `epochs`". The two stages
    /// see very different amounts of data per epoch (one view vs seven),
    /// so their budgets are tunable independently.
    pub student_epochs: usize,
    pub learning_rate: f64,
    /// 1-based epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub distill: DistillConfig,
    /// Residual stages with active motion enhancement during Stage II.
    pub tme_stages: BTreeSet<usize>,
    pub beam_width: usize,
    pub checkpoint_dir: PathBuf,
    pub base_width: usize,
    pub lstm_hidden: usize,
    pub tme_top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            student_epochs: 0,
            learning_rate: 1e-4,
            lr_milestones: vec![25, 35],
            lr_decay: 0.2,
            batch_size: 8,
            seed: 0,
            distill: DistillConfig::default(),
            tme_stages: ENHANCEMENT_STAGES.iter().copied().collect(),
            beam_width: 10,
            checkpoint_dir: PathBuf::from("checkpoints"),
            base_width: 16,
            lstm_hidden: 128,
            tme_top_k: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay must lie in (0, 1]"));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("lr_milestones must be strictly increasing"));
        }
        if self.lr_milestones.first() == Some(&0) {
            return Err(Error::invalid("lr_milestones are 1-based epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        for &stage in &self.tme_stages {
            if !ENHANCEMENT_STAGES.contains(&stage) {
                return Err(Error::invalid(format!(
                    "tme_stages may only contain {ENHANCEMENT_STAGES:?}, got {stage}"
                )));
            }
        }
        if self.beam_width == 0 {
            return Err(Error::invalid("beam_width must be at least 1"));
        }
        if self.base_width == 0 || self.lstm_hidden == 0 || self.tme_top_k == 0 {
            return Err(Error::invalid(
                "base_width, lstm_hidden, and tme_top_k must be positive",
            ));
        }
        self.distill.validate()
    }

    /// Epoch budget for one training stage.
    pub fn stage_epochs(&self, role: Role) -> usize {
        match role {
            Role::Teacher => self.epochs,
            Role::Student if self.student_epochs > 0 => self.student_epochs,
            Role::Student => self.epochs,
        }
    }

    /// The recognizer architecture this config trains, for a vocabulary size
    /// taken from the dataset.
    pub fn arch(&self, vocab_size: usize) -> ArchConfig {
        ArchConfig {
            vocab_size,
            base_width: self.base_width,
            lstm_hidden: self.lstm_hidden,
            tme_top_k: self.tme_top_k,
        }
    }

    /// Sets one field from its text form. Unknown keys are rejected, which
    /// keeps config files typo-safe.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "student_epochs" => self.student_epochs = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "lr_milestones" => self.lr_milestones = parse_list(key, value)?,
            "lr_decay" => self.lr_decay = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "distill_temperature" => self.distill.temperature = parse_num(key, value)?,
            "distill_weight" => self.distill.weight = parse_num(key, value)?,
            "distill_anchor" => self.distill.frontal_view = ViewName::parse(value)?,
            "tme_stages" => self.tme_stages = parse_list(key, value)?.into_iter().collect(),
            "beam_width" => self.beam_width = parse_num(key, value)?,
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            "base_width" => self.base_width = parse_num(key, value)?,
            "lstm_hidden" => self.lstm_hidden = parse_num(key, value)?,
            "tme_top_k" => self.tme_top_k = parse_num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// All fields as `key=value` lines, parseable back through `apply`.
    pub fn to_file_string(&self) -> String {
        let mut s = self.hash_lines().join("\n");
        s.push_str(&format!("\ncheckpoint_dir={}\n", self.checkpoint_dir.display()));
        s
    }

    fn hash_lines(&self) -> Vec<String> {
        let milestones: Vec<String> = self.lr_milestones.iter().map(|m| m.to_string()).collect();
        let stages: Vec<String> = self.tme_stages.iter().map(|s| s.to_string()).collect();
        vec![
            format!("epochs={}", self.epochs),
            format!("student_epochs={}", self.student_epochs),
            format!("learning_rate={}", self.learning_rate),
            format!("lr_milestones={}", milestones.join(",")),
            format!("lr_decay={}", self.lr_decay),
            format!("batch_size={}", self.batch_size),
            format!("seed={}", self.seed),
            format!("distill_temperature={}", self.distill.temperature),
            format!("distill_weight={}", self.distill.weight),
            format!("distill_anchor={}", self.distill.frontal_view.as_str()),
            format!("tme_stages={}", stages.join(",")),
            format!("beam_width={}", self.beam_width),
            format!("base_width={}", self.base_width),
            format!("lstm_hidden={}", self.lstm_hidden),
            format!("tme_top_k={}", self.tme_top_k),
        ]
    }

    /// Stable hash of every training-relevant field. The checkpoint
    /// directory is excluded so identical runs written to different places
    /// produce identical checkpoint bytes.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.hash_lines().join("\n").as_bytes())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("invalid value for {key}: {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|part| parse_num(key, part.trim())).collect()
}

/// Which stage produced a checkpoint.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }

    fn code(self) -> u8 {
        match self {
            Role::Teacher => 0,
            Role::Student => 1,
        }
    }

    fn from_code(code: u8) -> Option<Role> {
        match code {
            0 => Some(Role::Teacher),
            1 => Some(Role::Student),
            _ => None,
        }
    }
}

/// Adam moments and step counts in parameter-store order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub steps: Vec<u64>,
}

/// A trained model with the bookkeeping needed to reuse or inspect it.
pub struct Checkpoint {
    pub role: Role,
    pub epoch: usize,
    pub config_hash: u64,
    /// Enhancement stages the model was trained (and must be evaluated) with.
    pub tme_stages: BTreeSet<usize>,
    pub recognizer: Recognizer,
    pub optimizer: Option<OptimizerState>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("role", &self.role)
            .field("epoch", &self.epoch)
            .field("config_hash", &self.config_hash)
            .field("tme_stages", &self.tme_stages)
            .field("arch", &self.recognizer.config)
            .field("has_optimizer", &self.optimizer.is_some())
            .finish()
    }
}

/// Mean per-sample loss terms; the distillation term carries its weight.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub ctc_conv: f64,
    pub ctc_seq: f64,
    pub ssd: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.ctc_conv + self.ctc_seq + self.ssd
    }

    fn add(&mut self, other: &LossTerms) {
        self.ctc_conv += other.ctc_conv;
        self.ctc_seq += other.ctc_seq;
        self.ssd += other.ssd;
    }

    fn scale(&mut self, factor: f64) {
        self.ctc_conv *= factor;
        self.ctc_seq *= factor;
        self.ssd *= factor;
    }
}

/// One line of the training log.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub ctc_conv: f64,
    pub ctc_seq: f64,
    pub ssd: f64,
    pub total: f64,
    pub dev_wer: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={:.8} ctc_conv={:.9} ctc_seq={:.9} ssd={:.9} total={:.9} dev_wer={:.6}",
            self.epoch,
            self.learning_rate,
            self.ctc_conv,
            self.ctc_seq,
            self.ssd,
            self.total,
            self.dev_wer
        )
    }
}

/// Per-epoch records plus where the stage wrote its artifacts.
#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Trains the frontal-view teacher with the two connectionist temporal
/// classification losses. Enhancement stays inactive regardless of
/// `tme_stages`; the slots still exist so teacher and student checkpoints
/// share one parameter manifest.
pub fn train_teacher(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let anchor = cfg.distill.frontal_view;
    let train = manifest.select(Split::Train, Some(anchor));
    if train.is_empty() {
        return Err(Error::invalid(format!(
            "no {} training samples for the teacher",
            anchor.as_str()
        )));
    }
    let dev = manifest.select(Split::Dev, Some(anchor));
    if dev.is_empty() {
        return Err(Error::invalid(format!(
            "no {} dev samples for the teacher",
            anchor.as_str()
        )));
    }
    let recognizer = Recognizer::new(cfg.arch(manifest.vocab.size()), cfg.seed)?;
    let stage = Stage {
        role: Role::Teacher,
        tme_stages: BTreeSet::new(),
        distill: None,
        train,
        dev,
    };
    run_training(recognizer, manifest, stage, cfg)
}

/// Trains the multi-view student against the frozen teacher. All views
/// contribute the two classification losses; non-frontal samples add the
/// weighted distillation term against the teacher's sequence logits on the
/// paired frontal sample of the same source.
pub fn train_student(
    manifest: &DatasetManifest,
    teacher: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if teacher.role != Role::Teacher {
        return Err(Error::invalid(
            "student training requires a teacher-role checkpoint",
        ));
    }
    let arch = cfg.arch(manifest.vocab.size());
    if teacher.recognizer.config != arch {
        return Err(Error::invalid(format!(
            "teacher architecture {:?} does not match configured architecture {:?}",
            teacher.recognizer.config, arch
        )));
    }
    let train = manifest.select(Split::Train, None);
    if train.is_empty() {
        return Err(Error::invalid("no training samples in manifest"));
    }
    let dev = manifest.select(Split::Dev, None);
    if dev.is_empty() {
        return Err(Error::invalid("no dev samples in manifest"));
    }

    let anchor = cfg.distill.frontal_view;
    let frontal: Vec<&ManifestEntry> =
        train.iter().copied().filter(|e| e.view == anchor).collect();
    let paired: BTreeSet<&str> = frontal.iter().map(|e| e.source_id.as_str()).collect();
    for entry in &train {
        if !paired.contains(entry.source_id.as_str()) {
            return Err(Error::integrity(format!(
                "source {} has no paired {} sample for distillation",
                entry.source_id,
                anchor.as_str()
            )));
        }
    }

    let frozen_before = param_bytes(&teacher.recognizer);
    let distill = if cfg.distill.weight > 0.0 {
        let teacher_seq = teacher_logit_cache(&teacher.recognizer, manifest, &frontal)?;
        Some(DistillContext {
            cfg: cfg.distill,
            teacher_seq,
        })
    } else {
        None
    };

    let recognizer = Recognizer::new(arch, cfg.seed)?;
    let stage = Stage {
        role: Role::Student,
        tme_stages: cfg.tme_stages.clone(),
        distill,
        train,
        dev,
    };
    let out = run_training(recognizer, manifest, stage, cfg)?;
    if param_bytes(&teacher.recognizer) != frozen_before {
        return Err(Error::invalid(
            "teacher parameters changed during student training",
        ));
    }
    Ok(out)
}

/// Decodes every sample of a split with prefix beam search and aggregates
/// word error rates per view, per view category (arithmetic mean of member
/// views), and pooled over everything as a final `All` row.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
    beam_width: usize,
) -> Result<Vec<ReportRow>> {
    if beam_width == 0 {
        return Err(Error::invalid("beam_width must be at least 1"));
    }
    if ckpt.recognizer.config.vocab_size != manifest.vocab.size() {
        return Err(Error::invalid(format!(
            "checkpoint vocabulary {} does not match dataset vocabulary {}",
            ckpt.recognizer.config.vocab_size,
            manifest.vocab.size()
        )));
    }
    let entries = manifest.select(split, None);
    if entries.is_empty() {
        return Err(Error::invalid(format!(
            "no {} samples in manifest",
            split.as_str()
        )));
    }
    let decoded = decode_entries(
        &ckpt.recognizer,
        manifest,
        &entries,
        &ckpt.tme_stages,
        beam_width,
    )?;

    let mut rows = Vec::new();
    let mut view_rows: Vec<(ViewName, ReportRow)> = Vec::new();
    for view in ViewName::ALL {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = decoded
            .iter()
            .filter(|(v, _, _)| *v == view)
            .map(|(_, r, h)| (r.clone(), h.clone()))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let breakdown = corpus_wer(&pairs)?;
        let row = ReportRow {
            label: view.as_str().to_string(),
            wer: breakdown.wer(),
            breakdown,
            n_samples: pairs.len(),
        };
        view_rows.push((view, row.clone()));
        rows.push(row);
    }
    for category in ViewCategory::ALL {
        let members: Vec<&ReportRow> = view_rows
            .iter()
            .filter(|(v, _)| v.category() == category)
            .map(|(_, row)| row)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut breakdown = EditBreakdown::default();
        let mut n_samples = 0;
        for row in &members {
            breakdown.accumulate(&row.breakdown);
            n_samples += row.n_samples;
        }
        rows.push(ReportRow {
            label: format!("{} (avg)", category.as_str()),
            wer: members.iter().map(|r| r.wer).sum::<f64>() / members.len() as f64,
            breakdown,
            n_samples,
        });
    }
    let all_pairs: Vec<(Vec<usize>, Vec<usize>)> = decoded
        .into_iter()
        .map(|(_, r, h)| (r, h))
        .collect();
    let breakdown = corpus_wer(&all_pairs)?;
    rows.push(ReportRow {
        label: "All".to_string(),
        wer: breakdown.wer(),
        breakdown,
        n_samples: all_pairs.len(),
    });
    Ok(rows)
}

/// Where a stage writes its checkpoint.
pub fn checkpoint_path(cfg: &TrainConfig, role: Role) -> PathBuf {
    cfg.checkpoint_dir.join(format!("{}.ckpt", role.as_str()))
}

struct DistillContext {
    cfg: DistillConfig,
    teacher_seq: HashMap<String, Array2<f64>>,
}

struct Stage<'a> {
    role: Role,
    tme_stages: BTreeSet<usize>,
    distill: Option<DistillContext>,
    train: Vec<&'a ManifestEntry>,
    dev: Vec<&'a ManifestEntry>,
}

struct LoadedSample {
    frames: Array4<f64>,
    glosses: Vec<usize>,
    view: ViewName,
}

fn load_training_sample(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<LoadedSample> {
    let sample = load_sample(manifest, entry)?;
    debug_assert_eq!(sample.split, entry.split);
    Ok(LoadedSample {
        frames: sample.frames.mapv(f64::from),
        glosses: sample.glosses,
        view: sample.view,
    })
}

/// Loss and parameter gradients for one sample. The distillation pair is
/// the teacher's cached sequence logits for this sample's source; frontal
/// samples and zero-weight configs contribute no distillation term.
fn sample_grads(
    recognizer: &Recognizer,
    sample: &LoadedSample,
    tme_stages: &BTreeSet<usize>,
    distill: Option<(&DistillConfig, &Array2<f64>)>,
) -> Result<(LossTerms, Vec<Option<ArrayD<f64>>>)> {
    let mut g = Graph::new();
    let fwd = recognizer.forward(&mut g, &sample.frames, tme_stages)?;
    let blank = recognizer.config.blank_index();
    let conv_vals = g.value2(fwd.conv_logits).to_owned();
    let seq_vals = g.value2(fwd.seq_logits).to_owned();
    let (conv_loss, conv_grad) = ctc::ctc_loss_grad(&conv_vals.view(), &sample.glosses, blank)?;
    let (seq_loss, seq_grad) = ctc::ctc_loss_grad(&seq_vals.view(), &sample.glosses, blank)?;
    let conv_node = g.fused_loss(fwd.conv_logits, conv_loss, conv_grad.into_dyn());
    let seq_node = g.fused_loss(fwd.seq_logits, seq_loss, seq_grad.into_dyn());
    let mut terms = vec![(1.0, conv_node), (1.0, seq_node)];
    let mut ssd_weighted = 0.0;
    if let Some((dcfg, teacher_seq)) = distill {
        if dcfg.weight > 0.0 && sample.view != dcfg.frontal_view {
            let aligned = align_temporal(&teacher_seq.view(), fwd.temporal_len)?;
            let (ssd_loss, ssd_grad) =
                ssd_loss_grad(&aligned.view(), &seq_vals.view(), sample.view, dcfg)?;
            let ssd_node = g.fused_loss(fwd.seq_logits, ssd_loss, ssd_grad.into_dyn());
            terms.push((dcfg.weight, ssd_node));
            ssd_weighted = dcfg.weight * ssd_loss;
        }
    }
    let root = g.weighted_sum(&terms);
    let grads = g.backward(root);
    let param_grads = gather_param_grads(&fwd.bindings, grads);
    Ok((
        LossTerms {
            ctc_conv: conv_loss,
            ctc_seq: seq_loss,
            ssd: ssd_weighted,
        },
        param_grads,
    ))
}

/// The teacher's sequence logits on every frontal training sample, keyed by
/// source id. Computed once; the teacher is frozen so the cache stays valid
/// for the whole stage.
fn teacher_logit_cache(
    teacher: &Recognizer,
    manifest: &DatasetManifest,
    frontal: &[&ManifestEntry],
) -> Result<HashMap<String, Array2<f64>>> {
    frontal
        .par_iter()
        .map(|entry| {
            let sample = load_training_sample(manifest, entry)?;
            let mut g = Graph::new();
            let fwd = teacher.forward(&mut g, &sample.frames, &BTreeSet::new())?;
            Ok((
                entry.source_id.clone(),
                g.value2(fwd.seq_logits).to_owned(),
            ))
        })
        .collect()
}

/// Beam-decodes entries in parallel, preserving input order.
fn decode_entries(
    recognizer: &Recognizer,
    manifest: &DatasetManifest,
    entries: &[&ManifestEntry],
    tme_stages: &BTreeSet<usize>,
    beam_width: usize,
) -> Result<Vec<(ViewName, Vec<usize>, Vec<usize>)>> {
    entries
        .par_iter()
        .map(|entry| {
            let sample = load_training_sample(manifest, entry)?;
            let mut g = Graph::new();
            let fwd = recognizer.forward(&mut g, &sample.frames, tme_stages)?;
            let hypothesis = ctc::beam_decode(
                &g.value2(fwd.seq_logits),
                recognizer.config.blank_index(),
                beam_width,
            )?;
            Ok((entry.view, entry.glosses.clone(), hypothesis))
        })
        .collect()
}

fn pooled_dev_wer(
    recognizer: &Recognizer,
    manifest: &DatasetManifest,
    entries: &[&ManifestEntry],
    tme_stages: &BTreeSet<usize>,
    beam_width: usize,
) -> Result<f64> {
    let decoded = decode_entries(recognizer, manifest, entries, tme_stages, beam_width)?;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> =
        decoded.into_iter().map(|(_, r, h)| (r, h)).collect();
    Ok(corpus_wer(&pairs)?.wer())
}

fn run_training(
    mut recognizer: Recognizer,
    manifest: &DatasetManifest,
    stage: Stage<'_>,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    std::fs::create_dir_all(&cfg.checkpoint_dir)
        .map_err(|e| Error::io(&cfg.checkpoint_dir, e))?;
    let log_path = cfg
        .checkpoint_dir
        .join(format!("{}_train.log", stage.role.as_str()));
    let log_file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    let mut adam = Adam::new(&recognizer.params, AdamConfig::default());
    let epochs = cfg.stage_epochs(stage.role);
    let mut records = Vec::with_capacity(epochs);
    let n = stage.train.len();
    for epoch in 1..=epochs {
        let lr = lr_at_epoch(cfg.learning_rate, &cfg.lr_milestones, cfg.lr_decay, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            &[ORDER_TAG, stage.role.code() as u64, epoch as u64],
        ));
        order.shuffle(&mut rng);

        let mut sums = LossTerms::default();
        for chunk in order.chunks(cfg.batch_size) {
            let outputs: Vec<Result<(LossTerms, Vec<Option<ArrayD<f64>>>)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let entry = stage.train[idx];
                    let sample = load_training_sample(manifest, entry)?;
                    let distill = match stage.distill.as_ref() {
                        Some(d) => {
                            let logits =
                                d.teacher_seq.get(&entry.source_id).ok_or_else(|| {
                                    Error::integrity(format!(
                                        "no cached teacher logits for source {}",
                                        entry.source_id
                                    ))
                                })?;
                            Some((&d.cfg, logits))
                        }
                        None => None,
                    };
                    sample_grads(&recognizer, &sample, &stage.tme_stages, distill)
                })
                .collect();

            let mut batch_grads: Vec<Option<ArrayD<f64>>> = Vec::new();
            for output in outputs {
                let (terms, grads) = output?;
                sums.add(&terms);
                accumulate_grads(&mut batch_grads, grads);
            }
            scale_grads(&mut batch_grads, 1.0 / chunk.len() as f64);
            adam.step(&mut recognizer.params, &batch_grads, lr);
        }
        sums.scale(1.0 / n as f64);

        let dev_wer = pooled_dev_wer(
            &recognizer,
            manifest,
            &stage.dev,
            &stage.tme_stages,
            cfg.beam_width,
        )?;
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            ctc_conv: sums.ctc_conv,
            ctc_seq: sums.ctc_seq,
            ssd: sums.ssd,
            total: sums.total(),
            dev_wer,
        };
        writeln!(log, "{}", record.log_line()).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        records.push(record);
    }

    let (m, v, steps) = adam.state();
    let ckpt = Checkpoint {
        role: stage.role,
        epoch: epochs,
        config_hash: cfg.hash(),
        tme_stages: stage.tme_stages,
        recognizer,
        optimizer: Some(OptimizerState {
            m: m.to_vec(),
            v: v.to_vec(),
            steps: steps.to_vec(),
        }),
    };
    let ckpt_path = checkpoint_path(cfg, ckpt.role);
    save_checkpoint(&ckpt, &ckpt_path)?;
    Ok((
        ckpt,
        TrainReport {
            epochs: records,
            checkpoint_path: ckpt_path,
            log_path,
        },
    ))
}

fn param_bytes(recognizer: &Recognizer) -> Vec<u8> {
    let store = &recognizer.params;
    let mut bytes = Vec::with_capacity(store.total_elements() * 8);
    for i in 0..store.len() {
        for &v in store.value(i).iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

fn tme_mask(stages: &BTreeSet<usize>) -> u8 {
    let mut mask = 0u8;
    for (bit, stage) in ENHANCEMENT_STAGES.iter().enumerate() {
        if stages.contains(stage) {
            mask |= 1 << bit;
        }
    }
    mask
}

fn tme_stages_from_mask(mask: u8) -> Option<BTreeSet<usize>> {
    if mask >> ENHANCEMENT_STAGES.len() != 0 {
        return None;
    }
    let mut stages = BTreeSet::new();
    for (bit, stage) in ENHANCEMENT_STAGES.iter().enumerate() {
        if mask & (1 << bit) != 0 {
            stages.insert(*stage);
        }
    }
    Some(stages)
}

/// Writes a checkpoint: role, epoch, config hash, architecture, active
/// enhancement stages, the parameter map, and optimizer state.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_u8(ckpt.role.code()).map_err(io_err)?;
    w.write_u32::<LittleEndian>(ckpt.epoch as u32).map_err(io_err)?;
    w.write_u64::<LittleEndian>(ckpt.config_hash).map_err(io_err)?;
    let arch = &ckpt.recognizer.config;
    w.write_u32::<LittleEndian>(arch.vocab_size as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(arch.base_width as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(arch.lstm_hidden as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(arch.tme_top_k as u32).map_err(io_err)?;
    w.write_u8(tme_mask(&ckpt.tme_stages)).map_err(io_err)?;

    write_entries(&ckpt.recognizer.params, &mut w, path)?;

    match &ckpt.optimizer {
        Some(state) => {
            w.write_u8(1).map_err(io_err)?;
            for i in 0..ckpt.recognizer.params.len() {
                w.write_u64::<LittleEndian>(state.steps[i]).map_err(io_err)?;
                for &x in state.m[i].iter() {
                    w.write_f32::<LittleEndian>(x as f32).map_err(io_err)?;
                }
                for &x in state.v[i].iter() {
                    w.write_f32::<LittleEndian>(x as f32).map_err(io_err)?;
                }
            }
        }
        None => w.write_u8(0).map_err(io_err)?,
    }
    w.flush().map_err(io_err)
}

/// Reads a checkpoint written by `save_checkpoint`, rebuilding the
/// recognizer for the stored architecture.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |m: String| Error::format(path, m);
    let short = |_: std::io::Error| Error::format(path, "file ends mid-header".to_string());

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| fmt("file too short for header".to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt("not a training checkpoint file".to_string()));
    }
    let role = Role::from_code(r.read_u8().map_err(short)?)
        .ok_or_else(|| fmt("unknown checkpoint role".to_string()))?;
    let epoch = r.read_u32::<LittleEndian>().map_err(short)? as usize;
    let config_hash = r.read_u64::<LittleEndian>().map_err(short)?;
    let arch = ArchConfig {
        vocab_size: r.read_u32::<LittleEndian>().map_err(short)? as usize,
        base_width: r.read_u32::<LittleEndian>().map_err(short)? as usize,
        lstm_hidden: r.read_u32::<LittleEndian>().map_err(short)? as usize,
        tme_top_k: r.read_u32::<LittleEndian>().map_err(short)? as usize,
    };
    let tme_stages = tme_stages_from_mask(r.read_u8().map_err(short)?)
        .ok_or_else(|| fmt("invalid enhancement-stage mask".to_string()))?;

    let mut recognizer = Recognizer::new(arch, 0)
        .map_err(|e| fmt(format!("stored architecture is invalid: {e}")))?;
    read_entries(&mut recognizer.params, &mut r, path)?;

    let optimizer = match r.read_u8().map_err(short)? {
        0 => None,
        1 => {
            let store = &recognizer.params;
            let mut m = Vec::with_capacity(store.len());
            let mut v = Vec::with_capacity(store.len());
            let mut steps = Vec::with_capacity(store.len());
            let trunc =
                |_: std::io::Error| Error::format(path, "file ends mid-optimizer".to_string());
            for i in 0..store.len() {
                steps.push(r.read_u64::<LittleEndian>().map_err(trunc)?);
                let shape = store.value(i).shape().to_vec();
                let len: usize = shape.iter().product();
                let read_array = |r: &mut BufReader<File>| -> Result<ArrayD<f64>> {
                    let mut data = Vec::with_capacity(len);
                    for _ in 0..len {
                        data.push(r.read_f32::<LittleEndian>().map_err(trunc)? as f64);
                    }
                    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())
                };
                m.push(read_array(&mut r)?);
                v.push(read_array(&mut r)?);
            }
            Some(OptimizerState { m, v, steps })
        }
        _ => return Err(fmt("invalid optimizer-state flag".to_string())),
    };
    expect_eof(&mut r, path)?;

    Ok(Checkpoint {
        role,
        epoch,
        config_hash,
        tme_stages,
        recognizer,
        optimizer,
    })
}
