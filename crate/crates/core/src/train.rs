//! Training procedures: the teacher/assistant/student loop with selective
//! EMA transfer, the conventional teacher-student baseline, and a plain
//! supervised baseline, plus the SGD and EMA primitives they share.
//!
//! The defining property of the three-model loop is at the parameter level:
//! the student's mask predictor `g` is only ever touched by SGD on
//! labeled-data Dice loss. Pseudo-label knowledge reaches the student
//! exclusively through the EMA transfer of the assistant's feature
//! extractor `f`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::{self, dice_loss, kl_loss, LossError, PseudoMode, TauSchedule};
use crate::net::{
    CheckpointError, CheckpointReader, CheckpointWriter, ModelTriplet, NetError,
    NetworkArchitecture, ParameterSet, SegNet,
};
use crate::rng::{self, RngSnapshot};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("labeled set is empty")]
    EmptyLabeledSet,
    #[error("parameter {0} has no gradient; run backward before sgd_step")]
    MissingGrad(String),
    #[error("ema: {0}")]
    EmaMismatch(String),
    #[error("checkpoint config hash {found:#x} does not match expected {expected:#x}")]
    ConfigHashMismatch { found: u64, expected: u64 },
    #[error("checkpoint metadata corrupt: {0}")]
    BadMetadata(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Ttas,
    Ts,
    Supervised,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ttas => "ttas",
            Method::Ts => "ts",
            Method::Supervised => "supervised",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "ttas" => Some(Method::Ttas),
            "ts" => Some(Method::Ts),
            "supervised" => Some(Method::Supervised),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// When the assistant's feature extractor is folded into the student's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferTiming {
    /// After every assistant SGD step.
    PerBatch,
    /// Once at the end of the unlabeled phase of each epoch.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Learning rate for plain SGD.
    pub alpha: f64,
    /// Override for the student update only; `None` means use `alpha`.
    pub student_alpha: Option<f64>,
    /// EMA coefficient: target <- gamma * target + (1 - gamma) * source.
    pub gamma: f64,
    pub tau_schedule: TauSchedule,
    pub pseudo_mode: PseudoMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Alternate unlabeled/labeled batches instead of running all unlabeled
    /// steps first.
    pub interleave: bool,
    /// Timing of the assistant-to-student feature transfer. Per-epoch keeps
    /// the pull gentle when unlabeled batches far outnumber labeled ones.
    pub assistant_transfer: TransferTiming,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ttas,
            alpha: 0.05,
            student_alpha: None,
            gamma: 0.99,
            tau_schedule: TauSchedule::Constant { tau: 0.7 },
            pseudo_mode: PseudoMode::TwoSided,
            epochs: 60,
            batch_size: 4,
            seed: 0,
            interleave: false,
            assistant_transfer: TransferTiming::PerEpoch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // alpha = 0 is allowed so isolation experiments can freeze a model.
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("alpha {}", self.alpha)));
        }
        if let Some(sa) = self.student_alpha {
            if !(sa >= 0.0 && sa.is_finite()) {
                return Err(TrainError::InvalidConfig(format!("student_alpha {sa}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TrainError::InvalidConfig(format!("gamma {}", self.gamma)));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if let Some(total) = self.tau_schedule.total_epochs() {
            if total < self.epochs {
                return Err(TrainError::InvalidConfig(format!(
                    "tau ramp covers {total} epochs but training runs {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    fn student_alpha(&self) -> f64 {
        self.student_alpha.unwrap_or(self.alpha)
    }

    /// Canonical textual form; the config hash is FNV-1a over these bytes.
    pub fn canonical_string(&self) -> String {
        let (tau_kind, tau_start, tau_end, tau_total) = match &self.tau_schedule {
            TauSchedule::Constant { tau } => ("constant", *tau, *tau, 0usize),
            TauSchedule::LinearRamp { tau_start, tau_end, total_epochs } => {
                ("linear_ramp", *tau_start, *tau_end, *total_epochs)
            }
        };
        let mode = match self.pseudo_mode {
            PseudoMode::TwoSided => "two_sided",
            PseudoMode::ForegroundOnly => "foreground_only",
        };
        let transfer = match self.assistant_transfer {
            TransferTiming::PerBatch => "per_batch",
            TransferTiming::PerEpoch => "per_epoch",
        };
        format!(
            "method={} alpha={} student_alpha={:?} gamma={} tau={tau_kind}:{tau_start}:{tau_end}:{tau_total} \
             pseudo_mode={mode} epochs={} batch_size={} seed={} interleave={} assistant_transfer={transfer}",
            self.method, self.alpha, self.student_alpha, self.gamma,
            self.epochs, self.batch_size, self.seed, self.interleave
        )
    }

    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_string().as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// One labeled training case as tensors: image `[1,H,W]`, binary mask
/// `[1,H,W]`.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub image: Tensor,
    pub mask: Tensor,
}

/// Per-epoch log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean Dice loss over labeled batches.
    pub labeled_loss: f64,
    /// Mean loss over unlabeled batches that actually ran: KL for the
    /// three-model loop, pseudo-label Dice for the plain teacher-student.
    pub unlabeled_loss: Option<f64>,
    /// Mean kept-voxel fraction over all unlabeled batches.
    pub kept_fraction: f64,
    /// Unlabeled batches skipped because thresholding kept nothing.
    pub skipped_batches: u32,
    /// Dice of the inference model on the labeled set after this epoch.
    pub val_dice: f64,
}

/// How many times each EMA call site fired; the student's `g` has no call
/// site at all, which is the point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmaCounters {
    pub student_f: u64,
    pub teacher_f: u64,
    pub teacher_g: u64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub models: ModelTriplet,
    pub cfg: TrainConfig,
    pub epoch: usize,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    pub ema_counters: EmaCounters,
}

/// Plain SGD: `w <- w - alpha * grad(w)` on every parameter, then clear the
/// gradients.
pub fn sgd_step(params: &mut ParameterSet, alpha: f64) -> Result<()> {
    for (name, t) in params.iter_all() {
        if t.grad().is_none() {
            return Err(TrainError::MissingGrad(name.clone()));
        }
    }
    for (_, t) in params.iter_all_mut() {
        let grad = t.grad().expect("checked above").to_vec();
        for (w, g) in t.values_mut().iter_mut().zip(&grad) {
            *w -= alpha * g;
        }
        t.clear_grad();
    }
    Ok(())
}

/// `target <- gamma * target + (1 - gamma) * source`, elementwise over a
/// named tensor map.
pub fn ema_update(
    target: &mut BTreeMap<String, Tensor>,
    source: &BTreeMap<String, Tensor>,
    gamma: f64,
) -> Result<()> {
    if target.len() != source.len() {
        return Err(TrainError::EmaMismatch(format!(
            "{} vs {} tensors",
            target.len(),
            source.len()
        )));
    }
    for ((tn, tt), (sn, st)) in target.iter_mut().zip(source.iter()) {
        if tn != sn {
            return Err(TrainError::EmaMismatch(format!("name {tn} vs {sn}")));
        }
        if tt.shape() != st.shape() {
            return Err(TrainError::EmaMismatch(format!(
                "{tn}: shape {:?} vs {:?}",
                tt.shape(),
                st.shape()
            )));
        }
        for (t, s) in tt.values_mut().iter_mut().zip(st.values()) {
            *t = gamma * *t + (1.0 - gamma) * *s;
        }
    }
    Ok(())
}

/// Stack `[1,H,W]` tensors into an `[N,1,H,W]` batch.
fn stack(images: &[&Tensor]) -> Tensor {
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    let mut values = Vec::with_capacity(images.len() * h * w);
    for img in images {
        values.extend_from_slice(img.values());
    }
    Tensor::new(vec![images.len(), 1, h, w], values).expect("consistent shapes")
}

fn chunk_indices(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(batch)
        .map(|lo| lo..(lo + batch).min(n))
        .collect()
}

/// Binary Dice of prediction probabilities vs a binary mask at the 0.5
/// threshold; both-empty counts as 1.
fn binary_dice(probs: &[f64], mask: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (p, m) in probs.iter().zip(mask) {
        let pf = *p > 0.5;
        let mf = *m != 0.0;
        a += usize::from(pf);
        b += usize::from(mf);
        inter += usize::from(pf && mf);
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

enum Step {
    Unlabeled(std::ops::Range<usize>),
    Labeled(std::ops::Range<usize>),
}

fn step_order(n_unlabeled: usize, n_labeled: usize, batch: usize, interleave: bool) -> Vec<Step> {
    let u = chunk_indices(n_unlabeled, batch);
    let l = chunk_indices(n_labeled, batch);
    if !interleave {
        return u
            .into_iter()
            .map(Step::Unlabeled)
            .chain(l.into_iter().map(Step::Labeled))
            .collect();
    }
    let mut out = Vec::with_capacity(u.len() + l.len());
    let mut ui = u.into_iter();
    let mut li = l.into_iter();
    loop {
        match (ui.next(), li.next()) {
            (None, None) => break,
            (ur, lr) => {
                if let Some(r) = ur {
                    out.push(Step::Unlabeled(r));
                }
                if let Some(r) = lr {
                    out.push(Step::Labeled(r));
                }
            }
        }
    }
    out
}

/// Owns one training run: architecture, config, and the evolving state.
pub struct Trainer {
    net: SegNet,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(arch: NetworkArchitecture, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let models = ModelTriplet::init(arch.clone(), cfg.seed)?;
        let rng = rng::stream(rng::derive_seed(cfg.seed, "train-loop"), 0);
        Ok(Self {
            net: SegNet::new(arch)?,
            state: TrainState {
                models,
                cfg,
                epoch: 0,
                iteration: 0,
                rng,
                history: Vec::new(),
                ema_counters: EmaCounters::default(),
            },
        })
    }

    pub fn from_state(state: TrainState) -> Result<Self> {
        state.cfg.validate()?;
        state.models.check_consistent()?;
        Ok(Self {
            net: SegNet::new(state.models.arch.clone())?,
            state,
        })
    }

    /// Probabilities from the model used at inference time: the teacher for
    /// the semi-supervised methods, the single (student-slot) model for the
    /// supervised baseline.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let params = self.inference_params();
        Ok(self.net.forward(params, batch)?)
    }

    pub fn inference_params(&self) -> &ParameterSet {
        match self.state.cfg.method {
            Method::Ttas | Method::Ts => &self.state.models.teacher,
            Method::Supervised => &self.state.models.student,
        }
    }

    /// Run one epoch of the configured method.
    pub fn run_epoch(&mut self, labeled: &[LabeledExample], unlabeled: &[Tensor]) -> Result<&EpochRecord> {
        match self.state.cfg.method {
            Method::Ttas => self.ttas_epoch(labeled, unlabeled),
            Method::Ts => self.ts_epoch(labeled, unlabeled),
            Method::Supervised => self.supervised_epoch(labeled),
        }
    }

    /// Run epochs until `state.epoch == state.cfg.epochs`.
    pub fn train(&mut self, labeled: &[LabeledExample], unlabeled: &[Tensor]) -> Result<()> {
        while self.state.epoch < self.state.cfg.epochs {
            self.run_epoch(labeled, unlabeled)?;
        }
        Ok(())
    }

    /// One epoch of the three-model procedure.
    ///
    /// Per unlabeled batch: teacher predicts, pseudo-labels are thresholded
    /// at this epoch's tau, the assistant takes one KL SGD step, and the
    /// student's feature extractor absorbs the assistant's by EMA. Per
    /// labeled batch: the student takes one Dice SGD step and the teacher
    /// absorbs the whole student by EMA.
    pub fn ttas_epoch(&mut self, labeled: &[LabeledExample], unlabeled: &[Tensor]) -> Result<&EpochRecord> {
        self.check_labeled(labeled)?;
        let cfg = self.state.cfg.clone();
        let tau = cfg.tau_schedule.tau_at_epoch(self.state.epoch)?;
        let mut ul_losses = Vec::new();
        let mut kept_fractions = Vec::new();
        let mut skipped = 0u32;
        let mut labeled_losses = Vec::new();
        let mut assistant_steps = 0u32;

        let steps = step_order(unlabeled.len(), labeled.len(), cfg.batch_size, cfg.interleave);
        let last_unlabeled = steps
            .iter()
            .rposition(|s| matches!(s, Step::Unlabeled(_)));
        for (step_idx, step) in steps.into_iter().enumerate() {
            match step {
                Step::Unlabeled(range) => {
                    let batch = stack(&unlabeled[range].iter().collect::<Vec<_>>());
                    let teacher_probs = self.net.forward(&self.state.models.teacher, &batch)?;
                    let pseudo = losses::make_pseudo_labels(&teacher_probs, tau, cfg.pseudo_mode)?;
                    kept_fractions.push(pseudo.kept_fraction());
                    if pseudo.kept_count() == 0 {
                        skipped += 1;
                        continue;
                    }
                    let mut graph = Graph::new();
                    let pass =
                        self.net
                            .forward_graph(&mut graph, &self.state.models.assistant, &batch)?;
                    let loss = kl_loss(
                        &mut graph,
                        &pseudo.soft_labels,
                        pass.probs,
                        &pseudo.keep_mask,
                    )?;
                    ul_losses.push(graph.scalar_value(loss));
                    graph.backward(loss)?;
                    pass.pull_grads(&graph, &mut self.state.models.assistant);
                    sgd_step(&mut self.state.models.assistant, cfg.alpha)?;
                    if cfg.assistant_transfer == TransferTiming::PerBatch {
                        ema_update(
                            self.state.models.student.f_params_mut(),
                            self.state.models.assistant.f_params(),
                            cfg.gamma,
                        )?;
                        self.state.ema_counters.student_f += 1;
                    }
                    assistant_steps += 1;
                    self.state.iteration += 1;
                }
                Step::Labeled(range) => {
                    labeled_losses.push(self.student_dice_step(&labeled[range], cfg.student_alpha())?);
                    self.teacher_absorb_student(cfg.gamma)?;
                    self.state.iteration += 1;
                }
            }
            // A per-epoch transfer closes the unlabeled phase, before the
            // student's ground-truth steps of the same epoch.
            if cfg.assistant_transfer == TransferTiming::PerEpoch
                && last_unlabeled == Some(step_idx)
                && assistant_steps > 0
            {
                ema_update(
                    self.state.models.student.f_params_mut(),
                    self.state.models.assistant.f_params(),
                    cfg.gamma,
                )?;
                self.state.ema_counters.student_f += 1;
            }
        }
        self.finish_epoch(labeled, labeled_losses, ul_losses, kept_fractions, skipped)
    }

    /// One epoch of the conventional teacher-student baseline: the student
    /// trains on true labels and on teacher pseudo-labels hardened at 0.5;
    /// the teacher is the EMA of the whole student.
    pub fn ts_epoch(&mut self, labeled: &[LabeledExample], unlabeled: &[Tensor]) -> Result<&EpochRecord> {
        self.check_labeled(labeled)?;
        let cfg = self.state.cfg.clone();
        let mut ul_losses = Vec::new();
        let mut kept_fractions = Vec::new();
        let mut labeled_losses = Vec::new();

        // Labeled batches run first: the epoch's pseudo-labels then come
        // from a teacher that has already seen this epoch's true labels.
        let mut steps = step_order(unlabeled.len(), labeled.len(), cfg.batch_size, cfg.interleave);
        if !cfg.interleave {
            steps.sort_by_key(|s| matches!(s, Step::Unlabeled(_)));
        }
        for step in steps {
            match step {
                Step::Unlabeled(range) => {
                    let batch = stack(&unlabeled[range].iter().collect::<Vec<_>>());
                    let teacher_probs = self.net.forward(&self.state.models.teacher, &batch)?;
                    let hard: Vec<f64> = teacher_probs
                        .values()
                        .iter()
                        .map(|p| f64::from(u8::from(*p > 0.5)))
                        .collect();
                    let hard = Tensor::new(teacher_probs.shape().to_vec(), hard)?;
                    kept_fractions.push(1.0);
                    let mut graph = Graph::new();
                    let pass =
                        self.net
                            .forward_graph(&mut graph, &self.state.models.student, &batch)?;
                    let loss = dice_loss(&mut graph, &hard, pass.probs)?;
                    ul_losses.push(graph.scalar_value(loss));
                    graph.backward(loss)?;
                    pass.pull_grads(&graph, &mut self.state.models.student);
                    sgd_step(&mut self.state.models.student, cfg.student_alpha())?;
                    self.teacher_absorb_student(cfg.gamma)?;
                    self.state.iteration += 1;
                }
                Step::Labeled(range) => {
                    labeled_losses.push(self.student_dice_step(&labeled[range], cfg.student_alpha())?);
                    self.teacher_absorb_student(cfg.gamma)?;
                    self.state.iteration += 1;
                }
            }
        }
        self.finish_epoch(labeled, labeled_losses, ul_losses, kept_fractions, 0)
    }

    /// One epoch of the supervised baseline: a single model (kept in the
    /// student slot), Dice loss, no EMA, no pseudo-labels.
    pub fn supervised_epoch(&mut self, labeled: &[LabeledExample]) -> Result<&EpochRecord> {
        self.check_labeled(labeled)?;
        let cfg = self.state.cfg.clone();
        let mut labeled_losses = Vec::new();
        for range in chunk_indices(labeled.len(), cfg.batch_size) {
            labeled_losses.push(self.student_dice_step(&labeled[range], cfg.student_alpha())?);
            self.state.iteration += 1;
        }
        self.finish_epoch(labeled, labeled_losses, Vec::new(), Vec::new(), 0)
    }

    fn check_labeled(&self, labeled: &[LabeledExample]) -> Result<()> {
        if labeled.is_empty() {
            return Err(TrainError::EmptyLabeledSet);
        }
        Ok(())
    }

    /// Student forward + Dice loss + SGD on one labeled batch.
    fn student_dice_step(&mut self, batch: &[LabeledExample], alpha: f64) -> Result<f64> {
        let images = stack(&batch.iter().map(|e| &e.image).collect::<Vec<_>>());
        let masks = stack(&batch.iter().map(|e| &e.mask).collect::<Vec<_>>());
        let mut graph = Graph::new();
        let pass = self
            .net
            .forward_graph(&mut graph, &self.state.models.student, &images)?;
        let loss = dice_loss(&mut graph, &masks, pass.probs)?;
        let value = graph.scalar_value(loss);
        graph.backward(loss)?;
        pass.pull_grads(&graph, &mut self.state.models.student);
        sgd_step(&mut self.state.models.student, alpha)?;
        Ok(value)
    }

    fn teacher_absorb_student(&mut self, gamma: f64) -> Result<()> {
        let student_f = self.state.models.student.f_params().clone();
        let student_g = self.state.models.student.g_params().clone();
        ema_update(self.state.models.teacher.f_params_mut(), &student_f, gamma)?;
        self.state.ema_counters.teacher_f += 1;
        ema_update(self.state.models.teacher.g_params_mut(), &student_g, gamma)?;
        self.state.ema_counters.teacher_g += 1;
        Ok(())
    }

    fn finish_epoch(
        &mut self,
        labeled: &[LabeledExample],
        labeled_losses: Vec<f64>,
        ul_losses: Vec<f64>,
        kept_fractions: Vec<f64>,
        skipped: u32,
    ) -> Result<&EpochRecord> {
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let val_dice = self.labeled_set_dice(labeled)?;
        let record = EpochRecord {
            epoch: self.state.epoch,
            labeled_loss: mean(&labeled_losses),
            unlabeled_loss: if ul_losses.is_empty() {
                None
            } else {
                Some(mean(&ul_losses))
            },
            kept_fraction: if kept_fractions.is_empty() {
                0.0
            } else {
                mean(&kept_fractions)
            },
            skipped_batches: skipped,
            val_dice,
        };
        self.state.history.push(record);
        self.state.epoch += 1;
        Ok(self.state.history.last().expect("just pushed"))
    }

    fn labeled_set_dice(&self, labeled: &[LabeledExample]) -> Result<f64> {
        let params = self.inference_params();
        let mut total = 0.0;
        for range in chunk_indices(labeled.len(), self.state.cfg.batch_size) {
            let cases = &labeled[range];
            let images = stack(&cases.iter().map(|e| &e.image).collect::<Vec<_>>());
            let probs = self.net.forward(params, &images)?;
            let plane: usize = cases[0].image.len();
            for (i, case) in cases.iter().enumerate() {
                let slice = &probs.values()[i * plane..(i + 1) * plane];
                total += binary_dice(slice, case.mask.values());
            }
        }
        Ok(total / labeled.len() as f64)
    }
}

// ---- train-state checkpointing ----
//
// A train-state file is the parameter checkpoint container holding all three
// models (names prefixed `teacher.` / `assistant.` / `student.`), followed
// by a `META` block with config, counters, rng position and history.

const META_MAGIC: &[u8; 4] = b"META";

fn write_f64(out: &mut impl Write, v: f64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn write_u64(out: &mut impl Write, v: u64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn write_u32(out: &mut impl Write, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

pub fn save_train_state(path: &Path, state: &TrainState) -> Result<()> {
    let file = std::fs::File::create(path).map_err(CheckpointError::Io)?;
    let mut w = CheckpointWriter::new(
        std::io::BufWriter::new(file),
        &state.models.arch,
        3 * state.models.teacher.tensor_count(),
    )?;
    for (prefix, params) in [
        ("teacher", &state.models.teacher),
        ("assistant", &state.models.assistant),
        ("student", &state.models.student),
    ] {
        for (name, t) in params.f_params() {
            w.tensor(&format!("{prefix}.f.{name}"), t)?;
        }
        for (name, t) in params.g_params() {
            w.tensor(&format!("{prefix}.g.{name}"), t)?;
        }
    }
    let mut out = w.into_inner();
    let io = |e: std::io::Error| TrainError::Checkpoint(CheckpointError::Io(e));
    out.write_all(META_MAGIC).map_err(io)?;
    let cfg = &state.cfg;
    let method = match cfg.method {
        Method::Ttas => 0u8,
        Method::Ts => 1,
        Method::Supervised => 2,
    };
    let mode = match cfg.pseudo_mode {
        PseudoMode::TwoSided => 0u8,
        PseudoMode::ForegroundOnly => 1,
    };
    let transfer = match cfg.assistant_transfer {
        TransferTiming::PerBatch => 0u8,
        TransferTiming::PerEpoch => 1,
    };
    out.write_all(&[method, mode, u8::from(cfg.interleave), transfer])
        .map_err(io)?;
    write_f64(&mut out, cfg.alpha).map_err(io)?;
    match cfg.student_alpha {
        Some(sa) => {
            out.write_all(&[1]).map_err(io)?;
            write_f64(&mut out, sa).map_err(io)?;
        }
        None => {
            out.write_all(&[0]).map_err(io)?;
            write_f64(&mut out, 0.0).map_err(io)?;
        }
    }
    write_f64(&mut out, cfg.gamma).map_err(io)?;
    let (kind, t0, t1, total) = match &cfg.tau_schedule {
        TauSchedule::Constant { tau } => (0u8, *tau, *tau, 0u64),
        TauSchedule::LinearRamp { tau_start, tau_end, total_epochs } => {
            (1u8, *tau_start, *tau_end, *total_epochs as u64)
        }
    };
    out.write_all(&[kind]).map_err(io)?;
    write_f64(&mut out, t0).map_err(io)?;
    write_f64(&mut out, t1).map_err(io)?;
    write_u64(&mut out, total).map_err(io)?;
    write_u64(&mut out, cfg.epochs as u64).map_err(io)?;
    write_u64(&mut out, cfg.batch_size as u64).map_err(io)?;
    write_u64(&mut out, cfg.seed).map_err(io)?;
    write_u64(&mut out, cfg.hash()).map_err(io)?;
    write_u32(&mut out, state.epoch as u32).map_err(io)?;
    write_u64(&mut out, state.iteration).map_err(io)?;
    let snap = rng::snapshot(&state.rng);
    out.write_all(&snap.seed).map_err(io)?;
    write_u64(&mut out, snap.stream).map_err(io)?;
    out.write_all(&snap.word_pos.to_le_bytes()).map_err(io)?;
    write_u64(&mut out, state.ema_counters.student_f).map_err(io)?;
    write_u64(&mut out, state.ema_counters.teacher_f).map_err(io)?;
    write_u64(&mut out, state.ema_counters.teacher_g).map_err(io)?;
    write_u32(&mut out, state.history.len() as u32).map_err(io)?;
    for rec in &state.history {
        write_u32(&mut out, rec.epoch as u32).map_err(io)?;
        write_f64(&mut out, rec.labeled_loss).map_err(io)?;
        match rec.unlabeled_loss {
            Some(v) => {
                out.write_all(&[1]).map_err(io)?;
                write_f64(&mut out, v).map_err(io)?;
            }
            None => {
                out.write_all(&[0]).map_err(io)?;
                write_f64(&mut out, 0.0).map_err(io)?;
            }
        }
        write_f64(&mut out, rec.kept_fraction).map_err(io)?;
        write_u32(&mut out, rec.skipped_batches).map_err(io)?;
        write_f64(&mut out, rec.val_dice).map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(())
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read) -> std::io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let file = std::fs::File::open(path).map_err(CheckpointError::Io)?;
    let mut reader = CheckpointReader::new(std::io::BufReader::new(file))?;
    let mut maps: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
    while let Some((name, tensor)) = reader.next_tensor()? {
        let mut parts = name.splitn(3, '.');
        let (model, part, rest) = match (parts.next(), parts.next(), parts.next()) {
            (Some(m), Some(p), Some(r)) => (m.to_string(), p.to_string(), r.to_string()),
            _ => {
                return Err(TrainError::BadMetadata(format!(
                    "unrecognized tensor name {name}"
                )))
            }
        };
        maps.entry(format!("{model}.{part}"))
            .or_default()
            .insert(rest, tensor);
    }
    let arch = reader.arch.clone();
    let mut take = |key: &str| maps.remove(key).unwrap_or_default();
    let assemble = |f: BTreeMap<String, Tensor>, g: BTreeMap<String, Tensor>| {
        let mut params = SegNet::new(arch.clone())
            .expect("validated on write")
            .init_params(0);
        *params.f_params_mut() = f;
        *params.g_params_mut() = g;
        params
    };
    let teacher = assemble(take("teacher.f"), take("teacher.g"));
    let assistant = assemble(take("assistant.f"), take("assistant.g"));
    let student = assemble(take("student.f"), take("student.g"));

    let mut r = reader.into_inner();
    let io = |e: std::io::Error| TrainError::BadMetadata(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != META_MAGIC {
        return Err(TrainError::BadMetadata("missing META block".into()));
    }
    let method = match read_u8(&mut r).map_err(io)? {
        0 => Method::Ttas,
        1 => Method::Ts,
        2 => Method::Supervised,
        other => return Err(TrainError::BadMetadata(format!("method tag {other}"))),
    };
    let pseudo_mode = match read_u8(&mut r).map_err(io)? {
        0 => PseudoMode::TwoSided,
        1 => PseudoMode::ForegroundOnly,
        other => return Err(TrainError::BadMetadata(format!("pseudo mode tag {other}"))),
    };
    let interleave = read_u8(&mut r).map_err(io)? != 0;
    let assistant_transfer = match read_u8(&mut r).map_err(io)? {
        0 => TransferTiming::PerBatch,
        1 => TransferTiming::PerEpoch,
        other => return Err(TrainError::BadMetadata(format!("transfer tag {other}"))),
    };
    let alpha = read_f64(&mut r).map_err(io)?;
    let has_sa = read_u8(&mut r).map_err(io)? != 0;
    let sa = read_f64(&mut r).map_err(io)?;
    let gamma = read_f64(&mut r).map_err(io)?;
    let kind = read_u8(&mut r).map_err(io)?;
    let t0 = read_f64(&mut r).map_err(io)?;
    let t1 = read_f64(&mut r).map_err(io)?;
    let total = read_u64(&mut r).map_err(io)? as usize;
    let tau_schedule = match kind {
        0 => TauSchedule::Constant { tau: t0 },
        1 => TauSchedule::LinearRamp { tau_start: t0, tau_end: t1, total_epochs: total },
        other => return Err(TrainError::BadMetadata(format!("tau kind {other}"))),
    };
    let epochs = read_u64(&mut r).map_err(io)? as usize;
    let batch_size = read_u64(&mut r).map_err(io)? as usize;
    let seed = read_u64(&mut r).map_err(io)?;
    let cfg = TrainConfig {
        method,
        alpha,
        student_alpha: has_sa.then_some(sa),
        gamma,
        tau_schedule,
        pseudo_mode,
        epochs,
        batch_size,
        seed,
        interleave,
        assistant_transfer,
    };
    let stored_hash = read_u64(&mut r).map_err(io)?;
    if stored_hash != cfg.hash() {
        return Err(TrainError::ConfigHashMismatch {
            found: stored_hash,
            expected: cfg.hash(),
        });
    }
    let epoch = read_u32(&mut r).map_err(io)? as usize;
    let iteration = read_u64(&mut r).map_err(io)?;
    let mut seed_bytes = [0u8; 32];
    r.read_exact(&mut seed_bytes).map_err(io)?;
    let stream = read_u64(&mut r).map_err(io)?;
    let mut wp = [0u8; 16];
    r.read_exact(&mut wp).map_err(io)?;
    let rng = rng::restore(&RngSnapshot {
        seed: seed_bytes,
        stream,
        word_pos: u128::from_le_bytes(wp),
    });
    let ema_counters = EmaCounters {
        student_f: read_u64(&mut r).map_err(io)?,
        teacher_f: read_u64(&mut r).map_err(io)?,
        teacher_g: read_u64(&mut r).map_err(io)?,
    };
    let n_hist = read_u32(&mut r).map_err(io)? as usize;
    let mut history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        let epoch = read_u32(&mut r).map_err(io)? as usize;
        let labeled_loss = read_f64(&mut r).map_err(io)?;
        let has_ul = read_u8(&mut r).map_err(io)? != 0;
        let ul = read_f64(&mut r).map_err(io)?;
        let kept_fraction = read_f64(&mut r).map_err(io)?;
        let skipped_batches = read_u32(&mut r).map_err(io)?;
        let val_dice = read_f64(&mut r).map_err(io)?;
        history.push(EpochRecord {
            epoch,
            labeled_loss,
            unlabeled_loss: has_ul.then_some(ul),
            kept_fraction,
            skipped_batches,
            val_dice,
        });
    }
    Ok(TrainState {
        models: ModelTriplet {
            teacher,
            assistant,
            student,
            arch,
        },
        cfg,
        epoch,
        iteration,
        rng,
        history,
        ema_counters,
    })
}
