//! Loss assembly, the two-stage self-supervised pretraining loop, the
//! fine-tuning loop, dataset splitting, and evaluation metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fragmenter::{FragError, FragmentVocab};
use crate::fuser::{make_mask, mask_reconstruction_loss, MaskPlan};
use crate::gssm::MgAblation;
use crate::model::{
    fusion_forward, predict, prepare, structure_forward, ModelDims, ModelState, Prepared,
};
use crate::molgraph::{normalize_descriptors, MolError, Molecule, DESCRIPTOR_COUNT};
use crate::tensor::{cross_entropy_rows, no_grad, seeded_rng, Result as TensorResult, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fragment(#[from] FragError),
    #[error(transparent)]
    Molecule(#[from] MolError),
    #[error("non-finite loss at epoch {epoch}, step {step} ({component})")]
    Diverged { epoch: usize, step: usize, component: String },
    #[error("metric: {0}")]
    Metric(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("no molecule carries a label for task \"{0}\"")]
    UnknownTask(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ── configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Classification,
    Regression,
}

/// Every hyperparameter, with published defaults. Loaded from a flat TOML
/// key-value file whose keys mirror the field names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Temperature for the distribution-collaboration softmax.
    pub tau: f64,
    /// Descriptor mask ratio in percent.
    pub alpha: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub lambda_f: f64,
    pub lambda_mask: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Epochs of structure-only training before fusion training starts;
    /// defaults to half the epoch budget.
    pub stage1_epochs: Option<usize>,
    pub patience: usize,
    pub seed: u64,
    pub split_train: u32,
    pub split_val: u32,
    pub split_test: u32,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub task_type: TaskType,
    pub d: usize,
    pub d_hidden: usize,
    pub n_state: usize,
    pub conv_kernel: usize,
    pub gin_layers: usize,
    pub schnet_layers: usize,
    pub mamba_layers: usize,
    pub mt_layers: usize,
    pub attn_heads: usize,
    pub rbf_count: usize,
    pub rbf_cutoff: f64,
    pub pe_frag_slots: usize,
    pub pe_intra_slots: usize,
    pub pe_width: usize,
    pub ablate_sort: bool,
    pub ablate_pe: bool,
    pub ablate_gssm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.5,
            alpha: 10.0,
            lambda_d: 0.1,
            lambda_s: 0.1,
            lambda_f: 20.0,
            lambda_mask: 0.1,
            lr: 1e-4,
            batch: 64,
            epochs: 100,
            stage1_epochs: None,
            patience: 10,
            seed: 0,
            split_train: 8,
            split_val: 1,
            split_test: 1,
            weight_decay: 0.01,
            grad_clip: 5.0,
            task_type: TaskType::Classification,
            d: 64,
            d_hidden: 128,
            n_state: 16,
            conv_kernel: 4,
            gin_layers: 6,
            schnet_layers: 6,
            mamba_layers: 2,
            mt_layers: 2,
            attn_heads: 4,
            rbf_count: 16,
            rbf_cutoff: 8.0,
            pe_frag_slots: 256,
            pe_intra_slots: 64,
            pe_width: 8,
            ablate_sort: false,
            ablate_pe: false,
            ablate_gssm: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialization")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |msg: String| Err(TrainError::Config(msg));
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_s", self.lambda_s),
            ("lambda_f", self.lambda_f),
            ("lambda_mask", self.lambda_mask),
        ] {
            if v < 0.0 || !v.is_finite() {
                return err(format!("{name} must be a non-negative finite weight"));
            }
        }
        if self.split_train + self.split_val + self.split_test != 10 {
            return err(format!(
                "split ratio {}:{}:{} must sum to 10 parts",
                self.split_train, self.split_val, self.split_test
            ));
        }
        if self.tau < 0.0 || !self.tau.is_finite() {
            return err("tau must be non-negative".into());
        }
        if !(0.0..=100.0).contains(&self.alpha) {
            return err("alpha must be a percentage".into());
        }
        if self.batch == 0 || self.epochs == 0 {
            return err("batch and epochs must be positive".into());
        }
        if self.d % self.attn_heads != 0 {
            return err(format!("width {} must divide into {} heads", self.d, self.attn_heads));
        }
        if let Some(s1) = self.stage1_epochs {
            if s1 > self.epochs {
                return err("stage1_epochs exceeds the epoch budget".into());
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d: self.d,
            d_hidden: self.d_hidden,
            n_state: self.n_state,
            conv_kernel: self.conv_kernel,
            gin_layers: self.gin_layers,
            schnet_layers: self.schnet_layers,
            mamba_layers: self.mamba_layers,
            mt_layers: self.mt_layers,
            attn_heads: self.attn_heads,
            rbf_count: self.rbf_count,
            rbf_cutoff: self.rbf_cutoff,
            pe_frag_slots: self.pe_frag_slots,
            pe_intra_slots: self.pe_intra_slots,
            pe_width: self.pe_width,
            num_tasks: 1,
        }
    }

    pub fn ablation(&self) -> MgAblation {
        MgAblation { no_sort: self.ablate_sort, no_pe: self.ablate_pe, no_gssm: self.ablate_gssm }
    }

    fn stage1_len(&self) -> usize {
        self.stage1_epochs.unwrap_or(self.epochs / 2)
    }
}

// ── losses ───────────────────────────────────────────────────────────────

/// Symmetric distribution-collaboration loss between fragment features
/// from the two structure encoders.
///
/// p = softmax(tau * F_F), q = softmax(tau * F_A^M) over the feature axis;
/// the pseudo-label side of each cross-entropy direction is detached.
pub fn distribution_loss(
    frag_features: &Tensor,
    pooled: &Tensor,
    tau: f64,
) -> TensorResult<Tensor> {
    if frag_features.shape() != pooled.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "distribution_loss",
            details: format!("{:?} vs {:?}", frag_features.shape(), pooled.shape()),
        });
    }
    let logits_f = frag_features.scale(tau)?;
    let logits_a = pooled.scale(tau)?;
    let p_f = logits_f.softmax_rows()?.detach();
    let p_a = logits_a.softmax_rows()?.detach();
    let ce_f_to_a = cross_entropy_rows(&p_f, &logits_a)?;
    let ce_a_to_f = cross_entropy_rows(&p_a, &logits_f)?;
    ce_f_to_a.add(&ce_a_to_f)
}

/// The four pretraining loss terms of one molecule.
pub struct LossBundle {
    pub loss_d: Tensor,
    pub loss_s: Tensor,
    pub loss_f: Tensor,
    pub loss_mask: Tensor,
}

impl LossBundle {
    pub fn values(&self) -> [f64; 4] {
        [self.loss_d.item(), self.loss_s.item(), self.loss_f.item(), self.loss_mask.item()]
    }
}

/// Weighted total per the published loss weights. Components must be
/// finite; the offending component is named otherwise.
pub fn total_loss(bundle: &LossBundle, cfg: &TrainConfig) -> Result<Tensor, TrainError> {
    for (name, t) in [
        ("loss_d", &bundle.loss_d),
        ("loss_s", &bundle.loss_s),
        ("loss_f", &bundle.loss_f),
        ("loss_mask", &bundle.loss_mask),
    ] {
        if !t.item().is_finite() {
            return Err(TrainError::Diverged { epoch: 0, step: 0, component: name.into() });
        }
    }
    let weighted = bundle
        .loss_d
        .scale(cfg.lambda_d)?
        .add(&bundle.loss_s.scale(cfg.lambda_s)?)?
        .add(&bundle.loss_f.scale(cfg.lambda_f)?)?
        .add(&bundle.loss_mask.scale(cfg.lambda_mask)?)?;
    Ok(weighted)
}

/// All four losses for one molecule. With `mask_in_graph` false the
/// reconstruction term is evaluated without gradient tracking (stage-1
/// logging); the structure losses always build tape.
pub fn forward_losses(
    state: &ModelState,
    prep: &Prepared,
    mask: &MaskPlan,
    cfg: &TrainConfig,
    mask_in_graph: bool,
) -> TensorResult<LossBundle> {
    let structure = structure_forward(state, prep, cfg.ablation(), cfg.seed)?;
    let loss_d = distribution_loss(&structure.frag_features, &structure.mg.pooled, cfg.tau)?;
    let (trunk_target, frag_target) = prep.targets(state.vocab_size);
    let vocab_size = state.vocab_size;
    let trunk_t = Tensor::constant(&[1, vocab_size], trunk_target)?;
    let frag_t = Tensor::constant(&[1, vocab_size], frag_target)?;
    let loss_s = structure.mg.trunk_logits.bce_with_logits(&trunk_t, None)?;
    let loss_f = structure.mg.frag_logits.bce_with_logits(&frag_t, None)?;
    let loss_mask = if mask_in_graph {
        let fusion = fusion_forward(state, prep, &structure.mg.pooled, mask)?;
        mask_reconstruction_loss(&fusion.reconstruction, &fusion.target_tokens, mask)?
    } else {
        no_grad(|| -> TensorResult<Tensor> {
            let fusion = fusion_forward(state, prep, &structure.mg.pooled.detach(), mask)?;
            mask_reconstruction_loss(&fusion.reconstruction, &fusion.target_tokens, mask)
        })?
    };
    Ok(LossBundle { loss_d, loss_s, loss_f, loss_mask })
}

// ── optimizer ────────────────────────────────────────────────────────────

/// Adaptive-moment optimizer with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Drop all moment estimates (used at the stage-2 boundary).
    pub fn reset_moments(&mut self) {
        self.moments.clear();
        self.step_count = 0;
    }

    /// Clip gradients at `grad_clip` global norm, then update every
    /// parameter that received a gradient. Gradients are consumed.
    pub fn step(&mut self, state: &mut ModelState, grad_clip: f64) {
        let mut sq_norm = 0.0;
        state.for_each_param(&mut |_, t| {
            if let Some(g) = t.grad() {
                sq_norm += g.iter().map(|v| v * v).sum::<f64>();
            }
        });
        let norm = sq_norm.sqrt();
        let clip_scale = if grad_clip > 0.0 && norm > grad_clip { grad_clip / norm } else { 1.0 };
        self.step_count += 1;
        let t = self.step_count;
        let bias1 = 1.0 - self.beta1.powi(t as i32);
        let bias2 = 1.0 - self.beta2.powi(t as i32);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        state.for_each_param_mut(&mut |name, tensor| {
            let Some(grad) = tensor.grad() else { return };
            let n = tensor.numel();
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut data = tensor.data().to_vec();
            for i in 0..n {
                let g = grad[i] * clip_scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
            *tensor = Tensor::param(tensor.shape(), data).expect("optimizer update");
        });
    }
}

// ── splits and metrics ───────────────────────────────────────────────────

/// Seeded shuffle split into train/val/test index sets by the configured
/// ratio (parts of 10).
pub fn split_indices(
    n: usize,
    ratio: (u32, u32, u32),
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed ^ 0x5917));
    let train_end = (n as u64 * ratio.0 as u64 / 10) as usize;
    let val_end = train_end + (n as u64 * ratio.1 as u64 / 10) as usize;
    let train = idx[..train_end].to_vec();
    let val = idx[train_end..val_end.min(n)].to_vec();
    let test = idx[val_end.min(n)..].to_vec();
    (train, val, test)
}

/// Rank-statistic ROC-AUC with ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, TrainError> {
    if scores.len() != labels.len() {
        return Err(TrainError::Metric("scores and labels differ in length".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(TrainError::Metric(
            "ROC-AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups (1-based ranks)
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 =
        labels.iter().zip(&rank).filter(|(&l, _)| l).map(|(_, &r)| r).sum();
    let p = positives as f64;
    let n = negatives as f64;
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    assert_eq!(pred.len(), y.len());
    let mse: f64 =
        pred.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    mse.sqrt()
}

pub fn mae(pred: &[f64], y: &[f64]) -> f64 {
    assert_eq!(pred.len(), y.len());
    pred.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64
}

/// Per-task evaluation report; `folds` holds one test metric per fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metric: String,
    pub folds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub curves: BTreeMap<String, Vec<f64>>,
}

impl MetricsReport {
    pub fn from_folds(
        task: &str,
        metric: &str,
        folds: Vec<f64>,
        curves: BTreeMap<String, Vec<f64>>,
    ) -> Self {
        let n = folds.len().max(1) as f64;
        let mean = folds.iter().sum::<f64>() / n;
        let var = folds.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MetricsReport { task: task.into(), metric: metric.into(), folds, mean, std: var.sqrt(), curves }
    }
}

// ── pretraining ──────────────────────────────────────────────────────────

/// One epoch row of the loss curves CSV.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_s: f64,
    pub loss_f: f64,
    pub loss_mask: f64,
    pub total: f64,
}

pub struct PretrainOutcome {
    pub state: ModelState,
    pub curves: Vec<LossRecord>,
    pub best_val_total: f64,
}

fn prepare_corpus(
    corpus: &mut Vec<Molecule>,
    vocab: &FragmentVocab,
    need_descriptors: bool,
) -> Result<Vec<Prepared>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptySplit("corpus".into()));
    }
    if need_descriptors {
        normalize_descriptors(corpus)?;
    }
    let prepared: Vec<Result<Prepared, FragError>> = corpus
        .par_iter()
        .map(|mol| prepare(mol.clone(), vocab))
        .collect();
    let mut out = Vec::with_capacity(prepared.len());
    for p in prepared {
        out.push(p?);
    }
    Ok(out)
}

/// Two-stage self-supervised pretraining.
///
/// Stage 1 optimizes the structure losses; stage 2 adds the masked
/// reconstruction term on top. Optimizer moments reset at the stage
/// boundary. The returned state is the best-validation-total snapshot.
pub fn pretrain(
    corpus: &mut Vec<Molecule>,
    vocab: &FragmentVocab,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    let prepared = prepare_corpus(corpus, vocab, true)?;
    let (train_idx, val_idx, _) = split_indices(
        prepared.len(),
        (cfg.split_train, cfg.split_val, cfg.split_test),
        cfg.seed,
    );
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit("pretraining train split".into()));
    }
    // tiny corpora may round the validation share to zero; fall back to
    // checkpointing on the training losses
    let monitor_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx };

    let mut state = ModelState::new(&cfg.dims(), vocab.size(), cfg.seed)?;
    let mut optimizer = AdamW::new(cfg.lr, cfg.weight_decay);
    let stage1 = cfg.stage1_len();
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut best_val_total = f64::INFINITY;
    let mut best_snapshot = state.snapshot();

    for epoch in 0..cfg.epochs {
        let stage2 = epoch >= stage1;
        if epoch == stage1 {
            optimizer.reset_moments();
        }
        let mut order = train_idx.clone();
        order.shuffle(&mut seeded_rng(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9)));
        let mut mask_rng = seeded_rng(cfg.seed ^ 0xA5A5 ^ (epoch as u64) << 20);
        let mut sums = [0.0; 4];
        let mut total_sum = 0.0;
        let mut processed = 0usize;
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            state.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let prep = &prepared[idx];
                let mask = make_mask(cfg.alpha, DESCRIPTOR_COUNT, &mut mask_rng)?;
                let bundle = forward_losses(&state, prep, &mask, cfg, stage2)?;
                let values = bundle.values();
                // stage-aware objective: the reconstruction term only
                // contributes once fusion training starts
                let objective = if stage2 {
                    total_loss(&bundle, cfg).map_err(|e| stamp(e, epoch, step))?
                } else {
                    bundle
                        .loss_d
                        .scale(cfg.lambda_d)?
                        .add(&bundle.loss_s.scale(cfg.lambda_s)?)?
                        .add(&bundle.loss_f.scale(cfg.lambda_f)?)?
                };
                let logged_total = cfg.lambda_d * values[0]
                    + cfg.lambda_s * values[1]
                    + cfg.lambda_f * values[2]
                    + cfg.lambda_mask * values[3];
                if !logged_total.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        component: "total".into(),
                    });
                }
                objective.scale(scale)?.backward()?;
                for (s, v) in sums.iter_mut().zip(values) {
                    *s += v;
                }
                total_sum += logged_total;
                processed += 1;
            }
            optimizer.step(&mut state, cfg.grad_clip);
        }
        let n = processed as f64;
        curves.push(LossRecord {
            epoch: epoch + 1,
            loss_d: sums[0] / n,
            loss_s: sums[1] / n,
            loss_f: sums[2] / n,
            loss_mask: sums[3] / n,
            total: total_sum / n,
        });

        // validation pass: all four terms, published weights
        let mut val_rng = seeded_rng(cfg.seed ^ 0xBEEF ^ (epoch as u64) << 20);
        let mut val_total = 0.0;
        for &idx in &monitor_idx {
            let mask = make_mask(cfg.alpha, DESCRIPTOR_COUNT, &mut val_rng)?;
            let bundle = no_grad(|| forward_losses(&state, &prepared[idx], &mask, cfg, false))?;
            let v = bundle.values();
            val_total += cfg.lambda_d * v[0]
                + cfg.lambda_s * v[1]
                + cfg.lambda_f * v[2]
                + cfg.lambda_mask * v[3];
        }
        val_total /= monitor_idx.len() as f64;
        if !val_total.is_finite() {
            return Err(TrainError::Diverged { epoch, step: 0, component: "validation".into() });
        }
        if val_total < best_val_total {
            best_val_total = val_total;
            best_snapshot = state.snapshot();
        }
    }
    state.restore(&best_snapshot);
    Ok(PretrainOutcome { state, curves, best_val_total })
}

fn stamp(e: TrainError, epoch: usize, step: usize) -> TrainError {
    match e {
        TrainError::Diverged { component, .. } => TrainError::Diverged { epoch, step, component },
        other => other,
    }
}

// ── fine-tuning ──────────────────────────────────────────────────────────

pub struct FinetuneOutcome {
    pub state: ModelState,
    /// Test metric of the best-validation model.
    pub test_metric: f64,
    /// Test MAE alongside RMSE for regression tasks.
    pub test_mae: Option<f64>,
    pub train_loss_curve: Vec<f64>,
    pub train_metric_curve: Vec<f64>,
    pub val_metric_curve: Vec<f64>,
    pub epochs_run: usize,
}

/// Supervised fine-tuning of every encoder plus the prediction head.
///
/// Molecules without the task label are skipped. Early stopping watches
/// the validation metric (validation loss when the metric is undefined,
/// e.g. a single-class validation split).
pub fn finetune(
    corpus: &mut Vec<Molecule>,
    vocab: &FragmentVocab,
    cfg: &TrainConfig,
    task: &str,
    init_state: ModelState,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    let prepared = prepare_corpus(corpus, vocab, true)?;
    let labeled: Vec<usize> = (0..prepared.len())
        .filter(|&i| {
            prepared[i]
                .molecule
                .labels
                .as_ref()
                .is_some_and(|l| l.contains_key(task))
        })
        .collect();
    if labeled.is_empty() {
        return Err(TrainError::UnknownTask(task.to_string()));
    }
    let label_of = |idx: usize| -> f64 {
        prepared[idx].molecule.labels.as_ref().unwrap()[task]
    };

    let (train_all, val_all, test_all) = split_indices(
        prepared.len(),
        (cfg.split_train, cfg.split_val, cfg.split_test),
        cfg.seed,
    );
    let keep = |v: Vec<usize>| -> Vec<usize> {
        v.into_iter().filter(|i| labeled.contains(i)).collect()
    };
    let (train_idx, val_idx, test_idx) = (keep(train_all), keep(val_all), keep(test_all));
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit("fine-tuning train split".into()));
    }
    if test_idx.is_empty() {
        return Err(TrainError::EmptySplit("fine-tuning test split".into()));
    }

    let mut state = init_state;
    let mut optimizer = AdamW::new(cfg.lr, cfg.weight_decay);
    let classification = cfg.task_type == TaskType::Classification;

    let eval_scores = |state: &ModelState, idx: &[usize]| -> TensorResult<Vec<f64>> {
        idx.iter()
            .map(|&i| {
                let out =
                    no_grad(|| predict(state, &prepared[i], cfg.ablation(), cfg.seed))?;
                Ok(out.data()[0])
            })
            .collect()
    };
    let metric_of = |scores: &[f64], idx: &[usize]| -> Result<f64, TrainError> {
        if classification {
            let labels: Vec<bool> = idx.iter().map(|&i| label_of(i) >= 0.5).collect();
            roc_auc(scores, &labels)
        } else {
            let ys: Vec<f64> = idx.iter().map(|&i| label_of(i)).collect();
            Ok(rmse(scores, &ys))
        }
    };
    // higher is better for classification, lower for regression
    let better = |candidate: f64, incumbent: f64| -> bool {
        if classification { candidate > incumbent } else { candidate < incumbent }
    };

    let mut best_val = if classification { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut best_snapshot = state.snapshot();
    let mut since_best = 0usize;
    let mut train_loss_curve = Vec::new();
    let mut train_metric_curve = Vec::new();
    let mut val_metric_curve = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let mut order = train_idx.clone();
        order.shuffle(&mut seeded_rng(cfg.seed ^ (epoch as u64).wrapping_mul(0xC2B2_AE35)));
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            state.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let logits = predict(&state, &prepared[idx], cfg.ablation(), cfg.seed)?;
                let target = Tensor::constant(&[1, 1], vec![label_of(idx)])?;
                let loss = if classification {
                    logits.bce_with_logits(&target, None)?
                } else {
                    logits.mse(&target)?
                };
                let v = loss.item();
                if !v.is_finite() {
                    return Err(TrainError::Diverged { epoch, step, component: "task".into() });
                }
                loss_sum += v;
                loss.scale(scale)?.backward()?;
            }
            optimizer.step(&mut state, cfg.grad_clip);
        }
        train_loss_curve.push(loss_sum / train_idx.len() as f64);

        let train_scores = eval_scores(&state, &train_idx)?;
        let train_metric = metric_of(&train_scores, &train_idx).unwrap_or(f64::NAN);
        train_metric_curve.push(train_metric);

        // validation signal: metric when defined, otherwise loss
        let val_signal = if val_idx.is_empty() {
            train_metric
        } else {
            let val_scores = eval_scores(&state, &val_idx)?;
            match metric_of(&val_scores, &val_idx) {
                Ok(m) => m,
                Err(_) => {
                    let mut loss = 0.0;
                    for (&i, &s) in val_idx.iter().zip(&val_scores) {
                        let y = label_of(i);
                        loss += if classification {
                            // stable BCE on the logit
                            s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
                        } else {
                            (s - y) * (s - y)
                        };
                    }
                    let avg = loss / val_idx.len() as f64;
                    if classification {
                        -avg // lower loss = better, flip sign for max-compare
                    } else {
                        avg
                    }
                }
            }
        };
        val_metric_curve.push(val_signal);
        if better(val_signal, best_val) {
            best_val = val_signal;
            best_snapshot = state.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    state.restore(&best_snapshot);
    let test_scores = eval_scores(&state, &test_idx)?;
    let test_metric = metric_of(&test_scores, &test_idx)?;
    let test_mae = if classification {
        None
    } else {
        let ys: Vec<f64> = test_idx.iter().map(|&i| label_of(i)).collect();
        Some(mae(&test_scores, &ys))
    };
    Ok(FinetuneOutcome {
        state,
        test_metric,
        test_mae,
        train_loss_curve,
        train_metric_curve,
        val_metric_curve,
        epochs_run,
    })
}

/// Repeat fine-tuning with fold-specific seeds and aggregate the test
/// metric into a mean and standard deviation.
pub fn finetune_folds(
    corpus: &[Molecule],
    vocab: &FragmentVocab,
    cfg: &TrainConfig,
    task: &str,
    folds: usize,
    init: impl Fn(u64) -> Result<ModelState, TrainError>,
) -> Result<(MetricsReport, Vec<FinetuneOutcome>), TrainError> {
    if folds == 0 {
        return Err(TrainError::Config("folds must be positive".into()));
    }
    let mut fold_metrics = Vec::with_capacity(folds);
    let mut outcomes = Vec::with_capacity(folds);
    let mut curves = BTreeMap::new();
    for fold in 0..folds {
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = cfg.seed.wrapping_add(fold as u64);
        let mut fold_corpus = corpus.to_vec();
        let state = init(fold_cfg.seed)?;
        let outcome = finetune(&mut fold_corpus, vocab, &fold_cfg, task, state)?;
        fold_metrics.push(outcome.test_metric);
        if fold == 0 {
            curves.insert("train_loss".to_string(), outcome.train_loss_curve.clone());
            curves.insert("train_metric".to_string(), outcome.train_metric_curve.clone());
            curves.insert("val_metric".to_string(), outcome.val_metric_curve.clone());
        }
        outcomes.push(outcome);
    }
    let metric_name =
        if cfg.task_type == TaskType::Classification { "roc_auc" } else { "rmse" };
    let report = MetricsReport::from_folds(task, metric_name, fold_metrics, curves);
    Ok((report, outcomes))
}

/// Write loss curves as `epoch,loss_d,loss_s,loss_f,loss_mask,total`.
pub fn write_curves_csv(path: &std::path::Path, curves: &[LossRecord]) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,loss_d,loss_s,loss_f,loss_mask,total")?;
    for r in curves {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.loss_d, r.loss_s, r.loss_f, r.loss_mask, r.total
        )?;
    }
    w.flush()
}
