//! Two-headed training loop.
//!
//! A step on a labeled batch and an unlabeled batch computes:
//!
//! * base head: supervised CE on the weak labeled view plus a confidence-
//!   masked CE on the strong unlabeled view, pseudo-labeled by the base head's
//!   weak-view argmax;
//! * auxiliary head: the same two terms with adaptive class weights, pseudo
//!   labels taken from the auxiliary head itself, plus a CE on features drawn
//!   from the memory bank;
//! * `total = Ls_b + λu·Lu_b + Ls_a + λu·Lu_a + λm·Lmem`.
//!
//! Both unsupervised loss divisors are the batch size, not the number of
//! confident rows. Memory features are constants, so `Lmem` only trains the
//! auxiliary head. During warmup epochs every unlabeled term is dropped and
//! neither the ledger nor the bank is touched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, AugmentationConfig, Sample};
use crate::error::{Error, Result};
use crate::estimator::PseudoLabelLedger;
use crate::membank::{FeatureRecord, MemoryBank, SourceView};
use crate::metrics::{self, EvalReport, GroupAccuracy, ShotGroup};
use crate::numerics::{
    adam_step, argmax_rows, ema_update, encoder_backward, encoder_forward, head_backward,
    head_forward, mean_ce, softmax_rows, weighted_masked_ce, AdamConfig, AdamState, DenseMatrix,
    EmaParams, Gradients, ModelParams,
};
use crate::rng::{stream, Stream, StreamRng};
use crate::weighting;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Supervised base head only.
    Vanilla,
    /// Base head with pseudo-labeled consistency loss.
    Fixmatch,
    /// Base head plus the rebalanced auxiliary head, memory bank and weighting.
    Bmb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryContent {
    Weak,
    Strong,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_sampling: f64,
    pub lambda_u: f64,
    pub lambda_m: f64,
    pub batch_size: usize,
    pub memory_capacity: usize,
    pub get_fraction: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub memory_content: MemoryContent,
    pub mode: Mode,
    pub seed: u64,
    pub hidden_sizes: Vec<usize>,
    /// Stop auxiliary-head gradients at the encoder.
    pub aux_stopgrad: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            alpha: 1.5,
            beta: 1.0,
            lambda_sampling: 1.0,
            lambda_u: 1.0,
            lambda_m: 1.0,
            batch_size: 64,
            memory_capacity: 256,
            get_fraction: 0.5,
            warmup_epochs: 10,
            epochs: 60,
            iters_per_epoch: 100,
            lr: 0.002,
            ema_decay: 0.999,
            memory_content: MemoryContent::Strong,
            mode: Mode::Bmb,
            seed: 0,
            hidden_sizes: vec![64, 32],
            aux_stopgrad: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("train.{f}"), m));
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", "must lie in (0, 1]");
        }
        if !nonneg(self.alpha) {
            return bad("alpha", "must be finite and >= 0");
        }
        if !nonneg(self.beta) {
            return bad("beta", "must be finite and >= 0");
        }
        if !nonneg(self.lambda_sampling) {
            return bad("lambda_sampling", "must be finite and >= 0");
        }
        if !nonneg(self.lambda_u) {
            return bad("lambda_u", "must be finite and >= 0");
        }
        if !nonneg(self.lambda_m) {
            return bad("lambda_m", "must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.get_fraction) {
            return bad("get_fraction", "must lie in [0, 1]");
        }
        if self.mode == Mode::Bmb && self.memory_capacity == 0 {
            return bad("memory_capacity", "bmb mode needs a capacity of at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay", "must lie in [0, 1]");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes", "layer widths must be positive");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam", "need beta1, beta2 in [0, 1) and eps > 0");
        }
        Ok(())
    }

    /// Records drawn from memory each step.
    pub fn memory_draws(&self) -> usize {
        (self.get_fraction * self.batch_size as f64).round() as usize
    }
}

/// Independent random streams owned by a training run.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub sampler: StreamRng,
    pub augment: StreamRng,
    pub memory: StreamRng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            sampler: stream(seed, Stream::BatchSampling),
            augment: stream(seed, Stream::Augmentation),
            memory: stream(seed, Stream::Memory),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub mode: Mode,
    pub params: ModelParams,
    pub ema: EmaParams,
    pub adam: AdamState,
    pub bank: MemoryBank,
    pub ledger: PseudoLabelLedger,
    pub epoch: usize,
    pub step: u64,
    pub rngs: TrainRngs,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        let mut init = stream(cfg.seed, Stream::ModelInit);
        let params = ModelParams::init(input_dim, &cfg.hidden_sizes, num_classes, &mut init);
        Self::with_params(cfg, params)
    }

    pub fn with_params(cfg: &TrainConfig, params: ModelParams) -> Result<Self> {
        let num_classes = params.num_classes();
        Ok(Self {
            mode: cfg.mode,
            ema: EmaParams::new(&params, cfg.ema_decay),
            adam: AdamState::new(&params, cfg.adam),
            bank: MemoryBank::new(num_classes, cfg.memory_capacity.max(1), cfg.beta)?,
            ledger: PseudoLabelLedger::new(num_classes),
            params,
            epoch: 0,
            step: 0,
            rngs: TrainRngs::new(cfg.seed),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    pub fn in_warmup(&self, cfg: &TrainConfig) -> bool {
        self.epoch < cfg.warmup_epochs
    }
}

/// Fully materialized inputs of one loss evaluation. Pseudo labels, masks and
/// weights are constants here.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub labeled_x: DenseMatrix,
    pub labeled_y: Vec<usize>,
    /// Auxiliary-head weights of the labeled rows.
    pub labeled_w: Vec<f64>,
    /// Strong unlabeled view; zero rows when unlabeled terms are off.
    pub strong_x: DenseMatrix,
    pub base_targets: Vec<usize>,
    pub base_mask: Vec<bool>,
    pub aux_targets: Vec<usize>,
    pub aux_weights: Vec<f64>,
    pub aux_mask: Vec<bool>,
    /// Encoder features drawn from memory, with their pseudo labels.
    pub memory_x: DenseMatrix,
    pub memory_y: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefficients {
    pub lambda_u: f64,
    pub lambda_m: f64,
    pub use_aux: bool,
    pub aux_stopgrad: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss_s_b: f64,
    pub loss_u_b: f64,
    pub loss_s_a: f64,
    pub loss_u_a: f64,
    pub loss_mem: f64,
    pub loss_total: f64,
}

impl LossTerms {
    fn compose(&mut self, c: &LossCoefficients) {
        self.loss_total = self.loss_s_b
            + c.lambda_u * self.loss_u_b
            + self.loss_s_a
            + c.lambda_u * self.loss_u_a
            + c.lambda_m * self.loss_mem;
    }

    fn all_finite(&self) -> bool {
        [
            self.loss_s_b,
            self.loss_u_b,
            self.loss_s_a,
            self.loss_u_a,
            self.loss_mem,
            self.loss_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Loss terms and exact parameter gradients of the total loss.
pub fn step_losses(
    params: &ModelParams,
    batch: &StepBatch,
    coeffs: &LossCoefficients,
) -> Result<(LossTerms, Gradients)> {
    let mut terms = LossTerms::default();
    let mut grads = params.zeros_like();

    let n_l = batch.labeled_x.rows();
    if n_l > 0 {
        let (feat, cache) = encoder_forward(params, &batch.labeled_x)?;
        let logits_b = head_forward(&params.base_head, &feat)?;
        let (l, d) = weighted_masked_ce(
            &logits_b,
            &batch.labeled_y,
            &vec![1.0; n_l],
            &vec![true; n_l],
            n_l,
        )?;
        terms.loss_s_b = l;
        let (g, mut dfeat) = head_backward(&params.base_head, &feat, &d)?;
        grads.base_head.add_assign(&g);
        if coeffs.use_aux {
            let logits_a = head_forward(&params.aux_head, &feat)?;
            let (l, d) = weighted_masked_ce(
                &logits_a,
                &batch.labeled_y,
                &batch.labeled_w,
                &vec![true; n_l],
                n_l,
            )?;
            terms.loss_s_a = l;
            let (g, dfa) = head_backward(&params.aux_head, &feat, &d)?;
            grads.aux_head.add_assign(&g);
            if !coeffs.aux_stopgrad {
                dfeat.add_assign(&dfa);
            }
        }
        accumulate_encoder(&mut grads, encoder_backward(params, &cache, &dfeat)?);
    }

    let n_u = batch.strong_x.rows();
    if n_u > 0 {
        let (feat, cache) = encoder_forward(params, &batch.strong_x)?;
        let logits_b = head_forward(&params.base_head, &feat)?;
        let (l, mut d) = weighted_masked_ce(
            &logits_b,
            &batch.base_targets,
            &vec![1.0; n_u],
            &batch.base_mask,
            n_u,
        )?;
        terms.loss_u_b = l;
        d.scale(coeffs.lambda_u);
        let (g, mut dfeat) = head_backward(&params.base_head, &feat, &d)?;
        grads.base_head.add_assign(&g);
        if coeffs.use_aux {
            let logits_a = head_forward(&params.aux_head, &feat)?;
            let (l, mut d) = weighted_masked_ce(
                &logits_a,
                &batch.aux_targets,
                &batch.aux_weights,
                &batch.aux_mask,
                n_u,
            )?;
            terms.loss_u_a = l;
            d.scale(coeffs.lambda_u);
            let (g, dfa) = head_backward(&params.aux_head, &feat, &d)?;
            grads.aux_head.add_assign(&g);
            if !coeffs.aux_stopgrad {
                dfeat.add_assign(&dfa);
            }
        }
        accumulate_encoder(&mut grads, encoder_backward(params, &cache, &dfeat)?);
    }

    if coeffs.use_aux && batch.memory_x.rows() > 0 {
        let logits = head_forward(&params.aux_head, &batch.memory_x)?;
        let (l, mut d) = mean_ce(&logits, &batch.memory_y)?;
        terms.loss_mem = l;
        d.scale(coeffs.lambda_m);
        let (g, _) = head_backward(&params.aux_head, &batch.memory_x, &d)?;
        grads.aux_head.add_assign(&g);
    }

    terms.compose(coeffs);
    Ok((terms, grads))
}

fn accumulate_encoder(grads: &mut Gradients, layer_grads: Vec<crate::numerics::Linear>) {
    for (acc, g) in grads.encoder.iter_mut().zip(&layer_grads) {
        acc.add_assign(g);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    #[serde(flatten)]
    pub losses: LossTerms,
    /// Fraction of the unlabeled batch the base head labels confidently.
    pub mask_rate: f64,
    /// Same for the auxiliary head.
    pub aux_mask_rate: f64,
    /// Accepted enqueues over attempted enqueues (0 when none attempted).
    pub enqueue_accept_rate: f64,
    pub memory_draws: usize,
}

/// Everything a step needs besides the mutable state.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub cfg: &'a TrainConfig,
    pub augment: &'a AugmentationConfig,
    /// Labeled class sizes, for the labeled adaptive weights.
    pub labeled_counts: &'a [usize],
}

fn confidences(logits: &DenseMatrix) -> (Vec<usize>, Vec<f64>) {
    let probs = softmax_rows(logits);
    let labels = argmax_rows(&probs);
    let conf = labels
        .iter()
        .enumerate()
        .map(|(i, &k)| probs.get(i, k))
        .collect();
    (labels, conf)
}

/// One optimization step on a labeled and an unlabeled batch.
pub fn train_step(
    state: &mut TrainState,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    ctx: &StepContext<'_>,
) -> Result<StepMetrics> {
    let cfg = ctx.cfg;
    let dim = state.params.input_dim();
    let k = state.num_classes();
    let bmb = state.mode == Mode::Bmb;
    let warmup = state.in_warmup(cfg);
    let use_unlabeled = state.mode != Mode::Vanilla && !warmup && !unlabeled.is_empty();

    // (1) labeled batch, weak view
    let labeled_y = labeled
        .iter()
        .map(|s| {
            s.label.filter(|&l| l < k).ok_or_else(|| {
                Error::invalid(format!("labeled sample {} has no valid label", s.id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rng = &mut state.rngs.augment;
    let weak_l: Vec<Vec<f64>> = labeled
        .iter()
        .map(|s| data::weak_augment(&s.features, ctx.augment, rng))
        .collect();
    let labeled_x = data::to_matrix(weak_l.iter().map(Vec::as_slice), dim)?;
    let labeled_w = if bmb {
        let w = weighting::class_weights(ctx.labeled_counts, cfg.alpha)?;
        labeled_y.iter().map(|&y| w[y]).collect()
    } else {
        vec![1.0; labeled.len()]
    };

    // (2) unlabeled batch, weak and strong views; always drawn so the
    // augmentation stream is the same across modes and warmup
    let mut views = Vec::with_capacity(unlabeled.len());
    for s in unlabeled {
        let w = data::weak_augment(&s.features, ctx.augment, rng);
        let st = data::strong_augment(&s.features, ctx.augment, rng);
        views.push((w, st));
    }

    let mut metrics = StepMetrics::default();
    let mut batch = StepBatch {
        labeled_x,
        labeled_y,
        labeled_w,
        strong_x: DenseMatrix::zeros(0, dim),
        base_targets: Vec::new(),
        base_mask: Vec::new(),
        aux_targets: Vec::new(),
        aux_weights: Vec::new(),
        aux_mask: Vec::new(),
        memory_x: DenseMatrix::zeros(0, state.params.feature_dim()),
        memory_y: Vec::new(),
    };

    if use_unlabeled {
        let n_u = unlabeled.len();
        let weak_x = data::to_matrix(views.iter().map(|v| v.0.as_slice()), dim)?;
        let strong_x = data::to_matrix(views.iter().map(|v| v.1.as_slice()), dim)?;
        let (weak_feat, _) = encoder_forward(&state.params, &weak_x)?;
        let (base_labels, base_conf) =
            confidences(&head_forward(&state.params.base_head, &weak_feat)?);
        batch.base_mask = base_conf.iter().map(|&c| c >= cfg.tau).collect();
        batch.base_targets = base_labels;
        metrics.mask_rate = batch.base_mask.iter().filter(|&&m| m).count() as f64 / n_u as f64;

        if bmb {
            let (aux_labels, aux_conf) =
                confidences(&head_forward(&state.params.aux_head, &weak_feat)?);
            let aux_mask: Vec<bool> = aux_conf.iter().map(|&c| c >= cfg.tau).collect();
            let estimated = state.ledger.estimated_counts(1);
            let w = weighting::class_weights(&estimated, cfg.alpha)?;
            batch.aux_weights = aux_labels.iter().map(|&q| w[q]).collect();
            metrics.aux_mask_rate = aux_mask.iter().filter(|&&m| m).count() as f64 / n_u as f64;

            // (3) ledger and memory updates from confident auxiliary labels
            let strong_feat = if cfg.memory_content != MemoryContent::Weak {
                Some(encoder_forward(&state.params, &strong_x)?.0)
            } else {
                None
            };
            let (mut attempted, mut accepted) = (0usize, 0usize);
            for j in (0..n_u).filter(|&j| aux_mask[j]) {
                state.ledger.record(unlabeled[j].id, aux_labels[j])?;
                let push = |feature: &[f64],
                            view: SourceView,
                            bank: &mut MemoryBank,
                            rng: &mut StreamRng| {
                    let rec = FeatureRecord {
                        feature: feature.to_vec(),
                        pseudo_label: aux_labels[j],
                        confidence: aux_conf[j],
                        step: state.step,
                        source_view: view,
                    };
                    bank.enqueue(rec, rng)
                };
                if cfg.memory_content != MemoryContent::Strong {
                    attempted += 1;
                    accepted += push(
                        weak_feat.row(j),
                        SourceView::Weak,
                        &mut state.bank,
                        &mut state.rngs.memory,
                    )? as usize;
                }
                if let Some(sf) = &strong_feat {
                    attempted += 1;
                    accepted += push(
                        sf.row(j),
                        SourceView::Strong,
                        &mut state.bank,
                        &mut state.rngs.memory,
                    )? as usize;
                }
            }
            if attempted > 0 {
                metrics.enqueue_accept_rate = accepted as f64 / attempted as f64;
            }
            batch.aux_targets = aux_labels;
            batch.aux_mask = aux_mask;

            // (4) reversed sampling from memory
            let estimated = state.ledger.estimated_counts(1);
            let draws = state.bank.get(
                &estimated,
                cfg.memory_draws(),
                cfg.lambda_sampling,
                &mut state.rngs.memory,
            )?;
            metrics.memory_draws = draws.len();
            batch.memory_x = data::to_matrix(
                draws.iter().map(|r| r.feature.as_slice()),
                state.params.feature_dim(),
            )?;
            batch.memory_y = draws.iter().map(|r| r.pseudo_label).collect();
        }
        batch.strong_x = strong_x;
    }

    // (5) losses, (6) Adam, (7) EMA
    let coeffs = LossCoefficients {
        lambda_u: cfg.lambda_u,
        lambda_m: cfg.lambda_m,
        use_aux: bmb,
        aux_stopgrad: cfg.aux_stopgrad,
    };
    let (terms, grads) = step_losses(&state.params, &batch, &coeffs)?;
    let step = state.step + 1;
    if !terms.all_finite() {
        return Err(Error::Diverged {
            step,
            reason: "non-finite loss".into(),
        });
    }
    adam_step(&mut state.params, &grads, &mut state.adam, cfg.lr).map_err(|e| match e {
        Error::Diverged { reason, .. } => Error::Diverged { step, reason },
        other => other,
    })?;
    ema_update(&mut state.ema, &state.params)?;
    state.step = step;
    metrics.losses = terms;
    Ok(metrics)
}

fn active_params(state: &TrainState, use_ema: bool) -> &ModelParams {
    if use_ema {
        &state.ema.shadow
    } else {
        &state.params
    }
}

/// Encoder outputs for un-augmented samples.
pub fn encode_with(params: &ModelParams, samples: &[Sample]) -> Result<DenseMatrix> {
    let x = data::to_matrix(
        samples.iter().map(|s| s.features.as_slice()),
        params.input_dim(),
    )?;
    Ok(encoder_forward(params, &x)?.0)
}

/// Class predictions on un-augmented inputs: the auxiliary head in bmb mode,
/// the base head otherwise. Ties go to the smallest class index.
pub fn predict_with(params: &ModelParams, mode: Mode, samples: &[Sample]) -> Result<Vec<usize>> {
    let feat = encode_with(params, samples)?;
    let head = match mode {
        Mode::Bmb => &params.aux_head,
        Mode::Vanilla | Mode::Fixmatch => &params.base_head,
    };
    Ok(argmax_rows(&head_forward(head, &feat)?))
}

pub fn encode(state: &TrainState, samples: &[Sample], use_ema: bool) -> Result<DenseMatrix> {
    encode_with(active_params(state, use_ema), samples)
}

pub fn predict(state: &TrainState, samples: &[Sample], use_ema: bool) -> Result<Vec<usize>> {
    predict_with(active_params(state, use_ema), state.mode, samples)
}

pub fn evaluate_state(
    state: &TrainState,
    test: &[Sample],
    groups: &[ShotGroup],
    use_ema: bool,
) -> Result<EvalReport> {
    let pred = predict(state, test, use_ema)?;
    let truth: Vec<usize> = test
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::invalid(format!("test sample {} has no label", s.id)))
        })
        .collect::<Result<_>>()?;
    if groups.len() == state.num_classes() {
        metrics::evaluate_with_groups(&pred, &truth, groups)
    } else {
        metrics::evaluate(&pred, &truth, state.num_classes())
    }
}

/// One line of the per-epoch JSON log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub acc: f64,
    pub avg_class_recall: f64,
    pub group_acc: GroupAccuracy,
    pub bank_entropy: Option<f64>,
    pub mask_rate: f64,
    pub aux_mask_rate: f64,
    pub enqueue_accept_rate: f64,
    pub losses: LossTerms,
    pub per_class_recall: Vec<Option<f64>>,
    pub bank_counts: Vec<usize>,
    pub estimated_counts: Vec<usize>,
    pub estimation_error: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct FitData<'a> {
    pub labeled: &'a [Sample],
    pub unlabeled: &'a [Sample],
    pub test: &'a [Sample],
    pub num_classes: usize,
    /// Hidden unlabeled class sizes, used only for diagnostics.
    pub true_unlabeled_counts: Option<&'a [usize]>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    /// EMA evaluation after the last epoch; `None` when no epoch ran.
    pub final_report: Option<EvalReport>,
}

/// Runs `cfg.epochs × cfg.iters_per_epoch` steps, evaluating the EMA
/// parameters on the test split after every epoch. `on_epoch` sees each log
/// entry as it is produced.
pub fn fit(
    data: FitData<'_>,
    cfg: &TrainConfig,
    augment: &AugmentationConfig,
    groups: &[ShotGroup],
    on_epoch: &mut dyn FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    let dim = data.labeled[0].features.len();
    let mut state = TrainState::new(cfg, dim, data.num_classes)?;
    let labeled_counts: Vec<usize> = data::class_counts(data.labeled, data.num_classes)
        .into_iter()
        .map(|c| c.max(1))
        .collect();
    let ctx = StepContext {
        cfg,
        augment,
        labeled_counts: &labeled_counts,
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut final_report = None;
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let mut sums = StepMetrics::default();
        for _ in 0..cfg.iters_per_epoch {
            let sampler = &mut state.rngs.sampler;
            let lb: Vec<&Sample> = (0..cfg.batch_size)
                .map(|_| &data.labeled[sampler.random_range(0..data.labeled.len())])
                .collect();
            let ub: Vec<&Sample> = if data.unlabeled.is_empty() {
                Vec::new()
            } else {
                (0..cfg.batch_size)
                    .map(|_| &data.unlabeled[sampler.random_range(0..data.unlabeled.len())])
                    .collect()
            };
            let m = train_step(&mut state, &lb, &ub, &ctx)?;
            add_metrics(&mut sums, &m);
        }
        let iters = cfg.iters_per_epoch.max(1) as f64;
        let report = evaluate_state(&state, data.test, groups, true)?;
        let estimated = state.ledger.estimated_counts(1);
        let estimation_error = match (data.true_unlabeled_counts, state.ledger.is_empty()) {
            (Some(t), false) => metrics::estimation_error(t, state.ledger.counts()).ok(),
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            acc: report.top1,
            avg_class_recall: report.avg_class_recall,
            group_acc: report.group_acc,
            bank_entropy: state.bank.balance_entropy().ok(),
            mask_rate: sums.mask_rate / iters,
            aux_mask_rate: sums.aux_mask_rate / iters,
            enqueue_accept_rate: sums.enqueue_accept_rate / iters,
            losses: scale_losses(&sums.losses, 1.0 / iters),
            per_class_recall: report.per_class_recall.clone(),
            bank_counts: state.bank.counts(),
            estimated_counts: estimated,
            estimation_error,
        };
        on_epoch(&entry, &state)?;
        log.push(entry);
        final_report = Some(report);
    }
    if cfg.epochs > 0 {
        state.epoch = cfg.epochs;
    }
    Ok(FitOutcome {
        state,
        log,
        final_report,
    })
}

fn add_metrics(acc: &mut StepMetrics, m: &StepMetrics) {
    let (a, b) = (&mut acc.losses, &m.losses);
    a.loss_s_b += b.loss_s_b;
    a.loss_u_b += b.loss_u_b;
    a.loss_s_a += b.loss_s_a;
    a.loss_u_a += b.loss_u_a;
    a.loss_mem += b.loss_mem;
    a.loss_total += b.loss_total;
    acc.mask_rate += m.mask_rate;
    acc.aux_mask_rate += m.aux_mask_rate;
    acc.enqueue_accept_rate += m.enqueue_accept_rate;
    acc.memory_draws += m.memory_draws;
}

fn scale_losses(l: &LossTerms, c: f64) -> LossTerms {
    LossTerms {
        loss_s_b: l.loss_s_b * c,
        loss_u_b: l.loss_u_b * c,
        loss_s_a: l.loss_s_a * c,
        loss_u_a: l.loss_u_a * c,
        loss_mem: l.loss_mem * c,
        loss_total: l.loss_total * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Linear;

    fn sample(id: u64, x: &[f64], label: Option<usize>) -> Sample {
        Sample {
            id,
            features: x.to_vec(),
            label,
        }
    }

    fn no_aug() -> AugmentationConfig {
        AugmentationConfig {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.0,
            strong_dropout_prob: 0.0,
            strong_scale_jitter: 0.0,
        }
    }

    #[test]
    fn predict_tie_breaks_low_and_sign_rule() {
        let cfg = TrainConfig {
            hidden_sizes: vec![],
            ..Default::default()
        };
        let mut state = TrainState::new(&cfg, 2, 2).unwrap();
        state.params.aux_head = Linear::new(DenseMatrix::zeros(2, 2), vec![0.3, 0.3]).unwrap();
        state.ema.shadow = state.params.clone();
        let xs = vec![sample(0, &[1.0, 2.0], None), sample(1, &[-3.0, 0.5], None)];
        assert_eq!(predict(&state, &xs, true).unwrap(), vec![0, 0]);

        // class 1 iff feature 0 is positive
        let w = DenseMatrix::from_rows(&[[-1.0, 0.0], [1.0, 0.0]]).unwrap();
        state.params.aux_head = Linear::new(w, vec![0.0, 0.0]).unwrap();
        let xs = vec![
            sample(0, &[0.5, 9.0], None),
            sample(1, &[-0.5, 9.0], None),
            sample(2, &[2.0, -1.0], None),
        ];
        assert_eq!(predict(&state, &xs, false).unwrap(), vec![1, 0, 1]);

        // shift every logit by a constant
        state.params.aux_head.bias = vec![4.0, 4.0];
        assert_eq!(predict(&state, &xs, false).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn warmup_leaves_bank_and_ledger_untouched() {
        let cfg = TrainConfig {
            warmup_epochs: 1,
            batch_size: 4,
            hidden_sizes: vec![3],
            tau: 0.01,
            ..Default::default()
        };
        let mut state = TrainState::new(&cfg, 2, 2).unwrap();
        let lab: Vec<Sample> = (0..4)
            .map(|i| sample(i, &[i as f64, 1.0], Some((i % 2) as usize)))
            .collect();
        let unl: Vec<Sample> = (10..14)
            .map(|i| sample(i, &[1.0, i as f64 * 0.1], None))
            .collect();
        let lr: Vec<&Sample> = lab.iter().collect();
        let ur: Vec<&Sample> = unl.iter().collect();
        let aug = no_aug();
        let counts = [2, 2];
        let ctx = StepContext {
            cfg: &cfg,
            augment: &aug,
            labeled_counts: &counts,
        };
        let m = train_step(&mut state, &lr, &ur, &ctx).unwrap();
        assert_eq!(
            (m.losses.loss_u_b, m.losses.loss_u_a, m.losses.loss_mem),
            (0.0, 0.0, 0.0)
        );
        assert!(state.bank.is_empty() && state.ledger.is_empty());

        state.epoch = 1;
        let m = train_step(&mut state, &lr, &ur, &ctx).unwrap();
        assert!(m.losses.loss_u_b > 0.0);
        assert!(!state.ledger.is_empty());
    }

    #[test]
    fn diverged_step_is_reported() {
        let cfg = TrainConfig {
            batch_size: 2,
            hidden_sizes: vec![2],
            lr: 1e300,
            ..Default::default()
        };
        let mut state = TrainState::new(&cfg, 1, 2).unwrap();
        let lab = [sample(0, &[1e300], Some(0)), sample(1, &[-1e300], Some(1))];
        let lr: Vec<&Sample> = lab.iter().collect();
        let aug = no_aug();
        let ctx = StepContext {
            cfg: &cfg,
            augment: &aug,
            labeled_counts: &[1, 1],
        };
        let mut err = None;
        for _ in 0..5 {
            if let Err(e) = train_step(&mut state, &lr, &[], &ctx) {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(Error::Diverged { .. })), "{err:?}");
    }

    #[test]
    fn config_validation_paths() {
        assert!(TrainConfig::default().validate().is_ok());
        let e = TrainConfig {
            tau: 0.0,
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        assert!(matches!(e, Error::Config { ref path, .. } if path == "train.tau"));
        let e = TrainConfig {
            memory_capacity: 0,
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        assert!(matches!(e, Error::Config { ref path, .. } if path == "train.memory_capacity"));
        assert!(TrainConfig {
            memory_capacity: 0,
            mode: Mode::Fixmatch,
            ..Default::default()
        }
        .validate()
        .is_ok());
        assert_eq!(TrainConfig::default().memory_draws(), 32);
    }
}
