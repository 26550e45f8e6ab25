//! Losses, AdaGrad, and the training loop.


use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::eval::{self, ScoredInstance};
use crate::grad::{backward_into, Objective};
use crate::linalg::Vector;
use crate::model::{forward, match_score, ForwardPass, TokenSeq};
use crate::params::{GradSet, ModelConfig, ParamSet};

/// A supervised example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrainInstance {
    Regression { s1: TokenSeq, s2: TokenSeq, y: f64 },
    Classification { s1: TokenSeq, s2: TokenSeq, label: u8 },
    /// `s2` should score higher than `s2_neg` against `s1`. Triples with the
    /// same `qid` share a query and a positive.
    Ranking { qid: usize, s1: TokenSeq, s2: TokenSeq, s2_neg: TokenSeq },
}

impl TrainInstance {
    pub fn loss_kind(&self) -> LossKind {
        match self {
            TrainInstance::Regression { .. } => LossKind::Square,
            TrainInstance::Classification { .. } => LossKind::CrossEntropy,
            TrainInstance::Ranking { .. } => LossKind::Hinge,
        }
    }

    pub fn sequences(&self) -> Vec<&TokenSeq> {
        match self {
            TrainInstance::Regression { s1, s2, .. } | TrainInstance::Classification { s1, s2, .. } => vec![s1, s2],
            TrainInstance::Ranking { s1, s2, s2_neg, .. } => vec![s1, s2, s2_neg],
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for s in self.sequences() {
            s.check(vocab_size)?;
        }
        match self {
            TrainInstance::Regression { y, .. } if !y.is_finite() => Err(Error::Input("non-finite regression target".into())),
            TrainInstance::Classification { label, .. } if *label > 1 => Err(Error::Input(format!("label {label} is not 0 or 1"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Square,
    Hinge,
    #[serde(rename = "xent")]
    CrossEntropy,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Square => "square",
            LossKind::Hinge => "hinge",
            LossKind::CrossEntropy => "xent",
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            LossKind::CrossEntropy => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(LossKind::Square),
            "hinge" => Ok(LossKind::Hinge),
            "xent" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Input(format!("unknown loss '{other}' (expected square, hinge or xent)"))),
        }
    }
}

/// `(y - pred)²` and its derivative in `pred`.
pub fn square_loss(pred: f64, y: f64) -> (f64, f64) {
    let r = y - pred;
    (r * r, -2.0 * r)
}

/// Margin-1 pairwise hinge. At exactly `pos - neg = 1` the loss is inactive.
pub fn hinge_loss(pos: f64, neg: f64) -> (f64, f64, f64) {
    let l = 1.0 - pos + neg;
    if l > 0.0 {
        (l, -1.0, 1.0)
    } else {
        (0.0, 0.0, 0.0)
    }
}

/// Two-way softmax cross entropy, stabilised with log-sum-exp.
pub fn cross_entropy_2(logits: &[f64], label: u8) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let p = [(logits[0] - lse).exp(), (logits[1] - lse).exp()];
    let y = label as usize;
    let mut g = p;
    g[y] -= 1.0;
    (lse - logits[y], g)
}

/// Loss of one instance, accumulating `weight · ∂loss/∂θ` into `grads`.
pub fn instance_loss_and_grad(params: &ParamSet, inst: &TrainInstance, weight: f64, grads: &mut GradSet) -> Result<f64> {
    match inst {
        TrainInstance::Regression { s1, s2, y } => {
            let pass = forward(s1, s2, params)?;
            let (l, dl) = square_loss(pass.output.0[0], *y);
            backward_into(s1, s2, params, &pass, &Vector(vec![weight * dl]), grads)?;
            Ok(l)
        }
        TrainInstance::Classification { s1, s2, label } => {
            let pass = forward(s1, s2, params)?;
            if pass.output.len() != 2 {
                return shape_err("classification needs a two-output scorer");
            }
            let (l, g) = cross_entropy_2(pass.output.as_slice(), *label);
            backward_into(s1, s2, params, &pass, &Vector(vec![weight * g[0], weight * g[1]]), grads)?;
            Ok(l)
        }
        TrainInstance::Ranking { s1, s2, s2_neg, .. } => {
            let pos = forward(s1, s2, params)?;
            let neg = forward(s1, s2_neg, params)?;
            let (l, dp, dn) = hinge_loss(pos.output.0[0], neg.output.0[0]);
            if l > 0.0 {
                backward_into(s1, s2, params, &pos, &Vector(vec![weight * dp]), grads)?;
                backward_into(s1, s2_neg, params, &neg, &Vector(vec![weight * dn]), grads)?;
            }
            Ok(l)
        }
    }
}

/// Loss of one instance without gradients.
pub fn instance_loss(params: &ParamSet, inst: &TrainInstance) -> Result<f64> {
    Ok(match inst {
        TrainInstance::Regression { s1, s2, y } => square_loss(match_score(s1, s2, params)?.0[0], *y).0,
        TrainInstance::Classification { s1, s2, label } => cross_entropy_2(match_score(s1, s2, params)?.as_slice(), *label).0,
        TrainInstance::Ranking { s1, s2, s2_neg, .. } => {
            hinge_loss(match_score(s1, s2, params)?.0[0], match_score(s1, s2_neg, params)?.0[0]).0
        }
    })
}

fn relu_pattern(pass: &ForwardPass, out: &mut Vec<bool>) {
    out.extend(pass.interaction.pre.iter().map(|&x| x > 0.0));
}

/// Mean loss over a batch of instances, as a checkable objective.
pub struct BatchObjective<'a> {
    pub instances: &'a [TrainInstance],
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, params: &ParamSet) -> Result<crate::oracle::dd::Dd> {
        let mut total = 0.0;
        for inst in self.instances {
            total += instance_loss(params, inst)?;
        }
        Ok((total / self.instances.len() as f64).into())
    }

    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradSet)> {
        batch_loss_and_grad(params, self.instances)
    }

    fn kink_pattern(&self, params: &ParamSet) -> Result<Vec<bool>> {
        let mut out = Vec::new();
        for inst in self.instances {
            match inst {
                TrainInstance::Regression { s1, s2, .. } | TrainInstance::Classification { s1, s2, .. } => {
                    relu_pattern(&forward(s1, s2, params)?, &mut out);
                }
                TrainInstance::Ranking { s1, s2, s2_neg, .. } => {
                    let pos = forward(s1, s2, params)?;
                    let neg = forward(s1, s2_neg, params)?;
                    relu_pattern(&pos, &mut out);
                    relu_pattern(&neg, &mut out);
                    out.push(hinge_loss(pos.output.0[0], neg.output.0[0]).0 > 0.0);
                }
            }
        }
        Ok(out)
    }
}

/// Mean loss and mean gradient over a batch.
pub fn batch_loss_and_grad(params: &ParamSet, batch: &[TrainInstance]) -> Result<(f64, GradSet)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for inst in batch {
        total += instance_loss_and_grad(params, inst, w, &mut grads)?;
    }
    Ok((total * w, grads))
}

/// Per-coordinate AdaGrad state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaGradState {
    /// Running sum of squared gradients, congruent with the parameters.
    pub accum: ParamSet,
    pub lr: f64,
    pub eps: f64,
    pub steps: u64,
}

impl AdaGradState {
    pub fn new(params: &ParamSet, lr: f64, eps: f64) -> Self {
        AdaGradState { accum: params.zeros_like(), lr, eps, steps: 0 }
    }
}

/// `accum += g²; θ -= lr · g / (√accum + eps)`.
pub fn adagrad_step(params: &mut ParamSet, grads: &GradSet, state: &mut AdaGradState) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.accum) {
        return shape_err("AdaGrad: parameters, gradients and accumulators differ in layout");
    }
    let (lr, eps) = (state.lr, state.eps);
    let g_arrays = grads.arrays();
    for ((theta, acc), (_, g)) in params.arrays_mut().into_iter().zip(state.accum.arrays_mut()).zip(g_arrays) {
        for ((t, a), &gv) in theta.iter_mut().zip(acc.iter_mut()).zip(g) {
            if gv == 0.0 {
                continue;
            }
            *a += gv * gv;
            *t -= lr * gv / (a.sqrt() + eps);
        }
    }
    state.steps += 1;
    Ok(())
}

/// Everything that controls a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub interaction_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adagrad_eps: f64,
    pub init_scale: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub bidirectional: bool,
    pub loss: LossKind,
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 50,
            interaction_dim: 10,
            hidden_dim: 10,
            batch_size: 128,
            lr: 0.05,
            adagrad_eps: 1e-8,
            init_scale: 0.1,
            max_epochs: 20,
            patience: 10,
            seed: 2016,
            bidirectional: false,
            loss: LossKind::Square,
            freeze_embeddings: false,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            interaction_dim: self.interaction_dim,
            hidden_dim: self.hidden_dim,
            n_out: self.loss.n_out(),
            bidirectional: self.bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.interaction_dim == 0 || self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::Input("dimensions and batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.init_scale >= 0.0) || !(self.adagrad_eps >= 0.0) {
            return Err(Error::Input("lr, init_scale and adagrad_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Uniform initialisation of every parameter; the embedding matrix is
/// replaced when pre-trained rows are supplied.
pub fn init_params(config: &TrainConfig, vocab_size: usize, embeddings: Option<&crate::linalg::Mat>) -> Result<ParamSet> {
    let mut p = ParamSet::random(config.model_config(vocab_size), config.init_scale, config.seed)?;
    if let Some(e) = embeddings {
        if e.rows() != vocab_size || e.cols() != config.embed_dim {
            return shape_err(format!(
                "embedding matrix is {}x{}, model expects {}x{}",
                e.rows(),
                e.cols(),
                vocab_size,
                config.embed_dim
            ));
        }
        p.embed = e.clone();
    }
    Ok(p)
}

/// Validation metric: MSE (lower is better) for regression, P@1 for
/// ranking, accuracy for classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub higher_is_better: bool,
}

impl Metric {
    pub fn better_than(&self, other: &Metric) -> bool {
        if self.higher_is_better {
            self.value > other.value
        } else {
            self.value < other.value
        }
    }
}

/// Model score for every pair a dataset asks about.
pub fn predict(params: &ParamSet, s1: &TokenSeq, s2: &TokenSeq) -> Result<Vector> {
    match_score(s1, s2, params)
}

/// Score ranking triples into rank lists. The positive of each query is
/// scored once; each triple contributes its negative.
pub fn ranking_lists(params: &ParamSet, data: &[TrainInstance]) -> Result<Vec<eval::RankList>> {
    let mut scored = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (k, inst) in data.iter().enumerate() {
        if let TrainInstance::Ranking { qid, s1, s2, s2_neg } = inst {
            if seen.insert(*qid) {
                scored.push(ScoredInstance { query: *qid, id: k, score: match_score(s1, s2, params)?.0[0], relevant: true });
            }
            scored.push(ScoredInstance { query: *qid, id: k, score: match_score(s1, s2_neg, params)?.0[0], relevant: false });
        } else {
            return Err(Error::Input("ranking evaluation needs ranking instances".into()));
        }
    }
    eval::build_ranklists(&scored, None)
}

pub fn evaluate(params: &ParamSet, data: &[TrainInstance]) -> Result<Metric> {
    let first = data.first().ok_or_else(|| Error::Input("empty evaluation set".into()))?;
    match first.loss_kind() {
        LossKind::Square => {
            let mut se = 0.0;
            for inst in data {
                match inst {
                    TrainInstance::Regression { s1, s2, y } => se += (match_score(s1, s2, params)?.0[0] - y).powi(2),
                    _ => return Err(Error::Input("mixed instance kinds".into())),
                }
            }
            Ok(Metric { value: se / data.len() as f64, higher_is_better: false })
        }
        LossKind::Hinge => Ok(Metric { value: eval::p_at_1(&ranking_lists(params, data)?)?, higher_is_better: true }),
        LossKind::CrossEntropy => {
            let mut preds = Vec::with_capacity(data.len());
            let mut labels = Vec::with_capacity(data.len());
            for inst in data {
                match inst {
                    TrainInstance::Classification { s1, s2, label } => {
                        let o = match_score(s1, s2, params)?;
                        preds.push(u8::from(o.0[1] > o.0[0]));
                        labels.push(*label);
                    }
                    _ => return Err(Error::Input("mixed instance kinds".into())),
                }
            }
            Ok(Metric { value: eval::accuracy(&preds, &labels)?, higher_is_better: true })
        }
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_metric: f64,
}

/// History as CSV. Wall time is not part of the (reproducible) training
/// state; `wall_seconds` supplies it per epoch where known and the column
/// is left empty otherwise, e.g. for epochs replayed from a checkpoint.
pub fn history_csv(history: &[EpochRecord], wall_seconds: &[(usize, f64)]) -> String {
    let mut s = String::from("epoch,train_loss,validation_metric,wall_seconds\n");
    for r in history {
        let wall = wall_seconds.iter().find(|(e, _)| *e == r.epoch).map(|(_, w)| format!("{w:.3}")).unwrap_or_default();
        s.push_str(&format!("{},{},{},{wall}\n", r.epoch, r.train_loss, r.validation_metric));
    }
    s
}

/// Complete, resumable state of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: AdaGradState,
    pub epochs_done: usize,
    pub best_params: ParamSet,
    pub best_metric: Option<Metric>,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: ParamSet, config: &TrainConfig) -> Self {
        let optimizer = AdaGradState::new(&params, config.lr, config.adagrad_eps);
        TrainState {
            best_params: params.clone(),
            params,
            optimizer,
            epochs_done: 0,
            best_metric: None,
            best_epoch: 0,
            epochs_since_best: 0,
            history: Vec::new(),
        }
    }

    pub fn finished(&self, config: &TrainConfig) -> bool {
        self.epochs_done >= config.max_epochs || (self.best_metric.is_some() && self.epochs_since_best >= config.patience)
    }
}

/// Order in which instances are visited during `epoch` (0-based). Depends
/// only on the seed and the epoch so a resumed run reshuffles identically.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Run one epoch: shuffled mini-batches, mean batch gradients, one AdaGrad
/// step per batch, then validation and best-model bookkeeping.
pub fn run_epoch(state: &mut TrainState, train: &[TrainInstance], valid: &[TrainInstance], config: &TrainConfig) -> Result<()> {
    let epoch = state.epochs_done;
    let order = epoch_order(train.len(), config.seed, epoch);
    let mut total = 0.0;
    let mut batch = Vec::with_capacity(config.batch_size);
    for (step, chunk) in order.chunks(config.batch_size).enumerate() {
        batch.clear();
        batch.extend(chunk.iter().map(|&k| train[k].clone()));
        let (loss, mut grads) = batch_loss_and_grad(&state.params, &batch).map_err(|e| with_context(e, epoch, step))?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss or gradient at epoch {} step {step}", epoch + 1)));
        }
        if config.freeze_embeddings {
            grads.embed.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        adagrad_step(&mut state.params, &grads, &mut state.optimizer)?;
        total += loss * chunk.len() as f64;
    }
    let metric = evaluate(&state.params, if valid.is_empty() { train } else { valid })?;
    if !metric.value.is_finite() {
        return Err(Error::Numeric(format!("non-finite validation metric at epoch {}", epoch + 1)));
    }
    state.epochs_done += 1;
    if state.best_metric.as_ref().is_none_or(|b| metric.better_than(b)) {
        state.best_metric = Some(metric);
        state.best_params = state.params.clone();
        state.best_epoch = state.epochs_done;
        state.epochs_since_best = 0;
    } else {
        state.epochs_since_best += 1;
    }
    state.history.push(EpochRecord {
        epoch: state.epochs_done,
        train_loss: total / train.len() as f64,
        validation_metric: metric.value,
    });
    Ok(())
}

fn with_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {} step {step}: {msg}", epoch + 1)),
        Error::NumericCell { i, j, what } => Error::Numeric(format!("epoch {} step {step}: cell ({i}, {j}): {what}", epoch + 1)),
        other => other,
    }
}

/// Check that every instance is usable with the configured loss.
pub fn check_data(data: &[TrainInstance], config: &TrainConfig, vocab_size: usize) -> Result<()> {
    for inst in data {
        if inst.loss_kind() != config.loss {
            return Err(Error::Input(format!(
                "dataset holds {:?} instances, which cannot be trained with the {} loss",
                inst.loss_kind(),
                config.loss.name()
            )));
        }
        inst.validate(vocab_size)?;
    }
    Ok(())
}

/// Train from `state` until `max_epochs` or early stopping. `on_epoch` runs
/// after every epoch (e.g. to checkpoint).
pub fn train_from(
    mut state: TrainState,
    train: &[TrainInstance],
    valid: &[TrainInstance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    config.validate()?;
    check_data(train, config, state.params.config.vocab_size)?;
    check_data(valid, config, state.params.config.vocab_size)?;
    while !state.finished(config) {
        run_epoch(&mut state, train, valid, config)?;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Fresh training run; returns the state whose `best_params` are the
/// parameters at the best validation epoch.
pub fn train_loop(train: &[TrainInstance], valid: &[TrainInstance], config: &TrainConfig, vocab_size: usize) -> Result<TrainState> {
    let params = init_params(config, vocab_size, None)?;
    train_from(TrainState::new(params, config), train, valid, config, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::fd_check;

    #[test]
    fn square_loss_cases() {
        assert_eq!(square_loss(0.3, 0.3), (0.0, 0.0));
        assert_eq!(square_loss(0.0, 1.0), (1.0, -2.0));
        assert_eq!(square_loss(0.2, 0.7).0, square_loss(0.7, 0.2).0);
    }

    #[test]
    fn hinge_loss_cases() {
        assert_eq!(hinge_loss(2.0, 0.0), (0.0, 0.0, 0.0));
        assert_eq!(hinge_loss(0.0, 0.0), (1.0, -1.0, 1.0));
        let (l, a, b) = hinge_loss(0.5, 0.2);
        assert!((l - 0.7).abs() < 1e-15);
        assert_eq!((a, b), (-1.0, 1.0));
        // boundary is inactive
        assert_eq!(hinge_loss(1.0, 0.0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, g) = cross_entropy_2(&[0.0, 0.0], 0);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, [-0.5, 0.5]);
        let (l, g) = cross_entropy_2(&[30.0, -30.0], 0);
        assert!(l < 1e-20 && g[0].abs() < 1e-20 && g[1].abs() < 1e-20);
        assert!(cross_entropy_2(&[800.0, -800.0], 1).0.is_finite());

        // against finite differences
        for (logits, label) in [([0.3, -1.2], 0u8), ([2.5, 0.7], 1), ([-0.4, -0.41], 1)] {
            let (_, g) = cross_entropy_2(&logits, label);
            for k in 0..2 {
                let mut p = logits;
                let mut m = logits;
                p[k] += 1e-6;
                m[k] -= 1e-6;
                let num = (cross_entropy_2(&p, label).0 - cross_entropy_2(&m, label).0) / 2e-6;
                assert!((num - g[k]).abs() < 1e-8);
            }
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { embed_dim: 3, interaction_dim: 3, hidden_dim: 3, batch_size: 4, lr: 0.1, max_epochs: 5, ..Default::default() }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let c = small_cfg();
        let a = init_params(&c, 7, None).unwrap();
        let b = init_params(&c, 7, None).unwrap();
        let other = init_params(&TrainConfig { seed: 99, ..c.clone() }, 7, None).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&other));
        assert!(a.max_abs() <= c.init_scale);
        let e = crate::linalg::Mat::zeros(7, 3);
        assert_eq!(init_params(&c, 7, Some(&e)).unwrap().embed.data().iter().sum::<f64>(), 0.0);
        assert!(init_params(&c, 6, Some(&e)).is_err());
    }

    #[test]
    fn adagrad_cases() {
        let cfg = ModelConfig { vocab_size: 2, embed_dim: 1, interaction_dim: 1, hidden_dim: 1, n_out: 1, bidirectional: false };
        let mut p = ParamSet::random(cfg, 0.5, 1).unwrap();
        let before = p.clone();
        let mut st = AdaGradState::new(&p, 0.1, 0.0);
        let zeros = p.zeros_like();
        adagrad_step(&mut p, &zeros, &mut st).unwrap();
        assert!(p.bitwise_eq(&before));
        assert_eq!(st.accum.max_abs(), 0.0);

        let mut ones = p.zeros_like();
        ones.fill(1.0);
        adagrad_step(&mut p, &ones, &mut st).unwrap();
        let (_, a) = &p.arrays()[0];
        let (_, b) = &before.arrays()[0];
        assert!((a[0] - b[0] + 0.1).abs() < 1e-15);
        let mid = p.clone();
        adagrad_step(&mut p, &ones, &mut st).unwrap();
        let step2 = mid.arrays()[0].1[0] - p.arrays()[0].1[0];
        assert!((step2 - 0.1 / 2f64.sqrt()).abs() < 1e-15);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(128))]

        #[test]
        fn adagrad_accumulators_never_decrease(
            seed in 0u64..1000,
            steps in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 1..40), 1..6),
            lr in 0.001f64..1.0,
        ) {
            let cfg = ModelConfig { vocab_size: 3, embed_dim: 2, interaction_dim: 2, hidden_dim: 2, n_out: 1, bidirectional: false };
            let mut p = ParamSet::random(cfg, 0.5, seed).unwrap();
            let mut st = AdaGradState::new(&p, lr, 1e-8);
            for g in &steps {
                let mut grads = p.zeros_like();
                let mut k = 0;
                for a in grads.arrays_mut() {
                    for x in a.iter_mut() {
                        *x = g[k % g.len()] * ((k % 3) as f64);
                        k += 1;
                    }
                }
                let acc_before = st.accum.clone();
                let before = p.clone();
                adagrad_step(&mut p, &grads, &mut st).unwrap();
                for (((_, a0), (_, a1)), ((_, p0), (_, p1))) in acc_before.arrays().iter().zip(st.accum.arrays()).zip(before.arrays().iter().zip(p.arrays())) {
                    for i in 0..a0.len() {
                        proptest::prop_assert!(a1[i] >= a0[i]);
                        // a single step never moves a coordinate by more than lr
                        proptest::prop_assert!((p1[i] - p0[i]).abs() <= lr * (1.0 + 1e-12));
                    }
                }
            }
        }
    }

    #[test]
    fn history_csv_leaves_unknown_wall_time_empty() {
        let h = [
            EpochRecord { epoch: 1, train_loss: 0.5, validation_metric: 0.25 },
            EpochRecord { epoch: 2, train_loss: 0.125, validation_metric: 0.75 },
        ];
        assert_eq!(history_csv(&h, &[(2, 1.5)]), "epoch,train_loss,validation_metric,wall_seconds\n1,0.5,0.25,\n2,0.125,0.75,1.500\n");
    }

    #[test]
    fn zero_lr_is_bitwise_inert() {
        let c = TrainConfig { lr: 0.0, max_epochs: 3, ..small_cfg() };
        let data = toy_regression();
        let init = init_params(&c, 6, None).unwrap();
        let out = train_from(TrainState::new(init.clone(), &c), &data, &[], &c, |_| Ok(())).unwrap();
        assert!(out.params.bitwise_eq(&init));
    }

    fn toy_regression() -> Vec<TrainInstance> {
        vec![
            TrainInstance::Regression { s1: TokenSeq(vec![0, 1, 2]), s2: TokenSeq(vec![1, 2]), y: 0.5 },
            TrainInstance::Regression { s1: TokenSeq(vec![3, 4]), s2: TokenSeq(vec![5, 3, 1]), y: 0.2 },
            TrainInstance::Regression { s1: TokenSeq(vec![5]), s2: TokenSeq(vec![5, 0]), y: 0.9 },
        ]
    }

    #[test]
    fn batch_gradient_is_mean_of_instances() {
        let c = small_cfg();
        let p = init_params(&c, 6, None).unwrap();
        let data = toy_regression();
        let (_, batch) = batch_loss_and_grad(&p, &data).unwrap();
        let mut seq = p.zeros_like();
        for inst in &data {
            let mut g = p.zeros_like();
            instance_loss_and_grad(&p, inst, 1.0, &mut g).unwrap();
            seq.add_assign(&g).unwrap();
        }
        seq.scale(1.0 / 3.0);
        let mut diff = seq.clone();
        diff.axpy(-1.0, &batch).unwrap();
        assert!(diff.max_abs() < 1e-14 * seq.max_abs().max(1.0));
    }

    #[test]
    fn gradients_match_finite_differences_for_each_loss() {
        let base = TrainConfig { init_scale: 1.0, ..small_cfg() };
        let cases: Vec<(LossKind, bool, Vec<TrainInstance>)> = vec![
            (LossKind::Square, false, toy_regression()),
            (
                LossKind::Hinge,
                true,
                vec![TrainInstance::Ranking { qid: 0, s1: TokenSeq(vec![0, 1, 2]), s2: TokenSeq(vec![1, 2, 4]), s2_neg: TokenSeq(vec![5, 3]) }],
            ),
            (
                LossKind::CrossEntropy,
                true,
                vec![TrainInstance::Classification { s1: TokenSeq(vec![0, 1, 2, 3]), s2: TokenSeq(vec![3, 2]), label: 1 }],
            ),
        ];
        for (loss, bi, data) in cases {
            let c = TrainConfig { loss, bidirectional: bi, ..base.clone() };
            let p = init_params(&c, 6, None).unwrap();
            let report = fd_check(&crate::oracle::reference::ReferenceObjective { instances: &data }, &p, 1e-5, 200).unwrap();
            assert!(report.passes(1e-5), "{loss:?}\n{}", report.to_table());
        }
    }

    #[test]
    fn memorises_a_single_instance() {
        let c = TrainConfig { batch_size: 1, lr: 0.05, max_epochs: 300, patience: 300, ..small_cfg() };
        let data = vec![TrainInstance::Regression { s1: TokenSeq(vec![0, 1, 2]), s2: TokenSeq(vec![2, 1]), y: 0.7 }];
        let out = train_loop(&data, &[], &c, 3).unwrap();
        assert!(out.history.last().unwrap().train_loss < 1e-3);
        assert!(evaluate(&out.best_params, &data).unwrap().value < 1e-3);
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let c = small_cfg();
        let a = train_loop(&toy_regression(), &[], &c, 6).unwrap();
        let b = train_loop(&toy_regression(), &[], &c, 6).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.train_loss.to_bits(), r.validation_metric.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
    }

    #[test]
    fn loss_and_data_must_agree() {
        let c = TrainConfig { loss: LossKind::Hinge, ..small_cfg() };
        let err = train_loop(&toy_regression(), &[], &c, 6).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn early_stopping_respects_patience() {
        let c = TrainConfig { lr: 0.0, max_epochs: 50, patience: 2, ..small_cfg() };
        let out = train_loop(&toy_regression(), &[], &c, 6).unwrap();
        // constant metric: best at epoch 1, then two non-improving epochs
        assert_eq!(out.epochs_done, 3);
        assert_eq!(out.best_epoch, 1);
    }
}
