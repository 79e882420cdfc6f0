//! Pretraining strategies: first-order MAML over subjects, and pooled transfer learning.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batch_of, sample_episode, Activity, SubjectDataset, Trial, K_QUERY, K_SUPPORT};
use crate::error::{Error, Result};
use crate::model::{Eegnet, LabeledBatch, NormKind};
use crate::optim::{sgd_step, Optimizer, OptimizerKind};
use crate::rng::{mix_seed, stream, StreamRng};
use crate::tensor::{ParamSet, Tensor};

/// A model whose mean loss gradient can be taken on a batch.
pub trait Learner: Sync {
    type Batch: Sync;

    fn batch_len(batch: &Self::Batch) -> usize;

    /// Replaces the gradient of every trainable entry with that of the mean
    /// loss on `batch` and returns the loss. May update non-trainable buffers.
    fn gradient(&self, params: &mut ParamSet, batch: &Self::Batch, rng: &mut StreamRng) -> Result<f64>;
}

impl Learner for Eegnet {
    type Batch = LabeledBatch;

    fn batch_len(batch: &LabeledBatch) -> usize {
        batch.len()
    }

    fn gradient(&self, params: &mut ParamSet, batch: &LabeledBatch, rng: &mut StreamRng) -> Result<f64> {
        params.zero_grads();
        self.accumulate_gradients(params, batch, true, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Maml,
    Transfer,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Maml => "maml",
            Strategy::Transfer => "transfer",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml" => Ok(Strategy::Maml),
            "transfer" => Ok(Strategy::Transfer),
            _ => Err(Error::InvalidArgument(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub subjects_per_batch: usize,
    pub adapt_steps: usize,
    pub k_support: usize,
    pub k_query: usize,
    pub max_meta_iterations: usize,
    /// Evaluation rounds without improvement before stopping.
    pub validation_patience: usize,
    /// Meta-iterations between validation rounds.
    pub eval_every: usize,
}

impl MetaConfig {
    /// Per-activity learning rates and adaptation steps.
    pub fn for_activity(activity: Activity) -> Self {
        let (inner_lr, meta_lr, adapt_steps) = match activity.id() {
            1 => (0.01, 0.001, 10),
            2 => (0.01, 0.01, 10),
            3 => (0.01, 0.01, 5),
            _ => (0.001, 0.01, 5),
        };
        MetaConfig {
            inner_lr,
            meta_lr,
            subjects_per_batch: 4,
            adapt_steps,
            k_support: K_SUPPORT,
            k_query: K_QUERY,
            max_meta_iterations: 2000,
            validation_patience: 20,
            eval_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.inner_lr > 0.0
            && self.meta_lr > 0.0
            && self.subjects_per_batch >= 1
            && self.adapt_steps >= 1
            && self.k_support >= 1
            && self.k_query >= 1
            && self.eval_every >= 1;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid meta config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub samples_per_class_per_subject: usize,
    pub max_epochs: usize,
    pub validation_patience: usize,
}

impl TransferConfig {
    pub fn for_activity(activity: Activity) -> Self {
        TransferConfig {
            lr: 0.001,
            batch_size: if activity.id() % 2 == 1 { 32 } else { 16 },
            samples_per_class_per_subject: K_SUPPORT + K_QUERY,
            max_epochs: 200,
            validation_patience: 20,
        }
    }

    pub fn validate(&self, norm: NormKind) -> Result<()> {
        let min_batch = if norm == NormKind::Batch { 2 } else { 1 };
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch_size < min_batch || self.samples_per_class_per_subject == 0 {
            return Err(Error::InvalidArgument(format!("invalid transfer config {self:?}")));
        }
        Ok(())
    }
}

/// `steps` full-batch gradient-descent updates on a copy of `params`.
pub fn inner_adapt<L: Learner>(
    learner: &L,
    params: &ParamSet,
    support: &L::Batch,
    alpha: f64,
    steps: usize,
    rng: &mut StreamRng,
) -> Result<ParamSet> {
    if L::batch_len(support) == 0 {
        return Err(Error::InsufficientData("empty support set".into()));
    }
    let mut phi = params.clone();
    for _ in 0..steps {
        learner.gradient(&mut phi, support, rng)?;
        sgd_step(&mut phi, alpha)?;
    }
    phi.zero_grads();
    Ok(phi)
}

/// Support and query data of one subject inside a meta-batch.
#[derive(Debug)]
pub struct MetaTask<'a, B> {
    pub id: u32,
    pub support: &'a B,
    pub query: &'a B,
}

impl<B> Clone for MetaTask<'_, B> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<B> Copy for MetaTask<'_, B> {}

struct TaskResult {
    id: u32,
    loss: f64,
    grads: Vec<Option<Tensor>>,
    buffers: Vec<Option<Tensor>>,
}

/// One first-order meta-update: adapt on each task's support set, take the
/// query gradient at the adapted point, average over tasks in ascending id
/// order, and hand the average to `meta_opt`. Returns the mean query loss.
///
/// Non-trainable buffers of `params` become the average of the adapted copies'.
pub fn fomaml_meta_step<L: Learner>(
    learner: &L,
    params: &mut ParamSet,
    tasks: &[MetaTask<'_, L::Batch>],
    inner_lr: f64,
    adapt_steps: usize,
    meta_opt: &mut Optimizer,
    seed: u64,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::InsufficientData("meta-batch without tasks".into()));
    }
    let mut order: Vec<&MetaTask<'_, L::Batch>> = tasks.iter().collect();
    order.sort_by_key(|t| t.id);
    if order.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::InvalidArgument("meta-batch tasks must come from distinct subjects".into()));
    }
    let theta: &ParamSet = params;
    let results: Vec<TaskResult> = order
        .par_iter()
        .map(|task| {
            let mut rng = stream(mix_seed(seed, &[u64::from(task.id)]));
            let mut phi = inner_adapt(learner, theta, task.support, inner_lr, adapt_steps, &mut rng)?;
            let loss = learner.gradient(&mut phi, task.query, &mut rng)?;
            let (grads, buffers) = phi
                .iter()
                .map(|(_, p)| if p.requires_grad { (p.grad.clone(), None) } else { (None, Some(p.value.clone())) })
                .unzip();
            Ok(TaskResult {
                id: task.id,
                loss,
                grads,
                buffers,
            })
        })
        .collect::<Result<_>>()?;

    // Sum in id order, then divide once.
    let n = results.len() as f64;
    debug_assert!(results.windows(2).all(|w| w[0].id < w[1].id));
    params.zero_grads();
    for i in 0..params.len() {
        let (name, entry) = params.entry_at(i).expect("in range");
        let name = name.to_string();
        let mut sum = Tensor::zeros(entry.value.shape());
        let trainable = entry.requires_grad;
        for r in &results {
            let t = if trainable { &r.grads[i] } else { &r.buffers[i] };
            let t = t.as_ref().ok_or_else(|| Error::MissingGrad(name.clone()))?;
            for (s, v) in sum.data_mut().iter_mut().zip(t.data()) {
                *s += v;
            }
        }
        sum.data_mut().iter_mut().for_each(|s| *s /= n);
        if trainable {
            params.accumulate_grad(i, &sum)?;
        } else {
            params.entry_at_mut(i).expect("in range").1.value = sum;
        }
    }
    meta_opt.step(params)?;
    params.zero_grads();
    Ok(results.iter().map(|r| r.loss).sum::<f64>() / n)
}

/// One optimizer step on the mean loss of `batch`.
pub fn transfer_step<L: Learner>(
    learner: &L,
    params: &mut ParamSet,
    batch: &L::Batch,
    opt: &mut Optimizer,
    rng: &mut StreamRng,
) -> Result<f64> {
    let loss = learner.gradient(params, batch, rng)?;
    opt.step(params)?;
    params.zero_grads();
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    /// Present on rows where validation ran.
    pub val_accuracy: Option<f64>,
    pub seed: u64,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "iteration,meta_loss_or_train_loss,val_accuracy,seed,wall_ms";

impl LogRow {
    pub fn csv_line(&self) -> String {
        let val = self.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{val},{},{}", self.iteration, self.loss, self.seed, self.wall_ms)
    }
}

/// Appends rows to a CSV log, writing the header when the file is new or empty.
pub fn append_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(LOG_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ParamSet,
    pub log: Vec<LogRow>,
    pub best_iteration: usize,
    pub best_val_accuracy: f64,
}

/// Scores a candidate checkpoint; higher is better.
pub type Validator<'a> = dyn FnMut(&ParamSet) -> Result<f64> + 'a;

struct EarlyStop {
    best: Option<(f64, usize, ParamSet)>,
    rounds_since: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop {
            best: None,
            rounds_since: 0,
            patience,
        }
    }

    /// Records a validation score; returns true when training should stop.
    fn observe(&mut self, score: f64, iteration: usize, params: &ParamSet) -> bool {
        if self.best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            self.best = Some((score, iteration, params.clone()));
            self.rounds_since = 0;
        } else {
            self.rounds_since += 1;
        }
        self.rounds_since >= self.patience
    }

    fn finish(self, params: ParamSet, log: Vec<LogRow>) -> PretrainOutcome {
        let (best_val_accuracy, best_iteration, params) = self.best.unwrap_or((f64::NAN, 0, params));
        PretrainOutcome {
            params,
            log,
            best_iteration,
            best_val_accuracy,
        }
    }
}

fn eligible<'a>(subjects: &[&'a SubjectDataset], per_class: usize) -> Vec<&'a SubjectDataset> {
    let mut out = Vec::new();
    for &s in subjects {
        if s.min_class_count() >= per_class {
            out.push(s);
        } else {
            log::warn!(
                "subject {} activity {}: {:?} trials per class, need {per_class}; skipped",
                s.subject,
                s.activity,
                s.class_counts()
            );
        }
    }
    out
}

/// First-order MAML pretraining from `init`, keeping the checkpoint with the
/// best validation score.
pub fn maml_pretrain(
    model: &Eegnet,
    init: ParamSet,
    train: &[&SubjectDataset],
    config: &MetaConfig,
    validate: &mut Validator<'_>,
    seed: u64,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let pool = eligible(train, config.k_support + config.k_query);
    if pool.len() < config.subjects_per_batch {
        return Err(Error::InsufficientData(format!(
            "{} eligible training subjects, a meta-batch needs {}",
            pool.len(),
            config.subjects_per_batch
        )));
    }
    let start = Instant::now();
    let mut params = init;
    let mut meta_opt = Optimizer::new(OptimizerKind::Adam, config.meta_lr, &params);
    let mut stop = EarlyStop::new(config.validation_patience);
    let mut log = Vec::new();
    for it in 1..=config.max_meta_iterations {
        let it_seed = mix_seed(seed, &[it as u64]);
        let mut rng = stream(it_seed);
        let chosen = sample(&mut rng, pool.len(), config.subjects_per_batch).into_vec();
        let episodes = chosen
            .iter()
            .map(|&i| sample_episode(pool[i], config.k_support, config.k_query, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let tasks: Vec<MetaTask<'_, LabeledBatch>> = episodes
            .iter()
            .map(|e| MetaTask {
                id: e.subject,
                support: &e.support,
                query: &e.query,
            })
            .collect();
        let loss = fomaml_meta_step(
            model,
            &mut params,
            &tasks,
            config.inner_lr,
            config.adapt_steps,
            &mut meta_opt,
            it_seed,
        )?;
        let mut row = LogRow {
            iteration: it,
            loss,
            val_accuracy: None,
            seed,
            wall_ms: start.elapsed().as_millis(),
        };
        let mut done = false;
        if it % config.eval_every == 0 || it == config.max_meta_iterations {
            let acc = validate(&params)?;
            row.val_accuracy = Some(acc);
            done = stop.observe(acc, it, &params);
            log::info!("meta-iteration {it}: loss {loss:.4}, validation accuracy {acc:.4}");
        }
        log.push(row);
        if done {
            break;
        }
    }
    Ok(stop.finish(params, log))
}

/// Pools `samples_per_class_per_subject` trials per class from each training
/// subject and trains with minibatch Adam, keeping the best epoch by validation.
pub fn transfer_pretrain(
    model: &Eegnet,
    init: ParamSet,
    train: &[&SubjectDataset],
    config: &TransferConfig,
    validate: &mut Validator<'_>,
    seed: u64,
) -> Result<PretrainOutcome> {
    // lr 0 is accepted here so a run can be checked to leave the weights alone
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {}", config.lr)));
    }
    TransferConfig { lr: 1.0, ..*config }.validate(model.spec.norm)?;
    let per_class = config.samples_per_class_per_subject;
    let mut rng = stream(seed);
    let mut pool: Vec<&Trial> = Vec::new();
    for ds in eligible(train, per_class) {
        for class in &ds.classes {
            let picks = sample(&mut rng, class.len(), per_class);
            pool.extend(picks.iter().map(|i| &class[i]));
        }
    }
    if pool.is_empty() {
        return Err(Error::InsufficientData("empty transfer-learning pool".into()));
    }
    let min_batch = if model.spec.norm == NormKind::Batch { 2 } else { 1 };
    let start = Instant::now();
    let mut params = init;
    let mut opt = Optimizer::new(OptimizerKind::Adam, config.lr, &params);
    let mut stop = EarlyStop::new(config.validation_patience);
    let mut log = Vec::new();
    for epoch in 1..=config.max_epochs {
        pool.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in pool.chunks(config.batch_size) {
            // a lone trailing sample gives batch-norm no variance to work with
            if chunk.len() < min_batch {
                continue;
            }
            let batch = batch_of(chunk)?;
            total += transfer_step(model, &mut params, &batch, &mut opt, &mut rng)?;
            batches += 1;
        }
        let loss = total / batches.max(1) as f64;
        let acc = validate(&params)?;
        log::info!("epoch {epoch}: train loss {loss:.4}, validation accuracy {acc:.4}");
        log.push(LogRow {
            iteration: epoch,
            loss,
            val_accuracy: Some(acc),
            seed,
            wall_ms: start.elapsed().as_millis(),
        });
        if stop.observe(acc, epoch, &params) {
            break;
        }
    }
    Ok(stop.finish(params, log))
}

/// Simple models with closed-form gradients, for checking the update rules.
pub mod analytic {
    use super::*;

    /// Loss `sum_i w_i (theta_i - c_i)^2` over a parameter vector `theta`.
    #[derive(Debug, Clone, PartialEq)]
    pub struct Quadratic {
        pub center: Vec<f64>,
        pub weight: Vec<f64>,
    }

    impl Quadratic {
        pub fn new(center: Vec<f64>, weight: Vec<f64>) -> Self {
            Quadratic { center, weight }
        }

        pub fn loss(&self, theta: &[f64]) -> f64 {
            theta
                .iter()
                .zip(&self.center)
                .zip(&self.weight)
                .map(|((t, c), w)| w * (t - c) * (t - c))
                .sum()
        }
    }

    pub struct QuadraticLearner;

    pub fn params(theta: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::from_vec(theta.to_vec())).expect("fresh set");
        p
    }

    pub fn theta(params: &ParamSet) -> Vec<f64> {
        params.get("theta").expect("theta").data().to_vec()
    }

    impl Learner for QuadraticLearner {
        type Batch = Quadratic;

        fn batch_len(batch: &Quadratic) -> usize {
            batch.center.len()
        }

        fn gradient(&self, params: &mut ParamSet, q: &Quadratic, _rng: &mut StreamRng) -> Result<f64> {
            let th = theta(params);
            if th.len() != q.center.len() || q.weight.len() != q.center.len() {
                return Err(Error::Shape(format!("{} parameters, task of size {}", th.len(), q.center.len())));
            }
            let g: Vec<f64> = th
                .iter()
                .zip(&q.center)
                .zip(&q.weight)
                .map(|((t, c), w)| 2.0 * w * (t - c))
                .collect();
            params.zero_grads();
            params.accumulate_grad(0, &Tensor::from_vec(g))?;
            Ok(q.loss(&th))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::analytic::*;
    use super::*;
    use crate::model::ClassifierSpec;

    fn quad(c: f64) -> Quadratic {
        Quadratic::new(vec![c], vec![1.0])
    }

    #[test]
    fn inner_adapt_hand_values() {
        let p = params(&[1.0]);
        let q = quad(5.0);
        let mut rng = stream(0);
        assert_eq!(theta(&inner_adapt(&QuadraticLearner, &p, &q, 0.1, 1, &mut rng).unwrap()), vec![1.8]);
        let phi1 = 1.0 - 0.1 * (2.0 * (1.0 - 5.0));
        let phi2 = phi1 - 0.1 * (2.0 * (phi1 - 5.0));
        assert_eq!(theta(&inner_adapt(&QuadraticLearner, &p, &q, 0.1, 2, &mut rng).unwrap()), vec![phi2]);
        assert!((phi2 - 2.44).abs() < 1e-12);
        assert_eq!(theta(&inner_adapt(&QuadraticLearner, &p, &q, 0.0, 3, &mut rng).unwrap()), vec![1.0]);
        assert_eq!(theta(&p), vec![1.0]);
        let empty = Quadratic::new(vec![], vec![]);
        assert!(inner_adapt(&QuadraticLearner, &params(&[]), &empty, 0.1, 1, &mut rng).is_err());
    }

    #[test]
    fn meta_step_matches_hand_average() {
        // two tasks, alpha 0.1, one inner step, plain gradient meta-update with beta 0.5
        let mut p = params(&[1.0]);
        let (s1, q1, s2, q2) = (quad(5.0), quad(3.0), quad(-1.0), quad(0.0));
        let tasks = [
            MetaTask { id: 2, support: &s2, query: &q2 },
            MetaTask { id: 1, support: &s1, query: &q1 },
        ];
        let mut opt = Optimizer::new(OptimizerKind::GradientDescent, 0.5, &p);
        fomaml_meta_step(&QuadraticLearner, &mut p, &tasks, 0.1, 1, &mut opt, 0).unwrap();
        // phi1 = 1.8, grad 2(1.8-3) = -2.4; phi2 = 1 - 0.1*2*2 = 0.6, grad 1.2
        let expected = 1.0 - 0.5 * (-2.4 + 1.2) / 2.0;
        assert!((theta(&p)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn meta_step_order_invariant_and_zero_lr() {
        let tasks_src: Vec<(Quadratic, Quadratic)> =
            (0..4).map(|i| (quad(i as f64), quad(2.0 * i as f64 - 1.0))).collect();
        let mk = |perm: &[usize]| -> Vec<MetaTask<'_, Quadratic>> {
            perm.iter()
                .map(|&i| MetaTask {
                    id: i as u32,
                    support: &tasks_src[i].0,
                    query: &tasks_src[i].1,
                })
                .collect()
        };
        let run = |perm: &[usize], lr: f64| {
            let mut p = params(&[0.3]);
            let mut opt = Optimizer::new(OptimizerKind::Adam, lr, &p);
            fomaml_meta_step(&QuadraticLearner, &mut p, &mk(perm), 0.05, 3, &mut opt, 9).unwrap();
            theta(&p)[0]
        };
        assert_eq!(run(&[0, 1, 2, 3], 0.01).to_bits(), run(&[3, 1, 0, 2], 0.01).to_bits());
        assert_eq!(run(&[2, 0, 3, 1], 0.0), 0.3);
        let dup = [mk(&[1])[0], mk(&[1])[0]];
        let mut p = params(&[0.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &p);
        assert!(fomaml_meta_step(&QuadraticLearner, &mut p, &dup, 0.1, 1, &mut opt, 0).is_err());
    }

    #[test]
    fn zero_adapt_steps_is_a_transfer_step() {
        let q = Quadratic::new(vec![2.0, -1.0], vec![1.0, 3.0]);
        let mut a = params(&[0.5, 0.5]);
        let mut b = a.clone();
        let mut oa = Optimizer::new(OptimizerKind::Adam, 0.01, &a);
        let mut ob = Optimizer::new(OptimizerKind::Adam, 0.01, &b);
        let task = [MetaTask { id: 1, support: &q, query: &q }];
        for _ in 0..3 {
            fomaml_meta_step(&QuadraticLearner, &mut a, &task, 0.1, 0, &mut oa, 0).unwrap();
            transfer_step(&QuadraticLearner, &mut b, &q, &mut ob, &mut stream(0)).unwrap();
        }
        assert!(a.values_bit_equal(&b));
    }

    #[test]
    fn activity_configs() {
        let c = MetaConfig::for_activity(Activity::new(1).unwrap());
        assert_eq!((c.inner_lr, c.meta_lr, c.adapt_steps, c.subjects_per_batch), (0.01, 0.001, 10, 4));
        let c = MetaConfig::for_activity(Activity::new(4).unwrap());
        assert_eq!((c.inner_lr, c.meta_lr, c.adapt_steps), (0.001, 0.01, 5));
        let t = TransferConfig::for_activity(Activity::new(2).unwrap());
        assert_eq!((t.lr, t.batch_size, t.samples_per_class_per_subject), (0.001, 16, 21));
        assert_eq!(TransferConfig::for_activity(Activity::new(3).unwrap()).batch_size, 32);
        let bad = TransferConfig { batch_size: 1, ..t };
        assert!(bad.validate(NormKind::Batch).is_err());
        assert!(bad.validate(NormKind::Layer).is_ok());
    }

    #[test]
    fn log_rows_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let row = |i| LogRow { iteration: i, loss: 0.5, val_accuracy: (i == 2).then_some(0.75), seed: 3, wall_ms: 10 };
        append_log(&path, &[row(1)]).unwrap();
        append_log(&path, &[row(2)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{LOG_HEADER}\n1,0.5,,3,10\n2,0.5,0.75,3,10\n"));
    }

    fn tiny_subjects(n: u32, activity: Activity) -> Vec<SubjectDataset> {
        let cfg = crate::data::synthetic::SyntheticConfig {
            n_subjects: n,
            first_shifted: u32::MAX,
            time_points: 32,
            ..Default::default()
        };
        cfg.generate()
            .unwrap()
            .into_iter()
            .map(|mut d| {
                d.activity = activity;
                for c in &mut d.classes {
                    c.iter_mut().for_each(|t| t.activity = activity);
                }
                d
            })
            .collect()
    }

    fn tiny_model() -> Eegnet {
        Eegnet::new(ClassifierSpec {
            channels: 8,
            time_points: 32,
            temporal_kernel: 8,
            separable_kernel: 4,
            ..ClassifierSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn transfer_zero_lr_leaves_params() {
        let a = Activity::new(1).unwrap();
        let subjects = tiny_subjects(1, a);
        let refs: Vec<&SubjectDataset> = subjects.iter().collect();
        let model = tiny_model();
        let init = model.build(&mut stream(1)).unwrap();
        let cfg = TransferConfig { lr: 0.0, max_epochs: 1, ..TransferConfig::for_activity(a) };
        let out = transfer_pretrain(&model, init.clone(), &refs, &cfg, &mut |_| Ok(0.5), 0).unwrap();
        assert!(out.params.values_bit_equal(&init));
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn transfer_loss_decreases_on_fixed_batch() {
        let a = Activity::new(1).unwrap();
        let subjects = tiny_subjects(2, a);
        let model = tiny_model();
        let mut params = model.build(&mut stream(2)).unwrap();
        let batch = subjects[0].full_batch().unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.001, &params);
        let mut eval_model = model;
        eval_model.spec.dropout_p = 0.0;
        let loss = |p: &ParamSet| {
            let mut p = p.clone();
            eval_model.gradient(&mut p, &batch, &mut stream(0)).unwrap()
        };
        let mut prev = loss(&params);
        for _ in 0..5 {
            transfer_step(&eval_model, &mut params, &batch, &mut opt, &mut stream(3)).unwrap();
            let now = loss(&params);
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn maml_pretrain_is_deterministic() {
        let a = Activity::new(3).unwrap();
        let subjects = tiny_subjects(5, a);
        let refs: Vec<&SubjectDataset> = subjects.iter().collect();
        let model = tiny_model();
        let cfg = MetaConfig {
            max_meta_iterations: 3,
            eval_every: 1,
            adapt_steps: 2,
            ..MetaConfig::for_activity(a)
        };
        let run = || {
            let init = model.build(&mut stream(4)).unwrap();
            let mut calls = 0;
            let out = maml_pretrain(&model, init, &refs, &cfg, &mut |_| { calls += 1; Ok(f64::from(calls % 2)) }, 11).unwrap();
            (crate::model_io::encode_tensors(&out.params), out.best_iteration, out.log.len())
        };
        let (a1, it1, n1) = run();
        let (a2, _, _) = run();
        assert_eq!(a1, a2);
        assert_eq!((it1, n1), (1, 3));
    }
}
