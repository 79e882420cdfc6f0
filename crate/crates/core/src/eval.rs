//! Few-step fine-tuning protocol and per-iteration accuracy curves.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Activity, Episode, SubjectDataset, K_QUERY, K_SUPPORT};
use crate::error::{Error, Result};
use crate::model::{Eegnet, LabeledBatch, NormKind};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{mix_seed, stream, StreamRng};
use crate::strategy::{transfer_step, Strategy};
use crate::tensor::{ParamSet, Tensor};

pub const CROSS_ACTIVITY_LR: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSpec {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub k_support: usize,
    pub k_query: usize,
}

impl FinetuneSpec {
    pub fn new(optimizer: OptimizerKind, lr: f64) -> Self {
        FinetuneSpec {
            optimizer,
            lr,
            steps: 10,
            k_support: K_SUPPORT,
            k_query: K_QUERY,
        }
    }

    /// Within-activity protocol: Adam at 0.001 after transfer learning, gradient
    /// descent at the pretraining inner-loop rate after MAML.
    pub fn within_activity(strategy: Strategy, maml_inner_lr: f64) -> Self {
        match strategy {
            Strategy::Transfer => FinetuneSpec::new(OptimizerKind::Adam, 0.001),
            Strategy::Maml => FinetuneSpec::new(OptimizerKind::GradientDescent, maml_inner_lr),
        }
    }

    /// Across-activity protocol: learning rate 0.001 for both strategies.
    pub fn cross_activity(strategy: Strategy) -> Self {
        match strategy {
            Strategy::Transfer => FinetuneSpec::new(OptimizerKind::Adam, CROSS_ACTIVITY_LR),
            Strategy::Maml => FinetuneSpec::new(OptimizerKind::GradientDescent, CROSS_ACTIVITY_LR),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.k_support == 0 || self.k_query == 0 {
            return Err(Error::InvalidArgument(format!("invalid fine-tuning spec {self:?}")));
        }
        Ok(())
    }
}

/// Fraction of rows whose arg-max equals the label; ties go to the lower class.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let [b, k] = logits.shape() else {
        return Err(Error::Shape(format!("logits must be [B, K], got {:?}", logits.shape())));
    };
    if *b == 0 || *b != labels.len() {
        return Err(Error::Shape(format!("{b} logit rows for {} labels", labels.len())));
    }
    let correct = logits
        .data()
        .chunks_exact(*k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count();
    Ok(correct as f64 / *b as f64)
}

/// Fine-tuning state that can be advanced a few steps at a time.
pub struct Finetuner<'a> {
    model: &'a Eegnet,
    params: ParamSet,
    optimizer: Optimizer,
    rng: StreamRng,
    steps_taken: usize,
}

impl<'a> Finetuner<'a> {
    /// Starts from a copy of `pretrained`; the original is never modified.
    pub fn new(model: &'a Eegnet, pretrained: &ParamSet, optimizer: OptimizerKind, lr: f64, rng: StreamRng) -> Self {
        Finetuner {
            model,
            params: pretrained.clone(),
            optimizer: Optimizer::new(optimizer, lr, pretrained),
            rng,
            steps_taken: 0,
        }
    }

    /// Full-batch optimizer steps on `support` in training mode.
    pub fn step(&mut self, support: &LabeledBatch, steps: usize) -> Result<()> {
        for _ in 0..steps {
            transfer_step(self.model, &mut self.params, support, &mut self.optimizer, &mut self.rng)?;
            self.steps_taken += 1;
        }
        Ok(())
    }

    /// Eval-mode accuracy on `batch`.
    pub fn accuracy(&self, batch: &LabeledBatch) -> Result<f64> {
        accuracy(&self.model.predict(&self.params, &batch.inputs)?, &batch.labels)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }
}

/// Accuracy after each fine-tuning iteration; index 0 is before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

pub fn finetune_and_track(
    model: &Eegnet,
    pretrained: &ParamSet,
    episode: &Episode,
    spec: &FinetuneSpec,
    rng: StreamRng,
) -> Result<Curve> {
    let mut ft = Finetuner::new(model, pretrained, spec.optimizer, spec.lr, rng);
    let mut curve = Curve {
        train: Vec::with_capacity(spec.steps + 1),
        test: Vec::with_capacity(spec.steps + 1),
    };
    for i in 0..=spec.steps {
        if i > 0 {
            ft.step(&episode.support, 1)?;
        }
        curve.train.push(ft.accuracy(&episode.support)?);
        curve.test.push(ft.accuracy(&episode.query)?);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub runs: usize,
    pub base_seed: u64,
    /// Reuse the run-0 episode of each subject in every run (dropout still varies).
    pub fixed_episodes: bool,
}

impl Protocol {
    pub fn new(runs: usize, base_seed: u64) -> Self {
        Protocol {
            runs,
            base_seed,
            fixed_episodes: false,
        }
    }
}

/// Labels carried into the report file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub source_activity: Activity,
    pub target_activity: Activity,
    pub strategy: Strategy,
    pub norm: NormKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectCurves {
    pub subject: u32,
    /// One curve per run.
    pub runs: Vec<Curve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub meta: ReportMeta,
    pub spec: FinetuneSpec,
    pub protocol: Protocol,
    pub subjects: Vec<u32>,
    /// Subjects left out for lack of trials.
    pub skipped: Vec<u32>,
    pub mean_test: Vec<f64>,
    pub std_test: Vec<f64>,
    pub mean_train: Vec<f64>,
    pub std_train: Vec<f64>,
    pub per_subject: Vec<SubjectCurves>,
    /// Hash of the configuration that produced the report, when run from a config.
    #[serde(default)]
    pub config_hash: Option<String>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the fine-tuning protocol on every subject for `protocol.runs` runs.
///
/// Each (run, subject) pair draws its episode and dropout masks from its own
/// seeded stream. Accuracies are averaged over subjects within a run, then the
/// mean and (population) standard deviation over runs is taken per iteration.
pub fn evaluate_fast_adaptability(
    model: &Eegnet,
    pretrained: &ParamSet,
    datasets: &[&SubjectDataset],
    spec: &FinetuneSpec,
    protocol: &Protocol,
    meta: ReportMeta,
) -> Result<AdaptationReport> {
    spec.validate()?;
    if protocol.runs == 0 {
        return Err(Error::InvalidArgument("at least one run is required".into()));
    }
    let need = spec.k_support + spec.k_query;
    let mut usable: Vec<&SubjectDataset> = Vec::new();
    let mut skipped = Vec::new();
    for &ds in datasets {
        if ds.activity != meta.target_activity {
            return Err(Error::InvalidArgument(format!(
                "subject {} data is activity {}, target is {}",
                ds.subject, ds.activity, meta.target_activity
            )));
        }
        if ds.min_class_count() >= need {
            usable.push(ds);
        } else {
            log::warn!("subject {} has {:?} trials per class; skipped", ds.subject, ds.class_counts());
            skipped.push(ds.subject);
        }
    }
    usable.sort_by_key(|d| d.subject);
    if usable.is_empty() {
        return Err(Error::InsufficientData("no subject has enough trials for the protocol".into()));
    }

    let jobs: Vec<(usize, usize)> = (0..protocol.runs).flat_map(|r| (0..usable.len()).map(move |s| (r, s))).collect();
    let curves: Vec<Curve> = jobs
        .par_iter()
        .map(|&(run, si)| {
            let ds = usable[si];
            let subject = u64::from(ds.subject);
            let episode_seed = mix_seed(protocol.base_seed, &[if protocol.fixed_episodes { 0 } else { run as u64 }, subject]);
            let mut rng = stream(episode_seed);
            let episode = sample_episode(ds, spec.k_support, spec.k_query, &mut rng)?;
            let rng = if protocol.fixed_episodes {
                stream(mix_seed(protocol.base_seed, &[run as u64, subject, 1]))
            } else {
                rng
            };
            finetune_and_track(model, pretrained, &episode, spec, rng)
        })
        .collect::<Result<_>>()?;

    let n_subj = usable.len();
    let points = spec.steps + 1;
    let mut per_subject: Vec<SubjectCurves> = usable
        .iter()
        .map(|d| SubjectCurves {
            subject: d.subject,
            runs: Vec::with_capacity(protocol.runs),
        })
        .collect();
    let mut run_test = vec![vec![0.0; protocol.runs]; points];
    let mut run_train = vec![vec![0.0; protocol.runs]; points];
    for (&(run, si), curve) in jobs.iter().zip(curves) {
        for i in 0..points {
            run_test[i][run] += curve.test[i] / n_subj as f64;
            run_train[i][run] += curve.train[i] / n_subj as f64;
        }
        per_subject[si].runs.push(curve);
    }
    let (mean_test, std_test) = run_test.iter().map(|v| mean_std(v)).unzip();
    let (mean_train, std_train) = run_train.iter().map(|v| mean_std(v)).unzip();
    Ok(AdaptationReport {
        meta,
        spec: *spec,
        protocol: *protocol,
        subjects: usable.iter().map(|d| d.subject).collect(),
        skipped,
        mean_test,
        std_test,
        mean_train,
        std_train,
        per_subject,
        config_hash: None,
    })
}

/// The same protocol applied to data of a different activity than the one
/// the model was pretrained on.
pub fn cross_activity_adapt(
    model: &Eegnet,
    pretrained: &ParamSet,
    target: &[&SubjectDataset],
    spec: &FinetuneSpec,
    protocol: &Protocol,
    meta: ReportMeta,
) -> Result<AdaptationReport> {
    if meta.source_activity == meta.target_activity {
        return Err(Error::InvalidArgument(format!(
            "cross-activity adaptation needs two different activities, got {} twice",
            meta.source_activity
        )));
    }
    evaluate_fast_adaptability(model, pretrained, target, spec, protocol, meta)
}

pub const REPORT_HEADER: &str = "source_activity,target_activity,strategy,norm,iteration,mean_test_acc,std_test_acc,mean_train_acc,std_train_acc,runs,subjects,seed";

/// One row of a report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub source_activity: u8,
    pub target_activity: u8,
    pub strategy: String,
    pub norm: String,
    pub iteration: usize,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub mean_train_acc: f64,
    pub std_train_acc: f64,
    pub runs: usize,
    pub subjects: usize,
    pub seed: u64,
}

impl AdaptationReport {
    pub fn steps(&self) -> usize {
        self.mean_test.len() - 1
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        (0..self.mean_test.len())
            .map(|i| ReportRow {
                source_activity: self.meta.source_activity.id(),
                target_activity: self.meta.target_activity.id(),
                strategy: self.meta.strategy.to_string(),
                norm: self.meta.norm.to_string(),
                iteration: i,
                mean_test_acc: self.mean_test[i],
                std_test_acc: self.std_test[i],
                mean_train_acc: self.mean_train[i],
                std_train_acc: self.std_train[i],
                runs: self.protocol.runs,
                subjects: self.subjects.len(),
                seed: self.protocol.base_seed,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows())
    }

    /// Writes the CSV and, next to it, a JSON file with per-subject curves.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = csv_path.with_extension("json");
        std::fs::write(&json, serde_json::to_string(self)?).map_err(|e| Error::io(&json, e))
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.source_activity,
            r.target_activity,
            r.strategy,
            r.norm,
            r.iteration,
            r.mean_test_acc,
            r.std_test_acc,
            r.mean_train_acc,
            r.std_train_acc,
            r.runs,
            r.subjects,
            r.seed
        ));
    }
    out
}

/// Parses a report CSV back into rows.
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == REPORT_HEADER => {}
        other => return Err(Error::Report(format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 12 {
                return Err(Error::Report(format!("row {}: {} fields, expected 12", i + 1, f.len())));
            }
            let bad = |what: &str| Error::Report(format!("row {}: bad {what}", i + 1));
            let num = |j: usize, what: &str| f[j].parse::<f64>().map_err(|_| bad(what));
            let row = ReportRow {
                source_activity: f[0].parse().map_err(|_| bad("source_activity"))?,
                target_activity: f[1].parse().map_err(|_| bad("target_activity"))?,
                strategy: f[2].to_string(),
                norm: f[3].to_string(),
                iteration: f[4].parse().map_err(|_| bad("iteration"))?,
                mean_test_acc: num(5, "mean_test_acc")?,
                std_test_acc: num(6, "std_test_acc")?,
                mean_train_acc: num(7, "mean_train_acc")?,
                std_train_acc: num(8, "std_train_acc")?,
                runs: f[9].parse().map_err(|_| bad("runs"))?,
                subjects: f[10].parse().map_err(|_| bad("subjects"))?,
                seed: f[11].parse().map_err(|_| bad("seed"))?,
            };
            let in_unit = |v: f64| (0.0..=1.0).contains(&v);
            if !in_unit(row.mean_test_acc) || !in_unit(row.mean_train_acc) || row.std_test_acc < 0.0 || row.std_train_acc < 0.0 {
                return Err(Error::Report(format!("row {}: accuracy out of range", i + 1)));
            }
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::SyntheticConfig;
    use crate::model::ClassifierSpec;

    #[test]
    fn accuracy_examples() {
        let logits = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 2.0, 0.5, 0.5]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[0, 1, 1]).unwrap(), 2.0 / 3.0);
        let mut labels = vec![0; 11];
        labels.extend(vec![1; 11]);
        let mut data = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            let right = if i == 3 { 1 - l } else { l };
            data.extend(if right == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
        }
        assert_eq!(accuracy(&Tensor::new(vec![22, 2], data).unwrap(), &labels).unwrap(), 21.0 / 22.0);
        let ties = Tensor::zeros(&[4, 2]);
        assert_eq!(accuracy(&ties, &[0, 1, 1, 1]).unwrap(), 0.25);
        assert!(accuracy(&Tensor::zeros(&[0, 2]), &[]).is_err());
    }

    fn setup(n: u32) -> (Eegnet, ParamSet, Vec<SubjectDataset>) {
        let cfg = SyntheticConfig {
            n_subjects: n,
            time_points: 32,
            first_shifted: u32::MAX,
            ..Default::default()
        };
        let model = Eegnet::new(ClassifierSpec {
            channels: 8,
            time_points: 32,
            temporal_kernel: 8,
            separable_kernel: 4,
            ..ClassifierSpec::default()
        })
        .unwrap();
        let params = model.build(&mut stream(5)).unwrap();
        (model, params, cfg.generate().unwrap())
    }

    fn meta() -> ReportMeta {
        let a = Activity::new(1).unwrap();
        ReportMeta {
            source_activity: a,
            target_activity: a,
            strategy: Strategy::Transfer,
            norm: NormKind::Layer,
        }
    }

    #[test]
    fn curves_and_split_steps() {
        let (model, params, subjects) = setup(1);
        let ep = sample_episode(&subjects[0], 10, 11, &mut stream(1)).unwrap();
        let spec = FinetuneSpec::new(OptimizerKind::Adam, 0.01);
        let c = finetune_and_track(&model, &params, &ep, &spec, stream(2)).unwrap();
        assert_eq!((c.train.len(), c.test.len()), (11, 11));
        let c0 = finetune_and_track(&model, &params, &ep, &FinetuneSpec { steps: 0, ..spec }, stream(2)).unwrap();
        assert_eq!(c0.test, vec![c.test[0]]);
        let flat = finetune_and_track(&model, &params, &ep, &FinetuneSpec { lr: 0.0, ..spec }, stream(2)).unwrap();
        assert!(flat.test.iter().all(|&v| v == flat.test[0]));

        let mut a = Finetuner::new(&model, &params, OptimizerKind::Adam, 0.01, stream(3));
        a.step(&ep.support, 3).unwrap();
        a.step(&ep.support, 4).unwrap();
        let mut b = Finetuner::new(&model, &params, OptimizerKind::Adam, 0.01, stream(3));
        b.step(&ep.support, 7).unwrap();
        assert!(a.params().values_bit_equal(b.params()));
        assert_eq!(a.steps_taken(), 7);
    }

    #[test]
    fn report_aggregation_and_determinism() {
        let (model, params, subjects) = setup(3);
        let refs: Vec<&SubjectDataset> = subjects.iter().collect();
        let spec = FinetuneSpec { steps: 2, ..FinetuneSpec::new(OptimizerKind::Adam, 0.001) };

        let single = evaluate_fast_adaptability(&model, &params, &refs[..1], &spec, &Protocol::new(1, 4), meta()).unwrap();
        assert_eq!(single.mean_test, single.per_subject[0].runs[0].test);
        assert!(single.std_test.iter().all(|&s| s == 0.0));

        let proto = Protocol::new(3, 9);
        let r1 = evaluate_fast_adaptability(&model, &params, &refs, &spec, &proto, meta()).unwrap();
        let r2 = evaluate_fast_adaptability(&model, &params, &refs, &spec, &proto, meta()).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(r1.mean_test.len(), 3);
        let by_hand: f64 = (0..3)
            .map(|run| r1.per_subject.iter().map(|s| s.runs[run].test[1]).sum::<f64>() / 3.0)
            .sum::<f64>()
            / 3.0;
        assert!((r1.mean_test[1] - by_hand).abs() < 1e-12);

        let fixed = Protocol { fixed_episodes: true, ..proto };
        let r = evaluate_fast_adaptability(&model, &params, &refs, &spec, &fixed, meta()).unwrap();
        assert_eq!(r.std_test[0], 0.0);
        assert_eq!(r.std_train[0], 0.0);
    }

    #[test]
    fn pretrained_untouched_and_cross_activity_rules() {
        let (model, params, subjects) = setup(1);
        let before = params.clone();
        let refs: Vec<&SubjectDataset> = subjects.iter().collect();
        let spec = FinetuneSpec { steps: 2, ..FinetuneSpec::new(OptimizerKind::Adam, 0.01) };
        evaluate_fast_adaptability(&model, &params, &refs, &spec, &Protocol::new(2, 1), meta()).unwrap();
        assert!(params.values_bit_equal(&before));
        assert!(cross_activity_adapt(&model, &params, &refs, &spec, &Protocol::new(1, 1), meta()).is_err());
        assert_eq!(FinetuneSpec::cross_activity(Strategy::Maml).optimizer, OptimizerKind::GradientDescent);
        assert_eq!(FinetuneSpec::within_activity(Strategy::Maml, 0.01).lr, 0.01);
        assert_eq!(FinetuneSpec::within_activity(Strategy::Transfer, 0.01).optimizer, OptimizerKind::Adam);
    }

    #[test]
    fn skips_small_subjects() {
        let (model, params, mut subjects) = setup(2);
        subjects[1].classes[0].truncate(15);
        let refs: Vec<&SubjectDataset> = subjects.iter().collect();
        let spec = FinetuneSpec { steps: 1, ..FinetuneSpec::new(OptimizerKind::Adam, 0.01) };
        let r = evaluate_fast_adaptability(&model, &params, &refs, &spec, &Protocol::new(1, 1), meta()).unwrap();
        assert_eq!((r.subjects.clone(), r.skipped.clone()), (vec![1], vec![2]));
    }

    #[test]
    fn csv_round_trip() {
        let (model, params, subjects) = setup(1);
        let refs: Vec<&SubjectDataset> = subjects.iter().collect();
        let spec = FinetuneSpec { steps: 1, ..FinetuneSpec::new(OptimizerKind::Adam, 0.01) };
        let r = evaluate_fast_adaptability(&model, &params, &refs, &spec, &Protocol::new(2, 1), meta()).unwrap();
        let rows = parse_report_csv(&r.to_csv()).unwrap();
        assert_eq!(rows, r.rows());
        assert!(parse_report_csv("nope\n").is_err());
        assert!(parse_report_csv(&format!("{REPORT_HEADER}\n1,1,transfer,layer,0,1.5,0,1,0,1,1,1\n")).is_err());
    }
}
