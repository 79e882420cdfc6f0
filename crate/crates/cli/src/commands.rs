use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fastbci::data::archive::{read_archive, write_archive, TrialStore};
use fastbci::data::fetch::{fetch_dataset, HttpSource, BASE_URL};
use fastbci::data::fir::design_fir;
use fastbci::data::preprocess::preprocess_dir;
use fastbci::data::{build_splits, parse_subject_range, Activity, SubjectDataset, N_SUBJECTS};
use fastbci::eval::{accuracy, cross_activity_adapt, evaluate_fast_adaptability, FinetuneSpec, Protocol, ReportMeta};
use fastbci::model::{ClassifierSpec, Eegnet};
use fastbci::model_io::{load_model, save_model, Provenance};
use fastbci::report::{compare_table, render_plots};
use fastbci::rng::{mix_seed, stream};
use fastbci::strategy::{append_log, maml_pretrain, transfer_pretrain, Strategy};
use fastbci::ParamSet;
use sha2::{Digest, Sha256};

use crate::config::{hex, resolve, FilterConfig, Overrides};

pub const DATA_DIR_ENV: &str = "FASTBCI_DATA_DIR";

/// `--data`, else `$FASTBCI_DATA_DIR/<sub>`.
pub fn data_dir(flag: Option<PathBuf>, sub: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => Ok(PathBuf::from(root).join(sub)),
        None => bail!("no data directory: pass a path or set {DATA_DIR_ENV}"),
    }
}

pub fn fetch(dest: &Path, subjects: &str, base_url: Option<&str>) -> Result<()> {
    let ids = parse_subject_range(subjects)?;
    let report = fetch_dataset(dest, &ids, &HttpSource::default(), base_url.unwrap_or(BASE_URL))?;
    log::info!(
        "fetch done: {} downloaded ({} repaired), {} already complete",
        report.downloaded,
        report.repaired,
        report.skipped
    );
    Ok(())
}

pub fn preprocess(raw: &Path, out: &Path, filter: &FilterConfig, subjects: &str) -> Result<()> {
    let ids = parse_subject_range(subjects)?;
    let fir = design_fir(filter.mode, filter.low_hz, filter.high_hz, 160.0, filter.transition_hz)?;
    log::info!("{} filter {}-{} Hz with {} taps", fir.mode, fir.low_hz, fir.high_hz, fir.taps.len());
    let (store, report) = preprocess_dir(raw, &ids, &fir)?;
    if !report.missing_files.is_empty() {
        log::warn!("{} task-run files missing under {}", report.missing_files.len(), raw.display());
    }
    for (path, reason) in &report.rejected {
        log::warn!("rejected {}: {reason}", path.display());
    }
    let manifest = write_archive(out, &store)?;
    for e in &manifest.entries {
        if e.class_counts.iter().any(|&c| c < 21) {
            log::warn!("subject {} activity {}: only {:?} trials per class", e.subject, e.activity, e.class_counts);
        }
    }
    log::info!(
        "{} recordings, {} subject/activity sets, {} epochs dropped at edges",
        report.recordings,
        manifest.entries.len(),
        report.dropped_epochs
    );
    Ok(())
}

fn datasets<'a>(store: &'a TrialStore, activity: Activity, ids: &[u32]) -> Vec<&'a SubjectDataset> {
    let found = store.datasets(activity, ids);
    if found.len() < ids.len() {
        let missing: Vec<u32> = ids.iter().copied().filter(|s| store.get(*s, activity).is_none()).collect();
        log::warn!("no activity {activity} data for subjects {missing:?}");
    }
    found
}

fn model_spec(store: &TrialStore, norm: fastbci::model::NormKind) -> ClassifierSpec {
    ClassifierSpec {
        channels: store.shape[0],
        time_points: store.shape[1],
        norm,
        ..ClassifierSpec::default()
    }
}

pub struct PretrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub overrides: Overrides,
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = resolve(args.config.as_deref(), &args.overrides)?;
    let hash = cfg.hash();
    log::info!("config {hash}: {}", serde_json::to_string(&cfg)?);
    let store = read_archive(&args.data).with_context(|| format!("reading archive {}", args.data.display()))?;
    let splits = build_splits(&store.subjects(cfg.activity))?;
    if !splits.missing.is_empty() {
        log::warn!("{} of {N_SUBJECTS} subjects absent for activity {}", splits.missing.len(), cfg.activity);
    }
    let train = datasets(&store, cfg.activity, &splits.train);
    let val = datasets(&store, cfg.activity, &splits.validation);
    if val.is_empty() {
        bail!("no validation subjects (88-98) available for activity {}", cfg.activity);
    }
    let model = Eegnet::new(model_spec(&store, cfg.norm))?;
    let init = model.build(&mut stream(mix_seed(cfg.seed, &[0])))?;

    let outcome = match cfg.strategy {
        Strategy::Transfer => {
            let mut validate = |p: &ParamSet| -> fastbci::Result<f64> {
                let mut total = 0.0;
                for ds in &val {
                    let batch = ds.full_batch()?;
                    total += accuracy(&model.predict(p, &batch.inputs)?, &batch.labels)?;
                }
                Ok(total / val.len() as f64)
            };
            transfer_pretrain(&model, init, &train, &cfg.transfer, &mut validate, cfg.seed)?
        }
        Strategy::Maml => {
            let spec = FinetuneSpec::within_activity(Strategy::Maml, cfg.meta.inner_lr);
            let meta = ReportMeta {
                source_activity: cfg.activity,
                target_activity: cfg.activity,
                strategy: Strategy::Maml,
                norm: cfg.norm,
            };
            let protocol = Protocol::new(cfg.validation_runs, mix_seed(cfg.seed, &[1]));
            let mut validate = |p: &ParamSet| -> fastbci::Result<f64> {
                let r = evaluate_fast_adaptability(&model, p, &val, &spec, &protocol, meta)?;
                Ok(*r.mean_test.last().expect("non-empty curve"))
            };
            maml_pretrain(&model, init, &train, &cfg.meta, &mut validate, cfg.seed)?
        }
    };
    log::info!(
        "best validation accuracy {:.4} at iteration {}",
        outcome.best_val_accuracy,
        outcome.best_iteration
    );
    let provenance = Provenance {
        strategy: cfg.strategy.to_string(),
        activity: cfg.activity.id(),
        seed: cfg.seed,
        config_hash: Some(hash),
        inner_lr: (cfg.strategy == Strategy::Maml).then_some(cfg.meta.inner_lr),
    };
    save_model(&args.out, &outcome.params, &model.spec, &provenance)?;
    let log_path = args.log.unwrap_or_else(|| args.out.with_extension("log.csv"));
    append_log(&log_path, &outcome.log)?;
    log::info!("wrote {} and {}", args.out.display(), log_path.display());
    Ok(())
}

pub struct AdaptArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub target_activity: Activity,
    pub subjects: String,
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn adapt(args: AdaptArgs) -> Result<()> {
    let (params, sidecar) = load_model(&args.model)?;
    let prov = &sidecar.provenance;
    let strategy: Strategy = prov.strategy.parse()?;
    let source = Activity::new(prov.activity)?;
    let target = args.target_activity;
    let mut spec = if source == target {
        FinetuneSpec::within_activity(strategy, prov.inner_lr.unwrap_or(0.001))
    } else {
        FinetuneSpec::cross_activity(strategy)
    };
    spec.steps = args.steps;
    let store = read_archive(&args.data).with_context(|| format!("reading archive {}", args.data.display()))?;
    if [store.shape[0], store.shape[1]] != [sidecar.spec.channels, sidecar.spec.time_points] {
        bail!("archive trials are {:?}, model expects {}x{}", store.shape, sidecar.spec.channels, sidecar.spec.time_points);
    }
    let ids = parse_subject_range(&args.subjects)?;
    let test = datasets(&store, target, &ids);
    let model = Eegnet::new(sidecar.spec)?;
    let meta = ReportMeta {
        source_activity: source,
        target_activity: target,
        strategy,
        norm: sidecar.spec.norm,
    };
    let protocol = Protocol::new(args.runs, args.seed);
    log::info!(
        "adapting {strategy} model from activity {source} to {target}: {} with lr {}, {} steps, {} runs, {} subjects",
        spec.optimizer,
        spec.lr,
        spec.steps,
        args.runs,
        test.len()
    );
    let mut report = if source == target {
        evaluate_fast_adaptability(&model, &params, &test, &spec, &protocol, meta)?
    } else {
        cross_activity_adapt(&model, &params, &test, &spec, &protocol, meta)?
    };
    let model_bytes = std::fs::read(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let mut h = Sha256::new();
    h.update(&model_bytes);
    h.update(serde_json::to_vec(&(&spec, &protocol, target.id(), &args.subjects))?);
    h.update(prov.config_hash.as_deref().unwrap_or("").as_bytes());
    report.config_hash = Some(hex(&h.finalize()));
    report.write(&args.out)?;
    log::info!(
        "test accuracy {:.2}% before, {:.2}% after adaptation; wrote {}",
        report.mean_test[0] * 100.0,
        report.mean_test[report.steps()] * 100.0,
        args.out.display()
    );
    Ok(())
}

pub fn report(inputs: &[PathBuf], out: &Path, table: bool) -> Result<()> {
    let mut all = Vec::new();
    for p in inputs {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        all.push(fastbci::eval::parse_report_csv(&text).with_context(|| format!("parsing {}", p.display()))?);
    }
    let rows: Vec<_> = all.iter().flatten().cloned().collect();
    let files = render_plots(&rows, out)?;
    for f in &files {
        log::info!("wrote {}", f.display());
    }
    if table {
        let md = compare_table(&all, &[])?;
        let path = out.join("summary.md");
        std::fs::write(&path, &md).with_context(|| format!("writing {}", path.display()))?;
        print!("{md}");
    }
    Ok(())
}
