use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lensformer::detector::{build, Checkpoint, DetectorModel};
use lensformer::lenssim::{generate_dataset, load_dataset, ImageStamp};
use lensformer::metrics::{
    evaluate, render_roc_svg, stratified_report, write_roc_csv, write_scores_csv, EvalReport, ScoredSample,
    StratifiedReport,
};
use lensformer::training::{fine_tune, model_input, train as run_training, TrainOptions};
use lensformer::Error;

use crate::config::RunConfig;
use crate::{CliError, Common, EvalArgs, ReportArgs, SimulateArgs, TrainArgs};

const CONFIG_ECHO: &str = "config.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::resolve(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Vec<ImageStamp>, CliError> {
    load_dataset(dir, cfg.train.parallelism)
        .map_err(|e| CliError::Runtime(format!("cannot load dataset {}: {e}", dir.display())))
}

fn check_data(model: &DetectorModel, data: &[ImageStamp]) -> Result<(), CliError> {
    let c = model.config();
    let want = [c.input_bands, c.input_size, c.input_size];
    match data.iter().find(|s| s.pixels.shape() != want) {
        Some(s) => Err(CliError::Runtime(format!(
            "stamp {} is {:?} but the model expects {:?} (bands, height, width)",
            s.id,
            s.pixels.shape(),
            want
        ))),
        None => Ok(()),
    }
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&args.common)?;
    if let Some(n) = args.n {
        cfg.simulation.n = n;
    }
    if let Some(f) = args.lens_fraction {
        cfg.simulation.lens_fraction = f;
    }
    if let Some(b) = args.bands {
        cfg.simulation.bands = Some(b);
    }
    if let Some(out) = &args.out {
        cfg.paths.data_dir = out.clone();
    }
    let ranges = cfg.ranges()?;
    let sim = &cfg.simulation;
    if sim.n < 2 || !(sim.lens_fraction > 0.0 && sim.lens_fraction < 1.0) {
        return Err(CliError::Usage(format!(
            "simulation needs n >= 2 and lens_fraction in (0, 1), got n = {} and lens_fraction = {}",
            sim.n, sim.lens_fraction
        )));
    }
    let out = cfg.paths.data_dir.clone();
    let rows = generate_dataset(sim.n, sim.lens_fraction, &ranges, cfg.seed, &out, cfg.train.parallelism)
        .map_err(CliError::runtime)?;
    cfg.write(&out.join(CONFIG_ECHO))?;
    let lenses: Vec<f64> = rows.iter().filter(|r| r.label == 1).map(|r| r.theta_e).collect();
    let lo = lenses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lenses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "simulated {} stamps ({} lenses, {} non-lenses; {} bands, {}x{} px); theta_E in [{lo:.3}, {hi:.3}] arcsec -> {}",
        rows.len(),
        lenses.len(),
        rows.len() - lenses.len(),
        ranges.bands(),
        ranges.stamp_size,
        ranges.stamp_size,
        out.display()
    );
    Ok(())
}

/// Last per-stage checkpoint that exists for the schedule, if any.
fn last_good_checkpoint(dir: &Path, cfg: &RunConfig) -> Option<PathBuf> {
    let mut epoch = 0;
    let mut last = None;
    for (k, st) in cfg.train.stages.iter().enumerate() {
        epoch += st.epochs;
        let p = dir.join(format!("stage{}_epoch{epoch}.ckpt", k + 1));
        if p.exists() {
            last = Some(p);
        }
    }
    last
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&args.common)?;
    if !args.stages.is_empty() {
        cfg.train.stages = args.stages.clone();
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if args.no_rotations {
        cfg.train.augment_rotations = false;
    }
    if let Some(d) = &args.data {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.paths.run_dir = o.clone();
    }
    let model: DetectorModel = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)
                .map_err(|e| CliError::Runtime(format!("cannot load checkpoint {}: {e}", path.display())))?;
            cfg.model = ckpt.config.clone();
            DetectorModel::from_checkpoint(&ckpt).map_err(CliError::runtime)?
        }
        None => {
            cfg.model.validate().map_err(CliError::usage)?;
            build(&cfg.model, cfg.seed).map_err(CliError::usage)?
        }
    };
    let tc = cfg.train_config();
    tc.validate().map_err(CliError::usage)?;
    if args.start_stage == 0 || args.start_stage > tc.stages.len() {
        return Err(CliError::Usage(format!("--start-stage must lie in 1..={}", tc.stages.len())));
    }

    let data = load_data(&cfg.paths.data_dir, &cfg)?;
    check_data(&model, &data)?;
    let run_dir = cfg.paths.run_dir.clone();
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    cfg.write(&run_dir.join(CONFIG_ECHO))?;
    let opts = TrainOptions { out_dir: Some(&run_dir), start_stage: args.start_stage - 1 };
    let result = if args.resume.is_some() {
        fine_tune(model, &data, &tc, &opts)
    } else {
        run_training(model, &data, &tc, &opts)
    };
    let outcome = match result {
        Ok(o) => o,
        Err(Error::NonFinite(msg)) => {
            let last = last_good_checkpoint(&run_dir, &cfg)
                .map_or_else(|| "no checkpoint was written".to_owned(), |p| format!("last good checkpoint: {}", p.display()));
            return Err(CliError::Runtime(format!("training diverged: {msg}; {last}")));
        }
        Err(e @ Error::Config(_)) => return Err(CliError::Runtime(e.to_string())),
        Err(e) => return Err(CliError::runtime(e)),
    };
    let epochs = outcome.history.last().map_or(0, |r| r.epoch);
    let model_path = run_dir.join(MODEL_FILE);
    outcome.model.to_checkpoint(epochs as u64).save(&model_path).map_err(CliError::runtime)?;
    match outcome.history.last() {
        Some(r) => println!(
            "trained {} epochs on {} stamps; final train_loss {:.5}, val_loss {:.5}, val_accuracy {:.4} -> {}",
            outcome.history.len(),
            data.len(),
            r.train_loss,
            r.val_loss,
            r.val_accuracy,
            model_path.display()
        ),
        None => println!("no epochs run -> {}", model_path.display()),
    }
    Ok(())
}

fn scored_samples(model: &DetectorModel, data: &[ImageStamp], cfg: &RunConfig) -> Result<Vec<ScoredSample>, CliError> {
    let scaling = model.config().input_scaling;
    let probs = cfg
        .train
        .parallelism
        .map_slice(data, |s| model.predict_one(&model_input(&s.pixels, scaling)))
        .into_iter()
        .collect::<Result<Vec<f32>, _>>()
        .map_err(CliError::runtime)?;
    Ok(data
        .iter()
        .zip(probs)
        .map(|(s, p)| ScoredSample {
            id: s.id.clone(),
            score: f64::from(p),
            label: s.label,
            einstein_radius: Some(s.meta.theta_e),
            flux_ratio: Some(s.meta.flux_ratio),
        })
        .collect())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn confusion_csv(report: &EvalReport) -> String {
    let mut s = String::from("threshold,tp,fp,tn,fn,tpr,fpr\n");
    for c in &report.confusion {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{},{}", c.threshold, c.tp, c.fp, c.tn, c.fn_, opt(c.tpr()), opt(c.fpr()));
    }
    s
}

fn stratified_csv(rep: &StratifiedReport) -> String {
    let mut s = String::from("bin,lower,upper,count,threshold,tp,fp,tn,fn,fnr\n");
    let edge = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, b) in rep.bins.iter().enumerate() {
        for c in &b.confusion {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{},{},{},{},{}",
                edge(b.lower),
                edge(b.upper),
                b.count,
                c.threshold,
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                edge(c.fnr())
            );
        }
    }
    s
}

fn key_name(key: lensformer::metrics::StratifyKey) -> &'static str {
    match key {
        lensformer::metrics::StratifyKey::EinsteinRadius => "theta_e",
        lensformer::metrics::StratifyKey::FluxRatio => "flux_ratio",
    }
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&args.common)?;
    if !args.thresholds.is_empty() {
        cfg.evaluation.thresholds = args.thresholds.clone();
    }
    for k in &args.stratify {
        if !cfg.evaluation.stratify.contains(k) {
            cfg.evaluation.stratify.push(*k);
        }
    }
    if let Some(d) = &args.data {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.paths.eval_dir = o.clone();
    }
    if cfg.evaluation.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CliError::Usage("thresholds must lie in [0, 1]".into()));
    }
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| cfg.paths.run_dir.join(MODEL_FILE));
    let ckpt = Checkpoint::load(&ckpt_path)
        .map_err(|e| CliError::Runtime(format!("cannot load checkpoint {}: {e}", ckpt_path.display())))?;
    let model = DetectorModel::from_checkpoint(&ckpt).map_err(CliError::runtime)?;
    let data = load_data(&cfg.paths.data_dir, &cfg)?;
    check_data(&model, &data)?;
    let samples = scored_samples(&model, &data, &cfg)?;
    let mut report = evaluate(&samples, &cfg.eval_options()).map_err(CliError::runtime)?;
    for &key in &cfg.evaluation.stratify {
        report
            .stratified
            .push(stratified_report(&samples, key, None, &cfg.evaluation.thresholds).map_err(CliError::runtime)?);
    }

    let out = cfg.paths.eval_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    cfg.write(&out.join(CONFIG_ECHO))?;
    write_scores_csv(out.join("scores.csv"), &samples).map_err(CliError::runtime)?;
    let json = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    write_text(&out.join(REPORT_FILE), &(json + "\n"))?;
    write_roc_csv(out.join("roc.csv"), &report.roc).map_err(CliError::runtime)?;
    write_text(&out.join("roc.svg"), &render_roc_svg(&report.roc, &cfg.evaluation.title))?;
    write_text(&out.join("confusion.csv"), &confusion_csv(&report))?;
    for st in &report.stratified {
        write_text(&out.join(format!("stratified_{}.csv", key_name(st.key))), &stratified_csv(st))?;
    }
    println!(
        "{} samples: accuracy {:.4}, AUROC {:.4}, TPR0 {:.4}, TPR10 {:.4} -> {}",
        report.samples,
        report.accuracy,
        report.auroc,
        report.tpr0,
        report.tpr10,
        out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SortKey {
    Accuracy,
    Auroc,
    Tpr0,
    Tpr10,
}

struct Row {
    model: String,
    samples: usize,
    accuracy: f64,
    auroc: f64,
    tpr0: f64,
    tpr10: f64,
}

impl Row {
    fn key(&self, k: SortKey) -> f64 {
        match k {
            SortKey::Accuracy => self.accuracy,
            SortKey::Auroc => self.auroc,
            SortKey::Tpr0 => self.tpr0,
            SortKey::Tpr10 => self.tpr10,
        }
    }
}

fn run_name(report_path: &Path) -> String {
    report_path
        .parent()
        .and_then(Path::file_name)
        .map_or_else(|| report_path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for run in &args.runs {
        let path = if run.is_dir() { run.join(REPORT_FILE) } else { run.clone() };
        let parsed = fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<EvalReport>(&t).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => rows.push(Row {
                model: run_name(&path),
                samples: r.samples,
                accuracy: r.accuracy,
                auroc: r.auroc,
                tpr0: r.tpr0,
                tpr10: r.tpr10,
            }),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if rows.is_empty() {
        return Err(CliError::Runtime("no readable evaluation reports".into()));
    }
    rows.sort_by(|a, b| b.key(args.sort).total_cmp(&a.key(args.sort)));

    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut table = format!("{:<width$}  {:>7}  {:>8}  {:>7}  {:>7}  {:>7}\n", "model", "samples", "accuracy", "AUROC", "TPR0", "TPR10");
    let mut csv = String::from("model,samples,accuracy,auroc,tpr0,tpr10\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{:<width$}  {:>7}  {:>8.4}  {:>7.4}  {:>7.4}  {:>7.4}",
            r.model, r.samples, r.accuracy, r.auroc, r.tpr0, r.tpr10
        );
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.model, r.samples, r.accuracy, r.auroc, r.tpr0, r.tpr10);
    }
    print!("{table}");
    if let Some(path) = &args.csv {
        write_text(path, &csv)?;
    }
    Ok(())
}
