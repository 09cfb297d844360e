//! Experiment orchestration and artifact writing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{parse_config, DataSource, ExperimentConfig, MnistSource, ToySource};
use super::plot::{sweep_svg, toy_svg};
use crate::data::{cubic, load_idx_classification, load_mnist, toy_regression, uniform_noise_images, Dataset};
use crate::error::{contract, io_err, Result};
use crate::evaluation::{
    adversarial_sweep, draw_weights, entropy_cdf_auc, predictive_from_weights, predictive_regression,
    weight_diagnostics, AdversarialSweep, WeightDiagnostics,
};
use crate::posterior::Posterior;
use crate::tensor::Tensor;
use crate::training::{train_with, StepLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.bbh";
pub const METRICS_HEADER: &str = "method,error_pct,in_auc,outlier_auc,runtime_s,seed";

// Independent random streams per stage, so adding a stage never shifts another.
const EVAL_STREAM: u64 = 1;
const ATTACK_STREAM: u64 = 2;
const DIAGNOSE_STREAM: u64 = 3;
const OUTLIER_SEED_OFFSET: u64 = 0x5eed;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One row of `metrics.csv`. Regression runs leave the classification columns empty.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub method: String,
    pub error_pct: Option<f64>,
    pub in_auc: Option<f64>,
    pub outlier_auc: Option<f64>,
    pub runtime_s: f64,
    pub seed: u64,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_default()
}

impl RunSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{}",
            self.method,
            opt(self.error_pct, 4),
            opt(self.in_auc, 6),
            opt(self.outlier_auc, 6),
            self.runtime_s,
            self.seed
        )
    }

    pub fn line(&self) -> String {
        match (self.error_pct, self.in_auc, self.outlier_auc) {
            (Some(e), Some(a), Some(o)) => format!(
                "{}: error {e:.2}% | MNIST AUC {a:.3} | outlier AUC {o:.3} | runtime {:.1}s",
                self.method, self.runtime_s
            ),
            _ => format!("{}: runtime {:.1}s", self.method, self.runtime_s),
        }
    }
}

/// Files written into one output directory, listed in `manifest.txt`.
pub struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(io_err(&p))?;
        self.note(name);
        Ok(())
    }

    fn note(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    pub fn finish(mut self) -> Result<Vec<String>> {
        self.note("manifest.txt");
        let mut names = self.written.clone();
        names.sort();
        let text: String = names.iter().map(|n| format!("{n}\n")).collect();
        let p = self.path("manifest.txt");
        std::fs::write(&p, text).map_err(io_err(&p))?;
        Ok(names)
    }
}

pub struct ClassificationData {
    pub train: Dataset,
    pub test: Dataset,
    pub outlier: Dataset,
}

pub fn load_classification(source: &MnistSource, outlier_override: Option<&Path>, seed: u64) -> Result<ClassificationData> {
    let (mut train, mut test) = load_mnist(&source.dir)?;
    if let Some(n) = source.train_subset {
        train = train.take(n.min(train.len()))?;
    }
    if let Some(n) = source.test_subset {
        test = test.take(n.min(test.len()))?;
    }
    let outlier = match outlier_override.or(source.outlier.as_deref()) {
        Some(path) => {
            let o = load_idx_classification(path, None, 10, "outlier")?;
            o.take(o.len().min(test.len()))?
        }
        None => uniform_noise_images(test.len(), test.inputs().shape()[1], seed.wrapping_add(OUTLIER_SEED_OFFSET))?,
    };
    Ok(ClassificationData { train, test, outlier })
}

pub fn toy_data(source: &ToySource) -> Result<Dataset> {
    toy_regression(source.points, source.x_lo, source.x_hi, source.noise_std, source.seed)
}

pub fn train_log_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,nll,kl,anneal,loss\n");
    for l in log {
        let _ = writeln!(s, "{},{},{},{},{}", l.step, l.nll, l.kl, l.anneal, l.loss);
    }
    s
}

pub fn sweep_csv(sweep: &AdversarialSweep) -> String {
    let mut s = String::from("epsilon,accuracy,entropy\n");
    for i in 0..sweep.epsilons.len() {
        let _ = writeln!(s, "{},{},{}", sweep.epsilons[i], sweep.accuracy[i], sweep.entropy[i]);
    }
    s
}

/// `(samples, histograms, correlation)` CSV texts.
pub fn diagnostics_csv(d: &WeightDiagnostics) -> (String, String, String) {
    let header = d.names.join(",");
    let mut samples = format!("{header}\n");
    let rows = d.samples.first().map_or(0, Vec::len);
    for r in 0..rows {
        let row: Vec<String> = d.samples.iter().map(|c| c[r].to_string()).collect();
        let _ = writeln!(samples, "{}", row.join(","));
    }
    let mut hist = String::from("weight,bin_lo,bin_hi,count\n");
    for (name, h) in d.names.iter().zip(&d.histograms) {
        let width = (h.hi - h.lo) / h.counts.len() as f64;
        for (b, c) in h.counts.iter().enumerate() {
            let lo = h.lo + width * b as f64;
            let _ = writeln!(hist, "{name},{lo},{},{c}", lo + width);
        }
    }
    let mut corr = format!("weight,{header}\n");
    for (name, row) in d.names.iter().zip(&d.correlation) {
        let vals: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(corr, "{name},{}", vals.join(","));
    }
    (samples, hist, corr)
}

pub struct Evaluation {
    pub error_pct: f64,
    pub in_auc: f64,
    pub outlier_auc: f64,
    pub in_entropy: Vec<f64>,
    pub outlier_entropy: Vec<f64>,
}

pub fn evaluate(posterior: &Posterior, data: &ClassificationData, samples: usize, seed: u64) -> Result<Evaluation> {
    let labels = data.test.labels().ok_or_else(|| contract("test set has no labels"))?;
    let mut rng = stage_rng(seed, EVAL_STREAM);
    let weights = draw_weights(posterior, samples, &mut rng)?;
    let spec = posterior.spec();
    let r = predictive_from_weights(spec, &weights, data.test.inputs())?;
    let o = predictive_from_weights(spec, &weights, data.outlier.inputs())?;
    Ok(Evaluation {
        error_pct: 100.0 * (1.0 - r.accuracy(labels)),
        in_auc: entropy_cdf_auc(&r.entropy)?,
        outlier_auc: entropy_cdf_auc(&o.entropy)?,
        in_entropy: r.entropy,
        outlier_entropy: o.entropy,
    })
}

fn entropy_csv(e: &Evaluation) -> String {
    let mut s = String::from("set,entropy\n");
    for v in &e.in_entropy {
        let _ = writeln!(s, "test,{v}");
    }
    for v in &e.outlier_entropy {
        let _ = writeln!(s, "outlier,{v}");
    }
    s
}

fn attack_set(test: &Dataset, subset: Option<usize>) -> Result<Dataset> {
    match subset {
        Some(n) => test.take(n.min(test.len())),
        None => Ok(test.clone()),
    }
}

pub fn run_sweep(posterior: &Posterior, test: &Dataset, epsilons: &[f64], samples: usize, seed: u64) -> Result<AdversarialSweep> {
    let mut rng = stage_rng(seed, ATTACK_STREAM);
    adversarial_sweep(posterior, test, epsilons, samples, &mut rng)
}

pub fn run_diagnostics(posterior: &Posterior, selector: &str, samples: usize, seed: u64) -> Result<WeightDiagnostics> {
    let mut rng = stage_rng(seed, DIAGNOSE_STREAM);
    weight_diagnostics(posterior, samples.max(2), selector, &mut rng)
}

fn write_sweep(art: &mut Artifacts, sweep: &AdversarialSweep) -> Result<()> {
    art.write("sweep.csv", sweep_csv(sweep))?;
    art.write("sweep.svg", sweep_svg(sweep)?)
}

fn write_diagnostics(art: &mut Artifacts, d: &WeightDiagnostics) -> Result<()> {
    let (samples, hist, corr) = diagnostics_csv(d);
    art.write("weight_samples.csv", samples)?;
    art.write("weight_histograms.csv", hist)?;
    art.write("weight_correlation.csv", corr)
}

fn write_metrics(art: &mut Artifacts, summary: &RunSummary) -> Result<()> {
    art.write("metrics.csv", format!("{METRICS_HEADER}\n{}\n", summary.csv_row()))
}

/// Trains per `config` and writes every artifact into `config.output`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    run_experiment_with(config, |_| {})
}

pub fn run_experiment_with(config: &ExperimentConfig, mut on_step: impl FnMut(&StepLog)) -> Result<RunSummary> {
    let start = Instant::now();
    let spec = config.network.build()?;
    let seed = config.seed();
    match &config.data {
        DataSource::Mnist(source) => {
            let data = load_classification(source, None, seed)?;
            let mut art = Artifacts::create(&config.output)?;
            art.write("config.conf", config.to_text())?;
            let trained = train_with(&config.train, &spec, &data.train, &mut on_step)?;
            art.write("train_log.csv", train_log_csv(&trained.log))?;
            save_checkpoint(&art.path(CHECKPOINT_FILE), config, &trained.posterior)?;
            art.note(CHECKPOINT_FILE);

            let ev = evaluate(&trained.posterior, &data, config.eval.samples, seed)?;
            art.write("entropy.csv", entropy_csv(&ev))?;
            if !config.eval.epsilons.is_empty() {
                let test = attack_set(&data.test, config.eval.attack_subset)?;
                let sweep = run_sweep(&trained.posterior, &test, &config.eval.epsilons, config.eval.samples, seed)?;
                write_sweep(&mut art, &sweep)?;
            }
            if !config.eval.diagnose.trim().is_empty() {
                let d = run_diagnostics(&trained.posterior, &config.eval.diagnose, config.eval.samples, seed)?;
                write_diagnostics(&mut art, &d)?;
            }
            let summary = RunSummary {
                method: config.method().to_string(),
                error_pct: Some(ev.error_pct),
                in_auc: Some(ev.in_auc),
                outlier_auc: Some(ev.outlier_auc),
                runtime_s: start.elapsed().as_secs_f64(),
                seed,
            };
            write_metrics(&mut art, &summary)?;
            art.finish()?;
            Ok(summary)
        }
        DataSource::Toy(source) => {
            let data = toy_data(source)?;
            let mut art = Artifacts::create(&config.output)?;
            art.write("config.conf", config.to_text())?;
            let trained = train_with(&config.train, &spec, &data, &mut on_step)?;
            art.write("train_log.csv", train_log_csv(&trained.log))?;
            save_checkpoint(&art.path(CHECKPOINT_FILE), config, &trained.posterior)?;
            art.note(CHECKPOINT_FILE);
            write_toy(&mut art, &trained.posterior, source, &data, config.eval.samples, seed)?;
            let summary = RunSummary {
                method: config.method().to_string(),
                error_pct: None,
                in_auc: None,
                outlier_auc: None,
                runtime_s: start.elapsed().as_secs_f64(),
                seed,
            };
            write_metrics(&mut art, &summary)?;
            art.finish()?;
            Ok(summary)
        }
    }
}

/// Points at which the toy predictive is tabulated: the training range plus a margin on both sides.
pub fn toy_grid(source: &ToySource) -> Vec<f64> {
    let (lo, hi) = (source.x_lo - source.margin, source.x_hi + source.margin);
    let n = 200;
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

pub struct ToyPredictive {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn toy_predictive(posterior: &Posterior, source: &ToySource, samples: usize, seed: u64) -> Result<ToyPredictive> {
    let x = toy_grid(source);
    let inputs = Tensor::matrix(x.len(), 1, x.clone())?;
    let mut rng = stage_rng(seed, EVAL_STREAM);
    let (mean, std) = predictive_regression(posterior, &inputs, samples, &mut rng)?;
    Ok(ToyPredictive { x, mean, std })
}

fn write_toy(
    art: &mut Artifacts,
    posterior: &Posterior,
    source: &ToySource,
    data: &Dataset,
    samples: usize,
    seed: u64,
) -> Result<()> {
    let p = toy_predictive(posterior, source, samples, seed)?;
    let mut csv = String::from("x,mean,std\n");
    for i in 0..p.x.len() {
        let _ = writeln!(csv, "{},{},{}", p.x[i], p.mean[i], p.std[i]);
    }
    art.write("toy_predictive.csv", csv)?;
    let xs = data.inputs().data().to_vec();
    let ys = match data.targets() {
        crate::data::Targets::Values(v) => v.clone(),
        _ => return Err(contract("toy data must carry regression targets")),
    };
    let mut pts = String::from("x,y\n");
    for (x, y) in xs.iter().zip(&ys) {
        let _ = writeln!(pts, "{x},{y}");
    }
    art.write("toy_data.csv", pts)?;
    let truth: Vec<f64> = p.x.iter().map(|&x| cubic(x)).collect();
    art.write("toy.svg", toy_svg(&p.x, &p.mean, &p.std, &truth, (&xs, &ys))?)
}

/// Re-evaluates a checkpoint, optionally against a different outlier set.
pub fn eval_checkpoint(ck: &Checkpoint, outlier: Option<&Path>, out: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    let DataSource::Mnist(source) = &ck.config.data else {
        return Err(contract("eval needs a classification checkpoint; use `toy` for regression configs"));
    };
    let seed = ck.config.seed();
    let data = load_classification(source, outlier, seed)?;
    let ev = evaluate(&ck.posterior, &data, ck.config.eval.samples, seed)?;
    let mut art = Artifacts::create(out)?;
    art.write("entropy.csv", entropy_csv(&ev))?;
    let summary = RunSummary {
        method: ck.config.method().to_string(),
        error_pct: Some(ev.error_pct),
        in_auc: Some(ev.in_auc),
        outlier_auc: Some(ev.outlier_auc),
        runtime_s: start.elapsed().as_secs_f64(),
        seed,
    };
    write_metrics(&mut art, &summary)?;
    art.finish()?;
    Ok(summary)
}

pub fn attack_checkpoint(ck: &Checkpoint, epsilons: &[f64], out: &Path) -> Result<AdversarialSweep> {
    let DataSource::Mnist(source) = &ck.config.data else {
        return Err(contract("attack needs a classification checkpoint"));
    };
    let seed = ck.config.seed();
    let data = load_classification(source, None, seed)?;
    let test = attack_set(&data.test, ck.config.eval.attack_subset)?;
    let sweep = run_sweep(&ck.posterior, &test, epsilons, ck.config.eval.samples, seed)?;
    let mut art = Artifacts::create(out)?;
    write_sweep(&mut art, &sweep)?;
    art.finish()?;
    Ok(sweep)
}

pub fn diagnose_checkpoint(ck: &Checkpoint, selector: &str, out: &Path) -> Result<WeightDiagnostics> {
    let d = run_diagnostics(&ck.posterior, selector, ck.config.eval.samples, ck.config.seed())?;
    let mut art = Artifacts::create(out)?;
    write_diagnostics(&mut art, &d)?;
    art.finish()?;
    Ok(d)
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text)
}

/// Runs every `*.conf` in `dir` (sorted by name) and tabulates the results.
pub fn run_grid(dir: &Path, summary_path: &Path, mut report: impl FnMut(&str, &RunSummary)) -> Result<Vec<(String, RunSummary)>> {
    let mut configs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "conf"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(contract(format!("no .conf files in {}", dir.display())));
    }
    let mut rows = Vec::new();
    for path in &configs {
        let config = read_config(path)?;
        let summary = run_experiment(&config)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        report(&name, &summary);
        rows.push((name, summary));
    }
    let mut csv = format!("config,{METRICS_HEADER}\n");
    for (name, s) in &rows {
        let _ = writeln!(csv, "{name},{}", s.csv_row());
    }
    if let Some(parent) = summary_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(summary_path, csv).map_err(io_err(summary_path))?;
    Ok(rows)
}

/// Extrapolation-to-interior ratio of mean predictive std for a toy run.
pub fn extrapolation_ratio(p: &ToyPredictive, source: &ToySource) -> f64 {
    let (mut out, mut no, mut inn, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for (&x, &s) in p.x.iter().zip(&p.std) {
        if x < source.x_lo || x > source.x_hi {
            out += s;
            no += 1;
        } else {
            inn += s;
            ni += 1;
        }
    }
    (out / no.max(1) as f64) / (inn / ni.max(1) as f64)
}
