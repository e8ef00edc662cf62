//! The five pipeline stages and the files they exchange.

use std::fs;
use std::path::Path;
use std::time::Instant;

use hmogp::data::{self, HierarchicalDataset, SplitPlan};
use hmogp::kernels::TaggedPoints;
use hmogp::linalg::Matrix;
use hmogp::metrics::{self, EvalReport, ScoredPoint};
use hmogp::prediction::{PredictOptions, Predictor};
use hmogp::training::{self, FitResult, InitStrategy};
use hmogp::{ModelState, TrainingData};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig, SplitMode};
use crate::CliError;

const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_PREDICT: u64 = 4;

/// Independent seed for one consumer of randomness within a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: u64,
    pub data: u64,
    pub split: u64,
    pub init: u64,
    pub predict: u64,
}

impl RunSeeds {
    pub fn new(run: u64) -> Self {
        Self {
            run,
            data: derive_seed(run, STREAM_DATA),
            split: derive_seed(run, STREAM_SPLIT),
            init: derive_seed(run, STREAM_INIT),
            predict: derive_seed(run, STREAM_PREDICT),
        }
    }
}

/// Everything needed to rerun a command bit-for-bit on the same build.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: Vec<RunSeeds>,
    pub initialization: String,
    pub fits: Vec<FitSummary>,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitSummary {
    pub seed: u64,
    pub initial_elbo: f64,
    pub final_elbo: f64,
    pub best_iteration: usize,
    pub rejected_steps: usize,
    pub final_learning_rate: f64,
    pub jitter_evaluations: usize,
    pub max_jitter: f64,
}

impl FitSummary {
    fn of(seed: u64, fit: &FitResult) -> Self {
        Self {
            seed,
            initial_elbo: fit.diagnostics.initial_elbo,
            final_elbo: fit.diagnostics.best_elbo,
            best_iteration: fit.best_iteration,
            rejected_steps: fit.diagnostics.rejected_steps,
            final_learning_rate: fit.diagnostics.final_learning_rate,
            jitter_evaluations: fit.diagnostics.jitter_evaluations,
            max_jitter: fit.diagnostics.max_jitter,
        }
    }
}

const INITIALIZATION: &str = "latent means: PCA of kernel-smoothed outputs on a common grid \
    (0.1 x N(0,1) when unavailable); latent variances 0.5; Z^X strided over each replica's inputs; \
    Z^H ~ N(0,1); M = 0; Sigma factors 0.1 x chol(K_UU); noise 0.1 x target variance";

impl RunManifest {
    fn new(command: &str, cfg: &RunConfig, seeds: Vec<RunSeeds>, fits: Vec<FitSummary>, started: Instant) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            seeds,
            initialization: INITIALIZATION.into(),
            fits,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        }
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join("manifest.json"), self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(hmogp::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// The dataset named by the config; synthetic data is drawn with `seed`.
pub fn load_dataset(cfg: &RunConfig, seed: u64) -> Result<HierarchicalDataset, CliError> {
    let ds = match cfg.dataset.source {
        DataSource::Synthetic => {
            let mut s = cfg.dataset.synthetic.clone();
            s.seed = seed;
            let mut ds = data::generate_synthetic(&s)?;
            if cfg.dataset.standardize {
                ds.standardize();
            }
            ds
        }
        DataSource::Csv => {
            let path = cfg.dataset.path.as_ref().expect("validated");
            data::load_csv(path, cfg.dataset.standardize)?
        }
    };
    Ok(ds)
}

/// Train/test partition; `SplitMode::None` trains on everything.
pub fn split_dataset(
    cfg: &RunConfig,
    ds: &HierarchicalDataset,
    seed: u64,
) -> Result<(HierarchicalDataset, Option<HierarchicalDataset>), CliError> {
    let plan = match cfg.split.mode {
        SplitMode::None => return Ok((ds.clone(), None)),
        SplitMode::RandomFraction => SplitPlan::RandomFraction {
            fraction: cfg.split.fraction,
            seed,
        },
        SplitMode::MissingReplica => SplitPlan::MissingReplica {
            missing: cfg
                .split
                .missing
                .clone()
                .unwrap_or_else(|| data::random_missing_replicas(ds, seed)),
        },
    };
    let (train, test) = data::split(ds, &plan)?;
    Ok((train, Some(test)))
}

fn training_data(cfg: &RunConfig, ds: &HierarchicalDataset) -> Result<TrainingData, CliError> {
    if ds.has_shared_inputs() && !cfg.model.per_output_noise {
        Ok(ds.to_shared_training_data()?)
    } else {
        Ok(ds.to_training_data()?)
    }
}

pub fn fit_dataset(cfg: &RunConfig, train: &HierarchicalDataset, seed: u64) -> Result<FitResult, CliError> {
    let data = training_data(cfg, train)?;
    let mut opt = cfg.optimizer.clone();
    opt.seed = seed;
    info!(
        "fitting {} outputs x {} replicas, {} observations, {} iterations{}",
        train.output_count(),
        train.replica_count(),
        train.observation_count(),
        opt.iterations,
        if cfg.model.flat { " (flat ablation)" } else { "" }
    );
    Ok(training::fit(&data, &opt, InitStrategy::Heuristic(cfg.model.clone()))?)
}

/// One row of a predictions file.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub output: usize,
    pub replica: usize,
    pub x: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

/// Mixture predictions at every point of `points`, in file order.
pub fn predict_dataset(
    cfg: &RunConfig,
    state: &ModelState,
    points: &HierarchicalDataset,
    seed: u64,
) -> Result<Vec<PredictionRow>, CliError> {
    if points.output_count() > state.outputs() {
        return Err(CliError::Data(format!(
            "points reference output {} but the model has {} outputs",
            points.output_count() - 1,
            state.outputs()
        )));
    }
    let predictor = Predictor::new(state)?;
    let mut rows = Vec::with_capacity(points.observation_count());
    for (d, out) in points.outputs.iter().enumerate() {
        let mut xs = Vec::new();
        let mut tags = Vec::new();
        for (r, rec) in out.replicas.iter().enumerate() {
            for i in 0..rec.len() {
                xs.push(rec.inputs.row(i).to_vec());
                tags.push(r);
            }
        }
        if xs.is_empty() {
            continue;
        }
        let xstar = TaggedPoints::new(Matrix::from_rows(&xs)?, tags.clone())?;
        let opts = PredictOptions {
            noise_output: cfg.prediction.include_noise.then_some(d),
            full_covariance: false,
        };
        let m = predictor.marginal(&xstar, d, cfg.prediction.mc_samples, derive_seed(seed, d as u64), &opts)?;
        for (i, x) in xs.into_iter().enumerate() {
            rows.push(PredictionRow {
                output: d,
                replica: tags[i],
                x,
                mean: m.mean[i],
                variance: m.variance[i],
            });
        }
    }
    Ok(rows)
}

pub fn write_predictions(rows: &[PredictionRow], input_dim: usize, path: &Path) -> Result<(), CliError> {
    let mut text = String::from("output,replica");
    for k in 0..input_dim {
        text.push_str(&format!(",x_{k}"));
    }
    text.push_str(",mean,variance\n");
    for r in rows {
        text.push_str(&format!("{},{}", r.output, r.replica));
        for v in &r.x {
            text.push_str(&format!(",{v}"));
        }
        text.push_str(&format!(",{},{}\n", r.mean, r.variance));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    let n = header.len();
    if n < 5 || header[..2] != ["output", "replica"] || header[n - 2..] != ["mean", "variance"] {
        return Err(CliError::Data(format!(
            "{}: line 1: header must be output,replica,x_0,...,mean,variance",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| CliError::Data(format!("{}: line {}: {what}", path.display(), k + 2));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != n {
            return Err(bad(&format!("expected {n} fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("{s:?} is not a number")));
        rows.push(PredictionRow {
            output: f[0].parse().map_err(|_| bad("output must be an integer"))?,
            replica: f[1].parse().map_err(|_| bad("replica must be an integer"))?,
            x: f[2..n - 2].iter().map(|s| num(s)).collect::<Result<_, _>>()?,
            mean: num(f[n - 2])?,
            variance: num(f[n - 1])?,
        });
    }
    Ok(rows)
}

/// Scores predictions against a dataset holding the same points in the
/// same order.
pub fn score(rows: &[PredictionRow], truth: &HierarchicalDataset) -> Result<EvalReport, CliError> {
    let mut points = Vec::with_capacity(rows.len());
    let mut it = rows.iter();
    for (d, out) in truth.outputs.iter().enumerate() {
        for (r, rec) in out.replicas.iter().enumerate() {
            for i in 0..rec.len() {
                let p = it
                    .next()
                    .ok_or_else(|| CliError::Data("fewer predictions than truth rows".into()))?;
                if p.output != d || p.replica != r || p.x != rec.inputs.row(i) {
                    return Err(CliError::Data(format!(
                        "prediction for output {} replica {} does not line up with truth output {d} replica {r}",
                        p.output, p.replica
                    )));
                }
                points.push(ScoredPoint {
                    output: d,
                    truth: rec.targets[i],
                    mean: p.mean,
                    variance: p.variance,
                });
            }
        }
    }
    if it.next().is_some() {
        return Err(CliError::Data("more predictions than truth rows".into()));
    }
    Ok(metrics::evaluate(&points)?)
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_metrics(report: &EvalReport, dir: &Path) -> Result<(), CliError> {
    write_json(&dir.join("metrics.json"), report)?;
    let mut text = String::from("scope,output,n_test,nmse,nlpd\n");
    text.push_str(&format!("pooled,,{},{},{}\n", report.n_test, report.nmse, report.nlpd));
    for o in &report.per_output {
        text.push_str(&format!(
            "output,{},{},{},{}\n",
            o.output,
            o.n_test,
            opt_num(o.nmse),
            o.nlpd
        ));
    }
    fs::write(dir.join("metrics.csv"), text)?;
    Ok(())
}

pub fn write_trace(trace: &[f64], path: &Path) -> Result<(), CliError> {
    let mut text = String::from("iteration,elbo\n");
    for (i, v) in trace.iter().enumerate() {
        text.push_str(&format!("{i},{v}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

fn save_dataset(ds: &HierarchicalDataset, dir: &Path, stem: &str) -> Result<(), CliError> {
    data::save_csv(ds, &dir.join(format!("{stem}.csv")))?;
    data::save_metadata(&ds.metadata, &dir.join(format!("{stem}.meta.json")))?;
    Ok(())
}

/// Writes `data.csv` and its metadata sidecar.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<HierarchicalDataset, CliError> {
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let seeds = RunSeeds::new(cfg.seed);
    let ds = load_dataset(cfg, seeds.data)?;
    save_dataset(&ds, out, "data")?;
    RunManifest::new("generate", cfg, vec![seeds], Vec::new(), started).write(out)?;
    Ok(ds)
}

/// Writes the split, `model.json` and `trace.csv`.
pub fn cmd_fit(cfg: &RunConfig, out: &Path) -> Result<FitResult, CliError> {
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let seeds = RunSeeds::new(cfg.seed);
    let ds = load_dataset(cfg, seeds.data)?;
    let (train, test) = split_dataset(cfg, &ds, seeds.split)?;
    save_dataset(&train, out, "train")?;
    if let Some(test) = &test {
        save_dataset(test, out, "test")?;
    }
    let fit = fit_dataset(cfg, &train, seeds.init)?;
    write_json(&out.join("model.json"), &fit.state)?;
    write_trace(&fit.trace, &out.join("trace.csv"))?;
    let summary = FitSummary::of(seeds.run, &fit);
    RunManifest::new("fit", cfg, vec![seeds], vec![summary], started).write(out)?;
    Ok(fit)
}

pub fn load_model(path: &Path) -> Result<ModelState, CliError> {
    let state: ModelState = serde_json::from_str(&fs::read_to_string(path)?).map_err(hmogp::Error::from)?;
    state.validate()?;
    Ok(state)
}

/// Predicts at every point of a dataset-format CSV; targets are ignored.
pub fn cmd_predict(cfg: &RunConfig, model: &Path, points: &Path, out: &Path) -> Result<Vec<PredictionRow>, CliError> {
    fs::create_dir_all(out)?;
    let state = load_model(model)?;
    let ds = data::load_csv(points, false)?;
    let rows = predict_dataset(cfg, &state, &ds, RunSeeds::new(cfg.seed).predict)?;
    write_predictions(&rows, ds.input_dim, &out.join("predictions.csv"))?;
    Ok(rows)
}

/// Writes `metrics.json` and `metrics.csv`.
pub fn cmd_eval(predictions: &Path, truth: &Path, out: &Path) -> Result<EvalReport, CliError> {
    fs::create_dir_all(out)?;
    let rows = read_predictions(predictions)?;
    let ds = data::load_csv(truth, false)?;
    let report = score(&rows, &ds)?;
    write_metrics(&report, out)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepeatOutcome {
    pub seed: u64,
    pub report: EvalReport,
    pub fit: FitSummary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single repeat.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub flat: bool,
    pub nmse: MeanSd,
    pub nlpd: MeanSd,
    pub repeats: Vec<RepeatOutcome>,
}

/// Repeats generate, split, fit, predict and score under seeds
/// `seed, seed + 1, ...`. Files are written only when `out` is given.
pub fn run_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<ExperimentSummary, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut outcomes = Vec::with_capacity(cfg.experiment.repeats);
    let mut all_seeds = Vec::new();
    for k in 0..cfg.experiment.repeats {
        let seeds = RunSeeds::new(cfg.seed.wrapping_add(k as u64));
        let ds = load_dataset(cfg, seeds.data)?;
        let (train, test) = split_dataset(cfg, &ds, seeds.split)?;
        let test = test.ok_or_else(|| CliError::Config("split.mode: an experiment needs a held-out set".into()))?;
        let fit = fit_dataset(cfg, &train, seeds.init)?;
        let rows = predict_dataset(cfg, &fit.state, &test, seeds.predict)?;
        let report = score(&rows, &test)?;
        info!(
            "repeat {k} (seed {}): NMSE {:.4}, NLPD {:.4}",
            seeds.run, report.nmse, report.nlpd
        );
        if let Some(dir) = out {
            let rd = dir.join(format!("repeat_{k}"));
            fs::create_dir_all(&rd)?;
            save_dataset(&train, &rd, "train")?;
            save_dataset(&test, &rd, "test")?;
            write_json(&rd.join("model.json"), &fit.state)?;
            write_trace(&fit.trace, &rd.join("trace.csv"))?;
            write_predictions(&rows, test.input_dim, &rd.join("predictions.csv"))?;
            write_metrics(&report, &rd)?;
        }
        outcomes.push(RepeatOutcome {
            seed: seeds.run,
            report,
            fit: FitSummary::of(seeds.run, &fit),
        });
        all_seeds.push(seeds);
    }
    let nmse: Vec<f64> = outcomes.iter().map(|o| o.report.nmse).collect();
    let nlpd: Vec<f64> = outcomes.iter().map(|o| o.report.nlpd).collect();
    let summary = ExperimentSummary {
        flat: cfg.model.flat,
        nmse: MeanSd::of(&nmse),
        nlpd: MeanSd::of(&nlpd),
        repeats: outcomes,
    };
    if let Some(dir) = out {
        write_json(&dir.join("summary.json"), &summary)?;
        let mut text = String::from("metric,mean,sd");
        for k in 0..summary.repeats.len() {
            text.push_str(&format!(",repeat_{k}"));
        }
        text.push('\n');
        for (name, ms, xs) in [("nmse", summary.nmse, &nmse), ("nlpd", summary.nlpd, &nlpd)] {
            text.push_str(&format!("{name},{},{}", ms.mean, ms.sd));
            for x in xs {
                text.push_str(&format!(",{x}"));
            }
            text.push('\n');
        }
        fs::write(dir.join("summary.csv"), text)?;
        let fits = summary.repeats.iter().map(|o| o.fit.clone()).collect();
        RunManifest::new("experiment", cfg, all_seeds, fits, started).write(dir)?;
    }
    Ok(summary)
}

pub fn cmd_experiment(cfg: &RunConfig, out: &Path) -> Result<ExperimentSummary, CliError> {
    run_experiment(cfg, Some(out))
}
