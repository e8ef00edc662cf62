//! Hierarchical datasets: synthetic generation, CSV files and splits.
//!
//! The CSV layout is one observation per row with header
//! `output,replica,x_0[,x_1,...],y`. Indices start at 0; the number of outputs
//! and replicas is one more than the largest index seen, so a pair with no
//! rows is a missing replica.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::elbo::TrainingData;
use crate::error::{invalid, mismatch, Error, Result};
use crate::kernels::{hier_block_cov, latent_cov, HierarchicalKernelSpec, ReplicaInputs, StationaryKernelSpec};
use crate::linalg::{cholesky_jitter, kron_matvec, Matrix, DEFAULT_BASE_JITTER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub inputs: Matrix,
    pub targets: Vec<f64>,
}

impl ReplicaRecord {
    pub fn empty(dim: usize) -> Self {
        Self {
            inputs: Matrix::zeros(0, dim),
            targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub replicas: Vec<ReplicaRecord>,
}

/// Per-output affine map applied on load: stored value = (raw − mean) / scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    #[serde(default)]
    pub output_names: Vec<String>,
    #[serde(default)]
    pub standardization: Option<Vec<Standardization>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub generator: Option<SyntheticSettings>,
    /// Latent coordinates the synthetic generator drew.
    #[serde(default)]
    pub latent: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalDataset {
    pub outputs: Vec<OutputRecord>,
    pub input_dim: usize,
    pub metadata: DatasetMetadata,
}

impl HierarchicalDataset {
    pub fn new(outputs: Vec<OutputRecord>, input_dim: usize, metadata: DatasetMetadata) -> Result<Self> {
        let ds = Self {
            outputs,
            input_dim,
            metadata,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.outputs.is_empty() {
            return Err(invalid("dataset", "no outputs"));
        }
        let r = self.outputs[0].replicas.len();
        if r == 0 {
            return Err(invalid("dataset", "no replicas"));
        }
        for (d, o) in self.outputs.iter().enumerate() {
            if o.replicas.len() != r {
                return Err(mismatch("replicas per output", r, o.replicas.len()));
            }
            for (rr, rec) in o.replicas.iter().enumerate() {
                if rec.inputs.rows() != rec.targets.len() {
                    return Err(invalid(
                        format!("output {d} replica {rr}"),
                        "inputs and targets differ in length",
                    ));
                }
                if rec.inputs.rows() > 0 && rec.inputs.cols() != self.input_dim {
                    return Err(mismatch("input dimension", self.input_dim, rec.inputs.cols()));
                }
                if rec.targets.iter().any(|y| !y.is_finite()) {
                    return Err(invalid(format!("output {d} replica {rr}"), "non-finite target"));
                }
            }
        }
        Ok(())
    }

    pub fn output_count(&self) -> usize {
        self.outputs.len()
    }

    pub fn replica_count(&self) -> usize {
        self.outputs[0].replicas.len()
    }

    pub fn observation_count(&self) -> usize {
        self.outputs
            .iter()
            .flat_map(|o| &o.replicas)
            .map(ReplicaRecord::len)
            .sum()
    }

    pub fn output_inputs(&self, d: usize) -> Result<ReplicaInputs> {
        ReplicaInputs::new(
            self.outputs[d]
                .replicas
                .iter()
                .map(|r| {
                    if r.is_empty() {
                        Matrix::zeros(0, self.input_dim)
                    } else {
                        r.inputs.clone()
                    }
                })
                .collect(),
        )
    }

    pub fn output_targets(&self, d: usize) -> Vec<f64> {
        self.outputs[d]
            .replicas
            .iter()
            .flat_map(|r| r.targets.iter().copied())
            .collect()
    }

    /// Observations in the per-output regime.
    pub fn to_training_data(&self) -> Result<TrainingData> {
        let x = (0..self.output_count())
            .map(|d| self.output_inputs(d))
            .collect::<Result<Vec<_>>>()?;
        let y = (0..self.output_count()).map(|d| self.output_targets(d)).collect();
        TrainingData::per_output(x, y)
    }

    /// True when every output is observed at exactly the same inputs.
    pub fn has_shared_inputs(&self) -> bool {
        let first = &self.outputs[0];
        self.outputs.iter().all(|o| {
            o.replicas
                .iter()
                .zip(&first.replicas)
                .all(|(a, b)| a.inputs == b.inputs && !a.is_empty())
        })
    }

    /// Observations in the shared-input regime, when applicable.
    pub fn to_shared_training_data(&self) -> Result<TrainingData> {
        if !self.has_shared_inputs() {
            return Err(invalid("dataset", "outputs are not observed at common inputs"));
        }
        let x = self.output_inputs(0)?;
        let y: Vec<f64> = (0..self.output_count())
            .flat_map(|d| self.output_targets(d))
            .collect();
        TrainingData::shared(x, &y)
    }

    /// Rescales every output to zero mean and unit variance, recording the
    /// constants in the metadata.
    pub fn standardize(&mut self) {
        let mut constants = Vec::with_capacity(self.output_count());
        for o in self.outputs.iter_mut() {
            let ys: Vec<f64> = o.replicas.iter().flat_map(|r| r.targets.iter().copied()).collect();
            let n = ys.len() as f64;
            let mean = if ys.is_empty() { 0.0 } else { ys.iter().sum::<f64>() / n };
            let var = if ys.is_empty() {
                1.0
            } else {
                ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n
            };
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for r in o.replicas.iter_mut() {
                for y in r.targets.iter_mut() {
                    *y = (*y - mean) / scale;
                }
            }
            constants.push(Standardization { mean, scale });
        }
        self.metadata.standardization = Some(constants);
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSettings {
    pub outputs: usize,
    pub replicas: usize,
    pub points_per_replica: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub kg: StationaryKernelSpec,
    pub kf: StationaryKernelSpec,
    pub kh: StationaryKernelSpec,
    pub noise: f64,
    /// Use one input set for every output instead of one per output.
    pub shared_inputs: bool,
    /// Fixed inputs for every output and replica instead of random draws.
    pub input_grid: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            outputs: 50,
            replicas: 3,
            points_per_replica: 10,
            input_dim: 1,
            latent_dim: 2,
            kg: StationaryKernelSpec::matern32(0.1, vec![1.0]).expect("valid"),
            kf: StationaryKernelSpec::matern32(1.0, vec![1.0]).expect("valid"),
            kh: StationaryKernelSpec::rbf(1.0, vec![1.0, 1.0]).expect("valid"),
            noise: 0.02,
            shared_inputs: false,
            input_grid: None,
            seed: 0,
        }
    }
}

impl SyntheticSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("outputs", self.outputs),
            ("replicas", self.replicas),
            ("points_per_replica", self.points_per_replica),
            ("input_dim", self.input_dim),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(invalid(format!("synthetic.{name}"), "must be at least 1"));
            }
        }
        self.kg.validate("synthetic.kg")?;
        self.kf.validate("synthetic.kf")?;
        self.kh.validate("synthetic.kh")?;
        if self.kg.input_dim() != self.input_dim || self.kf.input_dim() != self.input_dim {
            return Err(invalid("synthetic.kf", "lengthscale count must equal input_dim"));
        }
        if self.kh.input_dim() != self.latent_dim {
            return Err(invalid("synthetic.kh", "lengthscale count must equal latent_dim"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid("synthetic.noise", "must be non-negative"));
        }
        if let Some(g) = &self.input_grid {
            if g.len() != self.points_per_replica * self.input_dim {
                return Err(invalid(
                    "synthetic.input_grid",
                    "needs points_per_replica × input_dim values",
                ));
            }
        }
        Ok(())
    }
}

fn draw_inputs(s: &SyntheticSettings, rng: &mut ChaCha8Rng) -> Matrix {
    if let Some(g) = &s.input_grid {
        return Matrix::from_raw(s.points_per_replica, s.input_dim, g.clone());
    }
    let mut rows: Vec<Vec<f64>> = (0..s.points_per_replica)
        .map(|_| (0..s.input_dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
    Matrix::from_rows(&rows).expect("non-empty")
}

/// Draws `h_d ~ N(0, I)`, inputs uniform on `[0, 1]` (one set per output,
/// reused by all its replicas), `f ~ N(0, K^H ⊗ K^X)` and adds Gaussian noise.
pub fn generate_synthetic(s: &SyntheticSettings) -> Result<HierarchicalDataset> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let (dn, r, n) = (s.outputs, s.replicas, s.points_per_replica);
    let h = Matrix::from_fn(dn, s.latent_dim, |_, _| StandardNormal.sample(&mut rng));
    let hier = HierarchicalKernelSpec::new(s.kg.clone(), s.kf.clone())?;
    let kh = latent_cov(&s.kh, &h, &h)?;
    let (inputs, f): (Vec<Matrix>, Vec<f64>) = if s.shared_inputs {
        let x = draw_inputs(s, &mut rng);
        let xr = ReplicaInputs::repeated(&x, r)?;
        let kx = hier_block_cov(&hier, &xr, &xr)?;
        let lh = cholesky_jitter(&kh, DEFAULT_BASE_JITTER)?.lower;
        let lx = cholesky_jitter(&kx, DEFAULT_BASE_JITTER)?.lower;
        let z: Vec<f64> = (0..dn * r * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        (vec![x; dn], kron_matvec(&lh, &lx, &z)?)
    } else {
        let xs: Vec<Matrix> = (0..dn).map(|_| draw_inputs(s, &mut rng)).collect();
        let blocks: Vec<ReplicaInputs> = xs
            .iter()
            .map(|x| ReplicaInputs::repeated(x, r))
            .collect::<Result<_>>()?;
        let m = r * n;
        let mut cov = Matrix::zeros(dn * m, dn * m);
        for d in 0..dn {
            for e in 0..=d {
                let b = hier_block_cov(&hier, &blocks[d], &blocks[e])?;
                for i in 0..m {
                    for j in 0..m {
                        let v = kh[(d, e)] * b[(i, j)];
                        cov[(d * m + i, e * m + j)] = v;
                        cov[(e * m + j, d * m + i)] = v;
                    }
                }
            }
        }
        let l = cholesky_jitter(&cov, DEFAULT_BASE_JITTER)?.lower;
        let z: Vec<f64> = (0..dn * m).map(|_| StandardNormal.sample(&mut rng)).collect();
        (xs, l.matvec(&z))
    };
    let sd = s.noise.sqrt();
    let outputs = (0..dn)
        .map(|d| OutputRecord {
            replicas: (0..r)
                .map(|rr| ReplicaRecord {
                    inputs: inputs[d].clone(),
                    targets: (0..n)
                        .map(|i| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            f[(d * r + rr) * n + i] + sd * e
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    HierarchicalDataset::new(
        outputs,
        s.input_dim,
        DatasetMetadata {
            output_names: (0..dn).map(|d| format!("output_{d}")).collect(),
            standardization: None,
            seed: Some(s.seed),
            generator: Some(s.clone()),
            latent: Some(h),
        },
    )
}

/// Writes the dataset in the documented CSV layout.
pub fn save_csv(ds: &HierarchicalDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header = vec!["output".to_string(), "replica".to_string()];
    header.extend((0..ds.input_dim).map(|k| format!("x_{k}")));
    header.push("y".into());
    w.write_record(&header).map_err(csv_io)?;
    for (d, o) in ds.outputs.iter().enumerate() {
        for (r, rec) in o.replicas.iter().enumerate() {
            for i in 0..rec.len() {
                let mut row = vec![d.to_string(), r.to_string()];
                row.extend(rec.inputs.row(i).iter().map(|v| v.to_string()));
                row.push(rec.targets[i].to_string());
                w.write_record(&row).map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Schema {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Reads a dataset in the documented CSV layout, standardising each output
/// when asked.
pub fn load_csv(path: &Path, standardize: bool) -> Result<HierarchicalDataset> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    let header = rd.headers().map_err(|e| schema_from(e, 1))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let v = cols.len().saturating_sub(3);
    let expected: Vec<String> = ["output".to_string(), "replica".to_string()]
        .into_iter()
        .chain((0..v).map(|k| format!("x_{k}")))
        .chain(std::iter::once("y".to_string()))
        .collect();
    if cols.len() < 4 || cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Schema {
            line: 1,
            message: format!("header must be {}", expected.join(",")),
        });
    }
    let mut rows: Vec<(usize, usize, Vec<f64>, f64)> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            schema_from(e, line)
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != cols.len() {
            return Err(Error::Schema {
                line,
                message: format!("expected {} fields, found {}", cols.len(), rec.len()),
            });
        }
        let index = |k: usize, name: &str| -> Result<usize> {
            rec[k].parse::<usize>().map_err(|_| Error::Schema {
                line,
                message: format!("{name} must be a non-negative integer, found {:?}", &rec[k]),
            })
        };
        let number = |k: usize| -> Result<f64> {
            match rec[k].parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Schema {
                    line,
                    message: format!("column {} must be a finite number, found {:?}", cols[k], &rec[k]),
                }),
            }
        };
        let d = index(0, "output")?;
        let r = index(1, "replica")?;
        let x = (0..v).map(|k| number(2 + k)).collect::<Result<Vec<_>>>()?;
        let y = number(2 + v)?;
        rows.push((d, r, x, y));
    }
    if rows.is_empty() {
        return Err(Error::Schema {
            line: 1,
            message: "no observations".into(),
        });
    }
    let dn = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let rn = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    let mut acc: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![vec![(Vec::new(), Vec::new()); rn]; dn];
    for (d, r, x, y) in rows {
        acc[d][r].0.extend(x);
        acc[d][r].1.push(y);
    }
    let outputs = acc
        .into_iter()
        .map(|reps| OutputRecord {
            replicas: reps
                .into_iter()
                .map(|(x, y)| ReplicaRecord {
                    inputs: Matrix::from_raw(y.len(), v, x),
                    targets: y,
                })
                .collect(),
        })
        .collect();
    let mut ds = HierarchicalDataset::new(outputs, v, DatasetMetadata::default())?;
    ds.metadata.output_names = (0..dn).map(|d| format!("output_{d}")).collect();
    if standardize {
        ds.standardize();
    }
    Ok(ds)
}

fn schema_from(e: csv::Error, line: usize) -> Error {
    Error::Schema {
        line,
        message: e.to_string(),
    }
}

pub fn save_metadata(meta: &DatasetMetadata, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_metadata(path: &Path) -> Result<DatasetMetadata> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitPlan {
    /// Each replica keeps `max(1, round(fraction · n))` points for training.
    RandomFraction { fraction: f64, seed: u64 },
    /// Whole `(output, replica)` blocks moved to the test set.
    MissingReplica { missing: Vec<(usize, usize)> },
}

impl SplitPlan {
    pub fn validate(&self, ds: &HierarchicalDataset) -> Result<()> {
        match self {
            SplitPlan::RandomFraction { fraction, .. } => {
                if !(*fraction > 0.0 && *fraction < 1.0) {
                    return Err(invalid("split.fraction", "must lie strictly between 0 and 1"));
                }
            }
            SplitPlan::MissingReplica { missing } => {
                for &(d, r) in missing {
                    if d >= ds.output_count() || r >= ds.replica_count() {
                        return Err(invalid("split.missing", format!("({d}, {r}) is out of range")));
                    }
                }
                for d in 0..ds.output_count() {
                    let kept = (0..ds.replica_count())
                        .filter(|r| !missing.contains(&(d, *r)) && !ds.outputs[d].replicas[*r].is_empty())
                        .count();
                    if kept == 0 {
                        return Err(invalid(
                            "split.missing",
                            format!("output {d} would have no observed replica"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One observed replica per output, drawn uniformly.
pub fn random_missing_replicas(ds: &HierarchicalDataset, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..ds.output_count())
        .filter_map(|d| {
            let observed: Vec<usize> = (0..ds.replica_count())
                .filter(|&r| !ds.outputs[d].replicas[r].is_empty())
                .collect();
            if observed.len() < 2 {
                return None;
            }
            Some((d, observed[rng.random_range(0..observed.len())]))
        })
        .collect()
}

fn subset(rec: &ReplicaRecord, idx: &[usize]) -> ReplicaRecord {
    ReplicaRecord {
        inputs: if idx.is_empty() {
            Matrix::zeros(0, rec.inputs.cols())
        } else {
            rec.inputs.select_rows(idx)
        },
        targets: idx.iter().map(|&i| rec.targets[i]).collect(),
    }
}

/// Disjoint train/test partition of every `(output, replica)` block.
pub fn split(ds: &HierarchicalDataset, plan: &SplitPlan) -> Result<(HierarchicalDataset, HierarchicalDataset)> {
    plan.validate(ds)?;
    let mut train = ds.clone();
    let mut test = ds.clone();
    match plan {
        SplitPlan::RandomFraction { fraction, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for (d, o) in ds.outputs.iter().enumerate() {
                for (r, rec) in o.replicas.iter().enumerate() {
                    let n = rec.len();
                    let n_train = if n == 0 {
                        0
                    } else {
                        ((fraction * n as f64).round() as usize).clamp(1, n)
                    };
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.shuffle(&mut rng);
                    let mut tr = idx[..n_train].to_vec();
                    let mut te = idx[n_train..].to_vec();
                    tr.sort_unstable();
                    te.sort_unstable();
                    train.outputs[d].replicas[r] = subset(rec, &tr);
                    test.outputs[d].replicas[r] = subset(rec, &te);
                }
            }
        }
        SplitPlan::MissingReplica { missing } => {
            for (d, o) in ds.outputs.iter().enumerate() {
                for (r, rec) in o.replicas.iter().enumerate() {
                    if missing.contains(&(d, r)) {
                        train.outputs[d].replicas[r] = ReplicaRecord::empty(ds.input_dim);
                    } else {
                        test.outputs[d].replicas[r] = ReplicaRecord::empty(ds.input_dim);
                    }
                    let _ = rec;
                }
            }
        }
    }
    Ok((train, test))
}
