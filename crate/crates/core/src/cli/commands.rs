//! Subcommand bodies. Each computes everything first and writes its files
//! only after the work succeeded, one atomic write per file.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use super::checkpoint::{Checkpoint, Provenance};
use super::config::{RunConfig, SpectrumWeights, Task, SINC};
use crate::daruan::{DaruanInit, DaruanParams, EncWeightInit};
use crate::data::{
    feynman_spec, gen_regression, gen_sinc, read_csv, read_idx, to_csv_string, Dataset, DatasetMeta, IdxData,
};
use crate::distill::{calibrate_domains, distill_network, EdgeFitReport};
use crate::error::{QkanError, Result};
use crate::fsio::write_atomic;
use crate::qkan::{make_hqkan, QkanNetwork};
use crate::rng::{stream, Purpose};
use crate::spectrum::{verify_spectrum, SpectrumReport};
use crate::train::{
    best_of_seeds, dataset_rmse, predict, train, trace_csv, EpochRecord, Objective, OptimizerConfig, TrainConfig,
};

/// Environment variable pointing at a directory of MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "QKAN_MNIST_DIR";
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
/// Largest allowed output change when extending a checkpoint.
pub const EXTEND_TOLERANCE: f64 = 1e-12;
const PROBE_COUNT: usize = 256;

/// Files to write, collected so nothing is written before the work is done.
#[derive(Default)]
struct Outputs(Vec<(PathBuf, Vec<u8>)>);

impl Outputs {
    fn add(&mut self, path: PathBuf, bytes: impl Into<Vec<u8>>) {
        self.0.push((path, bytes.into()));
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.0.len());
        for (path, bytes) in self.0 {
            write_atomic(&path, &bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report is always serializable") + "\n"
}

fn required<'a>(value: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| QkanError::config(field, "is required for this command"))
}

/// Training and test splits from `config.dataset`, or freshly generated.
pub fn load_or_generate(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    if let Some(dir) = &config.dataset {
        let train = read_csv(&dir.join("train.csv"))?;
        let test = read_csv(&dir.join("test.csv"))?;
        return Ok((train, test));
    }
    if config.equation == SINC {
        gen_sinc(config.n_train, config.n_test, config.noise_frac, config.data_seed)
    } else {
        let spec = feynman_spec(&config.equation)?;
        gen_regression(spec, config.n_train, config.n_test, config.noise_frac, config.data_seed)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenDataReport {
    pub files: Vec<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<GenDataReport> {
    config.validate(Task::GenData)?;
    if config.dataset.is_some() {
        return Err(QkanError::config("dataset", "gen-data generates data and takes no input dataset"));
    }
    let (train, test) = load_or_generate(config)?;
    let out = config.resolve_out_dir();
    let mut files = Outputs::default();
    files.add(out.join("train.csv"), to_csv_string(&train)?);
    files.add(out.join("test.csv"), to_csv_string(&test)?);
    files.add(out.join("dataset.json"), train.meta_json() + "\n");
    Ok(GenDataReport {
        files: files.commit()?,
        n_train: train.len(),
        n_test: test.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_test_rmse: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub equation: String,
    pub shape: Vec<usize>,
    pub r: usize,
    pub param_count: usize,
    pub config_hash: String,
    pub best_seed: u64,
    pub best_test_rmse: f64,
    pub seeds: Vec<SeedSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<PathBuf>,
}

/// One run per seed; writes per-seed metrics and checkpoints, the overall
/// best checkpoint as `checkpoint.json`, and `summary.json`.
pub fn cmd_train(config: &RunConfig) -> Result<TrainReport> {
    config.validate(Task::Regression)?;
    let (train_set, test_set) = load_or_generate(config)?;
    let shape = config.resolved_shape();
    let hash = config.hash();

    let (best, outcomes) = best_of_seeds(&config.seeds, Objective::Mse, |seed| {
        let net = QkanNetwork::new(&shape, config.r, &config.init, &mut stream(seed, Purpose::Init))?;
        let tc = TrainConfig {
            optimizer: config.optimizer.clone(),
            epochs: config.epochs,
            objective: Objective::Mse,
            seed,
        };
        train(&net, &train_set, &test_set, &tc)
    })?;

    let out = config.resolve_out_dir();
    let mut files = Outputs::default();
    let mut seeds = Vec::with_capacity(outcomes.len());
    let checkpoint = |i: usize| {
        let o = &outcomes[i];
        Checkpoint::from_network(
            &o.best,
            Provenance {
                seed: config.seeds[i],
                config_hash: hash.clone(),
                epoch: o.best_epoch,
                best_test_rmse: Some(o.best_test_metric),
            },
        )
    };
    for (i, o) in outcomes.iter().enumerate() {
        let seed = config.seeds[i];
        files.add(out.join(format!("metrics_seed{seed}.csv")), trace_csv(&o.trace));
        files.add(out.join(format!("checkpoint_seed{seed}.json")), checkpoint(i).to_json());
        seeds.push(SeedSummary {
            seed,
            best_epoch: o.best_epoch,
            best_test_rmse: o.best_test_metric,
            epochs_run: o.trace.len(),
        });
    }
    files.add(out.join("checkpoint.json"), checkpoint(best).to_json());
    let mut report = TrainReport {
        equation: config.equation.clone(),
        shape: shape.clone(),
        r: config.r,
        param_count: outcomes[best].best.param_count(),
        config_hash: hash.clone(),
        best_seed: config.seeds[best],
        best_test_rmse: outcomes[best].best_test_metric,
        seeds,
        files: Vec::new(),
    };
    files.add(out.join("summary.json"), json(&report));
    report.files = files.commit()?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub samples: usize,
    pub rmse: f64,
}

pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport> {
    config.validate(Task::Eval)?;
    let ck_path = required(&config.checkpoint, "checkpoint")?;
    let data_path = required(&config.data_file, "data_file")?;
    let net = Checkpoint::load(ck_path)?.network()?;
    let data = read_csv(data_path)?;
    check_dataset_fits(&net, &data)?;
    Ok(EvalReport {
        checkpoint: ck_path.to_path_buf(),
        dataset: data_path.to_path_buf(),
        samples: data.len(),
        rmse: dataset_rmse(&net, &data)?,
    })
}

fn check_dataset_fits(net: &QkanNetwork, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(QkanError::InvalidArgument("dataset has no rows".into()));
    }
    for (want, got, context) in [
        (net.input_dim(), data.n_features(), "dataset feature count"),
        (net.output_dim(), data.n_targets(), "dataset target count"),
    ] {
        if want != got {
            return Err(QkanError::DimensionMismatch {
                expected: want,
                actual: got,
                context,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumOutcome {
    pub verified: bool,
    pub tolerance: f64,
    pub residual_l2: f64,
    pub max_frequency: f64,
    pub nonzero_count: usize,
    pub file: PathBuf,
    #[serde(skip)]
    pub report: SpectrumReport,
}

/// Random circuit from the config (or an edge of a checkpoint), checked
/// against its predicted frequency set. The report is written either way;
/// a failed check is returned as a numerical error after writing.
pub fn cmd_spectrum(config: &RunConfig) -> Result<SpectrumOutcome> {
    config.validate(Task::Spectrum)?;
    let params = match &config.checkpoint {
        Some(path) => {
            let net = Checkpoint::load(path)?.network()?;
            let [l, o, i] = config.spectrum.edge;
            let layer = net
                .layers
                .get(l)
                .ok_or_else(|| QkanError::config("spectrum.edge", format!("no layer {l}")))?;
            if o >= layer.n_out || i >= layer.n_in {
                return Err(QkanError::config("spectrum.edge", format!("no edge ({o}, {i}) in layer {l}")));
            }
            layer.edge(o, i).clone()
        }
        None => random_circuit(config.r, config.spectrum.weights, config.seeds[0])?,
    };
    let (verified, report) = verify_spectrum(&params, config.spectrum.tolerance)?;
    let file = config.resolve_out_dir().join("spectrum.json");
    write_atomic(&file, (report.to_json() + "\n").as_bytes())?;
    Ok(SpectrumOutcome {
        verified,
        tolerance: config.spectrum.tolerance,
        residual_l2: report.residual_l2,
        max_frequency: report.max_frequency,
        nonzero_count: report.nonzero_count,
        file,
        report,
    })
}

/// Circuit with uniformly random angles and encoding biases in `[-pi, pi)`.
pub fn random_circuit(r: usize, weights: SpectrumWeights, seed: u64) -> Result<DaruanParams> {
    let init = DaruanInit {
        angle_range: PI,
        enc_w: match weights {
            SpectrumWeights::Unit => EncWeightInit::Constant(1.0),
            SpectrumWeights::Geometric => EncWeightInit::Geometric,
        },
        w_base: 0.0,
        ..Default::default()
    };
    let mut rng = stream(seed, Purpose::Probe);
    let mut p = DaruanParams::init(r, &init, &mut rng)?;
    for b in &mut p.enc_b {
        *b = rng.random_range(-PI..PI);
    }
    Ok(p)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtendReport {
    pub from_r: Vec<usize>,
    pub to_r: usize,
    pub probes: usize,
    pub max_deviation: f64,
    pub file: PathBuf,
}

/// Probe inputs uniform on `[-1, 1]^d`, with an even grid when `d = 1`.
fn probe_inputs(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    if dim == 1 {
        return (0..PROBE_COUNT)
            .map(|k| vec![-1.0 + 2.0 * k as f64 / (PROBE_COUNT - 1) as f64])
            .collect();
    }
    let mut rng = stream(seed, Purpose::Probe);
    (0..PROBE_COUNT)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn cmd_extend(config: &RunConfig) -> Result<ExtendReport> {
    config.validate(Task::Extend)?;
    let ck_path = required(&config.checkpoint, "checkpoint")?;
    let new_r = config
        .new_r
        .ok_or_else(|| QkanError::config("new_r", "is required for this command"))?;
    let ck = Checkpoint::load(ck_path)?;
    let net = ck.network()?;
    let extended = net.extend(new_r).map_err(|e| QkanError::config("new_r", e.to_string()))?;

    let mut max_dev: f64 = 0.0;
    let probes = probe_inputs(net.input_dim(), ck.provenance.seed);
    let before = predict(&net, &probes)?;
    let after = predict(&extended, &probes)?;
    for (a, b) in before.iter().flatten().zip(after.iter().flatten()) {
        max_dev = max_dev.max((a - b).abs());
    }
    if !(max_dev < EXTEND_TOLERANCE) {
        return Err(QkanError::Numerical(format!(
            "extension changed the output by {max_dev:.3e} on the probe grid"
        )));
    }
    let mut out = Checkpoint::from_network(&extended, ck.provenance.clone());
    out.optimizer = None;
    let file = config.resolve_out_dir().join("checkpoint.json");
    out.save(&file)?;
    Ok(ExtendReport {
        from_r: ck.topology.r.clone(),
        to_r: new_r,
        probes: probes.len(),
        max_deviation: max_dev,
        file,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DistillReport {
    pub grid: usize,
    pub degree: usize,
    pub samples: usize,
    /// RMSE between spline network and source network on the dataset inputs.
    pub rmse_vs_source: f64,
    /// RMSE of the spline network against the dataset targets.
    pub rmse_vs_targets: f64,
    pub clamped_evaluations: usize,
    pub edges: Vec<EdgeFitReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<PathBuf>,
}

pub fn cmd_distill(config: &RunConfig) -> Result<DistillReport> {
    config.validate(Task::Distill)?;
    let net = Checkpoint::load(required(&config.checkpoint, "checkpoint")?)?.network()?;
    let data = read_csv(required(&config.data_file, "data_file")?)?;
    check_dataset_fits(&net, &data)?;
    let domains = calibrate_domains(&net, data.inputs.iter().map(Vec::as_slice))?;
    let (spline, edges) = distill_network(&net, &domains, &config.distill)?;

    let source = predict(&net, &data.inputs)?;
    let mut sq_src = 0.0;
    let mut sq_tgt = 0.0;
    let mut clamped = 0;
    let mut count = 0usize;
    for ((x, s), t) in data.inputs.iter().zip(&source).zip(&data.targets) {
        let (y, c) = spline.forward_counting_clamps(x)?;
        clamped += c;
        for k in 0..y.len() {
            sq_src += (y[k] - s[k]).powi(2);
            sq_tgt += (y[k] - t[k]).powi(2);
            count += 1;
        }
    }
    let mut report = DistillReport {
        grid: config.distill.grid,
        degree: config.distill.degree,
        samples: data.len(),
        rmse_vs_source: (sq_src / count as f64).sqrt(),
        rmse_vs_targets: (sq_tgt / count as f64).sqrt(),
        clamped_evaluations: clamped,
        edges,
        files: Vec::new(),
    };
    let out = config.resolve_out_dir();
    let mut files = Outputs::default();
    files.add(out.join("spline_network.json"), spline.to_json() + "\n");
    files.add(out.join("distill_report.json"), json(&report));
    report.files = files.commit()?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct MnistReport {
    pub digits: [u8; 2],
    pub n_train: usize,
    pub n_test: usize,
    pub param_count: usize,
    pub best_epoch: usize,
    pub test_accuracy: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<PathBuf>,
}

/// Directory holding the IDX files: config, then the environment.
pub fn mnist_dir(config: &RunConfig) -> Option<PathBuf> {
    config
        .mnist
        .dir
        .clone()
        .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
}

fn two_class_subset(images: IdxData, labels: IdxData, digits: [u8; 2], n: usize, path: &Path) -> Result<Dataset> {
    let (IdxData::Images { pixels, .. }, IdxData::Labels(labels)) = (images, labels) else {
        return Err(QkanError::Parse {
            path: path.to_path_buf(),
            message: "expected an image file and a label file".into(),
        });
    };
    if pixels.len() != labels.len() {
        return Err(QkanError::DimensionMismatch {
            expected: pixels.len(),
            actual: labels.len(),
            context: "label count",
        });
    }
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for (x, &label) in pixels.into_iter().zip(&labels) {
        if inputs.len() == n {
            break;
        }
        if let Some(k) = digits.iter().position(|&d| d == label) {
            inputs.push(x);
            let mut onehot = vec![0.0; 2];
            onehot[k] = 1.0;
            targets.push(onehot);
        }
    }
    if inputs.len() < n {
        return Err(QkanError::Parse {
            path: path.to_path_buf(),
            message: format!("only {} samples of digits {digits:?}, need {n}", inputs.len()),
        });
    }
    Dataset::new(inputs, targets, DatasetMeta::default())
}

/// Hybrid network on a two-digit MNIST subset trained with Adam on softmax
/// cross-entropy.
pub fn cmd_mnist_demo(config: &RunConfig) -> Result<MnistReport> {
    config.validate(Task::MnistDemo)?;
    let m = &config.mnist;
    let dir = mnist_dir(config).ok_or_else(|| {
        QkanError::config("mnist.dir", format!("not set and {MNIST_DIR_ENV} is not defined"))
    })?;
    let read = |name: &str| read_idx(&dir.join(name));
    let train_set = two_class_subset(read(MNIST_FILES[0])?, read(MNIST_FILES[1])?, m.digits, m.n_train, &dir)?;
    let test_set = two_class_subset(read(MNIST_FILES[2])?, read(MNIST_FILES[3])?, m.digits, m.n_test, &dir)?;

    let seed = config.seeds[0];
    let net = make_hqkan(
        train_set.n_features(),
        2,
        config.r,
        &m.hidden,
        &config.init,
        &mut stream(seed, Purpose::Init),
    )?;
    let tc = TrainConfig {
        optimizer: OptimizerConfig::Adam {
            lr: m.lr,
            batch_size: Some(m.batch_size),
        },
        epochs: m.epochs,
        objective: Objective::SoftmaxCrossEntropy,
        seed,
    };
    let outcome = train(&net, &train_set, &test_set, &tc)?;

    let out = config.resolve_out_dir();
    let mut files = Outputs::default();
    files.add(out.join("mnist_metrics.csv"), classification_csv(&outcome.trace));
    let ck = Checkpoint::from_network(
        &outcome.best,
        Provenance {
            seed,
            config_hash: config.hash(),
            epoch: outcome.best_epoch,
            best_test_rmse: None,
        },
    );
    files.add(out.join("checkpoint.json"), ck.to_json());
    let mut report = MnistReport {
        digits: m.digits,
        n_train: train_set.len(),
        n_test: test_set.len(),
        param_count: net.param_count(),
        best_epoch: outcome.best_epoch,
        test_accuracy: outcome.best_test_metric,
        files: Vec::new(),
    };
    files.add(out.join("mnist_report.json"), json(&report));
    report.files = files.commit()?;
    Ok(report)
}

fn classification_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,test_accuracy,elapsed_ms\n");
    for r in trace {
        out.push_str(&format!("{},{:?},{:?},{}\n", r.epoch, r.train_metric, r.test_metric, r.elapsed_ms));
    }
    out
}
