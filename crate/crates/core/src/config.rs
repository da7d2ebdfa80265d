//! Experiment configuration files and the end-to-end runner.
//!
//! A config is flat `key = value` text with `#` comments. Unknown keys are
//! rejected. Every error names the offending key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{gen_blobs, gen_ood_cloud, load_embedding_csv, load_idx, split_and_normalize, Dataset};
use crate::methods::{build_submodel_chain, MethodKind, MethodSpec, TrainConfig};
use crate::nn::Architecture;
use crate::parallel::{with_jobs, Exec};
use crate::principles::{
    assemble, build_data_ladder, compliance, emit_heatmap_csv, format_value, geometric_fractions,
    read_heatmap_csv, run_grid_cells, ComplianceReport, GridData, MethodGrids, COMPLIANCE_TOLERANCE, METRICS,
};
use crate::seed;
use crate::{Error, Result};

pub const SEED_ENV: &str = "EPIBENCH_SEED";

const KEYS: &[&str] = &[
    "master_seed",
    "output.dir",
    "methods",
    "dataset.source",
    "dataset.n_classes",
    "dataset.dim",
    "dataset.train_per_class",
    "dataset.test_per_class",
    "dataset.spread",
    "dataset.train_images",
    "dataset.train_labels",
    "dataset.test_images",
    "dataset.test_labels",
    "dataset.train_csv",
    "dataset.test_csv",
    "dataset.max_train",
    "dataset.max_test",
    "ood.source",
    "ood.n",
    "ood.scale",
    "ood.images",
    "ood.labels",
    "ood.csv",
    "ood.max",
    "split.validation_fraction",
    "ladder.fractions",
    "ladder.smallest",
    "ladder.rungs",
    "chain.base_widths",
    "chain.steps",
    "optimizer.lr",
    "optimizer.momentum",
    "optimizer.weight_decay",
    "optimizer.epochs",
    "optimizer.batch_size",
    "optimizer.scheduler_patience",
    "ensemble.members",
    "conflictual.k",
    "conflictual.lambda",
    "label_smoothing.epsilon",
    "confidence_penalty.beta",
    "edl.lambda",
    "mc_dropout.p",
    "mc_dropout.passes",
    "ensemble.dropout",
    "edl.dropout",
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        n_classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    EmbeddingCsv {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OodSource {
    /// Isotropic Gaussian cloud around the origin of the raw feature space.
    Cloud { n: usize, scale: f64 },
    Idx { images: PathBuf, labels: PathBuf },
    EmbeddingCsv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DataSource,
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
    pub ood: OodSource,
    pub max_ood: Option<usize>,
    pub validation_fraction: f64,
    pub fractions: Vec<f64>,
    pub base_widths: Vec<usize>,
    pub chain_steps: usize,
    /// Base dropout of the chain; each method applies its own rate on top.
    pub dropout_p: f64,
    pub methods: Vec<MethodSpec>,
}

struct Raw {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Raw {
    fn str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.str(key).ok_or_else(|| Error::config(key, "missing required key"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        self.str(key)
            .map(|v| v.parse().map_err(|_| Error::config(key, format!("expected {what}, found `{v}`"))))
            .transpose()
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.parse::<f64>(key, "a number")?.unwrap_or(default);
        if !v.is_finite() {
            return Err(Error::config(key, "must be finite"));
        }
        Ok(v)
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse(key, "a non-negative integer")?.unwrap_or(default))
    }

    fn positive(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.usize_or(key, default)?;
        if v == 0 {
            return Err(Error::config(key, "must be >= 1"));
        }
        Ok(v)
    }

    fn list<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<Vec<T>>> {
        self.str(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::config(key, format!("expected a list of {what}, found `{}`", s.trim())))
                    })
                    .collect()
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(self.base.join(self.required(key)?))
    }
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::config(k, format!("unknown key (line {})", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(k, format!("duplicate key (line {})", n + 1)));
        }
    }
    Ok(map)
}

/// Parse config text. Relative paths resolve against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let raw = Raw {
        map: parse_pairs(text)?,
        base: base.to_path_buf(),
    };
    let master_seed = raw.parse("master_seed", "an unsigned 64-bit integer")?.unwrap_or(0);
    let output_dir = raw.base.join(raw.str("output.dir").unwrap_or("epibench-out"));

    let dataset = match raw.required("dataset.source")? {
        "synthetic" => {
            let n_classes = raw.usize_or("dataset.n_classes", 3)?;
            if n_classes < 2 {
                return Err(Error::config("dataset.n_classes", "must be >= 2"));
            }
            let dim = raw.usize_or("dataset.dim", 16)?;
            if dim < 2 {
                return Err(Error::config("dataset.dim", "must be >= 2"));
            }
            let spread = raw.f64_or("dataset.spread", 2.0)?;
            if spread < 0.0 {
                return Err(Error::config("dataset.spread", "must be non-negative"));
            }
            DataSource::Synthetic {
                n_classes,
                dim,
                train_per_class: raw.positive("dataset.train_per_class", 834)?,
                test_per_class: raw.positive("dataset.test_per_class", 300)?,
                spread,
            }
        }
        "idx" => DataSource::Idx {
            train_images: raw.path("dataset.train_images")?,
            train_labels: raw.path("dataset.train_labels")?,
            test_images: raw.path("dataset.test_images")?,
            test_labels: raw.path("dataset.test_labels")?,
        },
        "embedding_csv" => DataSource::EmbeddingCsv {
            train: raw.path("dataset.train_csv")?,
            test: raw.path("dataset.test_csv")?,
        },
        other => {
            return Err(Error::config(
                "dataset.source",
                format!("expected synthetic, idx or embedding_csv, found `{other}`"),
            ))
        }
    };

    let ood = match raw.str("ood.source").unwrap_or("cloud") {
        "cloud" => {
            let scale = raw.f64_or("ood.scale", 4.0)?;
            if scale <= 0.0 {
                return Err(Error::config("ood.scale", "must be positive"));
            }
            OodSource::Cloud {
                n: raw.positive("ood.n", 600)?,
                scale,
            }
        }
        "idx" => OodSource::Idx {
            images: raw.path("ood.images")?,
            labels: raw.path("ood.labels")?,
        },
        "embedding_csv" => OodSource::EmbeddingCsv {
            path: raw.path("ood.csv")?,
        },
        other => {
            return Err(Error::config(
                "ood.source",
                format!("expected cloud, idx or embedding_csv, found `{other}`"),
            ))
        }
    };

    let validation_fraction = raw.f64_or("split.validation_fraction", 0.2)?;
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::config("split.validation_fraction", "must lie in [0, 1)"));
    }

    let fractions = match raw.list::<f64>("ladder.fractions", "numbers")? {
        Some(f) => {
            if raw.str("ladder.smallest").is_some() || raw.str("ladder.rungs").is_some() {
                return Err(Error::config(
                    "ladder.fractions",
                    "cannot be combined with ladder.smallest / ladder.rungs",
                ));
            }
            if f.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) || f.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config("ladder.fractions", "must be strictly ascending in (0, 1]"));
            }
            f
        }
        None => {
            let smallest = raw.f64_or("ladder.smallest", 0.1)?;
            let rungs = raw.positive("ladder.rungs", 4)?;
            geometric_fractions(smallest, rungs).map_err(|e| Error::config("ladder.smallest", e.to_string()))?
        }
    };

    let base_widths = raw.list::<usize>("chain.base_widths", "integers")?.unwrap_or(vec![16, 8]);
    if base_widths.is_empty() || base_widths.contains(&0) {
        return Err(Error::config("chain.base_widths", "widths must be >= 1"));
    }
    let chain_steps = raw.positive("chain.steps", 3)?;

    let rate = |key: &str| -> Result<f64> {
        let p = raw.f64_or(key, 0.3)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(key, "must lie in [0, 1)"));
        }
        Ok(p)
    };
    let dropout_p = rate("mc_dropout.p")?;
    let ensemble_dropout = rate("ensemble.dropout")?;
    let edl_dropout = rate("edl.dropout")?;

    let train = TrainConfig {
        learning_rate: raw.f64_or("optimizer.lr", 0.01)?,
        momentum: raw.f64_or("optimizer.momentum", 0.95)?,
        weight_decay: raw.f64_or("optimizer.weight_decay", 1e-4)?,
        epochs: raw.positive("optimizer.epochs", 100)?,
        batch_size: raw.positive("optimizer.batch_size", 128)?,
        scheduler_patience: raw.positive("optimizer.scheduler_patience", 25)?,
    };
    if train.learning_rate <= 0.0 {
        return Err(Error::config("optimizer.lr", "must be positive"));
    }
    if !(0.0..1.0).contains(&train.momentum) {
        return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
    }
    if train.weight_decay < 0.0 {
        return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
    }

    let n_members = raw.usize_or("ensemble.members", 10)?;
    if n_members < 2 {
        return Err(Error::config("ensemble.members", "must be >= 2"));
    }
    let k_order = raw.positive("conflictual.k", 1)?;
    let n_mc_passes = raw.usize_or("mc_dropout.passes", 20)?;
    if n_mc_passes < 2 {
        return Err(Error::config("mc_dropout.passes", "must be >= 2"));
    }
    let coefficient = |key: &str, default: f64, upper: Option<f64>| -> Result<f64> {
        let v = raw.f64_or(key, default)?;
        if v < 0.0 || upper.is_some_and(|u| v >= u) {
            return Err(Error::config(key, "out of range"));
        }
        Ok(v)
    };
    let lambda_conflict = coefficient("conflictual.lambda", 0.05, None)?;
    let epsilon_ls = coefficient("label_smoothing.epsilon", 0.1, Some(1.0))?;
    let beta_cp = coefficient("confidence_penalty.beta", 0.1, None)?;
    let lambda_edl = coefficient("edl.lambda", 0.01, None)?;

    let names = raw.required("methods")?;
    let mut methods = Vec::new();
    for name in names.split(',').map(str::trim) {
        let kind = MethodKind::parse(name).ok_or_else(|| Error::config("methods", format!("unknown method `{name}`")))?;
        if methods.iter().any(|m: &MethodSpec| m.kind == kind) {
            return Err(Error::config("methods", format!("method `{name}` listed twice")));
        }
        let mut spec = MethodSpec::new(kind);
        spec.n_members = n_members;
        spec.k_order = k_order;
        spec.n_mc_passes = n_mc_passes;
        spec.loss.lambda_conflict = lambda_conflict;
        spec.loss.epsilon_ls = epsilon_ls;
        spec.loss.beta_cp = beta_cp;
        spec.loss.lambda_edl = lambda_edl;
        spec.train = train.clone();
        spec.dropout_p = Some(match kind {
            MethodKind::DeepEnsemble | MethodKind::ConflictualDe => ensemble_dropout,
            MethodKind::Edl => edl_dropout,
            _ => dropout_p,
        });
        methods.push(spec);
    }

    let opt = |key: &str| -> Result<Option<usize>> { raw.parse(key, "a non-negative integer") };
    Ok(ExperimentConfig {
        master_seed,
        output_dir,
        dataset,
        max_train: opt("dataset.max_train")?,
        max_test: opt("dataset.max_test")?,
        ood,
        max_ood: opt("ood.max")?,
        validation_fraction,
        fractions,
        base_widths,
        chain_steps,
        dropout_p,
        methods,
    })
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}

/// Apply the `EPIBENCH_SEED` override when set.
pub fn apply_seed_env(cfg: &mut ExperimentConfig) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.master_seed = v
            .trim()
            .parse()
            .map_err(|_| Error::config(SEED_ENV, format!("expected an unsigned integer, found `{v}`")))?;
    }
    Ok(())
}

impl ExperimentConfig {
    /// Every setting that influences results, one per line. The output
    /// directory is left out.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "master_seed = {}", self.master_seed);
        let _ = writeln!(s, "dataset = {:?}", self.dataset);
        let _ = writeln!(s, "max_train = {:?}", self.max_train);
        let _ = writeln!(s, "max_test = {:?}", self.max_test);
        let _ = writeln!(s, "ood = {:?}", self.ood);
        let _ = writeln!(s, "max_ood = {:?}", self.max_ood);
        let _ = writeln!(s, "validation_fraction = {:?}", self.validation_fraction);
        let _ = writeln!(s, "fractions = {:?}", self.fractions);
        let _ = writeln!(s, "base_widths = {:?}", self.base_widths);
        let _ = writeln!(s, "chain_steps = {}", self.chain_steps);
        let _ = writeln!(s, "dropout_p = {:?}", self.dropout_p);
        for m in &self.methods {
            let _ = writeln!(s, "method = {m:?}");
        }
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Datasets of a run after splitting and normalization.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
}

impl PreparedData {
    pub fn grid(&self) -> GridData<'_> {
        GridData {
            train: &self.train,
            validation: &self.validation,
            test: &self.test,
            ood: &self.ood,
        }
    }
}

fn cap(ds: Dataset, max: Option<usize>) -> Dataset {
    match max {
        Some(n) if n < ds.len() => ds.truncated(n),
        _ => ds,
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let s = cfg.master_seed;
    let (train_full, test) = match &cfg.dataset {
        DataSource::Synthetic {
            n_classes,
            dim,
            train_per_class,
            test_per_class,
            spread,
        } => (
            gen_blobs(*n_classes, *dim, *train_per_class, *spread, seed::derive_tag(s, "train-data"))?,
            gen_blobs(*n_classes, *dim, *test_per_class, *spread, seed::derive_tag(s, "test-data"))?,
        ),
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
        DataSource::EmbeddingCsv { train, test } => (load_embedding_csv(train, None)?, load_embedding_csv(test, None)?),
    };
    let train_full = cap(train_full, cfg.max_train);
    let mut test = cap(test, cfg.max_test);
    let c = train_full.n_classes.max(test.n_classes);
    let ood = match &cfg.ood {
        OodSource::Cloud { n, scale } => gen_ood_cloud(train_full.dim, *n, *scale, c, seed::derive_tag(s, "ood-data"))?,
        OodSource::Idx { images, labels } => load_idx(images, labels)?,
        OodSource::EmbeddingCsv { path } => load_embedding_csv(path, None)?,
    };
    let mut ood = cap(ood, cfg.max_ood);
    if test.dim != train_full.dim || ood.dim != train_full.dim {
        return Err(Error::input(format!(
            "feature dimensions differ: train {}, test {}, ood {}",
            train_full.dim, test.dim, ood.dim
        )));
    }
    let mut train_full = train_full;
    train_full.n_classes = c;
    test.n_classes = c;
    ood.n_classes = ood.n_classes.max(c);
    let (train, validation, norm) = split_and_normalize(&train_full, cfg.validation_fraction, seed::derive_tag(s, "split"))?;
    Ok(PreparedData {
        test: norm.apply(&test)?,
        ood: norm.apply(&ood)?,
        train,
        validation,
    })
}

pub fn chain(cfg: &ExperimentConfig, input_dim: usize, n_classes: usize) -> Result<Vec<Architecture>> {
    let base = Architecture::new(input_dim, cfg.base_widths.clone(), n_classes, cfg.dropout_p)?;
    build_submodel_chain(&base, cfg.chain_steps)
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub grids: Vec<MethodGrids>,
    pub compliance: Vec<(String, ComplianceReport)>,
    pub failed_cells: usize,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_value)
}

/// Write `compliance.csv` and `summary.csv` for the given grids.
pub fn write_aggregates(dir: &Path, grids: &[MethodGrids]) -> Result<Vec<(String, ComplianceReport)>> {
    let mut comp = String::from("method,first_pct,second_pct\n");
    let mut summary = String::from("method");
    for m in METRICS {
        summary.push(',');
        summary.push_str(m);
    }
    summary.push('\n');
    let mut reports = Vec::new();
    for g in grids {
        let mi = g
            .metric("mean_mi")
            .ok_or_else(|| Error::input(format!("method {} has no mean_mi heatmap", g.method)))?;
        let rep = compliance(mi, COMPLIANCE_TOLERANCE)?;
        let _ = writeln!(comp, "{},{},{}", g.method, na(rep.first_principle), na(rep.second_principle));
        summary.push_str(&g.method);
        for m in METRICS {
            summary.push(',');
            summary.push_str(&g.metric(m).map_or_else(|| "NA".to_string(), |h| format_value(h.mean())));
        }
        summary.push('\n');
        reports.push((g.method.clone(), rep));
    }
    write(&dir.join("compliance.csv"), &comp)?;
    write(&dir.join("summary.csv"), &summary)?;
    Ok(reports)
}

/// Run the whole grid with at most `jobs` concurrent tasks and populate the
/// output directory.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<RunReport> {
    let data = prepare_data(cfg)?;
    let c = data.train.n_classes;
    for m in &cfg.methods {
        m.validate(c).map_err(|e| Error::config("methods", format!("{}: {e}", m.name())))?;
    }
    let chain = chain(cfg, data.train.dim, c)?;
    let ladder = build_data_ladder(&data.train, &cfg.fractions, seed::derive_tag(cfg.master_seed, "ladder"))?;

    let cells = with_jobs(jobs, |exec: Exec| {
        run_grid_cells(&cfg.methods, &ladder, &chain, data.grid(), cfg.master_seed, exec)
    });
    let grids = assemble(&cfg.methods, &ladder, &chain, &cells)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for g in &grids {
        let dir = out.join(&g.method);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for h in &g.heatmaps {
            emit_heatmap_csv(h, &dir.join(format!("{}.csv", h.metric)))?;
        }
    }
    // Aggregate what was written, so `report` on this directory reproduces
    // the same files.
    let mut written: Vec<MethodGrids> = grids
        .iter()
        .map(|g| MethodGrids {
            method: g.method.clone(),
            heatmaps: g
                .heatmaps
                .iter()
                .map(|h| {
                    let mut h = h.clone();
                    h.values.iter_mut().for_each(|v| *v = format_value(*v).parse().unwrap_or(*v));
                    h
                })
                .collect(),
        })
        .collect();
    written.sort_by_key(|g| method_order(&g.method));
    let compliance = write_aggregates(out, &written)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "config_hash = {}", cfg.hash());
    let _ = writeln!(manifest, "master_seed = {}", cfg.master_seed);
    let _ = writeln!(manifest, "methods = {}", cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","));
    let _ = writeln!(manifest, "rung_sizes = {:?}", ladder.sizes());
    let _ = writeln!(manifest, "architectures = {}", chain.iter().map(|a| a.width_label()).collect::<Vec<_>>().join(","));
    let _ = writeln!(manifest, "jobs = {jobs}");
    let _ = writeln!(manifest, "\n[cells]\nmethod,rung,arch,seed,seconds,status");
    let mut failed = 0;
    for cell in &cells {
        let status = match &cell.result {
            Ok(_) => "ok".to_string(),
            Err(e) => {
                failed += 1;
                format!("failed: {}", e.to_string().replace(['\n', ','], " "))
            }
        };
        let _ = writeln!(
            manifest,
            "{},{},{},{},{:.3},{}",
            cfg.methods[cell.method].name(),
            cell.rung,
            cell.arch,
            cell.seed,
            cell.seconds,
            status
        );
    }
    write(&out.join("manifest.txt"), &manifest)?;
    write(&out.join("config.canonical.txt"), &cfg.canonical())?;

    Ok(RunReport {
        output_dir: out.clone(),
        grids,
        compliance,
        failed_cells: failed,
    })
}

/// Aggregate files list methods in [`MethodKind::ALL`] order.
fn method_order(name: &str) -> (usize, String) {
    let pos = MethodKind::ALL.iter().position(|k| k.name() == name);
    (pos.unwrap_or(usize::MAX), name.to_string())
}

/// Re-read the heatmaps of an existing run and rewrite `compliance.csv` and
/// `summary.csv`. Methods are the subdirectories holding `mean_mi.csv`.
pub fn report(dir: &Path) -> Result<Vec<(String, ComplianceReport)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("mean_mi.csv").is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort_by_key(|n| method_order(n));
    if names.is_empty() {
        return Err(Error::input(format!("no method heatmaps under {}", dir.display())));
    }
    let mut grids = Vec::new();
    for name in names {
        let sub = dir.join(&name);
        let mut heatmaps = Vec::new();
        for m in METRICS {
            let path = sub.join(format!("{m}.csv"));
            if path.is_file() {
                heatmaps.push(read_heatmap_csv(&path, m)?);
            }
        }
        grids.push(MethodGrids { method: name, heatmaps });
    }
    write_aggregates(dir, &grids)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset.source = synthetic\nmethods = conflictual_de\n";

    #[test]
    fn defaults_are_filled() {
        let cfg = parse_config_str(MINIMAL, Path::new(".")).unwrap();
        let m = &cfg.methods[0];
        assert_eq!(m.kind, MethodKind::ConflictualDe);
        assert_eq!(m.loss.lambda_conflict, 0.05);
        assert_eq!(m.loss.epsilon_ls, 0.1);
        assert_eq!(m.loss.beta_cp, 0.1);
        assert_eq!(m.loss.lambda_edl, 0.01);
        assert_eq!(cfg.dropout_p, 0.3);
        assert_eq!(m.dropout_p, Some(0.3));
        assert_eq!(m.n_mc_passes, 20);
        assert_eq!(cfg.validation_fraction, 0.2);
        assert_eq!(cfg.fractions.len(), 4);
    }

    fn err_key(text: &str) -> String {
        match parse_config_str(text, Path::new(".")) {
            Err(Error::Config { key, msg }) => format!("{key}: {msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        let e = err_key(&format!("{MINIMAL}optimizer.momentum = 1.5\n"));
        assert!(e.starts_with("optimizer.momentum"), "{e}");
        let e = err_key(&format!("{MINIMAL}optimiser.lr = 0.1\n"));
        assert!(e.starts_with("optimiser.lr") && e.contains("unknown key"), "{e}");
        let e = err_key(&format!("{MINIMAL}optimizer.epochs = many\n"));
        assert!(e.starts_with("optimizer.epochs"), "{e}");
        assert!(err_key("methods = edl\n").starts_with("dataset.source"));
        assert!(err_key("dataset.source = synthetic\n").starts_with("methods"));
        assert!(err_key(&format!("{MINIMAL}methods = edl\n")).contains("duplicate"));
        assert!(err_key("dataset.source = synthetic\nmethods = bnn\n").contains("bnn"));
        assert!(err_key("dataset.source = idx\nmethods = edl\n").starts_with("dataset.train_images"));
        assert!(err_key(&format!("{MINIMAL}ladder.fractions = 0.5, 0.2\n")).starts_with("ladder.fractions"));
        assert!(err_key(&format!("{MINIMAL}mc_dropout.passes = 1\n")).starts_with("mc_dropout.passes"));
    }

    #[test]
    fn comments_and_lists() {
        let text = "# desk run\ndataset.source = synthetic # inline\nmethods = deep_ensemble, edl\n\
                    ladder.fractions = 0.25, 0.5, 1\nchain.base_widths = 4,2\nmaster_seed = 9\n";
        let cfg = parse_config_str(text, Path::new("/tmp")).unwrap();
        assert_eq!(cfg.methods.len(), 2);
        assert_eq!(cfg.fractions, vec![0.25, 0.5, 1.0]);
        assert_eq!(cfg.base_widths, vec![4, 2]);
        assert_eq!(cfg.master_seed, 9);
        assert_eq!(cfg.output_dir, Path::new("/tmp/epibench-out"));
    }

    #[test]
    fn dropout_is_per_method() {
        let text = "dataset.source = synthetic\nmethods = mc_dropout, deep_ensemble, edl\n\
                    ensemble.dropout = 0\nedl.dropout = 0.1\nmc_dropout.p = 0.4\n";
        let cfg = parse_config_str(text, Path::new(".")).unwrap();
        let rates: Vec<_> = cfg.methods.iter().map(|m| m.dropout_p.unwrap()).collect();
        assert_eq!(rates, vec![0.4, 0.0, 0.1]);
        assert!(err_key(&format!("{MINIMAL}ensemble.dropout = 1\n")).starts_with("ensemble.dropout"));
    }

    #[test]
    fn hash_tracks_results_not_output_dir() {
        let a = parse_config_str(MINIMAL, Path::new(".")).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.master_seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    fn tiny(dir: &Path) -> ExperimentConfig {
        let text = format!(
            "dataset.source = synthetic\nmethods = deep_ensemble, mc_dropout\ndataset.dim = 4\n\
             dataset.train_per_class = 40\ndataset.test_per_class = 10\nood.n = 20\n\
             ladder.fractions = 0.5, 1\nchain.base_widths = 4,2\nchain.steps = 2\n\
             ensemble.members = 2\nmc_dropout.passes = 3\noptimizer.epochs = 2\noptimizer.batch_size = 16\n\
             output.dir = {}\n",
            dir.display()
        );
        parse_config_str(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn run_and_report() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(&tmp.path().join("run"));
        let rep = run_experiment(&cfg, 2).unwrap();
        assert_eq!(rep.failed_cells, 0);
        let out = &rep.output_dir;
        for m in ["deep_ensemble", "mc_dropout"] {
            for metric in METRICS {
                assert!(out.join(m).join(format!("{metric}.csv")).is_file());
            }
        }
        let comp = fs::read_to_string(out.join("compliance.csv")).unwrap();
        assert_eq!(comp.lines().count(), 3);
        assert!(fs::read_to_string(out.join("manifest.txt")).unwrap().contains(&cfg.hash()));
        let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
        fs::remove_file(out.join("summary.csv")).unwrap();
        fs::remove_file(out.join("compliance.csv")).unwrap();
        report(out).unwrap();
        assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap(), summary);
        assert_eq!(fs::read_to_string(out.join("compliance.csv")).unwrap(), comp);
    }
}
