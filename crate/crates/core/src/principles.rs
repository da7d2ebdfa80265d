//! Grid experiments over nested data ladders and submodel chains, and
//! scoring of the two principles of epistemic uncertainty on the resulting
//! mutual-information heatmaps.
//!
//! First principle: epistemic uncertainty does not grow when the training set
//! grows. Second principle: a submodel is never more uncertain than the model
//! it was cut from.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::methods::{train_method, MethodSpec};
use crate::metrics::{accuracy, auroc, brier, sce, EvalBatch, DEFAULT_SCE_BINS};
use crate::nn::Architecture;
use crate::parallel::Exec;
use crate::seed;
use crate::{Error, Result};

pub const COMPLIANCE_TOLERANCE: f64 = 1e-12;

pub const METRICS: [&str; 7] = [
    "mean_mi",
    "mean_total_entropy",
    "accuracy",
    "brier",
    "sce",
    "ood_auroc",
    "misclassification_auroc",
];

/// `n` fractions growing geometrically from `smallest` to exactly 1.
pub fn geometric_fractions(smallest: f64, n: usize) -> Result<Vec<f64>> {
    if !(smallest > 0.0 && smallest <= 1.0) {
        return Err(Error::input("smallest fraction must lie in (0, 1]"));
    }
    match n {
        0 => Err(Error::input("a ladder needs at least one rung")),
        1 => Ok(vec![1.0]),
        _ => {
            let ratio = smallest.ln() / (n - 1) as f64;
            let mut f: Vec<f64> = (0..n).map(|i| ((n - 1 - i) as f64 * ratio).exp()).collect();
            f[0] = smallest;
            f[n - 1] = 1.0;
            Ok(f)
        }
    }
}

/// Nested, class-balanced subsets of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DataLadder {
    pub fractions: Vec<f64>,
    /// Sorted indices into the base set, one list per rung.
    pub rungs: Vec<Vec<usize>>,
}

impl DataLadder {
    pub fn len(&self) -> usize {
        self.rungs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rungs.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.rungs.iter().map(Vec::len).collect()
    }
}

/// Per-class counts for a rung of `total` samples, differing by at most one.
fn balanced_counts(total: usize, n_classes: usize) -> Vec<usize> {
    let (base, rem) = (total / n_classes, total % n_classes);
    (0..n_classes).map(|c| base + usize::from(c < rem)).collect()
}

/// Each rung extends the previous one with new samples, drawn per class from
/// a seeded shuffle so that class counts stay within one of each other. A
/// rung at fraction 1 is the whole set.
pub fn build_data_ladder(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<DataLadder> {
    if fractions.is_empty() {
        return Err(Error::input("a ladder needs at least one fraction"));
    }
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::input("ladder fractions must lie in (0, 1]"));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::input("ladder fractions must be strictly ascending"));
    }
    let c = ds.n_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (k, list) in by_class.iter_mut().enumerate() {
        list.shuffle(&mut seed::rng(seed::derive(seed, k as u64)));
    }

    let mut rungs = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let mut rung: Vec<usize> = if f == 1.0 {
            (0..ds.len()).collect()
        } else {
            let total = (f * ds.len() as f64).round() as usize;
            if total < c {
                return Err(Error::input(format!(
                    "fraction {f} gives {total} samples, fewer than {c} classes"
                )));
            }
            let counts = balanced_counts(total, c);
            let mut rung = Vec::with_capacity(total);
            for (k, &n) in counts.iter().enumerate() {
                if n > by_class[k].len() {
                    return Err(Error::input(format!(
                        "fraction {f} needs {n} samples of class {k}, only {} available",
                        by_class[k].len()
                    )));
                }
                rung.extend_from_slice(&by_class[k][..n]);
            }
            rung
        };
        rung.sort_unstable();
        rungs.push(rung);
    }
    Ok(DataLadder {
        fractions: fractions.to_vec(),
        rungs,
    })
}

/// One metric over (rung, architecture); rows are rungs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub metric: String,
    pub sample_counts: Vec<usize>,
    pub width_labels: Vec<String>,
    /// Row-major `R × M` values.
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn new(metric: &str, sample_counts: Vec<usize>, width_labels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != sample_counts.len() * width_labels.len() {
            return Err(Error::input(format!(
                "heatmap has {} values for a {}x{} grid",
                values.len(),
                sample_counts.len(),
                width_labels.len()
            )));
        }
        Ok(HeatmapGrid {
            metric: metric.to_string(),
            sample_counts,
            width_labels,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.sample_counts.len()
    }

    pub fn cols(&self) -> usize {
        self.width_labels.len()
    }

    pub fn get(&self, r: usize, m: usize) -> f64 {
        self.values[r * self.cols() + m]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplianceReport {
    /// `None` when there is a single rung.
    pub first_principle: Option<f64>,
    /// `None` when there is a single architecture.
    pub second_principle: Option<f64>,
    pub first_compliant: usize,
    pub first_transitions: usize,
    pub second_compliant: usize,
    pub second_transitions: usize,
}

fn fraction(k: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| k as f64 / n as f64)
}

/// Count principle-respecting transitions; ties within `tolerance` comply.
pub fn compliance(mi: &HeatmapGrid, tolerance: f64) -> Result<ComplianceReport> {
    let (r, m) = (mi.rows(), mi.cols());
    if r < 2 && m < 2 {
        return Err(Error::input("compliance needs at least two rungs or two architectures"));
    }
    let mut first = 0;
    for row in 0..r.saturating_sub(1) {
        for col in 0..m {
            first += usize::from(mi.get(row + 1, col) <= mi.get(row, col) + tolerance);
        }
    }
    let mut second = 0;
    for row in 0..r {
        for col in 0..m.saturating_sub(1) {
            second += usize::from(mi.get(row, col) <= mi.get(row, col + 1) + tolerance);
        }
    }
    let (nf, ns) = (m * r.saturating_sub(1), r * m.saturating_sub(1));
    Ok(ComplianceReport {
        first_principle: fraction(first, nf),
        second_principle: fraction(second, ns),
        first_compliant: first,
        first_transitions: nf,
        second_compliant: second,
        second_transitions: ns,
    })
}

/// Six significant digits, printed in the shortest form that round-trips.
pub fn format_value(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.5e}").parse().unwrap_or(v);
    format!("{rounded}")
}

pub fn heatmap_csv(grid: &HeatmapGrid) -> String {
    let mut out = String::from("samples");
    for w in &grid.width_labels {
        out.push(',');
        out.push_str(w);
    }
    out.push('\n');
    for (r, n) in grid.sample_counts.iter().enumerate() {
        let _ = write!(out, "{n}");
        for m in 0..grid.cols() {
            out.push(',');
            out.push_str(&format_value(grid.get(r, m)));
        }
        out.push('\n');
    }
    out
}

pub fn emit_heatmap_csv(grid: &HeatmapGrid, path: &Path) -> Result<()> {
    fs::write(path, heatmap_csv(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_heatmap_csv(path: &Path, metric: &str) -> Result<HeatmapGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty heatmap file"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("samples") {
        return Err(Error::format(path, "line 1: header must start with `samples`"));
    }
    let width_labels: Vec<String> = cols.map(str::to_string).collect();
    let mut sample_counts = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let mut cells = line.split(',');
        let n = cells
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, format!("line {lineno}: bad sample count")))?;
        sample_counts.push(n);
        let row: Vec<f64> = cells
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {lineno}: non-numeric value")))?;
        if row.len() != width_labels.len() {
            return Err(Error::format(
                path,
                format!("line {lineno}: expected {} values, found {}", width_labels.len(), row.len()),
            ));
        }
        values.extend(row);
    }
    HeatmapGrid::new(metric, sample_counts, width_labels, values)
}

/// Seed of cell `(rung, arch)` for method `method`.
pub fn cell_seed(master_seed: u64, method: &str, rung: usize, arch: usize) -> u64 {
    seed::derive(seed::derive(seed::derive_tag(master_seed, method), rung as u64), arch as u64)
}

/// Inputs shared by every cell of a grid. The validation, test and OOD sets
/// must already be normalized with the training-set normalizer.
#[derive(Debug, Clone, Copy)]
pub struct GridData<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub test: &'a Dataset,
    pub ood: &'a Dataset,
}

/// Outcome of one (method, rung, architecture) cell.
#[derive(Debug)]
pub struct CellOutcome {
    pub method: usize,
    pub rung: usize,
    pub arch: usize,
    pub seed: u64,
    pub seconds: f64,
    /// Values in [`METRICS`] order.
    pub result: Result<[f64; 7]>,
}

/// Train and score a single cell. Depends only on its coordinates and seeds.
pub fn run_cell(
    spec: &MethodSpec,
    train_indices: &[usize],
    arch: &Architecture,
    data: GridData<'_>,
    seed: u64,
    exec: Exec,
) -> Result<[f64; 7]> {
    let train = data.train.subset(train_indices);
    let arch = &spec.architecture(arch);
    let pred = train_method(spec, arch, &train, data.validation, seed, exec)?;
    let inference_seed = seed::derive_tag(seed, "inference");
    let test = pred.predict_batch(&data.test.features, data.test.len(), inference_seed)?;
    let ood = pred.predict_batch(&data.ood.features, data.ood.len(), seed::derive_tag(seed, "ood"))?;

    let c = arch.n_classes;
    let mut mi = Vec::with_capacity(test.len());
    let mut total = 0.0;
    let mut means = Vec::with_capacity(test.len() * c);
    for p in &test {
        let u = p.uncertainty()?;
        mi.push(u.mutual_information);
        total += u.total_entropy;
        means.extend(p.mean());
    }
    let n = test.len() as f64;
    let batch = EvalBatch::new(c, means, data.test.labels.clone())?;

    let mut ood_scores = mi.clone();
    let mut is_ood = vec![false; mi.len()];
    for p in &ood {
        ood_scores.push(p.uncertainty()?.mutual_information);
        is_ood.push(true);
    }
    let wrong = batch.misclassified();
    let mis_auroc = if wrong.iter().all(|&w| w) || wrong.iter().all(|&w| !w) {
        0.5
    } else {
        auroc(&mi, &wrong)?
    };
    Ok([
        mi.iter().sum::<f64>() / n,
        total / n,
        accuracy(&batch)?,
        brier(&batch)?,
        sce(&batch, DEFAULT_SCE_BINS)?,
        auroc(&ood_scores, &is_ood)?,
        mis_auroc,
    ])
}

/// Run every cell, never stopping at a failure. Cells are ordered by method,
/// then rung, then architecture.
pub fn run_grid_cells(
    methods: &[MethodSpec],
    ladder: &DataLadder,
    chain: &[Architecture],
    data: GridData<'_>,
    master_seed: u64,
    exec: Exec,
) -> Vec<CellOutcome> {
    let mut coords = Vec::with_capacity(methods.len() * ladder.len() * chain.len());
    for m in 0..methods.len() {
        for r in 0..ladder.len() {
            for a in 0..chain.len() {
                coords.push((m, r, a));
            }
        }
    }
    exec.map(&coords, |&(m, r, a)| {
        let spec = &methods[m];
        let seed = cell_seed(master_seed, spec.name(), r, a);
        let start = Instant::now();
        let result = run_cell(spec, &ladder.rungs[r], &chain[a], data, seed, exec).map_err(|e| Error::Cell {
            method: spec.name().to_string(),
            rung: r,
            arch: a,
            source: Box::new(e),
        });
        CellOutcome {
            method: m,
            rung: r,
            arch: a,
            seed,
            seconds: start.elapsed().as_secs_f64(),
            result,
        }
    })
}

/// Heatmaps of one method, in [`METRICS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodGrids {
    pub method: String,
    pub heatmaps: Vec<HeatmapGrid>,
}

impl MethodGrids {
    pub fn metric(&self, name: &str) -> Option<&HeatmapGrid> {
        self.heatmaps.iter().find(|h| h.metric == name)
    }
}

/// Assemble heatmaps from cell outcomes; failed cells become NaN.
pub fn assemble(
    methods: &[MethodSpec],
    ladder: &DataLadder,
    chain: &[Architecture],
    cells: &[CellOutcome],
) -> Result<Vec<MethodGrids>> {
    let (r, m) = (ladder.len(), chain.len());
    let counts = ladder.sizes();
    let labels: Vec<String> = chain.iter().map(Architecture::width_label).collect();
    let mut out = Vec::with_capacity(methods.len());
    for (mi, spec) in methods.iter().enumerate() {
        let mut values = vec![vec![f64::NAN; r * m]; METRICS.len()];
        for cell in cells.iter().filter(|c| c.method == mi) {
            if let Ok(v) = &cell.result {
                for (k, x) in v.iter().enumerate() {
                    values[k][cell.rung * m + cell.arch] = *x;
                }
            }
        }
        let heatmaps = METRICS
            .iter()
            .zip(values)
            .map(|(name, v)| HeatmapGrid::new(name, counts.clone(), labels.clone(), v))
            .collect::<Result<_>>()?;
        out.push(MethodGrids {
            method: spec.name().to_string(),
            heatmaps,
        });
    }
    Ok(out)
}

/// Train and evaluate every (method, rung, architecture) cell. Identical
/// (rung, architecture) cells use the same training indices for all methods.
pub fn run_grid(
    methods: &[MethodSpec],
    ladder: &DataLadder,
    chain: &[Architecture],
    data: GridData<'_>,
    master_seed: u64,
    exec: Exec,
) -> Result<Vec<MethodGrids>> {
    if methods.is_empty() || ladder.is_empty() || chain.is_empty() {
        return Err(Error::input("a grid needs at least one method, rung and architecture"));
    }
    if data.test.is_empty() || data.ood.is_empty() {
        return Err(Error::input("test and OOD sets must be non-empty"));
    }
    let mut cells = run_grid_cells(methods, ladder, chain, data, master_seed, exec);
    if let Some(pos) = cells.iter().position(|c| c.result.is_err()) {
        if let Err(e) = cells.swap_remove(pos).result {
            return Err(e);
        }
    }
    assemble(methods, ladder, chain, &cells)
}
