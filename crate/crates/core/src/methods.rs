//! Training and inference for each benchmarked uncertainty method.
//!
//! Every ensemble member gets its own seed derived from the master seed and
//! its index, and never reads another member's state, so members can be
//! trained in any order or concurrently with identical results.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::losses::{softplus, LossKind, LossSpec};
use crate::nn::{self, Architecture, MlpParams, Mode, OptimizerState};
use crate::parallel::Exec;
use crate::seed;
use crate::uncertainty::{self, MemberProbs, UncertaintyTriple};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodKind {
    McDropout,
    McDropoutLs,
    McDropoutCp,
    DeepEnsemble,
    ConflictualDe,
    Edl,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::McDropout,
        MethodKind::McDropoutLs,
        MethodKind::McDropoutCp,
        MethodKind::DeepEnsemble,
        MethodKind::ConflictualDe,
        MethodKind::Edl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::McDropout => "mc_dropout",
            MethodKind::McDropoutLs => "mc_dropout_ls",
            MethodKind::McDropoutCp => "mc_dropout_cp",
            MethodKind::DeepEnsemble => "deep_ensemble",
            MethodKind::ConflictualDe => "conflictual_de",
            MethodKind::Edl => "edl",
        }
    }

    pub fn parse(s: &str) -> Option<MethodKind> {
        MethodKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_mc_dropout(self) -> bool {
        matches!(self, MethodKind::McDropout | MethodKind::McDropoutLs | MethodKind::McDropoutCp)
    }

    fn base_loss(self) -> LossKind {
        match self {
            MethodKind::McDropout | MethodKind::DeepEnsemble => LossKind::CrossEntropy,
            MethodKind::McDropoutLs => LossKind::LabelSmoothing,
            MethodKind::McDropoutCp => LossKind::ConfidencePenalty,
            MethodKind::ConflictualDe => LossKind::Conflictual,
            MethodKind::Edl => LossKind::Edl,
        }
    }
}

/// Optimization hyperparameters shared by every member.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Halve the learning rate after this many epochs without a validation
    /// improvement.
    pub scheduler_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.95,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 128,
            scheduler_patience: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::input("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::input("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::input("weight decay must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.scheduler_patience == 0 {
            return Err(Error::input("epochs, batch size and scheduler patience must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Members of a plain deep ensemble.
    pub n_members: usize,
    /// Members per class of a conflictual ensemble.
    pub k_order: usize,
    /// Stochastic passes at inference for MC-dropout methods.
    pub n_mc_passes: usize,
    /// Dropout rate overriding the architecture's, when set.
    pub dropout_p: Option<f64>,
    /// Loss coefficients; `kind` and `favored_class` are set per member.
    pub loss: LossSpec,
    pub train: TrainConfig,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        MethodSpec {
            kind,
            n_members: 10,
            k_order: 1,
            n_mc_passes: 20,
            dropout_p: None,
            loss: LossSpec::with_kind(kind.base_loss()),
            train: TrainConfig::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// `arch` with this method's dropout rate applied.
    pub fn architecture(&self, arch: &Architecture) -> Architecture {
        Architecture {
            dropout_p: self.dropout_p.unwrap_or(arch.dropout_p),
            ..arch.clone()
        }
    }

    pub fn member_count(&self, n_classes: usize) -> usize {
        match self.kind {
            MethodKind::DeepEnsemble => self.n_members,
            MethodKind::ConflictualDe => self.k_order * n_classes,
            _ => 1,
        }
    }

    /// Favored class of member `m`; members cycle through the classes so each
    /// class is assigned to exactly `k_order` members.
    pub fn favored_class(&self, member: usize, n_classes: usize) -> Option<usize> {
        (self.kind == MethodKind::ConflictualDe).then_some(member % n_classes)
    }

    pub fn member_loss(&self, member: usize, n_classes: usize) -> LossSpec {
        LossSpec {
            kind: self.kind.base_loss(),
            favored_class: self.favored_class(member, n_classes),
            ..self.loss.clone()
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        self.train.validate()?;
        if self.kind.is_mc_dropout() && self.n_mc_passes < 2 {
            return Err(Error::input("MC-dropout needs at least 2 inference passes"));
        }
        if self.kind == MethodKind::DeepEnsemble && self.n_members < 2 {
            return Err(Error::input("a deep ensemble needs at least 2 members"));
        }
        if self.kind == MethodKind::ConflictualDe && self.k_order == 0 {
            return Err(Error::input("conflictual order k must be >= 1"));
        }
        if self.dropout_p.is_some_and(|p| !(0.0..1.0).contains(&p)) {
            return Err(Error::input("dropout rate must lie in [0, 1)"));
        }
        self.member_loss(0, n_classes).validate(n_classes)
    }
}

/// Architectures whose hidden widths double at every step.
pub fn build_submodel_chain(base: &Architecture, n_steps: usize) -> Result<Vec<Architecture>> {
    base.validate()?;
    if n_steps == 0 {
        return Err(Error::input("a submodel chain needs at least one step"));
    }
    Ok((0..n_steps)
        .map(|i| Architecture {
            hidden_widths: base.hidden_widths.iter().map(|w| w << i).collect(),
            ..base.clone()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs_run: usize,
    /// Epoch (1-based) of the restored snapshot; the last epoch when there is
    /// no validation set.
    pub best_epoch: usize,
    pub best_validation_loss: Option<f64>,
    pub final_learning_rate: f64,
    pub final_train_loss: f64,
    /// Number of per-sample losses that hit the probability floor.
    pub clamped: usize,
}

fn mean_loss(params: &MlpParams, data: &Dataset, loss: &LossSpec) -> Result<f64> {
    let c = params.n_classes();
    let mut rng = seed::rng(0);
    let mut total = 0.0;
    let chunk = 512;
    for start in (0..data.len()).step_by(chunk) {
        let end = (start + chunk).min(data.len());
        let x = &data.features[start * data.dim..end * data.dim];
        let cache = params.forward_batch(x, end - start, Mode::Eval, &mut rng)?;
        for b in 0..end - start {
            let v = loss.evaluate(cache.logits_row(b, c), cache.probs_row(b, c), data.labels[start + b])?;
            total += v.loss;
        }
    }
    Ok(total / data.len() as f64)
}

/// Mini-batch SGD for a fixed number of epochs, restoring the snapshot with
/// the lowest validation loss at the end.
pub fn train_member(
    arch: &Architecture,
    train: &Dataset,
    validation: &Dataset,
    loss: &LossSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MlpParams, TrainLog)> {
    if train.is_empty() {
        return Err(Error::input("empty training set"));
    }
    if train.dim != arch.input_dim || validation.dim != arch.input_dim {
        return Err(Error::input(format!(
            "data dimension {} does not match architecture input {}",
            train.dim, arch.input_dim
        )));
    }
    cfg.validate()?;
    loss.validate(arch.n_classes)?;

    let c = arch.n_classes;
    let mut params = nn::mlp_init(arch, seed::derive(seed, 0));
    let mut opt = OptimizerState::new(&params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    let mut shuffle_rng = seed::rng(seed::derive(seed, 1));
    let mut dropout_rng = seed::rng(seed::derive(seed, 2));

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut xb = Vec::with_capacity(cfg.batch_size * train.dim);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, MlpParams, usize)> = None;
    let mut since_improvement = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            xb.clear();
            for &i in batch {
                xb.extend_from_slice(train.row(i));
            }
            let cache = params.forward_batch(&xb, batch.len(), Mode::Train, &mut dropout_rng)?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad_logits = Vec::with_capacity(batch.len() * c);
            for (b, &i) in batch.iter().enumerate() {
                let v = loss.evaluate(cache.logits_row(b, c), cache.probs_row(b, c), train.labels[i])?;
                if !v.loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        msg: format!("non-finite loss {}", v.loss),
                    });
                }
                log.clamped += v.clamped as usize;
                epoch_loss += v.loss;
                grad_logits.extend(v.grad_logits.iter().map(|g| g * scale));
            }
            let grads = params.backward(&cache, &grad_logits)?;
            nn::sgd_step(&mut params, &grads, &mut opt);
        }
        if !params.is_finite() {
            return Err(Error::Training {
                epoch,
                msg: "non-finite parameters".into(),
            });
        }
        log.epochs_run = epoch;
        log.final_train_loss = epoch_loss / train.len() as f64;

        if !validation.is_empty() {
            let val = mean_loss(&params, validation, loss)?;
            if !val.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("non-finite validation loss {val}"),
                });
            }
            if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
                best = Some((val, params.clone(), epoch));
                since_improvement = 0;
            } else {
                since_improvement += 1;
                if since_improvement >= cfg.scheduler_patience {
                    opt.learning_rate *= 0.5;
                    since_improvement = 0;
                }
            }
        }
    }
    log.final_learning_rate = opt.learning_rate;
    match best {
        Some((val, snapshot, epoch)) => {
            log.best_validation_loss = Some(val);
            log.best_epoch = epoch;
            Ok((snapshot, log))
        }
        None => {
            log.best_epoch = log.epochs_run;
            Ok((params, log))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub params: MlpParams,
    pub seed: u64,
    pub favored_class: Option<usize>,
    pub log: TrainLog,
}

/// A trained method: the member networks (one for MC-dropout and EDL).
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub kind: MethodKind,
    pub arch: Architecture,
    pub members: Vec<Member>,
    pub n_mc_passes: usize,
}

/// Seed of member `index` under `master_seed`.
pub fn member_seed(master_seed: u64, index: usize) -> u64 {
    seed::derive(master_seed, index as u64)
}

pub fn train_method(
    spec: &MethodSpec,
    arch: &Architecture,
    train: &Dataset,
    validation: &Dataset,
    master_seed: u64,
    exec: Exec,
) -> Result<Predictor> {
    let c = arch.n_classes;
    spec.validate(c)?;
    if train.n_classes != c {
        return Err(Error::input(format!(
            "dataset has {} classes, architecture {}",
            train.n_classes, c
        )));
    }
    let results = exec.map_range(spec.member_count(c), |m| {
        train_one(spec, arch, train, validation, master_seed, m)
    });
    let members = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Predictor {
        kind: spec.kind,
        arch: arch.clone(),
        members,
        n_mc_passes: spec.n_mc_passes,
    })
}

/// Train member `index` of `spec` in isolation.
pub fn train_one(
    spec: &MethodSpec,
    arch: &Architecture,
    train: &Dataset,
    validation: &Dataset,
    master_seed: u64,
    index: usize,
) -> Result<Member> {
    let c = arch.n_classes;
    let loss = spec.member_loss(index, c);
    let s = member_seed(master_seed, index);
    let (params, log) = train_member(arch, train, validation, &loss, &spec.train, s).map_err(|e| Error::Member {
        member: index,
        source: Box::new(e),
    })?;
    Ok(Member {
        params,
        seed: s,
        favored_class: loss.favored_class,
        log,
    })
}

/// Inference output for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: MemberProbs,
    /// Dirichlet concentrations (evidential networks only).
    pub alpha: Option<Vec<f64>>,
}

impl Prediction {
    pub fn mean(&self) -> Vec<f64> {
        uncertainty::predictive_mean(&self.probs)
    }

    /// Entropy decomposition; analytic for Dirichlet outputs.
    pub fn uncertainty(&self) -> Result<UncertaintyTriple> {
        match &self.alpha {
            Some(a) => uncertainty::dirichlet_mutual_information(a),
            None => Ok(uncertainty::mutual_information(&self.probs)),
        }
    }
}

impl Predictor {
    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    /// Predictions for a row-major batch `xs` of `n` inputs. MC-dropout passes
    /// draw their masks from a stream seeded by `inference_seed`.
    pub fn predict_batch(&self, xs: &[f64], n: usize, inference_seed: u64) -> Result<Vec<Prediction>> {
        let c = self.n_classes();
        if xs.len() != n * self.arch.input_dim {
            return Err(Error::input(format!(
                "input length {} does not match {} x {}",
                xs.len(),
                n,
                self.arch.input_dim
            )));
        }
        let mut rng = seed::rng(inference_seed);
        // rows[i] collects the S distributions of input i.
        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut alphas: Option<Vec<Vec<f64>>> = None;
        match self.kind {
            k if k.is_mc_dropout() => {
                let net = &self.members[0].params;
                for _ in 0..self.n_mc_passes {
                    let cache = net.forward_batch(xs, n, Mode::McSample, &mut rng)?;
                    for (i, r) in rows.iter_mut().enumerate() {
                        r.extend_from_slice(cache.probs_row(i, c));
                    }
                }
            }
            MethodKind::Edl => {
                let cache = self.members[0].params.forward_batch(xs, n, Mode::Eval, &mut rng)?;
                let mut all = Vec::with_capacity(n);
                for (i, r) in rows.iter_mut().enumerate() {
                    let alpha: Vec<f64> = cache.logits_row(i, c).iter().map(|&z| softplus(z) + 1.0).collect();
                    let s: f64 = alpha.iter().sum();
                    let mut mean: Vec<f64> = alpha.iter().map(|a| a / s).collect();
                    renormalize(&mut mean);
                    r.extend_from_slice(&mean);
                    all.push(alpha);
                }
                alphas = Some(all);
            }
            _ => {
                for m in &self.members {
                    let cache = m.params.forward_batch(xs, n, Mode::Eval, &mut rng)?;
                    for (i, r) in rows.iter_mut().enumerate() {
                        r.extend_from_slice(cache.probs_row(i, c));
                    }
                }
            }
        }
        let mut alpha_iter = alphas.map(|a| a.into_iter());
        rows.into_iter()
            .map(|r| {
                Ok(Prediction {
                    probs: MemberProbs::new(c, r)?,
                    alpha: alpha_iter.as_mut().and_then(|it| it.next()),
                })
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64], inference_seed: u64) -> Result<Prediction> {
        Ok(self.predict_batch(x, 1, inference_seed)?.remove(0))
    }

    /// Save as a directory of per-member checkpoints plus `manifest.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "method = {}", self.kind.name());
        let _ = writeln!(manifest, "members = {}", self.members.len());
        let _ = writeln!(manifest, "mc_passes = {}", self.n_mc_passes);
        for (i, m) in self.members.iter().enumerate() {
            let file = format!("member_{i:03}.ebnn");
            nn::write_checkpoint(&m.params, &dir.join(&file))?;
            let _ = writeln!(manifest, "member.{i}.file = {file}");
            let _ = writeln!(manifest, "member.{i}.seed = {}", m.seed);
            if let Some(c) = m.favored_class {
                let _ = writeln!(manifest, "member.{i}.favored_class = {c}");
            }
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Predictor> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut map = std::collections::BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&path, format!("line {}: expected `key = value`", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::format(&path, format!("missing key `{k}`")))
        };
        let parse_num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(&path, format!("key `{k}` is not an integer")))
        };
        let kind_name = get("method")?;
        let kind = MethodKind::parse(&kind_name)
            .ok_or_else(|| Error::format(&path, format!("unknown method `{kind_name}`")))?;
        let n = parse_num("members")? as usize;
        let n_mc_passes = parse_num("mc_passes")? as usize;
        let mut members = Vec::with_capacity(n);
        for i in 0..n {
            let params = nn::read_checkpoint(&dir.join(get(&format!("member.{i}.file"))?))?;
            let favored_key = format!("member.{i}.favored_class");
            let favored_class = match map.contains_key(&favored_key) {
                true => Some(parse_num(&favored_key)? as usize),
                false => None,
            };
            members.push(Member {
                seed: parse_num(&format!("member.{i}.seed"))?,
                params,
                favored_class,
                log: TrainLog::default(),
            });
        }
        let arch = members
            .first()
            .map(|m| m.params.arch.clone())
            .ok_or_else(|| Error::format(&path, "predictor has no members"))?;
        Ok(Predictor {
            kind,
            arch,
            members,
            n_mc_passes,
        })
    }
}

fn renormalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
}
