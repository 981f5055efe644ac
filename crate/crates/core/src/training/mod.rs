//! Adversarial training with EWAS and white-box evaluation.
//!
//! Each batch first solves the inner maximization with PGD on the frozen
//! model (eval-mode BN), then evaluates the method's objective in train
//! mode, backpropagates and takes one SGD step. Running BN statistics are
//! updated from the adversarial-input pass only.

mod losses;
mod optim;

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, pgd_with, run_attack, AdversarialBatch, AttackConfig};
use crate::data::{batches, sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{BnMode, ForwardOptions, Model};
use crate::tensor::{Graph, Tensor};

pub use losses::{at_loss_ewas, mart_loss_ewas, trades_loss_ewas, LossEval, LossOptions};
pub use optim::{lr_schedule, sgd_step, Sgd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    At,
    Trades,
    Mart,
}

/// What the inner PGD ascends for TRADES.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerObjective {
    /// Cross-entropy plus `λ·` ALC cross-entropy, as for AT.
    #[default]
    Ce,
    /// `KL(p(x) ‖ p(x_adv))` plus `λ·` the ALC KL.
    Kl,
}

fn default_beta() -> f64 {
    6.0
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    2e-4
}
fn default_lr_factor() -> f64 {
    0.1
}
fn default_inner_attack() -> AttackConfig {
    AttackConfig::pgd10_train_preset()
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_lr_factor")]
    pub lr_factor: f64,
    #[serde(default = "default_inner_attack")]
    pub inner_attack: AttackConfig,
    #[serde(default)]
    pub inner_objective: InnerObjective,
    /// Measure natural and robust accuracy after every epoch.
    #[serde(default = "default_true")]
    pub log_accuracy: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    fn base(method: Method, epochs: usize, milestones: Vec<usize>) -> Self {
        Self {
            method,
            lambda: 0.01,
            beta: 6.0,
            epochs,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            milestones,
            lr_factor: 0.1,
            inner_attack: AttackConfig::pgd10_train_preset(),
            inner_objective: InnerObjective::Ce,
            log_accuracy: true,
            seed: 0,
        }
    }

    /// CIFAR-10 AT: 120 epochs, decay at 60 and 90, λ = 0.01.
    pub fn at_preset() -> Self {
        Self::base(Method::At, 120, vec![60, 90])
    }

    /// CIFAR-10 TRADES: 85 epochs, decay at 75.
    pub fn trades_preset() -> Self {
        Self::base(Method::Trades, 85, vec![75])
    }

    /// CIFAR-10 MART: 90 epochs, decay at 60.
    pub fn mart_preset() -> Self {
        Self::base(Method::Mart, 90, vec![60])
    }

    /// SVHN: lr 0.01, weight decay 5e-4, decay at 75 and 90, λ = 0.05.
    pub fn svhn_preset(method: Method) -> Self {
        Self {
            lambda: 0.05,
            lr: 0.01,
            weight_decay: 5e-4,
            ..Self::base(method, 120, vec![75, 90])
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "lambda and beta must be >= 0, got {} and {}",
                self.lambda, self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr must be > 0; momentum and weight_decay >= 0".into(),
            ));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing: {:?}",
                self.milestones
            )));
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!(
                    "milestone {last} is not below the epoch count {}",
                    self.epochs
                )));
            }
        }
        self.inner_attack.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub natural_accuracy: Option<f64>,
    pub robust_accuracy: Option<f64>,
    pub loss_total: f64,
    /// Batch-mean of every loss term.
    pub loss_terms: Vec<(String, f64)>,
    pub wall_time_s: f64,
}

impl EpochRecord {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "epoch",
            "lr",
            "natural_accuracy",
            "robust_accuracy",
            "loss_total",
        ]
        .map(String::from)
        .to_vec();
        h.extend(self.loss_terms.iter().map(|(n, _)| format!("loss_{n}")));
        h.push("wall_time_s".into());
        h
    }

    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut f = vec![
            self.epoch.to_string(),
            self.lr.to_string(),
            opt(self.natural_accuracy),
            opt(self.robust_accuracy),
            self.loss_total.to_string(),
        ];
        f.extend(self.loss_terms.iter().map(|(_, v)| v.to_string()));
        f.push(format!("{:.3}", self.wall_time_s));
        f
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if let Some(first) = self.records.first() {
            w.write_record(first.csv_header())?;
        }
        for r in &self.records {
            w.write_record(r.csv_fields())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// SplitMix64 finalizer over a combination of the inputs.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

fn check_dataset(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if data.shape() != model.input_shape() {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the model expects {:?}",
            data.shape(),
            model.input_shape()
        )));
    }
    if data.num_classes() > model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model has K = {}",
            data.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Inner maximization for one batch.
fn inner_max(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    attack: &AttackConfig,
) -> Result<AdversarialBatch> {
    let lambda = if model.has_ewas() { cfg.lambda } else { 0.0 };
    let attack = attack.clone().with_lambda(lambda);
    if cfg.method != Method::Trades || cfg.inner_objective == InnerObjective::Ce {
        return pgd(model, x, labels, &attack);
    }
    let opts = ForwardOptions {
        bn: BnMode::Eval,
        mask: attack.attack_mask_mode,
        labels: Some(labels),
        track_params: false,
        capture: false,
    };
    let mut g0 = Graph::new();
    let x0 = g0.constant(x);
    let nat = model.forward(&mut g0, x0, &opts)?;
    let p = g0.softmax(nat.logits)?;
    let p_nat = g0.to_tensor(p);
    let mut alc_nat = Vec::new();
    for a in &nat.alc {
        let s = g0.softmax(a.scores)?;
        alc_nat.push(g0.to_tensor(s));
    }
    pgd_with(model, x, labels, &attack, |g, xv| {
        let pass = model.forward(g, xv, &opts)?;
        let p = g.constant(&p_nat);
        let q = g.softmax(pass.logits)?;
        let mut obj = g.kl_divergence(p, q)?;
        if lambda > 0.0 {
            for (a, pn) in pass.alc.iter().zip(&alc_nat) {
                let p = g.constant(pn);
                let q = g.softmax(a.scores)?;
                let kl = g.kl_divergence(p, q)?;
                let w = g.scale(kl, lambda);
                obj = g.add(obj, w)?;
            }
        }
        Ok(obj)
    })
}

/// Trains `model` in place. `on_epoch` sees the model and record after
/// every completed epoch; an error from it stops training.
pub fn train_with<F>(
    model: &mut Model,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainLog>
where
    F: FnMut(&Model, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    check_dataset(model, train_set)?;
    if let Some(e) = eval_set {
        check_dataset(model, e)?;
    }
    if cfg.lambda > 0.0 && !model.has_ewas() {
        return Err(Error::Config(
            "lambda > 0 requires at least one EWAS module".into(),
        ));
    }
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_schedule(epoch, cfg.lr, &cfg.milestones, cfg.lr_factor);
        let mut total_sum = 0.0;
        let mut term_sums: Vec<(String, f64)> = Vec::new();
        let mut batches_run = 0usize;
        for (bi, idx) in batches(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64)?
            .iter()
            .enumerate()
        {
            if idx.len() < 2 {
                continue;
            }
            let (x, labels) = train_set.gather(idx);
            let attack =
                cfg.inner_attack
                    .clone()
                    .with_seed(derive_seed(cfg.seed, epoch as u64, bi as u64));
            let adv = inner_max(model, &x, &labels, cfg, &attack)?;

            let mut g = Graph::new();
            let opts = LossOptions::default();
            let xa = g.constant(&adv.inputs);
            let eval = match cfg.method {
                Method::At => at_loss_ewas(model, &mut g, xa, &labels, cfg.lambda, opts)?,
                Method::Trades => {
                    let xn = g.constant(&x);
                    trades_loss_ewas(model, &mut g, xn, xa, &labels, cfg.lambda, cfg.beta, opts)?
                }
                Method::Mart => {
                    let xn = g.constant(&x);
                    mart_loss_ewas(model, &mut g, xn, xa, &labels, cfg.lambda, cfg.beta, opts)?
                }
            };
            let total = g.scalar_value(eval.total);
            if !total.is_finite() {
                return Err(Error::NonFinite { epoch, batch: bi });
            }
            g.backward(eval.total)?;
            model.zero_grads();
            for pass in &eval.passes {
                model.accumulate_grads(&g, pass)?;
            }
            sgd.step(model.params_mut(), lr)?;
            model.commit_bn_stats(&eval.adversarial_pass().bn_updates);

            total_sum += total;
            if term_sums.is_empty() {
                term_sums = eval
                    .terms
                    .iter()
                    .map(|(n, _)| (n.to_string(), 0.0))
                    .collect();
            }
            for (s, (_, v)) in term_sums.iter_mut().zip(&eval.terms) {
                s.1 += v;
            }
            batches_run += 1;
        }
        let denom = batches_run.max(1) as f64;
        term_sums.iter_mut().for_each(|t| t.1 /= denom);

        let (natural_accuracy, robust_accuracy) = if cfg.log_accuracy {
            let data = eval_set.unwrap_or(train_set);
            let attack = cfg.inner_attack.clone().with_seed(derive_seed(
                cfg.seed ^ EVAL_SEED_SALT,
                epoch as u64,
                0,
            ));
            let natural = natural_accuracy(model, data, cfg.batch_size)?;
            let robust = robust_accuracy_with(data, cfg.batch_size, &attack, |x, y, a| {
                inner_max(model, x, y, cfg, a)
            })?;
            (Some(natural), Some(robust))
        } else {
            (None, None)
        };
        let record = EpochRecord {
            epoch,
            lr,
            natural_accuracy,
            robust_accuracy,
            loss_total: total_sum / denom,
            loss_terms: term_sums,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(model, &record)?;
        log.records.push(record);
    }
    Ok(log)
}

/// [`train_with`] without a per-epoch callback.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with(model, train_set, eval_set, cfg, |_, _| Ok(()))
}

/// Fraction of samples the deployed model classifies correctly.
pub fn natural_accuracy(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    for idx in sequential_batches(data.len(), batch_size) {
        let (x, labels) = data.gather(&idx);
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

fn robust_accuracy_with<F>(
    data: &Dataset,
    batch_size: usize,
    attack: &AttackConfig,
    mut run: F,
) -> Result<f64>
where
    F: FnMut(&Tensor, &[usize], &AttackConfig) -> Result<AdversarialBatch>,
{
    let mut correct = 0usize;
    for (bi, idx) in sequential_batches(data.len(), batch_size)
        .iter()
        .enumerate()
    {
        let (x, labels) = data.gather(idx);
        let cfg = attack
            .clone()
            .with_seed(derive_seed(attack.seed, bi as u64, 1));
        let adv = run(&x, &labels, &cfg)?;
        correct += adv.success.iter().filter(|&&s| !s).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Fraction of adversarial examples still classified correctly over the
/// whole set. Batch `i` attacks with a seed derived from `(attack.seed, i)`.
pub fn robust_accuracy(
    model: &Model,
    data: &Dataset,
    attack: &AttackConfig,
    batch_size: usize,
) -> Result<f64> {
    robust_accuracy_with(data, batch_size, attack, |x, y, a| {
        run_attack(model, x, y, a)
    })
}

/// Accuracy of the model on a precomputed adversarial batch.
pub fn batch_accuracy(model: &Model, adv: &AdversarialBatch, labels: &[usize]) -> Result<f64> {
    let pred = model.predict(&adv.inputs)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    pub attack: AttackConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackResult {
    pub name: String,
    pub config: AttackConfig,
    pub robust_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub natural_accuracy: f64,
    pub attacks: Vec<AttackResult>,
}

#[derive(Serialize)]
struct EvalRow<'a> {
    attack: &'a str,
    epsilon: Option<f64>,
    step_size: Option<f64>,
    steps: Option<usize>,
    lambda_attack: Option<f64>,
    natural_accuracy: f64,
    robust_accuracy: Option<f64>,
}

impl EvalReport {
    /// One row per attack; a single natural-only row when there are none.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.attacks.is_empty() {
            w.serialize(EvalRow {
                attack: "none",
                epsilon: None,
                step_size: None,
                steps: None,
                lambda_attack: None,
                natural_accuracy: self.natural_accuracy,
                robust_accuracy: None,
            })?;
        }
        for a in &self.attacks {
            w.serialize(EvalRow {
                attack: &a.name,
                epsilon: Some(a.config.epsilon),
                step_size: Some(a.config.step_size),
                steps: Some(a.config.steps),
                lambda_attack: Some(a.config.lambda_attack),
                natural_accuracy: self.natural_accuracy,
                robust_accuracy: Some(a.robust_accuracy),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

/// Natural accuracy plus robust accuracy under each attack.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    attacks: &[NamedAttack],
    batch_size: usize,
) -> Result<EvalReport> {
    check_dataset(model, data)?;
    let natural = natural_accuracy(model, data, batch_size)?;
    let mut results = Vec::with_capacity(attacks.len());
    for a in attacks {
        results.push(AttackResult {
            name: a.name.clone(),
            config: a.attack.clone(),
            robust_accuracy: robust_accuracy(model, data, &a.attack, batch_size)?,
        });
    }
    Ok(EvalReport {
        samples: data.len(),
        natural_accuracy: natural,
        attacks: results,
    })
}
