//! White-box l∞ attacks: FGSM, PGD and the PGD-optimized C&W margin attack.
//!
//! Attacks run the model in eval mode (running BN statistics, frozen
//! parameters). With EWAS modules attached the mask is reselected on
//! every iteration, by default through the deployed argmax path. The
//! objective adds `lambda_attack` times the same loss on each ALC's scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ewas::MaskMode;
use crate::model::{BnMode, ForwardOptions, ForwardPass, Model};
use crate::tensor::{sign, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy on logits plus `λ·` cross-entropy on ALC scores.
    #[default]
    CrossEntropy,
    /// Negated C&W margin on logits plus `λ·` negated margin on ALC scores.
    CwMargin,
    /// Alias of `CrossEntropy`: the min-max objective with the ALC term.
    Combined,
}

fn default_steps() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub loss_kind: LossKind,
    #[serde(default)]
    pub lambda_attack: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub attack_mask_mode: MaskMode,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    /// Single full-ε signed-gradient step.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon,
            steps: 1,
            random_start: false,
            loss_kind: LossKind::CrossEntropy,
            lambda_attack: 0.0,
            kappa: 0.0,
            attack_mask_mode: MaskMode::Inference,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, steps: usize, random_start: bool) -> Self {
        Self {
            step_size,
            steps,
            random_start,
            ..Self::fgsm(epsilon)
        }
    }

    /// l∞ C&W optimized by PGD.
    pub fn cw(epsilon: f64, step_size: f64, steps: usize) -> Self {
        Self {
            loss_kind: LossKind::CwMargin,
            ..Self::pgd(epsilon, step_size, steps, false)
        }
    }

    /// ε = 8/255, step ε/4, 20 steps, random start.
    pub fn pgd20_preset() -> Self {
        Self::pgd(8.0 / 255.0, 2.0 / 255.0, 20, true)
    }

    /// Training adversary: ε = 8/255, step ε/4, 10 steps, random start.
    pub fn pgd10_train_preset() -> Self {
        Self::pgd(8.0 / 255.0, 2.0 / 255.0, 10, true)
    }

    /// ε = 8/255, step ε/10, 30 steps (the SVHN evaluation setting).
    pub fn cw30_svhn_preset() -> Self {
        Self::cw(8.0 / 255.0, 0.8 / 255.0, 30)
    }

    /// ε = 8/255, step ε/4, 30 steps.
    pub fn cw30_preset() -> Self {
        Self::cw(8.0 / 255.0, 2.0 / 255.0, 30)
    }

    pub fn with_lambda(mut self, lambda_attack: f64) -> Self {
        self.lambda_attack = lambda_attack;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// ε = 0 is accepted as the degenerate (identity) attack.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "attack epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0) && !(self.epsilon == 0.0 && self.step_size == 0.0) {
            return Err(Error::Config(format!(
                "attack step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack steps must be >= 1".into()));
        }
        if !(self.lambda_attack >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_attack must be >= 0, got {}",
                self.lambda_attack
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    /// `x + δ`.
    pub inputs: Tensor,
    /// The model misclassifies the perturbed sample.
    pub success: Vec<bool>,
    /// Per-sample backbone loss at the final iterate (cross-entropy, or
    /// the C&W margin for margin attacks).
    pub losses: Vec<f64>,
}

/// `clamp(x, x0-ε, x0+ε)` followed by `clamp(·, 0, 1)`.
pub fn project_linf_box(x: &Tensor, x0: &Tensor, epsilon: f64) -> Result<Tensor> {
    if x.shape() != x0.shape() {
        return Err(Error::shape(
            "project_linf_box",
            format!("{:?} vs {:?}", x.shape(), x0.shape()),
        ));
    }
    let mut out = x.data().to_vec();
    project_in_place(&mut out, x0.data(), epsilon);
    Tensor::new(x.shape().to_vec(), out)
}

// `clamp` panics on inverted bounds.
#[allow(clippy::manual_clamp)]
fn project_in_place(x: &mut [f64], x0: &[f64], epsilon: f64) {
    for (v, &c) in x.iter_mut().zip(x0) {
        *v = v.max(c - epsilon).min(c + epsilon).max(0.0).min(1.0);
    }
}

/// Sum over ALC modules of `loss(scores)`, or `None` with no modules.
fn alc_sum(
    g: &mut Graph,
    pass: &ForwardPass,
    mut loss: impl FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for alc in &pass.alc {
        let l = loss(g, alc.scores)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total)
}

/// The attacker's objective on an already recorded forward pass.
///
/// `lambda_attack = 0` yields the backbone term exactly: the ALC term is
/// not added at all.
pub fn combined_objective(
    g: &mut Graph,
    pass: &ForwardPass,
    labels: &[usize],
    loss_kind: LossKind,
    lambda_attack: f64,
    kappa: f64,
) -> Result<Var> {
    if lambda_attack > 0.0 && pass.alc.is_empty() {
        return Err(Error::Config(
            "lambda_attack > 0 requires at least one EWAS module".into(),
        ));
    }
    Ok(match loss_kind {
        LossKind::CrossEntropy | LossKind::Combined => {
            let backbone = g.softmax_cross_entropy(pass.logits, labels)?;
            if lambda_attack > 0.0 {
                let alc = alc_sum(g, pass, |g, s| g.softmax_cross_entropy(s, labels))?
                    .expect("pass has ALC outputs");
                let weighted = g.scale(alc, lambda_attack);
                g.add(backbone, weighted)?
            } else {
                backbone
            }
        }
        LossKind::CwMargin => {
            let margin = g.cw_margin(pass.logits, labels, kappa)?;
            let backbone = g.scale(margin, -1.0);
            if lambda_attack > 0.0 {
                let alc = alc_sum(g, pass, |g, s| g.cw_margin(s, labels, kappa))?
                    .expect("pass has ALC outputs");
                let weighted = g.scale(alc, -lambda_attack);
                g.add(backbone, weighted)?
            } else {
                backbone
            }
        }
    })
}

/// The quantity the attacker ascends, recorded on `g` for input `x`, with
/// eval-mode BN and frozen parameters.
#[allow(clippy::too_many_arguments)]
pub fn attack_objective(
    model: &Model,
    g: &mut Graph,
    x: Var,
    labels: &[usize],
    loss_kind: LossKind,
    lambda_attack: f64,
    kappa: f64,
    mask_mode: MaskMode,
) -> Result<(Var, ForwardPass)> {
    if lambda_attack > 0.0 && !model.has_ewas() {
        return Err(Error::Config(
            "lambda_attack > 0 requires at least one EWAS module".into(),
        ));
    }
    let opts = ForwardOptions {
        bn: BnMode::Eval,
        mask: mask_mode,
        labels: Some(labels),
        track_params: false,
        capture: false,
    };
    let pass = model.forward(g, x, &opts)?;
    let objective = combined_objective(g, &pass, labels, loss_kind, lambda_attack, kappa)?;
    Ok((objective, pass))
}

/// Projected signed-gradient ascent inside the ε-ball.
pub fn pgd(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<AdversarialBatch> {
    pgd_with(model, x, labels, config, |g, xv| {
        attack_objective(
            model,
            g,
            xv,
            labels,
            config.loss_kind,
            config.lambda_attack,
            config.kappa,
            config.attack_mask_mode,
        )
        .map(|(objective, _)| objective)
    })
}

/// [`pgd`] driven by a caller-supplied objective recorded on a fresh graph
/// for every iterate. `config.loss_kind` only selects the reported loss.
pub fn pgd_with<F>(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    mut objective: F,
) -> Result<AdversarialBatch>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    config.validate()?;
    let x0 = x.data();
    let mut adv = x0.to_vec();
    let eps = config.epsilon;
    if config.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for v in adv.iter_mut() {
            *v += (2.0 * rng.random::<f64>() - 1.0) * eps;
        }
        project_in_place(&mut adv, x0, eps);
    }
    for _ in 0..config.steps {
        let mut g = Graph::new();
        let xv = g.input(x.shape(), adv.clone(), true)?;
        let obj = objective(&mut g, xv)?;
        g.backward(obj)?;
        if let Some(grad) = g.grad(xv) {
            for (v, &gi) in adv.iter_mut().zip(grad) {
                *v += config.step_size * sign(gi);
            }
        }
        project_in_place(&mut adv, x0, eps);
    }
    let inputs = Tensor::new(x.shape().to_vec(), adv)?;
    let logits = model.logits(&inputs)?;
    let k = model.num_classes();
    let mut success = Vec::with_capacity(labels.len());
    let mut losses = Vec::with_capacity(labels.len());
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        success.push(crate::tensor::argmax_lowest(row) != y);
        losses.push(match config.loss_kind {
            LossKind::CwMargin => {
                let other = row
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != y)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                (row[y] - other).max(-config.kappa)
            }
            _ => {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - row[y]
            }
        });
    }
    Ok(AdversarialBatch {
        inputs,
        success,
        losses,
    })
}

/// One full-ε step: exactly `pgd` with `steps = 1`, `step_size = ε` and no
/// random start. `config.steps` is ignored.
pub fn fgsm(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<AdversarialBatch> {
    let single = AttackConfig {
        steps: 1,
        step_size: config.epsilon.max(f64::MIN_POSITIVE),
        random_start: false,
        ..config.clone()
    };
    pgd(model, x, labels, &single)
}

/// PGD on the C&W margin objective.
pub fn cw_attack(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<AdversarialBatch> {
    if model.num_classes() < 2 {
        return Err(Error::Config("C&W needs at least 2 classes".into()));
    }
    let margin = AttackConfig {
        loss_kind: LossKind::CwMargin,
        ..config.clone()
    };
    pgd(model, x, labels, &margin)
}

/// Dispatches on the config: a single full-ε step without random start is
/// FGSM, margin objectives are C&W, anything else is PGD.
pub fn run_attack(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<AdversarialBatch> {
    match config.loss_kind {
        LossKind::CwMargin => cw_attack(model, x, labels, config),
        _ => pgd(model, x, labels, config),
    }
}
