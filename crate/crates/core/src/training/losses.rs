//! AT, TRADES and MART objectives with their EWAS auxiliary terms.
//!
//! Every function records the full objective on a caller-owned graph and
//! reports each term's value. Terms whose coefficient is zero are not
//! recorded at all, so the reduced objectives are bit-identical to their
//! plain counterparts.

use crate::error::{Error, Result};
use crate::ewas::MaskMode;
use crate::model::{BnMode, ForwardOptions, ForwardPass, Model};
use crate::tensor::{Graph, Var};

/// How the outer objective runs the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossOptions {
    pub bn: BnMode,
    pub mask: MaskMode,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            bn: BnMode::Train,
            mask: MaskMode::Training,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub total: Var,
    /// Unweighted value of every recorded term.
    pub terms: Vec<(&'static str, f64)>,
    pub passes: Vec<ForwardPass>,
    /// Index into `passes` of the adversarial-input pass.
    pub adversarial: usize,
}

impl LossEval {
    pub fn adversarial_pass(&self) -> &ForwardPass {
        &self.passes[self.adversarial]
    }
}

fn check_lambda(model: &Model, lambda: f64, beta: f64) -> Result<()> {
    if !(lambda >= 0.0) || !(beta >= 0.0) {
        return Err(Error::Config(format!(
            "lambda and beta must be >= 0, got {lambda} and {beta}"
        )));
    }
    if lambda > 0.0 && !model.has_ewas() {
        return Err(Error::Config(
            "lambda > 0 requires at least one EWAS module".into(),
        ));
    }
    Ok(())
}

fn run(
    model: &Model,
    g: &mut Graph,
    x: Var,
    labels: &[usize],
    opts: LossOptions,
) -> Result<ForwardPass> {
    model.forward(
        g,
        x,
        &ForwardOptions {
            bn: opts.bn,
            mask: opts.mask,
            labels: Some(labels),
            track_params: true,
            capture: false,
        },
    )
}

struct Acc {
    total: Option<Var>,
    terms: Vec<(&'static str, f64)>,
}

impl Acc {
    fn new() -> Self {
        Self {
            total: None,
            terms: Vec::new(),
        }
    }

    fn push(&mut self, g: &mut Graph, name: &'static str, term: Var, weight: f64) -> Result<()> {
        self.terms.push((name, g.scalar_value(term)));
        let weighted = if weight == 1.0 {
            term
        } else {
            g.scale(term, weight)
        };
        self.total = Some(match self.total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
        Ok(())
    }

    fn finish(self, passes: Vec<ForwardPass>, adversarial: usize) -> LossEval {
        LossEval {
            total: self.total.expect("at least one term"),
            terms: self.terms,
            passes,
            adversarial,
        }
    }
}

/// Sum over modules of `f(scores_a, scores_b)` for matching ALC outputs.
fn alc_pairs(
    g: &mut Graph,
    a: &ForwardPass,
    b: &ForwardPass,
    mut f: impl FnMut(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (sa, sb) in a.alc.iter().zip(&b.alc) {
        let l = f(g, sa.scores, sb.scores)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Config("no EWAS modules attached".into()))
}

/// Mean over the batch of `KL(p_i ‖ q_i) · (1 − p_y,i)`.
fn weighted_kl(g: &mut Graph, p: Var, q: Var, labels: &[usize]) -> Result<Var> {
    let rows = g.kl_rows(p, q)?;
    let py = g.pick(p, labels)?;
    let w = g.affine(py, -1.0, 1.0);
    let weighted = g.mul(rows, w)?;
    Ok(g.mean(weighted))
}

/// `CE(p(x_adv), y) + λ·Σ CE(p̂(x_adv), y)`.
pub fn at_loss_ewas(
    model: &Model,
    g: &mut Graph,
    x_adv: Var,
    labels: &[usize],
    lambda: f64,
    opts: LossOptions,
) -> Result<LossEval> {
    check_lambda(model, lambda, 0.0)?;
    let pass = run(model, g, x_adv, labels, opts)?;
    let mut acc = Acc::new();
    let ce = g.softmax_cross_entropy(pass.logits, labels)?;
    acc.push(g, "ce", ce, 1.0)?;
    if lambda > 0.0 {
        let alc = alc_pairs(g, &pass, &pass, |g, s, _| {
            g.softmax_cross_entropy(s, labels)
        })?;
        acc.push(g, "alc_ce", alc, lambda)?;
    }
    Ok(acc.finish(vec![pass], 0))
}

/// `CE(p(x)) + β·KL(p(x) ‖ p(x_adv)) + λ·CE(p̂(x)) + λβ·KL(p̂(x) ‖ p̂(x_adv))`.
#[allow(clippy::too_many_arguments)]
pub fn trades_loss_ewas(
    model: &Model,
    g: &mut Graph,
    x: Var,
    x_adv: Var,
    labels: &[usize],
    lambda: f64,
    beta: f64,
    opts: LossOptions,
) -> Result<LossEval> {
    check_lambda(model, lambda, beta)?;
    let nat = run(model, g, x, labels, opts)?;
    let adv = run(model, g, x_adv, labels, opts)?;
    let mut acc = Acc::new();
    let ce = g.softmax_cross_entropy(nat.logits, labels)?;
    acc.push(g, "ce", ce, 1.0)?;
    if beta > 0.0 {
        let p = g.softmax(nat.logits)?;
        let q = g.softmax(adv.logits)?;
        let kl = g.kl_divergence(p, q)?;
        acc.push(g, "kl", kl, beta)?;
    }
    if lambda > 0.0 {
        let alc_ce = alc_pairs(g, &nat, &nat, |g, s, _| g.softmax_cross_entropy(s, labels))?;
        acc.push(g, "alc_ce", alc_ce, lambda)?;
        if beta > 0.0 {
            let alc_kl = alc_pairs(g, &nat, &adv, |g, sn, sa| {
                let p = g.softmax(sn)?;
                let q = g.softmax(sa)?;
                g.kl_divergence(p, q)
            })?;
            acc.push(g, "alc_kl", alc_kl, lambda * beta)?;
        }
    }
    Ok(acc.finish(vec![nat, adv], 1))
}

/// `BCE(p(x_adv)) + β·mean[KL(p(x) ‖ p(x_adv))·(1 − p_y(x))]` plus the same
/// two terms on ALC probabilities, weighted by λ and λβ.
#[allow(clippy::too_many_arguments)]
pub fn mart_loss_ewas(
    model: &Model,
    g: &mut Graph,
    x: Var,
    x_adv: Var,
    labels: &[usize],
    lambda: f64,
    beta: f64,
    opts: LossOptions,
) -> Result<LossEval> {
    check_lambda(model, lambda, beta)?;
    let nat = run(model, g, x, labels, opts)?;
    let adv = run(model, g, x_adv, labels, opts)?;
    let mut acc = Acc::new();
    let q = g.softmax(adv.logits)?;
    let bce = g.boosted_cross_entropy(q, labels)?;
    acc.push(g, "bce", bce, 1.0)?;
    if beta > 0.0 {
        let p = g.softmax(nat.logits)?;
        let kl = weighted_kl(g, p, q, labels)?;
        acc.push(g, "kl", kl, beta)?;
    }
    if lambda > 0.0 {
        let alc_bce = alc_pairs(g, &adv, &adv, |g, s, _| {
            let q = g.softmax(s)?;
            g.boosted_cross_entropy(q, labels)
        })?;
        acc.push(g, "alc_bce", alc_bce, lambda)?;
        if beta > 0.0 {
            let alc_kl = alc_pairs(g, &nat, &adv, |g, sn, sa| {
                let p = g.softmax(sn)?;
                let q = g.softmax(sa)?;
                weighted_kl(g, p, q, labels)
            })?;
            acc.push(g, "alc_kl", alc_kl, lambda * beta)?;
        }
    }
    Ok(acc.finish(vec![nat, adv], 1))
}
