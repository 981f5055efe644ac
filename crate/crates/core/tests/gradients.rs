mod common;

use common::{check_op, labels, rng, small_cnn, uniform};
use ewas_core::attacks::{attack_objective, combined_objective, LossKind};
use ewas_core::ewas::{ewas_forward, MaskMode};
use ewas_core::gradcheck::{check_gradients, GradReport};
use ewas_core::model::{BnMode, ForwardOptions, Model};
use ewas_core::tensor::{BnForward, Graph, Tensor, Var};
use ewas_core::training::{at_loss_ewas, mart_loss_ewas, trades_loss_ewas, LossOptions};
use ewas_core::Result;
use rand::Rng;

const TOL: f64 = 1e-4;

fn assert_ok(what: &str, r: &GradReport) {
    assert!(r.coordinates > 0, "{what}: nothing checked");
    eprintln!(
        "{what}: {} coordinates, {} retried, max {:.2e}",
        r.coordinates, r.retried, r.max_error
    );
    assert!(
        r.max_error <= TOL,
        "{what}: max relative error {:.3e} at {} ({} coordinates)",
        r.max_error,
        r.worst,
        r.coordinates
    );
}

/// `Σ v ⊗ w` for fixed weights, so every output element feeds the scalar.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = uniform(&mut rng(seed), &shape, -1.0, 1.0);
    let w = g.constant(&w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_add_sub_mul_affine() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4, 2], -1.0, 1.0);
    let c = uniform(&mut r, &[3, 2], -1.0, 1.0);
    let rep = check_op(&[a, b, c], TOL, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let s = g.add(m, v[2])?;
        let d = g.sub(s, v[2])?;
        let p = g.mul(d, v[2])?;
        let q = g.affine(p, 1.5, -0.25);
        weighted_sum(g, q, 2)
    });
    assert_ok("matmul/add/sub/mul/affine", &rep);
}

#[test]
fn row_bias_sum_mean() {
    let mut r = rng(2);
    let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    let rep = check_op(&[x, b], TOL, |g, v| {
        let y = g.add_row_bias(v[0], v[1])?;
        let sq = g.mul(y, y)?;
        let s = g.sum(sq);
        let m = g.mean(sq);
        let m = g.scale(m, 3.0);
        g.add(s, m)
    });
    assert_ok("add_row_bias/sum/mean", &rep);
}

#[test]
fn conv2d_geometries() {
    for (seed, stride, padding, bias) in [
        (3, 1, 1, true),
        (4, 2, 1, false),
        (5, 1, 0, true),
        (6, 2, 0, true),
    ] {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
        let w = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
        let b = uniform(&mut r, &[4], -1.0, 1.0);
        let rep = check_op(&[x, w, b], TOL, |g, v| {
            let y = g.conv2d(v[0], v[1], bias.then_some(v[2]), stride, padding)?;
            weighted_sum(g, y, seed)
        });
        assert_ok(&format!("conv2d stride {stride} padding {padding}"), &rep);
    }
}

#[test]
fn relu_reshape_pool() {
    let mut r = rng(7);
    let x = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let rep = check_op(&[x], TOL, |g, v| {
        let y = g.relu(v[0]);
        let p = g.global_avg_pool(y)?;
        let flat = g.reshape(y, &[2, 48])?;
        let a = weighted_sum(g, p, 8)?;
        let b = weighted_sum(g, flat, 9)?;
        g.add(a, b)
    });
    assert_ok("relu/reshape/global_avg_pool", &rep);
}

#[test]
fn batch_norm_both_modes() {
    let mut r = rng(10);
    let x = uniform(&mut r, &[3, 2, 3, 3], -1.0, 2.0);
    let gamma = uniform(&mut r, &[2], 0.5, 1.5);
    let beta = uniform(&mut r, &[2], -0.5, 0.5);
    let rep = check_op(&[x.clone(), gamma.clone(), beta.clone()], TOL, |g, v| {
        let (y, _) = g.batch_norm2d(v[0], v[1], v[2], BnForward::Train)?;
        weighted_sum(g, y, 11)
    });
    assert_ok("batch_norm2d train", &rep);
    let mean = [0.3, -0.2];
    let var = [0.8, 1.7];
    let rep = check_op(&[x, gamma, beta], TOL, |g, v| {
        let (y, _) = g.batch_norm2d(
            v[0],
            v[1],
            v[2],
            BnForward::Eval {
                mean: &mean,
                var: &var,
            },
        )?;
        weighted_sum(g, y, 12)
    });
    assert_ok("batch_norm2d eval", &rep);
}

#[test]
fn softmax_and_losses() {
    let mut r = rng(13);
    for k in [2, 3, 5] {
        let a = uniform(&mut r, &[4, k], -2.0, 2.0);
        let b = uniform(&mut r, &[4, k], -2.0, 2.0);
        let y = labels(&mut r, 4, k);
        let rep = check_op(std::slice::from_ref(&a), TOL, |g, v| {
            let p = g.softmax(v[0])?;
            weighted_sum(g, p, 14)
        });
        assert_ok("softmax", &rep);
        let rep = check_op(std::slice::from_ref(&a), TOL, |g, v| {
            g.softmax_cross_entropy(v[0], &y)
        });
        assert_ok("cross entropy", &rep);
        let rep = check_op(&[a.clone(), b.clone()], TOL, |g, v| {
            let p = g.softmax(v[0])?;
            let q = g.softmax(v[1])?;
            g.kl_divergence(p, q)
        });
        assert_ok("kl divergence", &rep);
        let rep = check_op(&[a.clone(), b.clone()], TOL, |g, v| {
            let p = g.softmax(v[0])?;
            let q = g.softmax(v[1])?;
            let rows = g.kl_rows(p, q)?;
            let py = g.pick(p, &y)?;
            let w = g.affine(py, -1.0, 1.0);
            let m = g.mul(rows, w)?;
            Ok(g.mean(m))
        });
        assert_ok("weighted kl", &rep);
        let rep = check_op(std::slice::from_ref(&a), TOL, |g, v| {
            let p = g.softmax(v[0])?;
            g.boosted_cross_entropy(p, &y)
        });
        assert_ok("boosted cross entropy", &rep);
        for kappa in [0.0, 0.5, 50.0] {
            let rep = check_op(std::slice::from_ref(&a), TOL, |g, v| {
                g.cw_margin(v[0], &y, kappa)
            });
            assert_ok("cw margin", &rep);
        }
    }
}

#[test]
fn gather_columns_and_pick() {
    let mut r = rng(15);
    let t = uniform(&mut r, &[5, 3], -1.0, 1.0);
    let x = uniform(&mut r, &[4, 3], -1.0, 1.0);
    let rep = check_op(&[t, x], TOL, |g, v| {
        let cols = g.gather_columns(v[0], &[2, 0, 2, 1])?;
        let picked = g.pick(v[1], &[1, 1, 0, 2])?;
        let a = weighted_sum(g, cols, 16)?;
        let b = weighted_sum(g, picked, 17)?;
        g.add(a, b)
    });
    assert_ok("gather_columns/pick", &rep);
}

#[test]
fn ewas_forward_both_modes() {
    let mut r = rng(18);
    let z = uniform(&mut r, &[3, 2, 2, 2], -1.0, 1.0);
    let theta = uniform(&mut r, &[8, 4], 0.0, 2.0);
    let y = labels(&mut r, 3, 4);
    for mode in [MaskMode::Training, MaskMode::Inference] {
        let rep = check_op(&[z.clone(), theta.clone()], TOL, |g, v| {
            let out = ewas_forward(g, v[0], v[1], Some(&y), mode, "h")?;
            let a = weighted_sum(g, out.scaled, 19)?;
            let b = g.softmax_cross_entropy(out.scores, &y)?;
            g.add(a, b)
        });
        assert_ok(&format!("ewas_forward {mode:?}"), &rep);
    }
}

struct Instance {
    model: Model,
    x: Tensor,
    x_adv: Tensor,
    y: Vec<usize>,
}

/// Width-4 SmallCNN with one EWAS module and randomized ALC weights.
fn instance(seed: u64) -> Instance {
    let k = 3;
    let shape = [1, 8, 8];
    let hosts = small_cnn(4, k, shape, &[], seed)
        .insertion_points()
        .to_vec();
    let host = &hosts[seed as usize % hosts.len()];
    let mut model = small_cnn(4, k, shape, &[host], seed);
    let mut r = rng(seed ^ 0xabc);
    let alc = model.ewas_modules()[0].param_index();
    for v in model.params_mut()[alc].tensor.data_mut() {
        *v = r.random_range(0.2..1.8);
    }
    let batch = 2 + seed as usize % 2;
    let x = uniform(&mut r, &[batch, 1, 8, 8], 0.0, 1.0);
    let mut x_adv = x.clone();
    for v in x_adv.data_mut() {
        *v += r.random_range(-0.1..0.1);
    }
    let y = labels(&mut r, batch, k);
    Instance { model, x, x_adv, y }
}

const INSTANCES: u64 = 5;

#[test]
fn at_loss_gradients() {
    for seed in 0..INSTANCES {
        let Instance {
            mut model,
            x_adv,
            y,
            ..
        } = instance(seed);
        let f = |m: &Model, g: &mut Graph, v: &[Var]| {
            let e = at_loss_ewas(m, g, v[0], &y, 0.3, LossOptions::default())?;
            Ok((e.total, e.passes))
        };
        assert_ok(
            &format!("AT instance {seed}"),
            &check_gradients(&mut model, &[x_adv], true, TOL, &f).unwrap(),
        );
    }
}

#[test]
fn trades_loss_gradients() {
    for seed in 0..INSTANCES {
        let Instance {
            mut model,
            x,
            x_adv,
            y,
        } = instance(seed);
        let f = |m: &Model, g: &mut Graph, v: &[Var]| {
            let e = trades_loss_ewas(m, g, v[0], v[1], &y, 0.3, 6.0, LossOptions::default())?;
            Ok((e.total, e.passes))
        };
        assert_ok(
            &format!("TRADES instance {seed}"),
            &check_gradients(&mut model, &[x, x_adv], true, TOL, &f).unwrap(),
        );
    }
}

#[test]
fn mart_loss_gradients() {
    for seed in 0..INSTANCES {
        let Instance {
            mut model,
            x,
            x_adv,
            y,
        } = instance(seed);
        let f = |m: &Model, g: &mut Graph, v: &[Var]| {
            let e = mart_loss_ewas(m, g, v[0], v[1], &y, 0.3, 6.0, LossOptions::default())?;
            Ok((e.total, e.passes))
        };
        assert_ok(
            &format!("MART instance {seed}"),
            &check_gradients(&mut model, &[x, x_adv], true, TOL, &f).unwrap(),
        );
    }
}

#[test]
fn attack_objective_gradients() {
    for seed in 0..INSTANCES {
        let Instance {
            mut model,
            x_adv,
            y,
            ..
        } = instance(seed);
        for kind in [LossKind::CrossEntropy, LossKind::CwMargin] {
            let tracked = |m: &Model, g: &mut Graph, v: &[Var]| {
                let opts = ForwardOptions {
                    bn: BnMode::Eval,
                    mask: MaskMode::Inference,
                    labels: Some(&y),
                    track_params: true,
                    capture: false,
                };
                let pass = m.forward(g, v[0], &opts)?;
                let obj = combined_objective(g, &pass, &y, kind, 0.5, 0.0)?;
                Ok((obj, vec![pass]))
            };
            let rep = check_gradients(
                &mut model,
                std::slice::from_ref(&x_adv),
                true,
                TOL,
                &tracked,
            )
            .unwrap();
            assert_ok(&format!("attack objective {kind:?} instance {seed}"), &rep);
            let frozen = |m: &Model, g: &mut Graph, v: &[Var]| {
                let (obj, pass) =
                    attack_objective(m, g, v[0], &y, kind, 0.5, 0.0, MaskMode::Inference)?;
                Ok((obj, vec![pass]))
            };
            let rep = check_gradients(
                &mut model,
                std::slice::from_ref(&x_adv),
                false,
                TOL,
                &frozen,
            )
            .unwrap();
            assert_ok(
                &format!("attack input gradient {kind:?} instance {seed}"),
                &rep,
            );
        }
    }
}
