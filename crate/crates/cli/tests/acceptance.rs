//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ewas_cli::{cmd_ablate, cmd_train, Axis, Overrides, RunConfig, CHECKPOINT, TRAIN_LOG};
use ewas_core::analysis::{
    activation_frequency, activation_magnitude, channel_order, export_stats, ActivationStats,
    InputKind, StatisticKind, StatsPair, ThresholdScope,
};
use ewas_core::attacks::{
    attack_objective, combined_objective, fgsm, pgd, run_attack, AttackConfig, LossKind,
};
use ewas_core::ewas::{ewas_forward, flatten_chw, reformat_chw, ActivationShape, MaskMode};
use ewas_core::gradcheck::check_gradients;
use ewas_core::model::{
    decode_checkpoint, load_checkpoint, save_checkpoint, Arch, BnMode, ForwardOptions, Model,
    ModelConfig, Precision,
};
use ewas_core::tensor::{argmax_lowest, Graph, Tensor, Var};
use ewas_core::training::{at_loss_ewas, mart_loss_ewas, trades_loss_ewas, LossOptions};
use ewas_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn labels(r: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

fn model(
    arch: Arch,
    width: usize,
    k: usize,
    shape: [usize; 3],
    hosts: &[&str],
    seed: u64,
) -> Model {
    let cfg = ModelConfig {
        arch,
        width,
        insertion_points: hosts.iter().map(|h| h.to_string()).collect(),
        num_classes: k,
        input_shape: shape,
        normalization: None,
    };
    Model::build(&cfg, seed).unwrap()
}

fn randomize_alc(m: &mut Model, r: &mut ChaCha8Rng, lo: f64, hi: f64) {
    let idx: Vec<usize> = m.ewas_modules().iter().map(|e| e.param_index()).collect();
    for i in idx {
        for v in m.params_mut()[i].tensor.data_mut() {
            *v = r.random_range(lo..hi);
        }
    }
}

fn ulps(a: f64, b: f64) -> u64 {
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

/// Spacing of doubles at `x`.
fn ulp(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1) - x
}

fn gradient_suite() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut coords = 0;
    let losses = ["AT+EWAS", "TRADES+EWAS", "MART+EWAS", "attack objective"];
    for seed in 0..5u64 {
        let shape = [1, 8, 8];
        let hosts = ["block1", "block2", "block3", "block4"];
        let mut m = model(
            Arch::SmallCnn,
            4,
            3,
            shape,
            &[hosts[seed as usize % 4]],
            seed,
        );
        let mut r = rng(1000 + seed);
        randomize_alc(&mut m, &mut r, 0.2, 1.8);
        let batch = 2 + seed as usize % 2;
        let x = uniform(&mut r, &[batch, 1, 8, 8], 0.0, 1.0);
        let mut x_adv = x.clone();
        x_adv
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += r.random_range(-0.1..0.1));
        let y = labels(&mut r, batch, 3);
        for loss in losses {
            let f = |m: &Model, g: &mut Graph, v: &[Var]| -> ewas_core::Result<_> {
                let opts = LossOptions::default();
                let e = match loss {
                    "AT+EWAS" => at_loss_ewas(m, g, v[1], &y, 0.3, opts)?,
                    "TRADES+EWAS" => trades_loss_ewas(m, g, v[0], v[1], &y, 0.3, 6.0, opts)?,
                    "MART+EWAS" => mart_loss_ewas(m, g, v[0], v[1], &y, 0.3, 6.0, opts)?,
                    _ => {
                        let fo = ForwardOptions {
                            bn: BnMode::Eval,
                            mask: MaskMode::Inference,
                            labels: Some(&y),
                            track_params: true,
                            capture: false,
                        };
                        let pass = m.forward(g, v[1], &fo)?;
                        let obj =
                            combined_objective(g, &pass, &y, LossKind::CrossEntropy, 0.5, 0.0)?;
                        return Ok((obj, vec![pass]));
                    }
                };
                Ok((e.total, e.passes))
            };
            let rep = check_gradients(&mut m, &[x.clone(), x_adv.clone()], true, TOL, &f)
                .map_err(|e| e.to_string())?;
            ensure(rep.max_error <= TOL, || {
                format!(
                    "{loss} instance {seed}: rel err {:.3e} at {}",
                    rep.max_error, rep.worst
                )
            })?;
            worst = worst.max(rep.max_error);
            coords += rep.coordinates;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed <= Duration::from_secs(120), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "5 instances x 4 losses, {coords} coordinates, max rel err {worst:.2e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn mechanism_oracle() -> Outcome {
    let mut r = rng(2000);
    let mut worst = 0.0f64;
    let trials = 200;
    for trial in 0..trials {
        let shape = ActivationShape {
            channels: r.random_range(1..5),
            height: r.random_range(1..5),
            width: r.random_range(1..5),
        };
        let (batch, k, n) = (r.random_range(1..5), r.random_range(2..7), shape.numel());
        let z = uniform(
            &mut r,
            &[batch, shape.channels, shape.height, shape.width],
            -1.0,
            1.0,
        );
        let theta = uniform(&mut r, &[n, k], -2.0, 2.0);
        let y = labels(&mut r, batch, k);
        let mode = if trial % 2 == 0 {
            MaskMode::Training
        } else {
            MaskMode::Inference
        };
        let mut g = Graph::new();
        let (zv, tv) = (g.constant(&z), g.constant(&theta));
        let out = ewas_forward(&mut g, zv, tv, Some(&y), mode, "h").map_err(|e| e.to_string())?;
        let (zd, td) = (z.data(), theta.data());
        for b in 0..batch {
            let scores: Vec<f64> = (0..k)
                .map(|c| (0..n).map(|i| zd[b * n + i] * td[i * k + c]).sum())
                .collect();
            let class = match mode {
                MaskMode::Training => y[b],
                MaskMode::Inference => argmax_lowest(&scores),
            };
            ensure(out.classes[b] == class, || {
                format!("trial {trial}: selected {} not {class}", out.classes[b])
            })?;
            for (got, want) in g.value(out.scores)[b * k..(b + 1) * k].iter().zip(&scores) {
                worst = worst.max((got - want).abs());
            }
            for i in 0..n {
                worst = worst.max(
                    (g.value(out.scaled)[b * n + i] - zd[b * n + i] * td[i * k + class]).abs(),
                );
            }
        }
        let sample = z
            .slice_outer(0, 1)
            .unwrap()
            .reshape(shape.dims().to_vec())
            .unwrap();
        let flat = flatten_chw(&sample).map_err(|e| e.to_string())?;
        let back = reformat_chw(&flat, shape).map_err(|e| e.to_string())?;
        ensure(
            back.data() == sample.data() && back.shape() == sample.shape(),
            || format!("trial {trial}: flatten/reformat round trip changed the activation"),
        )?;
    }
    ensure(worst <= 1e-10, || format!("max abs deviation {worst:e}"))?;
    Ok(format!(
        "{trials} instances, max abs deviation {worst:.1e}, round trip bit-exact"
    ))
}

fn selection_semantics() -> Outcome {
    // scores favour class 2 but the label is 0; columns 1 and 2 tie in the second case
    let mut g = Graph::new();
    let z = g.constant(&Tensor::new([1, 2, 1, 1], vec![1.0, 1.0]).unwrap());
    let theta = g.constant(&Tensor::new([2, 3], vec![0.1, 0.5, 0.9, 0.2, 0.4, 0.8]).unwrap());
    let train = ewas_forward(&mut g, z, theta, Some(&[0]), MaskMode::Training, "h").unwrap();
    ensure(
        train.classes == [0] && g.value(train.scaled) == [0.1, 0.2],
        || "training mode ignores the label".into(),
    )?;
    let inf = ewas_forward(&mut g, z, theta, Some(&[0]), MaskMode::Inference, "h").unwrap();
    ensure(
        inf.classes == [2] && g.value(inf.scaled) == [0.9, 0.8],
        || "inference mode ignores argmax".into(),
    )?;
    let tie = g.constant(&Tensor::new([2, 3], vec![0.1, 0.7, 0.7, 0.2, 0.3, 0.3]).unwrap());
    let tied = ewas_forward(&mut g, z, tie, None, MaskMode::Inference, "h").unwrap();
    ensure(tied.classes == [1], || {
        format!("tie resolved to {:?}", tied.classes)
    })?;
    let missing = ewas_forward(&mut g, z, theta, None, MaskMode::Training, "h");
    ensure(matches!(missing, Err(Error::Mode(_))), || {
        "training mode without labels accepted".into()
    })?;

    let bare = model(Arch::SmallCnn, 4, 3, [1, 8, 8], &[], 31);
    let mut worst = 0;
    for host in ["block1", "block2", "block3", "block4"] {
        let mut m = model(Arch::SmallCnn, 4, 3, [1, 8, 8], &[host], 31);
        let i = m.ewas_modules()[0].param_index();
        m.params_mut()[i].tensor.data_mut().fill(1.0);
        let x = uniform(&mut rng(32), &[5, 1, 8, 8], 0.0, 1.0);
        let y = [0, 1, 2, 0, 1];
        for opts in [ForwardOptions::inference(), ForwardOptions::training(&y)] {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let a = m.forward(&mut g, xv, &opts).unwrap();
            let b = bare.forward(&mut g, xv, &opts).unwrap();
            for (&u, &v) in g.value(a.logits).iter().zip(g.value(b.logits)) {
                worst = worst.max(ulps(u, v));
            }
        }
    }
    ensure(worst <= 1, || {
        format!("identity mask moved logits by {worst} ulp")
    })?;
    Ok(format!(
        "label/argmax/tie/missing-label cases hold; identity mask within {worst} ulp at 4 hosts"
    ))
}

fn attack_invariants() -> Outcome {
    let mut r = rng(3000);
    let runs = 1000;
    let lin = model(Arch::Linear, 1, 3, [1, 3, 3], &["input"], 1);
    let cnn = model(Arch::SmallCnn, 2, 3, [1, 8, 8], &["block2"], 2);
    for run in 0..runs {
        let (m, shape): (&Model, [usize; 4]) = if run % 4 == 3 {
            (&cnn, [2, 1, 8, 8])
        } else {
            (&lin, [3, 1, 3, 3])
        };
        let x = uniform(&mut r, &shape, 0.0, 1.0);
        let y = labels(&mut r, shape[0], 3);
        let eps = r.random_range(0.0..0.4);
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: r.random_range(0.01..0.5),
            steps: r.random_range(1..6),
            random_start: r.random_bool(0.5),
            loss_kind: [
                LossKind::CrossEntropy,
                LossKind::CwMargin,
                LossKind::Combined,
            ][r.random_range(0..3)],
            lambda_attack: [0.0, 0.1, 1.0][r.random_range(0..3)],
            kappa: r.random_range(0.0..1.0),
            attack_mask_mode: if r.random_bool(0.5) {
                MaskMode::Inference
            } else {
                MaskMode::Training
            },
            seed: r.random(),
        };
        let adv = run_attack(m, &x, &y, &cfg).map_err(|e| format!("run {run}: {e}"))?;
        for (&a, &c) in adv.inputs.data().iter().zip(x.data()) {
            ensure(
                (0.0..=1.0).contains(&a) && (a - c).abs() <= eps + ulp(a.abs().max(c.abs())),
                || format!("run {run}: {a} escapes ball around {c} (eps {eps})"),
            )?;
        }
    }

    let x = uniform(&mut r, &[4, 1, 8, 8], 0.0, 1.0);
    let y = labels(&mut r, 4, 3);
    for lambda in [0.0, 0.5] {
        let a = fgsm(&cnn, &x, &y, &AttackConfig::fgsm(0.1).with_lambda(lambda)).unwrap();
        let b = pgd(
            &cnn,
            &x,
            &y,
            &AttackConfig::pgd(0.1, 0.1, 1, false).with_lambda(lambda),
        )
        .unwrap();
        ensure(a.inputs.data() == b.inputs.data(), || {
            "FGSM differs from one-step PGD".into()
        })?;
    }

    let mut g = Graph::new();
    let xv = g.input(x.shape(), x.data().to_vec(), true).unwrap();
    let (obj, _) = attack_objective(
        &cnn,
        &mut g,
        xv,
        &y,
        LossKind::CrossEntropy,
        0.0,
        0.0,
        MaskMode::Inference,
    )
    .unwrap();
    g.backward(obj).unwrap();
    let mut h = Graph::new();
    let xh = h.input(x.shape(), x.data().to_vec(), true).unwrap();
    let pass = cnn
        .forward(&mut h, xh, &ForwardOptions::inference())
        .unwrap();
    let ce = h.softmax_cross_entropy(pass.logits, &y).unwrap();
    h.backward(ce).unwrap();
    ensure(
        g.scalar_value(obj).to_bits() == h.scalar_value(ce).to_bits(),
        || "λ=0 objective is not CE".into(),
    )?;
    ensure(g.grad(xv) == h.grad(xh), || {
        "λ=0 input gradient differs from CE".into()
    })?;

    for trial in 0..20 {
        let m = model(Arch::Linear, 1, 2, [1, 2, 3], &[], 50 + trial);
        let w = m.params()[m.param_index("head.weight").unwrap()]
            .tensor
            .data()
            .to_vec();
        let x = uniform(&mut r, &[3, 1, 2, 3], 0.3, 0.7);
        let y = labels(&mut r, 3, 2);
        let adv = pgd(&m, &x, &y, &AttackConfig::pgd(0.1, 0.025, 10, false)).unwrap();
        for (b, &yb) in y.iter().enumerate() {
            for i in 0..6 {
                let x0 = x.data()[b * 6 + i];
                let corner = if w[i * 2 + 1 - yb] > w[i * 2 + yb] {
                    x0 + 0.1
                } else {
                    x0 - 0.1
                };
                ensure(adv.inputs.data()[b * 6 + i] == corner, || {
                    format!("linear trial {trial}: not at the corner")
                })?;
            }
        }
    }
    Ok(format!("{runs} random runs inside ball and box; FGSM = PGD-1 and λ=0 = CE bit-exact; linear corner exact"))
}

fn loss_reductions() -> Outcome {
    let mut r = rng(4000);
    let mut m = model(Arch::SmallCnn, 4, 3, [1, 8, 8], &["block2"], 41);
    randomize_alc(&mut m, &mut r, 0.2, 1.8);
    let x = uniform(&mut r, &[4, 1, 8, 8], 0.0, 1.0);
    let x_adv = uniform(&mut r, &[4, 1, 8, 8], 0.0, 1.0);
    let y = labels(&mut r, 4, 3);
    let opts = LossOptions::default();
    let fo = ForwardOptions::training(&y);
    let bits = |v: f64| v.to_bits();

    let mut g = Graph::new();
    let (xv, av) = (g.constant(&x), g.constant(&x_adv));
    let at = at_loss_ewas(&m, &mut g, av, &y, 0.0, opts).unwrap();
    let pass = m.forward(&mut g, av, &fo).unwrap();
    let ce = g.softmax_cross_entropy(pass.logits, &y).unwrap();
    ensure(
        bits(g.scalar_value(at.total)) == bits(g.scalar_value(ce)) && at.terms.len() == 1,
        || "AT+EWAS at λ=0 is not AT".into(),
    )?;

    let tr = trades_loss_ewas(&m, &mut g, xv, av, &y, 0.0, 6.0, opts).unwrap();
    let nat = m.forward(&mut g, xv, &fo).unwrap();
    let adv = m.forward(&mut g, av, &fo).unwrap();
    let ce = g.softmax_cross_entropy(nat.logits, &y).unwrap();
    let p = g.softmax(nat.logits).unwrap();
    let q = g.softmax(adv.logits).unwrap();
    let kl = g.kl_divergence(p, q).unwrap();
    let w = g.scale(kl, 6.0);
    let expect = g.add(ce, w).unwrap();
    ensure(
        bits(g.scalar_value(tr.total)) == bits(g.scalar_value(expect)),
        || "TRADES+EWAS at λ=0 is not TRADES".into(),
    )?;
    let tr0 = trades_loss_ewas(&m, &mut g, xv, av, &y, 0.0, 0.0, opts).unwrap();
    ensure(
        bits(g.scalar_value(tr0.total)) == bits(g.scalar_value(ce)),
        || "TRADES at β=0 is not CE".into(),
    )?;

    let mart = mart_loss_ewas(&m, &mut g, xv, av, &y, 0.0, 0.0, opts).unwrap();
    let q = g.softmax(adv.logits).unwrap();
    let bce = g.boosted_cross_entropy(q, &y).unwrap();
    ensure(
        bits(g.scalar_value(mart.total)) == bits(g.scalar_value(bce)),
        || "MART at λ=β=0 is not BCE".into(),
    )?;

    let same_t = trades_loss_ewas(&m, &mut g, xv, xv, &y, 0.5, 6.0, opts).unwrap();
    let same_m = mart_loss_ewas(&m, &mut g, xv, xv, &y, 0.5, 6.0, opts).unwrap();
    for (what, terms) in [("TRADES", &same_t.terms), ("MART", &same_m.terms)] {
        for (name, v) in terms.iter().filter(|(n, _)| n.contains("kl")) {
            ensure(*v == 0.0, || {
                format!("{what} {name} = {v:e} with x_adv = x")
            })?;
        }
    }
    Ok(
        "λ=0 and β=0 reductions bit-exact for AT, TRADES, MART; KL terms exactly 0 at x_adv = x"
            .into(),
    )
}

/// Scalar reimplementation over explicit (sample, channel, position) loops.
fn brute_force_stats(
    data: &[Vec<f64>],
    c: usize,
    per: usize,
    per_dataset: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut global = 0.0f64;
    for sample in data {
        for &v in sample {
            if v.abs() > global {
                global = v.abs();
            }
        }
    }
    let mut freq = vec![0.0; c];
    let mut mag = vec![0.0; c];
    for sample in data {
        let mut local = 0.0f64;
        for &v in sample {
            if v.abs() > local {
                local = v.abs();
            }
        }
        let threshold = 0.01 * if per_dataset { global } else { local };
        for ch in 0..c {
            let mut valid = false;
            let mut peak = 0.0f64;
            for p in 0..per {
                let v = sample[ch * per + p].abs();
                valid |= v > threshold;
                if v > peak {
                    peak = v;
                }
            }
            freq[ch] += f64::from(u8::from(valid));
            mag[ch] += peak;
        }
    }
    let n = data.len() as f64;
    (
        freq.into_iter().map(|f| f / n).collect(),
        mag.into_iter().map(|m| m / n).collect(),
    )
}

fn analysis_oracles() -> Outcome {
    let mut r = rng(6000);
    for trial in 0..200 {
        let (c, h, w, n) = (
            r.random_range(1..7),
            r.random_range(1..4),
            r.random_range(1..4),
            r.random_range(1..9),
        );
        let per = h * w;
        let data: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..c * per).map(|_| r.random_range(-1.0..1.0)).collect();
                // plant values at, below and above a sample's threshold
                let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let i = r.random_range(0..v.len());
                v[i] = [0.0, 0.01 * peak, -0.01 * peak, 0.02 * peak][r.random_range(0..4)];
                if r.random_bool(0.3) {
                    v.iter_mut().for_each(|x| *x *= 1e-3);
                }
                v
            })
            .collect();
        let tensors: Vec<Tensor> = data
            .iter()
            .map(|v| Tensor::new([c, h, w], v.clone()).unwrap())
            .collect();
        let m = activation_magnitude(&tensors).map_err(|e| e.to_string())?;
        for per_dataset in [false, true] {
            let scope = if per_dataset {
                ThresholdScope::PerDataset
            } else {
                ThresholdScope::PerSample
            };
            let f = activation_frequency(&tensors, scope).map_err(|e| e.to_string())?;
            let (bf, bm) = brute_force_stats(&data, c, per, per_dataset);
            ensure(f == bf, || {
                format!("trial {trial}: frequency {f:?} vs {bf:?}")
            })?;
            ensure(m == bm, || {
                format!("trial {trial}: magnitude {m:?} vs {bm:?}")
            })?;
        }
    }

    // channel 1 sits exactly at the threshold, channel 2 just above it
    let t = Tensor::new([3, 1, 1], vec![1.0, 0.01, 0.010000001]).unwrap();
    let f = activation_frequency(std::slice::from_ref(&t), ThresholdScope::PerSample)
        .map_err(|e| e.to_string())?;
    ensure(f == [1.0, 0.0, 1.0], || {
        format!("per-sample threshold gave {f:?}")
    })?;
    let small = Tensor::new([3, 1, 1], vec![0.5, 0.004, 0.006]).unwrap();
    let f =
        activation_frequency(&[t, small], ThresholdScope::PerDataset).map_err(|e| e.to_string())?;
    ensure(f == [1.0, 0.0, 0.5], || {
        format!("per-dataset threshold gave {f:?}")
    })?;

    let natural = vec![0.2, 0.9, 0.5, 0.9, 0.1];
    let adversarial = vec![0.8, 0.1, 0.3, 0.7, 0.6];
    let stats = |input, values: &Vec<f64>| ActivationStats {
        kind: StatisticKind::Magnitude,
        input,
        class: Some(3),
        layer: "penultimate".into(),
        values: values.clone(),
    };
    let pair = StatsPair::new(
        stats(InputKind::Natural, &natural),
        Some(stats(InputKind::Adversarial, &adversarial)),
    )
    .map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    export_stats(&[pair], &mut buf).map_err(|e| e.to_string())?;
    let mut rd = csv::Reader::from_reader(&buf[..]);
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    ensure(
        header
            == [
                "rank",
                "channel_index",
                "natural_value",
                "adversarial_value",
                "statistic_kind",
                "class",
                "layer",
            ],
        || format!("header {header:?}"),
    )?;
    let order = channel_order(&natural);
    ensure(order == [1, 3, 2, 0, 4], || {
        format!("natural order {order:?}")
    })?;
    for (rank, row) in rd.records().enumerate() {
        let row = row.unwrap();
        let ch: usize = row[1].parse().unwrap();
        ensure(ch == order[rank], || {
            format!("row {rank} lists channel {ch}")
        })?;
        ensure(row[3].parse::<f64>().unwrap() == adversarial[ch], || {
            format!("row {rank}: adversarial value misplaced")
        })?;
    }
    Ok("200 crafted instances match the scalar oracle; strict >1% threshold at both scopes; adversarial rows follow the natural ranking".into())
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_config(out: &Path) -> RunConfig {
    RunConfig::load(
        &workspace_root().join("configs/toy-at-ewas.json"),
        &Overrides {
            seed: None,
            out: Some(out.to_path_buf()),
        },
    )
    .unwrap()
}

fn read_log(path: &Path) -> Result<Vec<csv::StringRecord>, String> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header = rd.headers().map_err(|e| e.to_string())?.clone();
    ensure(
        &header[2] == "natural_accuracy" && &header[3] == "robust_accuracy",
        || format!("log header {header:?}"),
    )?;
    rd.records()
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())
}

fn toy_end_to_end(root: &Path) -> Outcome {
    let mut checkpoints = Vec::new();
    let mut summary = String::new();
    for run in ["a", "b"] {
        let cfg = toy_config(&root.join(run));
        let start = Instant::now();
        let ckpt = cmd_train(&cfg).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        ensure(elapsed <= Duration::from_secs(300), || {
            format!("run {run} took {elapsed:?}")
        })?;
        let log = read_log(&cfg.output.dir.join(TRAIN_LOG))?;
        ensure(log.len() == 30, || format!("{} log records", log.len()))?;
        let field = |i: usize, c: usize| log[i][c].parse::<f64>().unwrap();
        let natural = field(29, 2);
        let (rob0, rob29) = (field(0, 3), field(29, 3));
        ensure(natural >= 0.95, || {
            format!("natural test accuracy {natural}")
        })?;
        ensure(rob29 - rob0 >= 0.20, || {
            format!("robust accuracy {rob0} -> {rob29}")
        })?;
        let model = load_checkpoint(&ckpt).map_err(|e| e.to_string())?.model;
        let test = cfg
            .data
            .test
            .load(ewas_core::data::Split::Test)
            .map_err(|e| e.to_string())?;
        let recomputed =
            ewas_core::training::natural_accuracy(&model, &test, 100).map_err(|e| e.to_string())?;
        ensure(recomputed == natural, || {
            format!("checkpoint accuracy {recomputed} vs log {natural}")
        })?;
        checkpoints.push(fs::read(&ckpt).map_err(|e| e.to_string())?);
        summary = format!(
            "natural {natural:.3}, robust {rob0:.3} -> {rob29:.3}, {:.1}s per run",
            elapsed.as_secs_f64()
        );
    }
    ensure(checkpoints[0] == checkpoints[1], || {
        "checkpoints differ between runs".into()
    })?;
    Ok(format!("{summary}, checkpoints byte-identical"))
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header = rd
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(String::from)
        .collect();
    let rows = rd
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    Ok((header, rows))
}

fn ablation_structure(root: &Path) -> Outcome {
    let mut cfg = toy_config(&root.join("ablate"));
    cfg.train.epochs = 3;
    let names: Vec<String> = cfg.attack_presets.iter().map(|a| a.name.clone()).collect();
    let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    let expect_header = |axis: &str| {
        let mut h = vec![axis.to_string(), "status".into(), "Natural".into()];
        h.extend(names.iter().cloned());
        h
    };
    let check = |axis: Axis, values: &[&str], table: &Path| -> Result<Vec<Vec<String>>, String> {
        let (header, rows) = read_table(table)?;
        ensure(header == expect_header(axis.name()), || {
            format!("{} header {header:?}", axis.name())
        })?;
        ensure(rows.len() == values.len(), || {
            format!("{} has {} rows", axis.name(), rows.len())
        })?;
        for (row, v) in rows.iter().zip(values) {
            ensure(row[0] == *v && row[1] == "ok", || {
                format!("{} row {row:?}", axis.name())
            })?;
            for cell in &row[2..] {
                let a: f64 = cell.parse().map_err(|_| format!("cell `{cell}`"))?;
                ensure((0.0..=1.0).contains(&a), || format!("accuracy {a}"))?;
            }
        }
        Ok(rows)
    };

    let lambdas = ["0.01", "0.05"];
    let ab = cmd_ablate(&cfg, Axis::Lambda, &strings(&lambdas), None).map_err(|e| e.to_string())?;
    check(Axis::Lambda, &lambdas, &ab.table)?;
    let positions = ["block1", "block2", "block3", "block4"];
    let ab =
        cmd_ablate(&cfg, Axis::Position, &strings(&positions), None).map_err(|e| e.to_string())?;
    check(Axis::Position, &positions, &ab.table)?;
    for (i, p) in positions.iter().enumerate() {
        let dir = root
            .join("ablate/ablate_position")
            .join(format!("{i:02}_{p}"));
        ensure(dir.join(CHECKPOINT).is_file(), || {
            format!("missing checkpoint for {p}")
        })?;
    }

    let toy = root.join("a").join(CHECKPOINT);
    let attack_lambdas = ["0", "0.01", "0.1", "1"];
    let full = toy_config(&root.join("ablate"));
    let ab = cmd_ablate(
        &full,
        Axis::AttackLambda,
        &strings(&attack_lambdas),
        Some(&toy),
    )
    .map_err(|e| e.to_string())?;
    let rows = check(Axis::AttackLambda, &attack_lambdas, &ab.table)?;
    let col = 3 + names
        .iter()
        .position(|n| n == "PGD-20")
        .ok_or("no PGD-20 preset")?;
    let pgd: Vec<f64> = rows.iter().map(|r| r[col].parse().unwrap()).collect();
    ensure(pgd[0] > pgd[1], || {
        format!(
            "PGD-20 robust accuracy {} at λ=0 vs {} at λ=0.01",
            pgd[0], pgd[1]
        )
    })?;
    let naturals: Vec<&String> = rows.iter().map(|r| &r[2]).collect();
    ensure(naturals.windows(2).all(|w| w[0] == w[1]), || {
        "natural accuracy varies with attack λ".into()
    })?;
    Ok(format!(
        "lambda x2, position x4, attack_lambda x4 tables well-formed; PGD-20 {:?} over λ_attack {:?}",
        pgd, attack_lambdas
    ))
}

fn persistence(root: &Path) -> Outcome {
    let path = root.join("a").join(CHECKPOINT);
    let bytes = fs::read(&path).map_err(|e| e.to_string())?;
    let ck = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let again = root.join("resaved.ckpt");
    save_checkpoint(&ck.model, &ck.meta, ck.precision, &again).map_err(|e| e.to_string())?;
    ensure(
        fs::read(&again).map_err(|e| e.to_string())? == bytes,
        || "re-saved checkpoint differs".into(),
    )?;
    ensure(ck.precision == Precision::F32, || {
        "default precision is not 32-bit".into()
    })?;

    let mut corrupt = bytes.clone();
    let mut undetected = Vec::new();
    for i in 0..bytes.len() {
        corrupt[i] ^= 0x5a;
        if decode_checkpoint(&corrupt).is_ok() {
            undetected.push(i);
        }
        corrupt[i] = bytes[i];
    }
    ensure(undetected.is_empty(), || {
        format!("undetected corruption at bytes {undetected:?}")
    })?;
    ensure(
        decode_checkpoint(&bytes[..bytes.len() - 1]).is_err(),
        || "truncation not detected".into(),
    )?;

    let wide = root.join("wide.ckpt");
    save_checkpoint(&ck.model, &ck.meta, Precision::F64, &wide).map_err(|e| e.to_string())?;
    let w = load_checkpoint(&wide).map_err(|e| e.to_string())?;
    let rewide = root.join("wide2.ckpt");
    save_checkpoint(&w.model, &w.meta, Precision::F64, &rewide).map_err(|e| e.to_string())?;
    ensure(
        fs::read(&wide).unwrap() == fs::read(&rewide).unwrap(),
        || "64-bit round trip differs".into(),
    )?;
    let same = w
        .model
        .params()
        .iter()
        .zip(ck.model.params())
        .all(|(a, b)| a.tensor.data() == b.tensor.data());
    ensure(same, || "64-bit checkpoint changed parameter values".into())?;
    Ok(format!(
        "round trip byte-identical; all {} single-byte corruptions rejected",
        bytes.len()
    ))
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path().to_path_buf();
    let criteria: Vec<Criterion> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("mechanism oracle", Box::new(mechanism_oracle)),
        ("selection semantics", Box::new(selection_semantics)),
        ("attack invariants", Box::new(attack_invariants)),
        ("loss reductions", Box::new(loss_reductions)),
        ("analysis oracles", Box::new(analysis_oracles)),
        (
            "toy end-to-end",
            Box::new({
                let r = root.clone();
                move || toy_end_to_end(&r)
            }),
        ),
        (
            "ablation structure",
            Box::new({
                let r = root.clone();
                move || ablation_structure(&r)
            }),
        ),
        (
            "persistence",
            Box::new({
                let r = root.clone();
                move || persistence(&r)
            }),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
