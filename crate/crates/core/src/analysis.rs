//! Channel activation statistics at a named hook, for natural versus
//! adversarial inputs.
//!
//! Frequency counts, per channel, the fraction of samples in which the
//! channel holds at least one unit above 1% of the reference maximum.
//! Magnitude averages each channel's per-sample maximum. Channels are
//! ranked by the natural statistic and adversarial rows reuse that rank.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackConfig};
use crate::data::{sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::{Graph, Tensor};

/// Fraction of the maximum a unit must strictly exceed to count.
pub const VALID_FRACTION: f64 = 0.01;

/// Which maximum the validity threshold is relative to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    /// Maximum over the sample's own activation entries.
    #[default]
    PerSample,
    /// Maximum over every entry of every sample.
    PerDataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    Frequency,
    Magnitude,
}

impl StatisticKind {
    fn as_str(self) -> &'static str {
        match self {
            StatisticKind::Frequency => "frequency",
            StatisticKind::Magnitude => "magnitude",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Natural,
    Adversarial,
}

/// One per-channel statistic over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub kind: StatisticKind,
    pub input: InputKind,
    /// `None` when samples of every class were pooled.
    pub class: Option<usize>,
    pub layer: String,
    pub values: Vec<f64>,
}

fn check_samples(activations: &[Tensor]) -> Result<usize> {
    let first = activations
        .first()
        .ok_or_else(|| Error::Input("activation statistics need at least one sample".into()))?;
    let &[c, _, _] = first.shape() else {
        return Err(Error::shape(
            "activation statistics",
            format!("expected C×H×W, got {:?}", first.shape()),
        ));
    };
    if let Some(bad) = activations.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::shape(
            "activation statistics",
            format!(
                "mixed sample shapes {:?} and {:?}",
                first.shape(),
                bad.shape()
            ),
        ));
    }
    Ok(c)
}

fn abs_max(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// Per-channel fraction of samples with at least one valid unit.
pub fn activation_frequency(activations: &[Tensor], scope: ThresholdScope) -> Result<Vec<f64>> {
    let c = check_samples(activations)?;
    let global = activations
        .iter()
        .map(|t| abs_max(t.data()))
        .fold(0.0, f64::max);
    let mut counts = vec![0usize; c];
    for t in activations {
        let reference = match scope {
            ThresholdScope::PerSample => abs_max(t.data()),
            ThresholdScope::PerDataset => global,
        };
        let threshold = VALID_FRACTION * reference;
        let per = t.numel() / c;
        for (ch, plane) in t.data().chunks(per).enumerate() {
            if plane.iter().any(|v| v.abs() > threshold) {
                counts[ch] += 1;
            }
        }
    }
    let n = activations.len() as f64;
    Ok(counts.into_iter().map(|k| k as f64 / n).collect())
}

/// Per-channel mean over samples of the channel's maximum magnitude.
pub fn activation_magnitude(activations: &[Tensor]) -> Result<Vec<f64>> {
    let c = check_samples(activations)?;
    let mut sums = vec![0.0; c];
    for t in activations {
        let per = t.numel() / c;
        for (s, plane) in sums.iter_mut().zip(t.data().chunks(per)) {
            *s += abs_max(plane);
        }
    }
    let n = activations.len() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// Channel indices by descending value; equal values keep index order.
pub fn channel_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Natural statistics plus optional adversarial counterpart, sharing the
/// natural ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsPair {
    pub natural: ActivationStats,
    pub adversarial: Option<ActivationStats>,
}

impl StatsPair {
    pub fn new(natural: ActivationStats, adversarial: Option<ActivationStats>) -> Result<Self> {
        if let Some(a) = &adversarial {
            if a.values.len() != natural.values.len() || a.kind != natural.kind {
                return Err(Error::Input(format!(
                    "adversarial {} stats have {} channels, natural {} stats have {}",
                    a.kind.as_str(),
                    a.values.len(),
                    natural.kind.as_str(),
                    natural.values.len()
                )));
            }
        }
        Ok(Self {
            natural,
            adversarial,
        })
    }

    /// Ranking computed from the natural statistic only.
    pub fn order(&self) -> Vec<usize> {
        channel_order(&self.natural.values)
    }
}

#[derive(Debug, Deserialize)]
struct StatsRow {
    rank: usize,
    channel_index: usize,
    natural_value: f64,
    #[serde(default)]
    adversarial_value: Option<f64>,
    statistic_kind: StatisticKind,
    class: String,
    layer: String,
}

fn class_label(class: Option<usize>) -> String {
    class.map(|c| c.to_string()).unwrap_or_else(|| "all".into())
}

/// Writes the pairs as CSV with one row per channel, natural rank order.
/// The `adversarial_value` column is present only if some pair has
/// adversarial statistics.
pub fn export_stats<W: Write>(pairs: &[StatsPair], out: W) -> Result<()> {
    let with_adv = pairs.iter().any(|p| p.adversarial.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["rank", "channel_index", "natural_value"];
    if with_adv {
        header.push("adversarial_value");
    }
    header.extend(["statistic_kind", "class", "layer"]);
    w.write_record(&header)?;
    for pair in pairs {
        for (rank, ch) in pair.order().into_iter().enumerate() {
            let mut row = vec![
                rank.to_string(),
                ch.to_string(),
                pair.natural.values[ch].to_string(),
            ];
            if with_adv {
                row.push(
                    pair.adversarial
                        .as_ref()
                        .map(|a| a.values[ch].to_string())
                        .unwrap_or_default(),
                );
            }
            row.push(pair.natural.kind.as_str().into());
            row.push(class_label(pair.natural.class));
            row.push(pair.natural.layer.clone());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses CSV written by [`export_stats`].
pub fn parse_stats<R: Read>(input: R) -> Result<Vec<StatsPair>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut groups: Vec<((StatisticKind, String, String), Vec<StatsRow>)> = Vec::new();
    for row in reader.deserialize() {
        let row: StatsRow = row?;
        let key = (row.statistic_kind, row.class.clone(), row.layer.clone());
        match groups.last_mut() {
            Some((k, rows)) if *k == key && row.rank == rows.len() => rows.push(row),
            _ => groups.push((key, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|((kind, class, layer), rows)| {
            let n = rows.len();
            let class = if class == "all" {
                None
            } else {
                Some(
                    class
                        .parse()
                        .map_err(|_| Error::Input(format!("bad class `{class}`")))?,
                )
            };
            let mut natural = vec![f64::NAN; n];
            let has_adv = rows.iter().all(|r| r.adversarial_value.is_some());
            let mut adversarial = vec![f64::NAN; n];
            for r in &rows {
                if r.channel_index >= n {
                    return Err(Error::Input(format!(
                        "channel index {} out of {n}",
                        r.channel_index
                    )));
                }
                natural[r.channel_index] = r.natural_value;
                if let Some(a) = r.adversarial_value {
                    adversarial[r.channel_index] = a;
                }
            }
            let stats = |input, values| ActivationStats {
                kind,
                input,
                class,
                layer: layer.clone(),
                values,
            };
            StatsPair::new(
                stats(InputKind::Natural, natural),
                has_adv.then(|| stats(InputKind::Adversarial, adversarial)),
            )
        })
        .collect()
}

/// Activations at `hook` for the given samples, one `C×H×W` tensor each.
/// With an attack, the samples are perturbed first.
pub fn collect_activations(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    hook: &str,
    attack: Option<&AttackConfig>,
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    if !model.hooks().iter().any(|h| h == hook) {
        return Err(Error::Config(format!(
            "unknown hook `{hook}`; available: [{}]",
            model.hooks().join(", ")
        )));
    }
    let mut out = Vec::with_capacity(indices.len());
    for (bi, chunk) in sequential_batches(indices.len(), batch_size)
        .iter()
        .enumerate()
    {
        let idx: Vec<usize> = chunk.iter().map(|&i| indices[i]).collect();
        let (mut x, labels) = data.gather(&idx);
        if let Some(a) = attack {
            let cfg = a.clone().with_seed(a.seed.wrapping_add(bi as u64));
            x = run_attack(model, &x, &labels, &cfg)?.inputs;
        }
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let pass = model.forward(
            &mut g,
            xv,
            &ForwardOptions {
                capture: true,
                ..ForwardOptions::inference()
            },
        )?;
        let (_, z) = pass
            .taps
            .iter()
            .find(|(name, _)| name == hook)
            .expect("hook is captured");
        let t = g.to_tensor(*z);
        let &[b, c, h, w] = t.shape() else {
            return Err(Error::shape(
                "collect_activations",
                format!("hook `{hook}` is {:?}", t.shape()),
            ));
        };
        for s in 0..b {
            let n = c * h * w;
            out.push(Tensor::new(
                [c, h, w],
                t.data()[s * n..(s + 1) * n].to_vec(),
            )?);
        }
    }
    Ok(out)
}

/// Frequency and magnitude pairs for the samples `indices` of one class,
/// natural versus adversarial under `attack`.
#[allow(clippy::too_many_arguments)]
pub fn indexed_stats(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    class: Option<usize>,
    hook: &str,
    attack: Option<&AttackConfig>,
    scope: ThresholdScope,
    batch_size: usize,
) -> Result<Vec<StatsPair>> {
    let nat = collect_activations(model, data, indices, hook, None, batch_size)?;
    let adv = match attack {
        Some(a) => Some(collect_activations(
            model,
            data,
            indices,
            hook,
            Some(a),
            batch_size,
        )?),
        None => None,
    };
    let make = |kind, input, values| ActivationStats {
        kind,
        input,
        class,
        layer: hook.to_string(),
        values,
    };
    let freq = |a: &[Tensor]| activation_frequency(a, scope);
    let mut pairs = Vec::with_capacity(2);
    for (kind, stat) in [
        (
            StatisticKind::Frequency,
            &freq as &dyn Fn(&[Tensor]) -> Result<Vec<f64>>,
        ),
        (StatisticKind::Magnitude, &activation_magnitude),
    ] {
        let adversarial = match &adv {
            Some(a) => Some(make(kind, InputKind::Adversarial, stat(a)?)),
            None => None,
        };
        pairs.push(StatsPair::new(
            make(kind, InputKind::Natural, stat(&nat)?),
            adversarial,
        )?);
    }
    Ok(pairs)
}

/// [`indexed_stats`] for every class present in `data`, in class order.
pub fn class_stats(
    model: &Model,
    data: &Dataset,
    hook: &str,
    attack: Option<&AttackConfig>,
    scope: ThresholdScope,
    batch_size: usize,
) -> Result<Vec<StatsPair>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in data.labels().iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for (class, idx) in by_class {
        pairs.extend(indexed_stats(
            model,
            data,
            &idx,
            Some(class),
            hook,
            attack,
            scope,
            batch_size,
        )?);
    }
    Ok(pairs)
}
