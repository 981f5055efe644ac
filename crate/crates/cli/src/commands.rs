//! Subcommand implementations. Each takes a validated [`RunConfig`] and
//! writes its artifacts under `output.dir`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ewas_core::analysis::{export_stats, indexed_stats};
use ewas_core::data::{Dataset, Split};
use ewas_core::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use ewas_core::training::{evaluate, train_with, EvalReport, NamedAttack};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_LONG: &str = "eval.csv";
pub const EVAL_TABLE: &str = "eval_table.csv";
pub const ACTIVATIONS: &str = "activations.csv";

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_json() + "\n")?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Model> {
    match load_checkpoint(path) {
        Ok(ck) => Ok(ck.model),
        Err(ewas_core::Error::Io(source)) => Err(CliError::File {
            path: path.to_path_buf(),
            source,
        }),
        Err(e) => Err(e.into()),
    }
}

fn load_test(cfg: &RunConfig) -> CliResult<Dataset> {
    cfg.data.test.load(Split::Test)
}

/// Trains from scratch into `dir`: log, checkpoint and config snapshot.
fn train_into(cfg: &RunConfig, dir: &Path) -> CliResult<Model> {
    prepare_dir(dir, cfg)?;
    let train_set = cfg.data.train.load(Split::Train)?;
    let test_set = load_test(cfg)?;
    let mut model = Model::build(&cfg.model, cfg.seed)?;
    let mut log = csv::Writer::from_path(dir.join(TRAIN_LOG))?;
    let mut header_written = false;
    train_with(
        &mut model,
        &train_set,
        Some(&test_set),
        &cfg.train,
        |_, record| {
            if !header_written {
                log.write_record(record.csv_header())?;
                header_written = true;
            }
            log.write_record(record.csv_fields())?;
            log.flush()?;
            Ok(())
        },
    )?;
    let meta =
        CheckpointMeta::with_config_digest(cfg.train.epochs as u64, cfg.seed, &cfg.digest_json());
    save_checkpoint(&model, &meta, cfg.output.precision, dir.join(CHECKPOINT))?;
    Ok(model)
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<PathBuf> {
    train_into(cfg, &cfg.output.dir)?;
    Ok(cfg.output.dir.join(CHECKPOINT))
}

/// `Natural,<attack names...>` header and the matching accuracy row.
pub fn wide_row(report: &EvalReport) -> (Vec<String>, Vec<String>) {
    let mut header = vec!["Natural".to_string()];
    let mut row = vec![report.natural_accuracy.to_string()];
    for a in &report.attacks {
        header.push(a.name.clone());
        row.push(a.robust_accuracy.to_string());
    }
    (header, row)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> CliResult<EvalReport> {
    let model = load_model(checkpoint)?;
    prepare_dir(&cfg.output.dir, cfg)?;
    let test_set = load_test(cfg)?;
    let report = evaluate(&model, &test_set, &cfg.attack_presets, cfg.eval_batch_size)?;
    report.write_csv_file(cfg.output.dir.join(EVAL_LONG))?;
    let (header, row) = wide_row(&report);
    let mut w = csv::Writer::from_path(cfg.output.dir.join(EVAL_TABLE))?;
    w.write_record(&header)?;
    w.write_record(&row)?;
    w.flush()?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Training λ; one model trained per value.
    Lambda,
    /// EWAS insertion point; one model trained per position.
    Position,
    /// Evaluation-attack λ against a single trained model.
    #[value(name = "attack_lambda", alias = "attack-lambda")]
    AttackLambda,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::Position => "position",
            Axis::AttackLambda => "attack_lambda",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    /// `None` when training diverged.
    pub report: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
    pub table: PathBuf,
}

fn parse_lambdas(values: &[String]) -> CliResult<Vec<f64>> {
    values
        .iter()
        .map(|v| match v.trim().parse::<f64>() {
            Ok(x) if x >= 0.0 && x.is_finite() => Ok(x),
            _ => Err(CliError::Config(format!(
                "--values: `{v}` is not a nonnegative number"
            ))),
        })
        .collect()
}

fn base_insertion_points(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let mut bare = cfg.model.clone();
    bare.insertion_points.clear();
    Ok(Model::build(&bare, cfg.seed)?.insertion_points().to_vec())
}

/// Trains one sweep point; divergence becomes an empty row.
fn train_point(cfg: &RunConfig, dir: &Path, test_set: &Dataset) -> CliResult<Option<EvalReport>> {
    match train_into(cfg, dir) {
        Ok(model) => Ok(Some(evaluate(
            &model,
            test_set,
            &cfg.attack_presets,
            cfg.eval_batch_size,
        )?)),
        Err(CliError::Core(ewas_core::Error::NonFinite { epoch, batch })) => {
            eprintln!(
                "{}: training diverged at epoch {epoch}, batch {batch}",
                dir.display()
            );
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn point_dir(root: &Path, axis: Axis, i: usize, value: &str) -> PathBuf {
    let safe: String = value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    root.join(format!("ablate_{}", axis.name()))
        .join(format!("{i:02}_{safe}"))
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    axis: Axis,
    values: &[String],
    checkpoint: Option<&Path>,
) -> CliResult<Ablation> {
    let root = cfg.output.dir.clone();
    let test_set = load_test(cfg)?;
    let mut rows = Vec::new();
    match axis {
        Axis::Lambda => {
            if values.is_empty() {
                return Err(CliError::Config(
                    "--values: the lambda sweep needs at least one value".into(),
                ));
            }
            let lambdas = parse_lambdas(values)?;
            if lambdas.iter().any(|&l| l > 0.0) && cfg.model.insertion_points.is_empty() {
                return Err(CliError::Config(
                    "lambda > 0 requires model.insertion_points".into(),
                ));
            }
            prepare_dir(&root, cfg)?;
            for (i, (raw, lambda)) in values.iter().zip(lambdas).enumerate() {
                let mut point = cfg.clone();
                point.train.lambda = lambda;
                let dir = point_dir(&root, axis, i, raw);
                point.output.dir = dir.clone();
                rows.push(AblationRow {
                    value: raw.trim().to_string(),
                    report: train_point(&point, &dir, &test_set)?,
                });
            }
        }
        Axis::Position => {
            let available = base_insertion_points(cfg)?;
            let positions: Vec<String> = if values.is_empty() || values == ["all"] {
                available.clone()
            } else {
                values.iter().map(|v| v.trim().to_string()).collect()
            };
            if let Some(bad) = positions.iter().find(|p| !available.contains(p)) {
                return Err(CliError::Config(format!(
                    "--values: unknown insertion point `{bad}`; valid points: [{}]",
                    available.join(", ")
                )));
            }
            prepare_dir(&root, cfg)?;
            for (i, pos) in positions.iter().enumerate() {
                let mut point = cfg.clone();
                point.model.insertion_points = vec![pos.clone()];
                let dir = point_dir(&root, axis, i, pos);
                point.output.dir = dir.clone();
                rows.push(AblationRow {
                    value: pos.clone(),
                    report: train_point(&point, &dir, &test_set)?,
                });
            }
        }
        Axis::AttackLambda => {
            if values.is_empty() {
                return Err(CliError::Config(
                    "--values: the attack_lambda sweep needs at least one value".into(),
                ));
            }
            let lambdas = parse_lambdas(values)?;
            let model = match checkpoint {
                Some(path) => load_model(path)?,
                None => {
                    prepare_dir(&root, cfg)?;
                    train_into(cfg, &root.join("ablate_attack_lambda").join("model"))?
                }
            };
            if lambdas.iter().any(|&l| l > 0.0) && !model.has_ewas() {
                return Err(CliError::Config(
                    "attack_lambda > 0 requires a model with EWAS modules".into(),
                ));
            }
            prepare_dir(&root, cfg)?;
            for (raw, lambda) in values.iter().zip(lambdas) {
                let attacks: Vec<NamedAttack> = cfg
                    .attack_presets
                    .iter()
                    .map(|a| NamedAttack {
                        name: a.name.clone(),
                        attack: a.attack.clone().with_lambda(lambda),
                    })
                    .collect();
                rows.push(AblationRow {
                    value: raw.trim().to_string(),
                    report: Some(evaluate(&model, &test_set, &attacks, cfg.eval_batch_size)?),
                });
            }
        }
    }
    let table = root.join(format!("ablation_{}.csv", axis.name()));
    let mut w = csv::Writer::from_path(&table)?;
    let mut header = vec![axis.name().to_string(), "status".into(), "Natural".into()];
    header.extend(cfg.attack_presets.iter().map(|a| a.name.clone()));
    w.write_record(&header)?;
    for row in &rows {
        let mut fields = vec![row.value.clone()];
        match &row.report {
            Some(r) => {
                fields.push("ok".into());
                fields.extend(wide_row(r).1);
            }
            None => {
                fields.push("non_finite".into());
                fields.extend(std::iter::repeat_n(String::new(), header.len() - 2));
            }
        }
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(Ablation { axis, rows, table })
}

pub fn cmd_export_activations(cfg: &RunConfig, checkpoint: &Path) -> CliResult<PathBuf> {
    let model = load_model(checkpoint)?;
    let hooks = model.hooks();
    if !hooks.contains(&cfg.analysis.hook) {
        return Err(CliError::Config(format!(
            "analysis.hook: unknown hook `{}`; available: [{}]",
            cfg.analysis.hook,
            hooks.join(", ")
        )));
    }
    prepare_dir(&cfg.output.dir, cfg)?;
    let test_set = load_test(cfg)?;
    let attack = match &cfg.analysis.attack {
        Some(name) => Some(cfg.preset(name)?.attack.clone()),
        None => None,
    };
    let classes: Vec<usize> = match cfg.analysis.class {
        Some(c) => vec![c],
        None => (0..test_set.num_classes()).collect(),
    };
    let mut pairs = Vec::new();
    for class in classes {
        let idx = test_set.class_indices(class);
        if idx.is_empty() {
            if cfg.analysis.class.is_some() {
                return Err(CliError::Config(format!(
                    "analysis.class: no test samples of class {class}"
                )));
            }
            continue;
        }
        pairs.extend(indexed_stats(
            &model,
            &test_set,
            &idx,
            Some(class),
            &cfg.analysis.hook,
            attack.as_ref(),
            cfg.analysis.threshold_scope,
            cfg.eval_batch_size,
        )?);
    }
    let path = cfg.output.dir.join(ACTIVATIONS);
    export_stats(&pairs, BufWriter::new(File::create(&path)?))?;
    Ok(path)
}
