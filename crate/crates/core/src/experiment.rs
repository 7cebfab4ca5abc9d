//! Benchmark grid runner: strategies x F sizes x seeds, reporting held-out
//! mIOU with per-row medians.
//!
//! Each cell regenerates its data from the cell seed, splits F/W, trains the
//! requested variant and evaluates on a freshly generated held-out set. The
//! report and all checkpoints are byte-deterministic; wall-clock times go to
//! separate timing files that are excluded from determinism guarantees.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, split_dataset, DatasetSplit, Sample, SceneConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalFlags, IouReport};
use crate::models::{save_model, ModelKind};
use crate::seeding::{self, salt};
use crate::train::{
    run_protocol_conv, train_ancillary, train_primary, ProtocolConfig, TargetMode, TrainConfig, TrainReport,
};

/// Per-stage step counts for conv-protocol cells; each defaults to the grid's
/// main step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSteps {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub scene: SceneConfig,
    /// Images generated per seed for the training pool (F + W).
    pub train_images: usize,
    /// Images generated per seed for held-out evaluation.
    pub eval_images: usize,
    pub f_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Strategy rows, in report order.
    pub strategies: Vec<TargetMode>,
    /// Adds the box-conditioned model row above the strategy rows.
    pub include_ancillary: bool,
    /// Adds a primary-trained-on-F-alone row below the strategy rows.
    pub include_supervised_baseline: bool,
    pub train: TrainConfig,
    pub protocol: Option<StageSteps>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            scene: SceneConfig::default(),
            train_images: 2000,
            eval_images: 200,
            f_sizes: vec![50, 200],
            seeds: vec![1, 2, 3],
            strategies: vec![
                TargetMode::NoSelfCorrection,
                TargetMode::LinearSelfCorrection,
                TargetMode::ConvSelfCorrection,
            ],
            include_ancillary: true,
            include_supervised_baseline: true,
            train: TrainConfig::default(),
            protocol: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.f_sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("ExperimentSpec", "need at least one F size and one seed"));
        }
        if self.f_sizes.iter().any(|&f| f == 0 || f > self.train_images) {
            return Err(Error::invalid("ExperimentSpec", "F sizes must be in 1..=train_images"));
        }
        if self.train.arch.num_classes != self.scene.num_classes
            || self.train.arch.height != self.scene.height
            || self.train.arch.width != self.scene.width
        {
            return Err(Error::invalid(
                "ExperimentSpec",
                "arch (num_classes, height, width) must match the scene config",
            ));
        }
        Ok(())
    }

    fn protocol_config(&self, train: TrainConfig) -> ProtocolConfig {
        match self.protocol {
            Some(s) => ProtocolConfig {
                stage1_steps: s.stage1,
                stage2_steps: s.stage2,
                stage3_steps: s.stage3,
                train,
            },
            None => ProtocolConfig::uniform(train),
        }
    }

    /// Row labels in report order.
    pub fn rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        if self.include_ancillary {
            rows.push("ancillary".to_string());
        }
        rows.extend(self.strategies.iter().map(|s| s.to_string()));
        if self.include_supervised_baseline {
            rows.push("supervised".to_string());
        }
        rows
    }
}

/// The training and evaluation data of one (seed) cell, regenerated
/// deterministically from the spec.
pub fn cell_datasets(spec: &ExperimentSpec, f_size: usize, seed: u64) -> Result<(DatasetSplit, Vec<Sample>)> {
    let mut scene = spec.scene.clone();
    scene.num_images = spec.train_images;
    let pool = generate_dataset(&scene, seeding::derive(seed, salt::TRAIN_DATA))?;
    let split = split_dataset(&pool, f_size, seed)?;
    scene.num_images = spec.eval_images;
    let eval_set = generate_dataset(&scene, seeding::derive(seed, salt::EVAL_DATA))?;
    Ok((split, eval_set))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: String,
    pub f_size: usize,
    pub seed: u64,
    pub miou: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianEntry {
    pub row: String,
    pub f_size: usize,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<String>,
    pub f_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub medians: Vec<MedianEntry>,
}

impl ExperimentReport {
    pub fn median(&self, row: &str, f_size: usize) -> Option<f64> {
        self.medians
            .iter()
            .find(|m| m.row == row && m.f_size == f_size)
            .and_then(|m| m.miou)
    }

    pub fn cell(&self, row: &str, f_size: usize, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.row == row && c.f_size == f_size && c.seed == seed)
    }
}

fn median_of(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

struct CellOutput {
    miou: f64,
    report: Option<TrainReport>,
    checkpoint: Option<(ModelKind, crate::params::ParamSet, Option<crate::params::ParamSet>)>,
}

fn run_row(
    spec: &ExperimentSpec,
    row: &str,
    split: &DatasetSplit,
    eval_set: &[Sample],
    theta: Option<&crate::params::ParamSet>,
    cfg: &TrainConfig,
) -> Result<CellOutput> {
    let flags = EvalFlags::default();
    let arch = &cfg.arch;
    let score = |r: &IouReport| r.miou();
    match row {
        "ancillary" => {
            let theta = theta.expect("ancillary row needs theta");
            let r = evaluate(ModelKind::Ancillary, arch, theta, eval_set, &flags)?;
            Ok(CellOutput {
                miou: score(&r),
                report: None,
                checkpoint: Some((ModelKind::Ancillary, theta.clone(), None)),
            })
        }
        "supervised" => {
            let theta = theta.expect("baseline shares theta");
            let out = train_primary(TargetMode::NoSelfCorrection, &split.fully, &[], theta, None, cfg)?;
            let r = evaluate(ModelKind::Primary, arch, &out.phi, eval_set, &flags)?;
            Ok(CellOutput {
                miou: score(&r),
                report: Some(out.report),
                checkpoint: Some((ModelKind::Primary, out.phi, None)),
            })
        }
        "conv" => {
            let pcfg = spec.protocol_config(cfg.clone());
            let out = run_protocol_conv(&split.fully, &split.weak, &pcfg)?;
            let r = evaluate(ModelKind::Primary, arch, &out.phi, eval_set, &flags)?;
            let [_, _, stage3] = out.reports;
            Ok(CellOutput {
                miou: score(&r),
                report: Some(stage3),
                checkpoint: Some((ModelKind::Primary, out.phi, Some(out.lambda))),
            })
        }
        other => {
            let mode: TargetMode = other.parse()?;
            let theta = theta.expect("strategy rows need theta");
            let out = train_primary(mode, &split.fully, &split.weak, theta, None, cfg)?;
            let r = evaluate(ModelKind::Primary, arch, &out.phi, eval_set, &flags)?;
            Ok(CellOutput {
                miou: score(&r),
                report: Some(out.report),
                checkpoint: Some((ModelKind::Primary, out.phi, None)),
            })
        }
    }
}

fn write_cell(
    out_dir: &Path,
    row: &str,
    f_size: usize,
    seed: u64,
    arch: &crate::models::ArchConfig,
    cell: &CellOutput,
) -> Result<()> {
    let dir = out_dir.join(format!("cells/f{f_size}_s{seed}/{row}"));
    fs::create_dir_all(&dir)?;
    if let Some((kind, params, lambda)) = &cell.checkpoint {
        save_model(&dir, *kind, arch, params)?;
        if let Some(lam) = lambda {
            save_model(&dir.join("selfcorr"), ModelKind::SelfCorr, arch, lam)?;
        }
    }
    if let Some(report) = &cell.report {
        report.write_jsonl(&dir.join("train_log.jsonl"))?;
        let timing = serde_json::json!({ "wall_clock_secs": report.wall_clock_secs });
        fs::write(dir.join("timing.json"), timing.to_string() + "\n")?;
    }
    Ok(())
}

/// Execute the grid. A failure inside one cell is recorded in that cell's
/// result and the grid continues. With `out_dir` set, writes `report.json`,
/// `report.txt` and per-cell checkpoints/logs.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    spec.validate()?;
    let rows = spec.rows();
    let mut cells = Vec::new();

    for &f_size in &spec.f_sizes {
        for &seed in &spec.seeds {
            let cfg = TrainConfig { seed, ..spec.train.clone() };
            let cell_ctx = (|| -> Result<(DatasetSplit, Vec<Sample>, Option<crate::params::ParamSet>)> {
                let (split, eval_set) = cell_datasets(spec, f_size, seed)?;
                // The full-F ancillary model is shared by every row except
                // conv, which trains its own on half of F inside the
                // protocol.
                let needs_theta = rows.iter().any(|r| r != "conv");
                let theta = if needs_theta {
                    Some(train_ancillary(&split.fully, &cfg)?.theta)
                } else {
                    None
                };
                Ok((split, eval_set, theta))
            })();

            match cell_ctx {
                Ok((split, eval_set, theta)) => {
                    for row in &rows {
                        let outcome = run_row(spec, row, &split, &eval_set, theta.as_ref(), &cfg);
                        match outcome {
                            Ok(cell) => {
                                if let Some(dir) = out_dir {
                                    write_cell(dir, row, f_size, seed, &cfg.arch, &cell)?;
                                }
                                cells.push(CellResult {
                                    row: row.clone(),
                                    f_size,
                                    seed,
                                    miou: Some(cell.miou),
                                    error: None,
                                });
                            }
                            Err(e) => cells.push(CellResult {
                                row: row.clone(),
                                f_size,
                                seed,
                                miou: None,
                                error: Some(e.to_string()),
                            }),
                        }
                    }
                }
                Err(e) => {
                    for row in &rows {
                        cells.push(CellResult {
                            row: row.clone(),
                            f_size,
                            seed,
                            miou: None,
                            error: Some(format!("cell setup failed: {e}")),
                        });
                    }
                }
            }
        }
    }

    let mut medians = Vec::new();
    for row in &rows {
        for &f_size in &spec.f_sizes {
            let values: Vec<f64> = cells
                .iter()
                .filter(|c| &c.row == row && c.f_size == f_size)
                .filter_map(|c| c.miou)
                .collect();
            medians.push(MedianEntry {
                row: row.clone(),
                f_size,
                miou: median_of(values),
            });
        }
    }

    let report = ExperimentReport {
        name: spec.name.clone(),
        rows,
        f_sizes: spec.f_sizes.clone(),
        seeds: spec.seeds.clone(),
        cells,
        medians,
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        fs::write(dir.join("report.txt"), format_table(&report))?;
    }
    Ok(report)
}

/// Table shaped like the ablation grids: one row per model variant, one
/// column per F size, median mIOU in the cells.
pub fn format_table(report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{} (median held-out mIOU over {} seeds)\n", report.name, report.seeds.len()));
    let label_w = report.rows.iter().map(|r| r.len()).max().unwrap_or(8).max(10);
    out.push_str(&format!("{:label_w$}", "F size"));
    for f in &report.f_sizes {
        out.push_str(&format!(" {f:>9}"));
    }
    out.push('\n');
    for row in &report.rows {
        out.push_str(&format!("{row:label_w$}"));
        for &f in &report.f_sizes {
            match report.median(row, f) {
                Some(v) => out.push_str(&format!(" {v:>9.4}")),
                None => out.push_str(&format!(" {:>9}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

/// Load checkpoint paths written for one cell (primary model directory).
pub fn cell_checkpoint_dir(out_dir: &Path, row: &str, f_size: usize, seed: u64) -> PathBuf {
    out_dir.join(format!("cells/f{f_size}_s{seed}/{row}"))
}
