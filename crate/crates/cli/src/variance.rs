use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use groundrl::variance::diversification_report;
use groundrl::{RewardSampleMatrix, RewardWeights, COMPONENT_NAMES};
use serde::Deserialize;

#[derive(Clone, Copy, ValueEnum)]
pub enum InputFormat {
    /// Training log with per-rollout rewards; groups are steps.
    Log,
    /// CSV with columns caption, bbox, acc, format and optional group.
    Csv,
}

#[derive(Args)]
pub struct VarianceArgs {
    /// Training log (JSONL) or reward-sample CSV.
    pub input: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<InputFormat>,
    /// Weights of the composite reward.
    #[arg(long, default_value = "equal")]
    pub weights: RewardWeights,
    /// Single-channel baseline: caption, bbox, acc or format.
    #[arg(long, default_value = "acc")]
    pub baseline: String,
}

fn baseline_index(name: &str) -> Result<usize> {
    Ok(match name.trim().to_ascii_lowercase().as_str() {
        "caption" | "r_caption" | "0" => 0,
        "bbox" | "r_bbox" | "1" => 1,
        "acc" | "accuracy" | "r_acc" | "2" => 2,
        "format" | "r_format" | "3" => 3,
        other => bail!("unknown baseline channel '{other}' (caption, bbox, acc, format)"),
    })
}

#[derive(Deserialize)]
struct LogLine {
    step: usize,
    #[serde(default)]
    rollout_rewards: Vec<[f64; 4]>,
}

fn read_log(path: &Path) -> Result<RewardSampleMatrix> {
    let file = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogLine = serde_json::from_str(&line).with_context(|| format!("log line {}", i + 1))?;
        for r in rec.rollout_rewards {
            rows.push(r.to_vec());
            groups.push(rec.step.to_string());
        }
    }
    if rows.is_empty() {
        bail!("{} has no per-rollout rewards", path.display());
    }
    Ok(RewardSampleMatrix::new(rows, Some(groups))?)
}

fn read_csv(path: &Path) -> Result<RewardSampleMatrix> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let find = |names: &[&str]| headers.iter().position(|h| names.contains(&h.trim().to_ascii_lowercase().as_str()));
    let cols = [
        find(&["caption", "r_caption"]),
        find(&["bbox", "r_bbox"]),
        find(&["acc", "accuracy", "r_acc"]),
        find(&["format", "r_format"]),
    ];
    let mut idx = [0; 4];
    for (k, c) in cols.iter().enumerate() {
        idx[k] = c.with_context(|| format!("missing column '{}'", COMPONENT_NAMES[k]))?;
    }
    let group_col = find(&["group"]);
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = idx
            .iter()
            .map(|&c| {
                let v = rec.get(c).unwrap_or("");
                v.trim().parse::<f64>().with_context(|| format!("row {}: '{v}' is not a number", i + 2))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
        if let Some(g) = group_col {
            groups.push(rec.get(g).unwrap_or("").to_string());
        }
    }
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    let groups = group_col.map(|_| groups);
    Ok(RewardSampleMatrix::new(rows, groups)?)
}

pub fn run(args: VarianceArgs) -> Result<()> {
    let format = args.format.unwrap_or_else(|| {
        match args.input.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => InputFormat::Csv,
            _ => InputFormat::Log,
        }
    });
    let samples = match format {
        InputFormat::Log => read_log(&args.input)?,
        InputFormat::Csv => read_csv(&args.input)?,
    };
    let baseline = baseline_index(&args.baseline)?;
    let weights = args.weights.as_array();
    let report = diversification_report(&samples, &weights, baseline)?;

    println!("samples {}", samples.num_rows());
    println!("{:<10} {:>8} {:>12}", "channel", "weight", "variance");
    for k in 0..4 {
        println!("{:<10} {:>8.4} {:>12.6}", COMPONENT_NAMES[k], weights[k], report.component_variances[k]);
    }
    println!("covariance");
    for row in &report.covariance {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>12.6}")).collect();
        println!("  {}", cells.join(" "));
    }
    println!("composite variance {:.6}", report.composite_variance);
    println!("baseline ({}) variance {:.6}", COMPONENT_NAMES[baseline], report.baseline_variance);
    if let Some(s) = &report.split {
        println!(
            "total {:.6} = within-group {:.6} + between-group {:.6} ({} groups)",
            s.total, s.intra, s.inter, s.groups
        );
    }
    println!(">> reduction ratio {:.4}", report.reduction_ratio);
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
