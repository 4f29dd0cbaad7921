use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use groundrl::{score_raw, BoxSet, GoldTarget, OutputMode, RewardBreakdown, RewardWeights, COMPONENT_NAMES};
use serde::{Deserialize, Serialize};

#[derive(Args)]
pub struct ScoreArgs {
    /// Rollout JSONL file.
    pub rollouts: PathBuf,
    /// Reward weights: four comma-separated values or a preset
    /// (equal, accuracy-only, bbox-only).
    #[arg(long, default_value = "equal")]
    pub weights: RewardWeights,
    /// Field order for records without their own `mode`.
    #[arg(long, default_value = "caption-first")]
    pub mode: OutputMode,
}

#[derive(Deserialize)]
struct RolloutLine {
    id: String,
    raw: String,
    gold_caption: String,
    gold_boxes: BoxSet,
    gold_answer: String,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    group: Option<String>,
}

#[derive(Serialize)]
struct Scored<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    group: Option<&'a str>,
    #[serde(flatten)]
    breakdown: RewardBreakdown,
}

#[derive(Serialize)]
struct Failed<'a> {
    line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<&'a str>,
    error: String,
}

fn score_line(line: &str, args: &ScoreArgs) -> std::result::Result<(RolloutLine, RewardBreakdown), String> {
    let r: RolloutLine = serde_json::from_str(line).map_err(|e| format!("invalid record: {e}"))?;
    let mode = match &r.mode {
        Some(m) => m.parse::<OutputMode>().map_err(|e| e.to_string())?,
        None => args.mode,
    };
    let gold = GoldTarget {
        caption: r.gold_caption.clone(),
        boxes: r.gold_boxes.clone(),
        answer: r.gold_answer.clone(),
    };
    let b = score_raw(&r.raw, &gold, args.weights, mode);
    Ok((r, b))
}

/// Best-effort id of a line that failed to parse as a full record.
fn salvage_id(line: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    v.get("id")?.as_str().map(str::to_owned)
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

pub fn run(args: ScoreArgs) -> Result<()> {
    let file = File::open(&args.rollouts).with_context(|| format!("cannot read {}", args.rollouts.display()))?;
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut sums = [0.0; 4];
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut failed = 0usize;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.context("read error")?;
        if line.trim().is_empty() {
            continue;
        }
        match score_line(&line, &args) {
            Ok((r, b)) => {
                for (s, c) in sums.iter_mut().zip(b.components()) {
                    *s += c;
                }
                total += b.total;
                scored += 1;
                if let Some(g) = &r.group {
                    groups.entry(g.clone()).or_default().push(b.total);
                }
                let rec = Scored {
                    id: &r.id,
                    group: r.group.as_deref(),
                    breakdown: b,
                };
                serde_json::to_writer(&mut out, &rec)?;
            }
            Err(error) => {
                failed += 1;
                eprintln!("line {}: {error}", i + 1);
                let id = salvage_id(&line);
                serde_json::to_writer(
                    &mut out,
                    &Failed {
                        line: i + 1,
                        id: id.as_deref(),
                        error,
                    },
                )?;
            }
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;

    eprintln!("scored {scored} rollouts, {failed} unreadable");
    if scored > 0 {
        let n = scored as f64;
        for (name, s) in COMPONENT_NAMES.iter().zip(sums) {
            eprintln!("  mean {name:<8} {:.6}", s / n);
        }
        eprintln!("  mean total    {:.6}", total / n);
    }
    if !groups.is_empty() {
        eprintln!("per-group total reward variance:");
        let mut acc = 0.0;
        for (g, totals) in &groups {
            let v = population_variance(totals);
            acc += v;
            eprintln!("  {g:<16} n={:<4} var={v:.6}", totals.len());
        }
        eprintln!("  mean over {} groups: {:.6}", groups.len(), acc / groups.len() as f64);
    }
    Ok(())
}
