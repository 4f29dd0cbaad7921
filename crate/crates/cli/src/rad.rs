use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use groundrl::attention::read_dump;
use groundrl::{aggregate, boxes_to_mask, rad, AttentionTensor, BoxSet};
use serde::{Deserialize, Serialize};

#[derive(Args)]
pub struct RadArgs {
    /// Attention dump: per record a little-endian u32 header
    /// (layers, heads, answer tokens, seq len, vs, ve, h, w) then f32 values.
    #[arg(long)]
    pub dump: PathBuf,
    /// JSONL with `image_width`, `image_height` and `boxes`, one line per dump record.
    #[arg(long)]
    pub boxes: PathBuf,
    /// Print each aggregated attention grid as an ASCII heatmap on stderr.
    #[arg(long)]
    pub heatmap: bool,
}

#[derive(Deserialize)]
struct BoxLine {
    image_width: f64,
    image_height: f64,
    boxes: BoxSet,
}

#[derive(Serialize)]
struct SampleRad {
    sample: usize,
    rad: f64,
    masked_patches: usize,
}

#[derive(Serialize)]
struct Cohort {
    samples: usize,
    cohort_mean: f64,
}

pub fn run(args: RadArgs) -> Result<()> {
    let dump = File::open(&args.dump).with_context(|| format!("cannot read {}", args.dump.display()))?;
    let tensors: Vec<AttentionTensor> =
        read_dump(BufReader::new(dump)).with_context(|| format!("malformed dump {}", args.dump.display()))?;
    let boxes_file = File::open(&args.boxes).with_context(|| format!("cannot read {}", args.boxes.display()))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(boxes_file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let b: BoxLine = serde_json::from_str(&line).with_context(|| format!("boxes line {}", i + 1))?;
        lines.push(b);
    }
    if lines.len() != tensors.len() {
        bail!("{} dump records but {} box lines", tensors.len(), lines.len());
    }

    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut sum = 0.0;
    for (i, (t, b)) in tensors.iter().zip(&lines).enumerate() {
        let grid = aggregate(t).with_context(|| format!("sample {i}"))?;
        let d = t.dims();
        let mask = boxes_to_mask(&b.boxes, (b.image_width, b.image_height), (d.h, d.w))
            .with_context(|| format!("sample {i}"))?;
        let r = rad(&grid, &mask)?;
        if args.heatmap {
            eprintln!("sample {i}:\n{}", grid.to_ascii());
        }
        sum += r;
        serde_json::to_writer(
            &mut out,
            &SampleRad {
                sample: i,
                rad: r,
                masked_patches: mask.count(),
            },
        )?;
        out.write_all(b"\n")?;
    }
    let n = tensors.len();
    serde_json::to_writer(
        &mut out,
        &Cohort {
            samples: n,
            cohort_mean: if n == 0 { 0.0 } else { sum / n as f64 },
        },
    )?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
