use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use groundrl::dataset::{self, VerifyFailure, CAPTION_WORD_BOUNDS};
use groundrl::BoxSet;
use serde::{Deserialize, Serialize};

#[derive(Args)]
pub struct ValidateArgs {
    /// Dataset JSONL file.
    pub path: PathBuf,
    /// Reference annotations: JSONL with `image_ref` and `boxes`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Minimum caption length in words.
    #[arg(long, default_value_t = CAPTION_WORD_BOUNDS.0)]
    pub min_words: usize,
    /// Maximum caption length in words.
    #[arg(long, default_value_t = CAPTION_WORD_BOUNDS.1)]
    pub max_words: usize,
    /// Exit nonzero when any record is malformed or fails a check.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Deserialize)]
struct ReferenceLine {
    image_ref: String,
    boxes: BoxSet,
}

#[derive(Serialize)]
struct Finding<'a> {
    line: usize,
    image_ref: &'a str,
    failures: &'a [VerifyFailure],
}

fn read_reference(path: &Path) -> Result<HashMap<String, BoxSet>> {
    let file = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ReferenceLine = serde_json::from_str(&line).with_context(|| format!("reference line {}", i + 1))?;
        if out.insert(r.image_ref.clone(), r.boxes).is_some() {
            bail!("reference line {}: duplicate image_ref '{}'", i + 1, r.image_ref);
        }
    }
    Ok(out)
}

pub fn validate(args: ValidateArgs) -> Result<()> {
    if args.min_words > args.max_words {
        bail!("--min-words {} exceeds --max-words {}", args.min_words, args.max_words);
    }
    let report = dataset::load::<f64>(&args.path)?;
    for d in &report.diagnostics {
        eprintln!("{d}");
    }
    let reference = args.reference.as_deref().map(read_reference).transpose()?;

    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let (mut failed, mut missing_ref) = (0, 0);
    for (s, &line) in report.samples.iter().zip(&report.sample_lines) {
        let ref_boxes = match &reference {
            Some(map) => {
                let b = map.get(&s.image_ref);
                missing_ref += b.is_none() as usize;
                b
            }
            None => None,
        };
        let outcome = dataset::verify(s, ref_boxes, (args.min_words, args.max_words));
        if !outcome.passed() {
            failed += 1;
            serde_json::to_writer(
                &mut out,
                &Finding {
                    line,
                    image_ref: &s.image_ref,
                    failures: &outcome.failures,
                },
            )?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;

    let n = report.samples.len();
    eprintln!(
        "{n} records parsed, {} passed, {failed} failed, {} malformed lines",
        n - failed,
        report.errors()
    );
    if missing_ref > 0 {
        eprintln!("{missing_ref} records have no reference annotation; box check skipped for them");
    }
    if args.strict && (failed > 0 || report.errors() > 0) {
        bail!("validation failed");
    }
    Ok(())
}

pub fn stats(path: &Path) -> Result<()> {
    let report = dataset::load::<f64>(path)?;
    for d in &report.diagnostics {
        eprintln!("{d}");
    }
    let st = dataset::stats(&report.samples)?;
    println!("{:<24} {:>8} {:>10} {:>10}", "source", "samples", "avg boxes", "avg words");
    for (src, s) in &st.per_source {
        println!("{src:<24} {:>8} {:>10.3} {:>10.3}", s.samples, s.avg_boxes, s.avg_caption_words);
    }
    println!("{:<24} {:>8} {:>10.3} {:>10.3}", "all", st.samples, st.avg_boxes, st.avg_caption_words);
    println!("{}", serde_json::to_string(&st)?);
    Ok(())
}
