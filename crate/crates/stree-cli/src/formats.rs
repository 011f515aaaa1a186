//! On-disk formats: model configs, tree preset files, and the bench CSV.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use stree_core::cost::FitReport;
use stree_core::decode::{GenStats, TreeShape};
use stree_core::model::ModelConfig;

/// Loads a model config from JSON.
pub fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading model config {}", path.display()))?;
    let config: ModelConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing model config {}", path.display()))?;
    Ok(config)
}

/// A tree shape on disk: parents with `null` for the root, plus a name and
/// a free-text label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreePresetFile {
    pub name: String,
    pub parent: Vec<Option<usize>>,
    pub label: String,
}

impl TreePresetFile {
    pub fn shape(&self) -> TreeShape {
        TreeShape {
            parent: self.parent.clone(),
        }
    }
}

pub fn read_tree_preset(path: &Path) -> Result<TreePresetFile> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading tree preset {}", path.display()))?;
    let preset: TreePresetFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing tree preset {}", path.display()))?;
    if preset.parent.is_empty() || preset.parent[0].is_some() {
        bail!(
            "tree preset {}: first entry must be the root (null parent)",
            path.display()
        );
    }
    for (i, p) in preset.parent.iter().enumerate().skip(1) {
        match p {
            None => bail!("tree preset {}: node {i} is a second root", path.display()),
            Some(j) if *j >= i => bail!(
                "tree preset {}: node {i} references later parent {j}",
                path.display()
            ),
            _ => {}
        }
    }
    Ok(preset)
}

/// What `stree generate` reports, one run per document.
#[derive(Debug, Clone, Serialize)]
pub struct GenerateReport {
    pub mode: String,
    pub draft: String,
    pub verifier: String,
    pub temperature: f64,
    pub seed: u64,
    pub prompt: Vec<u32>,
    pub output: Vec<u32>,
    pub stats: GenStats,
}

/// What `stree analyze` reports: the fitted cost model and, when two sizes
/// are given, the acceptance-length ratio that makes the larger tree pay.
#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub series: String,
    pub fit: FitReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<RatioReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioReport {
    pub n1: usize,
    pub n2: usize,
    pub required_tau_ratio: f64,
}

/// One bench table row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub depth: usize,
    pub packed_tokens: usize,
    pub unrolled_tokens: usize,
    pub packed_ms: f64,
    pub unrolled_ms: f64,
}

pub const BENCH_CSV_HEADER: &str = "depth,packed_tokens,unrolled_tokens,packed_ms,unrolled_ms";

pub fn bench_csv_to_string(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.depth, r.packed_tokens, r.unrolled_tokens, r.packed_ms, r.unrolled_ms
        ));
    }
    out
}

pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == BENCH_CSV_HEADER => {}
        Some((_, header)) => bail!(
            "line 1: bad header {header:?}, expected {BENCH_CSV_HEADER:?}"
        ),
        None => bail!("empty bench CSV"),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            bail!("line {lineno}: expected 5 fields, found {}", fields.len());
        }
        let parse_usize = |s: &str, col: &str| -> Result<usize> {
            s.trim()
                .parse()
                .with_context(|| format!("line {lineno}: bad {col} {s:?}"))
        };
        let parse_f64 = |s: &str, col: &str| -> Result<f64> {
            let v: f64 = s
                .trim()
                .parse()
                .with_context(|| format!("line {lineno}: bad {col} {s:?}"))?;
            if !v.is_finite() || v < 0.0 {
                bail!("line {lineno}: {col} must be a non-negative finite number");
            }
            Ok(v)
        };
        rows.push(BenchRow {
            depth: parse_usize(fields[0], "depth")?,
            packed_tokens: parse_usize(fields[1], "packed_tokens")?,
            unrolled_tokens: parse_usize(fields[2], "unrolled_tokens")?,
            packed_ms: parse_f64(fields[3], "packed_ms")?,
            unrolled_ms: parse_f64(fields[4], "unrolled_ms")?,
        });
    }
    if rows.is_empty() {
        bail!("bench CSV has a header but no rows");
    }
    Ok(rows)
}

pub fn read_bench_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_bench_csv(&text).with_context(|| format!("parsing {}", path.display()))
}
