//! Ranking metrics, baselines, session-length slices and report tables.

mod baselines;
mod metrics;

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataio::TrainingExample;
use crate::error::{MgcotError, Result};
use crate::model::Mgcot;
use crate::params::ParamStore;

pub use baselines::{MarkovBaseline, PopularityBaseline};
pub use metrics::{mrr_at_k, precision_at_k, rank_items, rank_of, Metrics};

/// Prefixes with at most this many items form the short slice.
pub const DEFAULT_SLICE_THRESHOLD: usize = 5;

pub const PROTOCOL: &str = "all augmented test prefixes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub ablation: String,
    pub protocol: String,
    pub slice_threshold: usize,
    pub overall: Metrics,
    pub short: Metrics,
    pub long: Metrics,
}

/// Label ranks of every example under `score`, which maps a batch of
/// prefixes to a `B x N` score matrix. Batches are scored in parallel.
pub fn label_ranks<F>(examples: &[TrainingExample], batch_size: usize, score: F) -> Result<Vec<usize>>
where
    F: Fn(&[&[u32]]) -> Result<Array2<f64>> + Sync,
{
    let chunks: Vec<&[TrainingExample]> = examples.chunks(batch_size.max(1)).collect();
    let per_chunk: Vec<Vec<usize>> = chunks
        .par_iter()
        .map(|chunk| {
            let prefixes: Vec<&[u32]> = chunk.iter().map(|e| e.prefix.as_slice()).collect();
            let scores = score(&prefixes)?;
            chunk
                .iter()
                .enumerate()
                .map(|(b, ex)| {
                    let row = scores.row(b);
                    let row = row.as_slice().expect("standard layout");
                    if ex.label == 0 || ex.label as usize > row.len() {
                        return Err(MgcotError::Shape(format!("label {} outside 1..={}", ex.label, row.len())));
                    }
                    Ok(rank_of(row, ex.label as usize - 1))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Splits ranks into overall / short / long metrics.
pub fn sliced_metrics(
    examples: &[TrainingExample],
    ranks: &[usize],
    threshold: usize,
) -> (Metrics, Metrics, Metrics) {
    let (mut short, mut long) = (Vec::new(), Vec::new());
    for (ex, &r) in examples.iter().zip(ranks) {
        if ex.prefix.len() <= threshold {
            short.push(r);
        } else {
            long.push(r);
        }
    }
    (
        Metrics::from_ranks(ranks),
        Metrics::from_ranks(&short),
        Metrics::from_ranks(&long),
    )
}

pub fn evaluate_with<F>(
    name: &str,
    ablation: &str,
    examples: &[TrainingExample],
    batch_size: usize,
    threshold: usize,
    score: F,
) -> Result<MetricsReport>
where
    F: Fn(&[&[u32]]) -> Result<Array2<f64>> + Sync,
{
    if examples.is_empty() {
        return Err(MgcotError::EmptyCorpus("no examples to evaluate".into()));
    }
    let ranks = label_ranks(examples, batch_size, score)?;
    let (overall, short, long) = sliced_metrics(examples, &ranks, threshold);
    Ok(MetricsReport {
        model: name.to_string(),
        ablation: ablation.to_string(),
        protocol: PROTOCOL.to_string(),
        slice_threshold: threshold,
        overall,
        short,
        long,
    })
}

/// Scores a batch with the trained model (no dropout, no global view).
pub fn model_scores(model: &Mgcot, store: &ParamStore, prefixes: &[&[u32]]) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, prefixes, None, None)?;
    Ok(g.value(out.scores).clone())
}

pub fn evaluate_model(
    model: &Mgcot,
    store: &ParamStore,
    examples: &[TrainingExample],
    batch_size: usize,
    threshold: usize,
) -> Result<MetricsReport> {
    evaluate_with(
        "MGCOT",
        &model.config.ablation.tag(),
        examples,
        batch_size,
        threshold,
        |p| model_scores(model, store, p),
    )
}

pub fn evaluate_popularity(
    pop: &PopularityBaseline,
    examples: &[TrainingExample],
    threshold: usize,
) -> Result<MetricsReport> {
    evaluate_with("POP", "-", examples, 256, threshold, |p| {
        let s = pop.scores();
        Ok(Array2::from_shape_fn((p.len(), s.len()), |(_, j)| s[j]))
    })
}

pub fn evaluate_markov(
    markov: &MarkovBaseline,
    examples: &[TrainingExample],
    threshold: usize,
) -> Result<MetricsReport> {
    evaluate_with("MARKOV", "-", examples, 256, threshold, |p| {
        let rows: Vec<Vec<f64>> = p.iter().map(|x| markov.scores(x)).collect();
        let n = rows.first().map_or(0, Vec::len);
        Ok(Array2::from_shape_fn((rows.len(), n), |(i, j)| rows[i][j]))
    })
}

fn metrics_line(out: &mut String, label: &str, tag: &str, m: &Metrics) {
    let _ = writeln!(
        out,
        "{label:<22}{tag:<24}{:>10}{:>9.2}{:>9.2}{:>9.2}{:>9.2}",
        m.count, m.p10, m.p20, m.m10, m.m20
    );
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{:<22}{:<24}{:>10}{:>9}{:>9}{:>9}{:>9}",
        "model", "ablation", "examples", "P@10", "P@20", "M@10", "M@20"
    );
}

/// Fixed-width comparison table: overall rows, then the short and long slices.
pub fn format_reports(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let threshold = reports.first().map_or(DEFAULT_SLICE_THRESHOLD, |r| r.slice_threshold);
    let sections: [(String, fn(&MetricsReport) -> &Metrics); 3] = [
        ("all prefixes".into(), |r| &r.overall),
        (format!("short prefixes (<= {threshold} items)"), |r| &r.short),
        (format!("long prefixes (> {threshold} items)"), |r| &r.long),
    ];
    for (i, (title, pick)) in sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        header(&mut out, title);
        for r in reports {
            metrics_line(&mut out, &r.model, &r.ablation, pick(r));
        }
    }
    let _ = writeln!(out, "\nprotocol: {PROTOCOL}");
    out
}

/// Display name of an ablation row.
pub fn ablation_label(tag: &str) -> &str {
    match tag {
        "full" => "MGCOT",
        "no-neighbor-sessions" => "-NeighborSessions",
        "no-multi-attention" => "-MultiAttention",
        "no-contrastive" => "-ContrastiveLearning",
        other => other,
    }
}

/// Ablation table: one row per variant with overall metrics.
pub fn format_ablation(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24}{:>10}{:>9}{:>9}{:>9}{:>9}",
        "variant", "examples", "P@10", "P@20", "M@10", "M@20"
    );
    for r in reports {
        let m = &r.overall;
        let _ = writeln!(
            out,
            "{:<24}{:>10}{:>9.2}{:>9.2}{:>9.2}{:>9.2}",
            ablation_label(&r.ablation),
            m.count,
            m.p10,
            m.p20,
            m.m10,
            m.m20
        );
    }
    out
}

pub fn to_jsonl(reports: &[MetricsReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

pub fn from_jsonl(text: &str) -> Result<Vec<MetricsReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| MgcotError::parse("metrics record", e.to_string())))
        .collect()
}
