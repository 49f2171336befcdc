//! Report emission: the evaluation matrix as CSV, normalized scores, and a
//! structured summary record. Regeneration from the same matrix and config
//! is byte-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqcdError};
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::runner::Layout;
use crate::suite::{normalized_score, Dataset, MetricsMatrix};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    /// Mean of the final-row returns.
    pub p_mean: f64,
    /// Mean of the final-row normalized scores.
    pub p_normalized: f64,
    /// Per-task forgetting: diagonal minus final row.
    pub forgetting: Vec<f64>,
    pub final_returns: Vec<f64>,
    pub final_scores: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn write(path: &std::path::Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| VqcdError::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, content).map_err(|e| VqcdError::io(path.display().to_string(), e))
}

/// Render `metrics.csv`, `normalized_scores.csv`, and `summary.json` from a
/// populated matrix. Returns the summary record.
pub fn emit_report(
    matrix: &MetricsMatrix,
    cfg: &PipelineConfig,
    datasets: &[Dataset],
) -> Result<RunSummary> {
    let layout = Layout::new(cfg.out_path());
    let n = matrix.n_tasks();

    let mut csv = String::from("after_task");
    for j in 0..n {
        csv.push_str(&format!(",task{j}"));
    }
    csv.push('\n');
    for i in 0..n {
        csv.push_str(&format!("{i}"));
        for j in 0..n {
            csv.push(',');
            csv.push_str(&fmt_cell(matrix.get(i, j)));
        }
        csv.push('\n');
    }
    write(&layout.metrics_csv(), &csv)?;

    let mut scores_csv = String::from("after_task");
    for j in 0..n {
        scores_csv.push_str(&format!(",task{j}"));
    }
    scores_csv.push('\n');
    for i in 0..n {
        scores_csv.push_str(&format!("{i}"));
        for j in 0..n {
            scores_csv.push(',');
            if let Some(r) = matrix.get(i, j) {
                let s = normalized_score(
                    r,
                    datasets[j].header.r_random,
                    datasets[j].header.r_expert,
                )?;
                scores_csv.push_str(&format!("{s}"));
            }
        }
        scores_csv.push('\n');
    }
    write(&layout.scores_csv(), &scores_csv)?;

    let p_mean = matrix.final_performance()?;
    let forgetting = matrix.forgetting_all()?;
    let mut final_returns = Vec::with_capacity(n);
    let mut final_scores = Vec::with_capacity(n);
    for j in 0..n {
        let r = matrix.get(n - 1, j).expect("final row populated");
        final_returns.push(r);
        final_scores.push(normalized_score(
            r,
            datasets[j].header.r_random,
            datasets[j].header.r_expert,
        )?);
    }
    let p_normalized = final_scores.iter().sum::<f64>() / n as f64;
    let summary = RunSummary {
        p_mean,
        p_normalized,
        forgetting,
        final_returns,
        final_scores,
        config_hash: format!("{:016x}", cfg.hash()),
        seed: cfg.seed,
    };
    write(
        &layout.summary_json(),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}
