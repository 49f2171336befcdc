//! Shared helpers for integration tests: a central-difference gradient
//! oracle over the `f64` tape and small pipeline fixtures.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use vqcd_core::pipeline::{PipelineConfig, UnetParams};
use vqcd_core::qsa::VqConfig;
use vqcd_core::suite::{generate_dataset, save_dataset, Quality, TaskSpec};
use vqcd_core::tensor::{Graph, Var};

/// Relative error with a unit floor, so near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite differences against reverse-mode gradients.
///
/// `build` reconstructs the scalar loss from parameter values; leaf index
/// `p` selects which parameter block the check perturbs.
pub fn gradcheck<F>(params: &[Vec<f64>], eps: f64, tol: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|v| {
                let shape = [v.len()];
                g.input(&shape, v.clone())
            })
            .collect();
        let loss = build(&mut g, &vars);
        g.scalar(loss)
    };

    // Analytic gradients.
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|v| {
            let shape = [v.len()];
            g.leaf(&shape, v.clone())
        })
        .collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();

    let mut worst = 0.0f64;
    let mut scratch: Vec<Vec<f64>> = params.to_vec();
    for (p, block) in params.iter().enumerate() {
        for i in 0..block.len() {
            scratch[p][i] = block[i] + eps;
            let up = eval(&scratch);
            scratch[p][i] = block[i] - eps;
            let down = eval(&scratch);
            scratch[p][i] = block[i];
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(analytic[p][i], numeric);
            assert!(
                err <= tol,
                "grad mismatch at block {p} index {i}: analytic {} vs numeric {numeric} (rel {err:.3e})",
                analytic[p][i]
            );
            worst = worst.max(err);
        }
    }
    worst
}

/// Write the default 3-task datasets under `dir` and return their paths.
pub fn write_suite3_datasets(dir: &Path, episodes: usize, seed: u64) -> Vec<String> {
    let mut paths = Vec::new();
    for (i, spec) in TaskSpec::suite3(410).iter().enumerate() {
        let ds = generate_dataset(
            spec,
            &[(Quality::Expert, 0.5), (Quality::Random, 0.5)],
            episodes,
            seed,
        )
        .expect("dataset");
        let p = dir.join(format!("task{i}.jsonl"));
        save_dataset(&ds, &p).expect("save");
        paths.push(p.display().to_string());
    }
    paths
}

/// Small-but-real pipeline configuration for fast structural tests.
pub fn tiny_config(out_dir: PathBuf, datasets: Vec<String>) -> PipelineConfig {
    PipelineConfig {
        datasets,
        out_dir: out_dir.display().to_string(),
        seed: 11,
        eval_seed: 900,
        qsa_steps: 600,
        steps_per_task: 120,
        batch: 8,
        eval_rollouts: 2,
        k_max: 40,
        stride: 8,
        vq: VqConfig {
            hidden: 24,
            n_codes: 24,
            batch: 16,
            ..VqConfig::default()
        },
        unet: UnetParams {
            hidden: 12,
            groups: 3,
            kernel: 3,
            sin_dim: 8,
            emb_dim: 12,
        },
        ..PipelineConfig::default()
    }
}
