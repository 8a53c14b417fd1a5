//! Desk-scale sweeps over EM iterations `t` and LMB cascades `k`.
//!
//! Every configuration is trained once per seed on the same pairs; the
//! summary holds the per-configuration median over seeds of the final
//! held-out luma PSNR/SSIM.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use emrf_core::config::RunConfig;
use emrf_core::train::train;
use emrf_core::{Result, Tensor};

pub const RUNS_FILE: &str = "ablation_runs.csv";
pub const SUMMARY_FILE: &str = "ablation.csv";

/// Which hyperparameter a summary row varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Iterations,
    Cascades,
}

impl Sweep {
    pub fn label(self) -> &'static str {
        match self {
            Sweep::Iterations => "t",
            Sweep::Cascades => "k",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub base: RunConfig,
    pub iterations: Vec<usize>,
    pub cascades: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl AblationPlan {
    /// `t ∈ {1..4}` at the base `k`, and `k ∈ {1..4}` at the base `t`, with
    /// seeds `base.train.seed + i`.
    pub fn standard(base: &RunConfig, seeds: usize) -> Self {
        AblationPlan {
            base: base.clone(),
            iterations: (1..=4).collect(),
            cascades: (1..=4).collect(),
            seeds: (0..seeds as u64).map(|i| base.train.seed.wrapping_add(i)).collect(),
        }
    }

    /// Distinct `(t, k)` pairs in sweep order.
    fn configs(&self) -> Vec<(Sweep, usize, usize, usize)> {
        let (t0, k0) = (self.base.model.em.iterations, self.base.model.lmrb.cascades);
        let t_rows = self.iterations.iter().map(|&t| (Sweep::Iterations, t, t, k0));
        let k_rows = self.cascades.iter().map(|&k| (Sweep::Cascades, k, t0, k));
        t_rows.chain(k_rows).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub iterations: usize,
    pub cascades: usize,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub baseline_psnr_y: f64,
    pub psnr_y: f64,
    pub ssim_y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub sweep: Sweep,
    pub value: usize,
    pub iterations: usize,
    pub cascades: usize,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub final_loss: f64,
}

pub struct AblationResult {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains every distinct configuration for every seed. A configuration that
/// appears in both sweeps is trained once.
pub fn run(
    plan: &AblationPlan,
    pairs: &[(Tensor<f64>, Tensor<f64>)],
    mut progress: impl FnMut(&AblationRun, f64),
) -> Result<AblationResult> {
    let mut done: BTreeMap<(usize, usize, u64), AblationRun> = BTreeMap::new();
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for (sweep, value, t, k) in plan.configs() {
        let mut cfg = plan.base.clone();
        cfg.model.em.iterations = t;
        cfg.model.lmrb.cascades = k;
        let mut per_seed = Vec::with_capacity(plan.seeds.len());
        for &seed in &plan.seeds {
            let key = (t, k, seed);
            if let std::collections::btree_map::Entry::Vacant(e) = done.entry(key) {
                cfg.train.seed = seed;
                let start = Instant::now();
                let r = train(&cfg.model, &cfg.train, pairs, &cfg.metrics, None)?.report;
                let run = AblationRun {
                    iterations: t,
                    cascades: k,
                    seed,
                    initial_loss: r.initial_loss,
                    final_loss: r.final_loss,
                    baseline_psnr_y: r.val_baseline_psnr_y,
                    psnr_y: r.final_val_psnr_y(),
                    ssim_y: r.epochs.last().map_or(f64::NAN, |e| e.val_ssim_y),
                };
                progress(&run, start.elapsed().as_secs_f64());
                runs.push(run.clone());
                e.insert(run);
            }
            per_seed.push(done[&key].clone());
        }
        let col = |f: fn(&AblationRun) -> f64| median(&per_seed.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            sweep,
            value,
            iterations: t,
            cascades: k,
            psnr_y: col(|r| r.psnr_y),
            ssim_y: col(|r| r.ssim_y),
            final_loss: col(|r| r.final_loss),
        });
    }
    Ok(AblationResult { runs, rows })
}

pub const SUMMARY_HEADER: &str = "sweep,value,iterations,cascades,psnr_y,ssim_y,final_loss";
pub const RUNS_HEADER: &str = "iterations,cascades,seed,initial_loss,final_loss,baseline_psnr_y,psnr_y,ssim_y";

pub fn summary_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.sweep.label(),
            r.value,
            r.iterations,
            r.cascades,
            r.psnr_y,
            r.ssim_y,
            r.final_loss
        );
    }
    s
}

pub fn runs_csv(runs: &[AblationRun]) -> String {
    let mut s = format!("{RUNS_HEADER}\n");
    for r in runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.iterations, r.cascades, r.seed, r.initial_loss, r.final_loss, r.baseline_psnr_y, r.psnr_y, r.ssim_y
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even_empty() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn standard_plan_has_eight_rows_and_seven_configs() {
        let plan = AblationPlan::standard(&RunConfig::desk(), 3);
        let configs = plan.configs();
        assert_eq!(configs.len(), 8);
        let mut distinct: Vec<_> = configs.iter().map(|c| (c.2, c.3)).collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 7);
        assert_eq!(plan.seeds, vec![0, 1, 2]);
    }
}
