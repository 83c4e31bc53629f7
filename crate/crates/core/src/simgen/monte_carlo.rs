//! Replicated simulation runs scored against the planted truth.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, generate_sample_pairs, GroundTruth, SimScenario};
use crate::baseline::{fit_cpca_reg, DEFAULT_FRACTION};
use crate::components::{fit_sequence_pairs, DEFAULT_THRESHOLD};
use crate::data::CovariancePair;
use crate::error::{CocregError, Result};
use crate::inference::{asymptotic_covariance_pairs, bootstrap_pairs, BootstrapResult};
use crate::solver::{similarity, ComponentFit, SolverConfig};

pub const MAX_REPLICATE_FAILURE_PCT: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSettings {
    pub replicates: usize,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub solver: SolverConfig,
    /// Components fitted per replicate; at least the number of planted components.
    pub max_k: usize,
    pub threshold: f64,
    pub bootstrap: Option<BootstrapSettings>,
    pub baseline: bool,
    pub fraction: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            max_k: 3,
            threshold: DEFAULT_THRESHOLD,
            bootstrap: None,
            baseline: false,
            fraction: DEFAULT_FRACTION,
        }
    }
}

/// One planted component's estimate in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEstimate {
    /// `None` when the planted outcome eigenvector is not shared across subjects.
    pub gamma_similarity: Option<f64>,
    pub theta_similarity: Option<f64>,
    pub alpha: f64,
    pub beta: Vec<f64>,
    /// Per coefficient (`α, β₁, …`), whether the bootstrap interval contains the truth.
    pub covered: Option<Vec<bool>>,
    pub bootstrap_se: Option<Vec<f64>>,
    pub asymptotic_se: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub seed: u64,
    /// Indexed like the planted components; `None` if unmatched.
    pub cocreg: Vec<Option<ComponentEstimate>>,
    pub selected_k: Option<usize>,
    pub dfd_trace: Vec<(usize, f64)>,
    pub baseline: Option<Vec<Option<ComponentEstimate>>>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub component: String,
    pub coefficient: String,
    pub truth: f64,
    /// Replicates contributing an estimate.
    pub count: usize,
    pub mean_estimate: Option<f64>,
    pub bias: Option<f64>,
    pub se: Option<f64>,
    pub mse: Option<f64>,
    pub coverage: Option<f64>,
    pub gamma_similarity: Option<f64>,
    pub gamma_similarity_se: Option<f64>,
    pub theta_similarity: Option<f64>,
    pub theta_similarity_se: Option<f64>,
    pub gamma_applicable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: SimScenario,
    pub method: MethodConfig,
    pub replicates: usize,
    pub seed: u64,
    pub failed_replicates: usize,
    /// `(k, share of successful replicates selecting k)`.
    pub selection_rates: Vec<(usize, f64)>,
    pub rows: Vec<MetricsRow>,
    pub replicate_results: Vec<ReplicateResult>,
}

impl MetricsReport {
    pub fn row(&self, method: &str, component: &str, coefficient: &str) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.component == component && r.coefficient == coefficient)
    }

    pub fn selection_rate(&self, k: usize) -> f64 {
        self.selection_rates.iter().find(|(j, _)| *j == k).map_or(0.0, |(_, r)| *r)
    }

    pub const CSV_HEADER: [&'static str; 16] = [
        "method",
        "component",
        "coefficient",
        "truth",
        "count",
        "mean_estimate",
        "bias",
        "se",
        "mse",
        "coverage",
        "gamma_similarity",
        "gamma_similarity_se",
        "theta_similarity",
        "theta_similarity_se",
        "gamma_applicable",
        "n",
    ];

    /// Rows for a metrics CSV; the last column records the subject count.
    pub fn csv_rows(&self) -> Vec<Vec<crate::io::Cell>> {
        use crate::io::Cell;
        self.rows
            .iter()
            .map(|r| {
                vec![
                    Cell::from(r.method.as_str()),
                    Cell::from(r.component.as_str()),
                    Cell::from(r.coefficient.as_str()),
                    Cell::from(r.truth),
                    Cell::from(r.count),
                    Cell::from(r.mean_estimate),
                    Cell::from(r.bias),
                    Cell::from(r.se),
                    Cell::from(r.mse),
                    Cell::from(r.coverage),
                    Cell::from(r.gamma_similarity),
                    Cell::from(r.gamma_similarity_se),
                    Cell::from(r.theta_similarity),
                    Cell::from(r.theta_similarity_se),
                    Cell::from(if r.gamma_applicable { "true" } else { "false" }),
                    Cell::from(self.scenario.n),
                ]
            })
            .collect()
    }
}

/// One-to-one assignment of truths to candidates maximizing, in order, the number matched,
/// the summed primary score and the summed secondary score. `score(t, c)` is `None` for
/// unusable candidates; `conflict(a, b)` forbids using two candidates together.
pub fn best_assignment(
    n_truth: usize,
    n_cand: usize,
    score: &dyn Fn(usize, usize) -> Option<(f64, f64)>,
    conflict: &dyn Fn(usize, usize) -> bool,
) -> Vec<Option<usize>> {
    #[derive(Clone, Copy, PartialEq, PartialOrd)]
    struct Key(usize, f64, f64);

    fn search(
        t: usize,
        n_truth: usize,
        n_cand: usize,
        score: &dyn Fn(usize, usize) -> Option<(f64, f64)>,
        conflict: &dyn Fn(usize, usize) -> bool,
        current: &mut Vec<Option<usize>>,
        acc: Key,
        best: &mut (Key, Vec<Option<usize>>),
    ) {
        if t == n_truth {
            if acc > best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        for c in 0..n_cand {
            let used = current.iter().flatten().any(|&u| u == c || conflict(u, c));
            if used {
                continue;
            }
            if let Some((a, b)) = score(t, c) {
                current.push(Some(c));
                search(t + 1, n_truth, n_cand, score, conflict, current, Key(acc.0 + 1, acc.1 + a, acc.2 + b), best);
                current.pop();
            }
        }
        current.push(None);
        search(t + 1, n_truth, n_cand, score, conflict, current, acc, best);
        current.pop();
    }

    let mut best = (Key(0, f64::NEG_INFINITY, f64::NEG_INFINITY), vec![None; n_truth]);
    search(0, n_truth, n_cand, score, conflict, &mut Vec::new(), Key(0, 0.0, 0.0), &mut best);
    best.1
}

fn similarities(truth: &super::PlantedTruth, gamma: &DVector<f64>, theta: &DVector<f64>) -> (f64, f64) {
    let g = similarity(gamma, &truth.gamma).unwrap_or(0.0);
    let t = similarity(theta, &truth.theta).unwrap_or(0.0);
    (g, t)
}

fn estimate(truth: &super::PlantedTruth, gamma: &DVector<f64>, theta: &DVector<f64>, alpha: f64, beta: &[f64]) -> ComponentEstimate {
    let (g, t) = similarities(truth, gamma, theta);
    ComponentEstimate {
        gamma_similarity: truth.gamma_identifiable.then_some(g),
        theta_similarity: truth.theta_identifiable.then_some(t),
        alpha,
        beta: beta.to_vec(),
        covered: None,
        bootstrap_se: None,
        asymptotic_se: None,
    }
}

/// Matches fitted components to planted ones by θ-similarity (γ-similarity breaks ties).
pub fn match_components(truth: &GroundTruth, fits: &[ComponentFit]) -> Vec<Option<usize>> {
    let score = |t: usize, c: usize| {
        let (g, th) = similarities(&truth.components[t], &fits[c].gamma, &fits[c].theta);
        Some((th, g))
    };
    best_assignment(truth.components.len(), fits.len(), &score, &|_, _| false)
}

fn covered(result: &BootstrapResult, truth: &super::PlantedTruth) -> Vec<bool> {
    let mut want = vec![truth.alpha];
    want.extend(truth.beta.iter());
    result
        .intervals
        .iter()
        .zip(want)
        .map(|((lo, hi), t)| *lo <= t && t <= *hi)
        .collect()
}

/// Scores a single replicate from its covariance pairs.
pub fn score_replicate(
    scenario: &SimScenario,
    method: &MethodConfig,
    pairs: &[CovariancePair],
    covariates: &[DVector<f64>],
    truth: &GroundTruth,
    replicate_seed: u64,
) -> Result<(Vec<Option<ComponentEstimate>>, usize, Vec<(usize, f64)>, Option<Vec<Option<ComponentEstimate>>>)> {
    let m = truth.components.len();
    let max_k = method.max_k.max(m).min(scenario.p.min(scenario.q));
    let solver = SolverConfig { seed: replicate_seed, ..method.solver.clone() };
    let seq = fit_sequence_pairs(pairs, covariates, &solver, max_k, method.threshold)?;
    let scored: Vec<ComponentFit> = seq.components.iter().take(m).cloned().collect();
    let assignment = match_components(truth, &scored);
    let mut cocreg = Vec::with_capacity(m);
    for (t, a) in assignment.iter().enumerate() {
        let tr = &truth.components[t];
        cocreg.push(match a {
            Some(c) => {
                let fit = &scored[*c];
                let mut est = estimate(tr, &fit.gamma, &fit.theta, fit.alpha, fit.beta.as_slice());
                if let Some(bs) = &method.bootstrap {
                    let b = bootstrap_pairs(pairs, covariates, fit, bs.replicates, bs.level, derive_seed(replicate_seed, 1_000 + t as u64))?;
                    est.covered = Some(covered(&b, tr));
                    est.bootstrap_se = Some(b.standard_errors());
                    est.asymptotic_se = asymptotic_covariance_pairs(&fit.theta, pairs, covariates)
                        .ok()
                        .map(|a| a.standard_errors());
                }
                Some(est)
            }
            None => None,
        });
    }

    let baseline = if method.baseline {
        let model = fit_cpca_reg(pairs, covariates, method.fraction)?;
        let regs: Vec<_> = model.regressions.iter().filter(|r| r.alpha.is_some()).collect();
        let score = |t: usize, c: usize| {
            let (g, th) = similarities(&truth.components[t], &regs[c].gamma, &regs[c].theta);
            Some((th, g))
        };
        let conflict = |a: usize, b: usize| regs[a].x_index == regs[b].x_index || regs[a].y_index == regs[b].y_index;
        let assignment = best_assignment(m, regs.len(), &score, &conflict);
        Some(
            assignment
                .iter()
                .enumerate()
                .map(|(t, a)| {
                    a.map(|c| {
                        let r = regs[c];
                        estimate(&truth.components[t], &r.gamma, &r.theta, r.alpha.expect("successful"), r.beta.as_deref().expect("successful"))
                    })
                })
                .collect(),
        )
    } else {
        None
    };
    Ok((cocreg, seq.selected_k, seq.dfd_trace, baseline))
}

fn run_replicate(scenario: &SimScenario, method: &MethodConfig, index: usize, seed: u64) -> ReplicateResult {
    let rep_seed = derive_seed(seed, index as u64);
    let outcome = generate_sample_pairs(scenario, rep_seed).and_then(|(pairs, g)| {
        score_replicate(scenario, method, &pairs, &g.covariates, &g.truth, rep_seed)
    });
    match outcome {
        Ok((cocreg, k, trace, baseline)) => ReplicateResult {
            index,
            seed: rep_seed,
            cocreg,
            selected_k: Some(k),
            dfd_trace: trace,
            baseline,
            failure: None,
        },
        Err(e) => {
            log::warn!("replicate {index} failed: {e}");
            ReplicateResult {
                index,
                seed: rep_seed,
                cocreg: vec![None; scenario.planted.len()],
                selected_k: None,
                dfd_trace: Vec::new(),
                baseline: None,
                failure: Some(e.to_string()),
            }
        }
    }
}

fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    (Some(m), sd)
}

fn aggregate(method: &str, scenario: &SimScenario, truth: &[(f64, Vec<f64>, bool)], per_rep: &[&Vec<Option<ComponentEstimate>>]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for (t, (alpha, beta, gamma_applicable)) in truth.iter().enumerate() {
        let ests: Vec<&ComponentEstimate> = per_rep.iter().filter_map(|r| r.get(t).and_then(|e| e.as_ref())).collect();
        let gs: Vec<f64> = ests.iter().filter_map(|e| e.gamma_similarity).collect();
        let ts: Vec<f64> = ests.iter().filter_map(|e| e.theta_similarity).collect();
        let (gm, gsd) = mean_sd(&gs);
        let (tm, tsd) = mean_sd(&ts);
        let names = crate::inference::BootstrapResult::coefficient_names(beta.len());
        let truths: Vec<f64> = std::iter::once(*alpha).chain(beta.iter().copied()).collect();
        for (j, name) in names.iter().enumerate() {
            let vals: Vec<f64> = ests.iter().map(|e| if j == 0 { e.alpha } else { e.beta[j - 1] }).collect();
            let (mean, sd) = mean_sd(&vals);
            let mse = (!vals.is_empty()).then(|| vals.iter().map(|v| (v - truths[j]).powi(2)).sum::<f64>() / vals.len() as f64);
            let cov: Vec<bool> = ests.iter().filter_map(|e| e.covered.as_ref().map(|c| c[j])).collect();
            let coverage = (!cov.is_empty()).then(|| cov.iter().filter(|c| **c).count() as f64 / cov.len() as f64);
            rows.push(MetricsRow {
                method: method.into(),
                component: format!("C{}", t + 1),
                coefficient: name.clone(),
                truth: truths[j],
                count: vals.len(),
                mean_estimate: mean,
                bias: mean.map(|m| m - truths[j]),
                se: sd,
                mse,
                coverage,
                gamma_similarity: gm,
                gamma_similarity_se: gsd,
                theta_similarity: tm,
                theta_similarity_se: tsd,
                gamma_applicable: *gamma_applicable,
            });
        }
    }
    let _ = scenario;
    rows
}

/// Runs `replicates` independent datasets. Replicate `b` uses seed `derive_seed(seed, b)`.
pub fn run_monte_carlo(scenario: &SimScenario, method: &MethodConfig, replicates: usize, seed: u64) -> Result<MetricsReport> {
    scenario.validate()?;
    method.solver.validate()?;
    if replicates < 2 {
        return Err(CocregError::Validation(format!("need at least 2 replicates, got {replicates}")));
    }
    let results: Vec<ReplicateResult> = (0..replicates)
        .into_par_iter()
        .map(|b| run_replicate(scenario, method, b, seed))
        .collect();
    let failed = results.iter().filter(|r| r.failure.is_some()).count();
    if failed * 100 > replicates * MAX_REPLICATE_FAILURE_PCT as usize {
        return Err(CocregError::TooManyFailures {
            what: "simulation replicates",
            failed,
            total: replicates,
            limit_pct: MAX_REPLICATE_FAILURE_PCT,
        });
    }
    let ok: Vec<&ReplicateResult> = results.iter().filter(|r| r.failure.is_none()).collect();
    let truth: Vec<(f64, Vec<f64>, bool)> = scenario
        .planted
        .iter()
        .map(|c| (c.alpha, c.beta.clone(), scenario.gamma_identifiable(c)))
        .collect();
    let mut rows = aggregate("cocreg", scenario, &truth, &ok.iter().map(|r| &r.cocreg).collect::<Vec<_>>());
    if method.baseline {
        let base: Vec<&Vec<Option<ComponentEstimate>>> = ok.iter().filter_map(|r| r.baseline.as_ref()).collect();
        rows.extend(aggregate("cpca-reg", scenario, &truth, &base));
    }
    let mut selection_rates = Vec::new();
    let max_k = method.max_k.max(scenario.planted.len());
    for k in 0..=max_k {
        let count = ok.iter().filter(|r| r.selected_k == Some(k)).count();
        selection_rates.push((k, if ok.is_empty() { 0.0 } else { count as f64 / ok.len() as f64 }));
    }
    Ok(MetricsReport {
        scenario: scenario.clone(),
        method: method.clone(),
        replicates,
        seed,
        failed_replicates: failed,
        selection_rates,
        rows,
        replicate_results: results,
    })
}

/// One report per grid point; each point overrides `(n, u, v)` of the scenario.
pub fn run_grid(
    scenario: &SimScenario,
    method: &MethodConfig,
    grid: &[(usize, usize, usize)],
    replicates: usize,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    grid.iter()
        .map(|&(n, u, v)| {
            let s = SimScenario { n, u, v, ..scenario.clone() };
            run_monte_carlo(&s, method, replicates, seed)
        })
        .collect()
}
