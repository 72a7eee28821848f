//! Exit-incompatibility diagnostics and the deployment checklist. Each
//! diagnostic records the measurements it was computed from, and its verdict
//! is a pure function of those numbers and the configured thresholds, so a
//! stored report can be re-judged without touching the model.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{LeapError, Result};
use crate::exit::{self, ExitPolicy};
use crate::metrics::{self, embedding_rows};
use crate::scalar::Scalar;
use crate::tensor::kernels;

/// Transition differences this close to zero count as nondecreasing, so a
/// converged curve sitting at 1.0 is not penalized for float noise.
const TRANSITION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Compatible,
    Inconclusive,
    Incompatible,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Verdict::Compatible => "COMPATIBLE",
            Verdict::Inconclusive => "INCONCLUSIVE",
            Verdict::Incompatible => "INCOMPATIBLE",
        };
        f.write_str(s)
    }
}

/// Decision boundaries for all diagnostics and checklist items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagThresholds {
    /// Curve stuck below this at every pre-final layer means incompatible.
    pub flat_low_sim: f64,
    /// Minimum fraction of nondecreasing transitions for compatibility.
    pub flat_min_nonneg_frac: f64,
    /// Minimum similarity at the last pre-final layer for compatibility.
    pub flat_min_last_sim: f64,
    /// Monitoring overhead above this fraction is suspect.
    pub overhead_max_fraction: f64,
    /// Overhead is only damning when the exit rate is below this.
    pub overhead_min_exit_rate: f64,
    pub checklist_min_sim: f64,
    pub checklist_min_nn10: f64,
    pub checklist_min_exit_rate: f64,
}

impl Default for DiagThresholds {
    fn default() -> Self {
        DiagThresholds {
            flat_low_sim: 0.7,
            flat_min_nonneg_frac: 0.9,
            flat_min_last_sim: 0.9,
            overhead_max_fraction: 0.15,
            overhead_min_exit_rate: 0.10,
            checklist_min_sim: 0.94,
            checklist_min_nn10: 0.80,
            checklist_min_exit_rate: 0.50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticConfig {
    pub policy: ExitPolicy,
    /// Reference layer for the deployment checklist.
    pub target_layer: usize,
    pub thresholds: DiagThresholds,
    /// Iterations for the monitoring-overhead probe.
    pub overhead_iters: usize,
    /// Samples fed to the overhead probe (prefix of the corpus).
    pub overhead_samples: usize,
    pub nn_k: usize,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        DiagnosticConfig {
            policy: ExitPolicy::default(),
            target_layer: 7,
            thresholds: DiagThresholds::default(),
            overhead_iters: 50,
            overhead_samples: 16,
            nn_k: 10,
        }
    }
}

/// Diagnostic 1: mean similarity of each pre-final layer to the final
/// embedding, judged for both level and shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatCurveDiag {
    /// `(layer, mean cosine to final)` for layers `l_min..=L-1`.
    pub layer_sims: Vec<(usize, f64)>,
    pub nonneg_transition_frac: f64,
    pub verdict: Verdict,
}

impl FlatCurveDiag {
    /// Judge the recorded curve: stuck low everywhere is incompatible,
    /// mostly rising and ending high is compatible, anything else is
    /// inconclusive.
    pub fn judge(layer_sims: &[(usize, f64)], nonneg_frac: f64, t: &DiagThresholds) -> Verdict {
        let all_low = layer_sims.iter().all(|&(_, s)| s < t.flat_low_sim);
        if all_low {
            return Verdict::Incompatible;
        }
        let last = layer_sims.last().map(|&(_, s)| s).unwrap_or(0.0);
        if nonneg_frac >= t.flat_min_nonneg_frac && last >= t.flat_min_last_sim {
            return Verdict::Compatible;
        }
        Verdict::Inconclusive
    }

    pub fn recompute_verdict(&self, t: &DiagThresholds) -> Verdict {
        Self::judge(&self.layer_sims, self.nonneg_transition_frac, t)
    }
}

/// Diagnostic 2: does anything exit before the final layer at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroExitDiag {
    pub theta: f64,
    pub l_min: usize,
    /// Fraction of samples exiting strictly before the final layer.
    pub exit_rate_before_final: f64,
    pub verdict: Verdict,
}

impl ZeroExitDiag {
    pub fn judge(exit_rate_before_final: f64) -> Verdict {
        if exit_rate_before_final <= 0.0 {
            Verdict::Incompatible
        } else {
            Verdict::Compatible
        }
    }

    pub fn recompute_verdict(&self) -> Verdict {
        Self::judge(self.exit_rate_before_final)
    }
}

/// Diagnostic 3: monitoring cost is only acceptable if enough samples
/// actually exit early to pay for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadDiag {
    pub overhead_fraction: f64,
    pub exit_rate: f64,
    pub verdict: Verdict,
}

impl OverheadDiag {
    pub fn judge(overhead_fraction: f64, exit_rate: f64, t: &DiagThresholds) -> Verdict {
        if overhead_fraction > t.overhead_max_fraction && exit_rate < t.overhead_min_exit_rate {
            Verdict::Incompatible
        } else {
            Verdict::Compatible
        }
    }

    pub fn recompute_verdict(&self, t: &DiagThresholds) -> Verdict {
        Self::judge(self.overhead_fraction, self.exit_rate, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// The three-point readiness check at a fixed reference layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentChecklist {
    pub target_layer: usize,
    pub sim_at_target: f64,
    pub nn10_at_target: f64,
    pub exit_rate: f64,
    pub items: Vec<ChecklistItem>,
    pub all_pass: bool,
}

impl DeploymentChecklist {
    pub fn judge(
        target_layer: usize,
        sim: f64,
        nn10: f64,
        exit_rate: f64,
        t: &DiagThresholds,
    ) -> Self {
        let items = vec![
            ChecklistItem {
                name: "sim_to_final".to_string(),
                value: sim,
                threshold: t.checklist_min_sim,
                pass: sim >= t.checklist_min_sim,
            },
            ChecklistItem {
                name: "nn10_overlap".to_string(),
                value: nn10,
                threshold: t.checklist_min_nn10,
                pass: nn10 >= t.checklist_min_nn10,
            },
            ChecklistItem {
                name: "exit_rate".to_string(),
                value: exit_rate,
                threshold: t.checklist_min_exit_rate,
                pass: exit_rate > t.checklist_min_exit_rate,
            },
        ];
        let all_pass = items.iter().all(|i| i.pass);
        DeploymentChecklist {
            target_layer,
            sim_at_target: sim,
            nn10_at_target: nn10,
            exit_rate,
            items,
            all_pass,
        }
    }

    pub fn recompute(&self, t: &DiagThresholds) -> Self {
        Self::judge(
            self.target_layer,
            self.sim_at_target,
            self.nn10_at_target,
            self.exit_rate,
            t,
        )
    }
}

/// All diagnostics plus the checklist, with the configuration that produced
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub flat_curve: FlatCurveDiag,
    pub zero_exit: ZeroExitDiag,
    pub overhead_dominates: OverheadDiag,
    pub checklist: DeploymentChecklist,
    pub config: DiagnosticConfig,
}

impl DiagnosticReport {
    pub fn any_incompatible(&self) -> bool {
        [
            self.flat_curve.verdict,
            self.zero_exit.verdict,
            self.overhead_dominates.verdict,
        ]
        .contains(&Verdict::Incompatible)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("exit diagnostics\n================\n");
        out.push_str(&format!("[1] flat similarity curve: {}\n", self.flat_curve.verdict));
        let curve: Vec<String> = self
            .flat_curve
            .layer_sims
            .iter()
            .map(|(l, s)| format!("L{l}={s:.3}"))
            .collect();
        out.push_str(&format!("    mean sim to final: {}\n", curve.join(" ")));
        out.push_str(&format!(
            "    nondecreasing transitions: {:.1}%\n",
            100.0 * self.flat_curve.nonneg_transition_frac
        ));
        out.push_str(&format!(
            "[2] zero exit rate: {} ({:.1}% exit before final layer at theta={}, l_min={})\n",
            self.zero_exit.verdict,
            100.0 * self.zero_exit.exit_rate_before_final,
            self.zero_exit.theta,
            self.zero_exit.l_min
        ));
        out.push_str(&format!(
            "[3] monitoring overhead: {} (overhead {:.1}%, exit rate {:.1}%)\n",
            self.overhead_dominates.verdict,
            100.0 * self.overhead_dominates.overhead_fraction,
            100.0 * self.overhead_dominates.exit_rate
        ));
        out.push_str(&format!(
            "deployment checklist (target layer {}):\n",
            self.checklist.target_layer
        ));
        for item in &self.checklist.items {
            out.push_str(&format!(
                "    [{}] {:<14} {:.4} vs {:.2}\n",
                if item.pass { "pass" } else { "FAIL" },
                item.name,
                item.value,
                item.threshold
            ));
        }
        out.push_str(&format!(
            "overall: {}\n",
            if self.any_incompatible() {
                "exit-incompatible"
            } else if self.checklist.all_pass {
                "ready for early-exit deployment"
            } else {
                "exit-capable, checklist incomplete"
            }
        ));
        out
    }
}

fn row_f64<F: Scalar>(v: &[F]) -> Vec<f64> {
    let vals: Vec<f64> = v.iter().map(|x| x.to_f64().unwrap_or(0.0)).collect();
    vals
}

/// Mean cosine of each layer to the final embedding over a corpus, for
/// layers `l_min..=L-1`, plus the fraction of nondecreasing transitions.
pub fn diag_flat_curve<F: Scalar>(
    model: &EncoderModel<F>,
    samples: &[Vec<u32>],
    l_min: usize,
    thresholds: &DiagThresholds,
) -> Result<FlatCurveDiag> {
    let depth = model.config().num_layers;
    if samples.is_empty() {
        return Err(LeapError::contract("diagnostic corpus is empty".to_string()));
    }
    if l_min == 0 || l_min >= depth {
        return Err(LeapError::contract(format!(
            "l_min {l_min} leaves no pre-final layers in a {depth}-layer model"
        )));
    }
    let mut sums = vec![0.0f64; depth - l_min];
    for tokens in samples {
        let trace = model.forward_trace(tokens, None)?;
        let layers = trace.normalized_layers()?;
        let final_v = row_f64(layers[depth - 1].data());
        for (i, l) in (l_min..depth).enumerate() {
            let v = row_f64(layers[l - 1].data());
            let cos = kernels::cosine(&v, &final_v)
                .ok_or_else(|| LeapError::degenerate("zero-norm layer embedding"))?;
            sums[i] += cos.clamp(-1.0, 1.0);
        }
    }
    let n = samples.len() as f64;
    let layer_sims: Vec<(usize, f64)> = (l_min..depth)
        .enumerate()
        .map(|(i, l)| (l, sums[i] / n))
        .collect();
    let transitions = layer_sims.len().saturating_sub(1);
    let nonneg = layer_sims
        .windows(2)
        .filter(|w| w[1].1 - w[0].1 >= -TRANSITION_TOLERANCE)
        .count();
    let nonneg_frac = if transitions == 0 {
        1.0
    } else {
        nonneg as f64 / transitions as f64
    };
    let verdict = FlatCurveDiag::judge(&layer_sims, nonneg_frac, thresholds);
    Ok(FlatCurveDiag { layer_sims, nonneg_transition_frac: nonneg_frac, verdict })
}

/// Fraction of samples exiting strictly before the final layer under the
/// given policy.
pub fn exit_rate_before_final<F: Scalar>(
    model: &EncoderModel<F>,
    samples: &[Vec<u32>],
    policy: &ExitPolicy,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(LeapError::contract("diagnostic corpus is empty".to_string()));
    }
    let depth = model.config().num_layers;
    let mut early = 0usize;
    for tokens in samples {
        let res = exit::infer_single(model, tokens, None, policy)?;
        if res.exit_layer < depth {
            early += 1;
        }
    }
    Ok(early as f64 / samples.len() as f64)
}

pub fn diag_zero_exit<F: Scalar>(
    model: &EncoderModel<F>,
    samples: &[Vec<u32>],
    policy: &ExitPolicy,
) -> Result<ZeroExitDiag> {
    let rate = exit_rate_before_final(model, samples, policy)?;
    Ok(ZeroExitDiag {
        theta: policy.theta,
        l_min: policy.l_min,
        exit_rate_before_final: rate,
        verdict: ZeroExitDiag::judge(rate),
    })
}

pub fn diag_overhead<F: Scalar>(
    model: &EncoderModel<F>,
    samples: &[Vec<u32>],
    policy: &ExitPolicy,
    iters: usize,
    probe_samples: usize,
    thresholds: &DiagThresholds,
) -> Result<OverheadDiag> {
    let rate = exit_rate_before_final(model, samples, policy)?;
    let probe = &samples[..probe_samples.clamp(1, samples.len())];
    let overhead = exit::monitoring_overhead(model, probe, iters, policy)?;
    Ok(OverheadDiag {
        overhead_fraction: overhead,
        exit_rate: rate,
        verdict: OverheadDiag::judge(overhead, rate, thresholds),
    })
}

/// Evaluate the three-point checklist at `target_layer`.
pub fn deployment_checklist<F: Scalar>(
    model: &EncoderModel<F>,
    samples: &[Vec<u32>],
    target_layer: usize,
    policy: &ExitPolicy,
    nn_k: usize,
    thresholds: &DiagThresholds,
) -> Result<DeploymentChecklist> {
    let depth = model.config().num_layers;
    if target_layer == 0 || target_layer > depth {
        return Err(LeapError::contract(format!(
            "target layer {target_layer} outside 1..={depth}"
        )));
    }
    if samples.len() <= nn_k {
        return Err(LeapError::contract(format!(
            "need more than {nn_k} samples for the neighborhood check, got {}",
            samples.len()
        )));
    }
    let mut target_rows = Vec::with_capacity(samples.len());
    let mut final_rows = Vec::with_capacity(samples.len());
    for tokens in samples {
        let trace = model.forward_trace(tokens, None)?;
        let layers = trace.normalized_layers()?;
        target_rows.push(layers[target_layer - 1].clone());
        final_rows.push(layers[depth - 1].clone());
    }
    let target_f64 = embedding_rows(&target_rows);
    let final_f64 = embedding_rows(&final_rows);
    let sim = target_f64
        .iter()
        .zip(&final_f64)
        .map(|(a, b)| {
            kernels::cosine(a.as_slice(), b.as_slice())
                .ok_or_else(|| LeapError::degenerate("zero-norm embedding"))
        })
        .sum::<Result<f64>>()?
        / samples.len() as f64;
    let (_, nn10) = metrics::nn_at_k(&target_f64, &final_f64, nn_k)?;
    let exit_rate = exit_rate_before_final(model, samples, policy)?;
    Ok(DeploymentChecklist::judge(target_layer, sim, nn10, exit_rate, thresholds))
}

/// Run every diagnostic and the checklist against one model and corpus.
pub fn run_all<F: Scalar>(
    model: &EncoderModel<F>,
    samples: &[Vec<u32>],
    config: &DiagnosticConfig,
) -> Result<DiagnosticReport> {
    config.policy.validate()?;
    let flat_curve = diag_flat_curve(model, samples, config.policy.l_min, &config.thresholds)?;
    let zero_exit = diag_zero_exit(model, samples, &config.policy)?;
    let overhead_dominates = diag_overhead(
        model,
        samples,
        &config.policy,
        config.overhead_iters,
        config.overhead_samples,
        &config.thresholds,
    )?;
    let checklist = deployment_checklist(
        model,
        samples,
        config.target_layer,
        &config.policy,
        config.nn_k,
        &config.thresholds,
    )?;
    Ok(DiagnosticReport {
        flat_curve,
        zero_exit,
        overhead_dominates,
        checklist,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Pooling};
    use crate::exit::ExitStrategy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            hidden_dim: 8,
            num_heads: 2,
            ff_dim: 12,
            vocab_size: 32,
            max_seq_len: 16,
            pooling: Pooling::Mean,
        }
    }

    fn sample_batch(n: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..8).map(|_| rng.gen_range(0..32)).collect())
            .collect()
    }

    fn policy(theta: f64, l_min: usize) -> ExitPolicy {
        ExitPolicy { theta, l_min, ..ExitPolicy::default() }
    }

    #[test]
    fn flat_curve_judgement_cases() {
        let t = DiagThresholds::default();
        let low: Vec<(usize, f64)> = (6..12).map(|l| (l, 0.4)).collect();
        assert_eq!(FlatCurveDiag::judge(&low, 1.0, &t), Verdict::Incompatible);

        let rising: Vec<(usize, f64)> =
            vec![(6, 0.80), (7, 0.85), (8, 0.90), (9, 0.94), (10, 0.97), (11, 0.99)];
        assert_eq!(FlatCurveDiag::judge(&rising, 1.0, &t), Verdict::Compatible);

        let jagged: Vec<(usize, f64)> =
            vec![(6, 0.80), (7, 0.75), (8, 0.85), (9, 0.78), (10, 0.88), (11, 0.95)];
        assert_eq!(FlatCurveDiag::judge(&jagged, 0.6, &t), Verdict::Inconclusive);

        let high_but_sagging: Vec<(usize, f64)> = vec![(6, 0.95), (7, 0.92), (8, 0.85)];
        assert_eq!(FlatCurveDiag::judge(&high_but_sagging, 0.0, &t), Verdict::Inconclusive);
    }

    #[test]
    fn zero_exit_judgement_is_binary() {
        assert_eq!(ZeroExitDiag::judge(0.0), Verdict::Incompatible);
        assert_eq!(ZeroExitDiag::judge(0.001), Verdict::Compatible);
        assert_eq!(ZeroExitDiag::judge(1.0), Verdict::Compatible);
    }

    #[test]
    fn overhead_judgement_requires_both_conditions() {
        let t = DiagThresholds::default();
        assert_eq!(OverheadDiag::judge(0.20, 0.05, &t), Verdict::Incompatible);
        assert_eq!(OverheadDiag::judge(0.20, 0.50, &t), Verdict::Compatible);
        assert_eq!(OverheadDiag::judge(0.05, 0.00, &t), Verdict::Compatible);
        assert_eq!(OverheadDiag::judge(0.16, 0.09, &t), Verdict::Incompatible);
    }

    #[test]
    fn checklist_judgement_matches_thresholds() {
        let t = DiagThresholds::default();
        let pass = DeploymentChecklist::judge(7, 0.963, 0.84, 0.919, &t);
        assert!(pass.all_pass);
        assert!(pass.items.iter().all(|i| i.pass));

        let fail = DeploymentChecklist::judge(7, 0.90, 0.84, 0.30, &t);
        assert!(!fail.all_pass);
        assert!(!fail.items[0].pass);
        assert!(fail.items[1].pass);
        assert!(!fail.items[2].pass);

        let zero = DiagThresholds {
            checklist_min_sim: 0.0,
            checklist_min_nn10: 0.0,
            checklist_min_exit_rate: 0.0,
            ..t
        };
        let trivially = DeploymentChecklist::judge(7, 0.5, 0.1, 0.01, &zero);
        assert!(trivially.all_pass);
    }

    #[test]
    fn near_identity_model_is_flat_curve_compatible() {
        let model = crate::encoder::EncoderModel::<f64>::init(tiny_config(6), 3, 1e-4).unwrap();
        let samples = sample_batch(12, 5);
        let diag = diag_flat_curve(&model, &samples, 3, &DiagThresholds::default()).unwrap();
        assert_eq!(diag.verdict, Verdict::Compatible, "{diag:?}");
        assert!(diag.layer_sims.iter().all(|&(_, s)| s > 0.999));
        assert_eq!(diag.layer_sims.len(), 3);
        assert_eq!(diag.layer_sims[0].0, 3);
    }

    #[test]
    fn random_model_with_unreachable_threshold_is_zero_exit_incompatible() {
        let model = crate::encoder::EncoderModel::<f64>::init(tiny_config(6), 7, 0.8).unwrap();
        let samples = sample_batch(10, 6);
        let diag = diag_zero_exit(&model, &samples, &policy(1.0, 3)).unwrap();
        assert_eq!(diag.exit_rate_before_final, 0.0);
        assert_eq!(diag.verdict, Verdict::Incompatible);
        assert_eq!(diag.theta, 1.0);
    }

    #[test]
    fn near_identity_model_exits_and_is_compatible() {
        let model = crate::encoder::EncoderModel::<f64>::init(tiny_config(6), 3, 1e-4).unwrap();
        let samples = sample_batch(10, 7);
        let diag = diag_zero_exit(&model, &samples, &policy(0.9, 3)).unwrap();
        assert!(diag.exit_rate_before_final > 0.9);
        assert_eq!(diag.verdict, Verdict::Compatible);
    }

    #[test]
    fn none_strategy_always_reports_zero_rate() {
        let model = crate::encoder::EncoderModel::<f64>::init(tiny_config(4), 9, 1e-4).unwrap();
        let samples = sample_batch(6, 8);
        let mut p = policy(0.5, 2);
        p.strategy = ExitStrategy::None;
        let diag = diag_zero_exit(&model, &samples, &p).unwrap();
        assert_eq!(diag.exit_rate_before_final, 0.0);
        assert_eq!(diag.verdict, Verdict::Incompatible);
    }

    #[test]
    fn full_report_verdicts_recompute_from_stored_numbers() {
        let model = crate::encoder::EncoderModel::<f64>::init(tiny_config(6), 11, 1e-3).unwrap();
        let samples = sample_batch(12, 9);
        let config = DiagnosticConfig {
            policy: policy(0.9, 3),
            target_layer: 4,
            overhead_iters: 3,
            overhead_samples: 4,
            nn_k: 3,
            ..DiagnosticConfig::default()
        };
        let report = run_all(&model, &samples, &config).unwrap();
        let t = &config.thresholds;
        assert_eq!(report.flat_curve.recompute_verdict(t), report.flat_curve.verdict);
        assert_eq!(report.zero_exit.recompute_verdict(), report.zero_exit.verdict);
        assert_eq!(
            report.overhead_dominates.recompute_verdict(t),
            report.overhead_dominates.verdict
        );
        assert_eq!(report.checklist.recompute(t), report.checklist);
    }

    #[test]
    fn report_round_trips_through_json() {
        let model = crate::encoder::EncoderModel::<f64>::init(tiny_config(4), 13, 1e-3).unwrap();
        let samples = sample_batch(8, 10);
        let config = DiagnosticConfig {
            policy: policy(0.9, 2),
            target_layer: 3,
            overhead_iters: 3,
            overhead_samples: 4,
            nn_k: 3,
            ..DiagnosticConfig::default()
        };
        let report = run_all(&model, &samples, &config).unwrap();
        let json = report.to_json().unwrap();
        let back: DiagnosticReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn text_report_names_every_section() {
        let model = crate::encoder::EncoderModel::<f64>::init(tiny_config(4), 17, 1e-3).unwrap();
        let samples = sample_batch(8, 11);
        let config = DiagnosticConfig {
            policy: policy(0.9, 2),
            target_layer: 3,
            overhead_iters: 3,
            overhead_samples: 4,
            nn_k: 3,
            ..DiagnosticConfig::default()
        };
        let report = run_all(&model, &samples, &config).unwrap();
        let text = report.to_text();
        assert!(text.contains("flat similarity curve"));
        assert!(text.contains("zero exit rate"));
        assert!(text.contains("monitoring overhead"));
        assert!(text.contains("deployment checklist"));
        assert!(text.contains("overall:"));
    }

    #[test]
    fn input_contracts_are_enforced() {
        let model = crate::encoder::EncoderModel::<f64>::init(tiny_config(4), 19, 1e-3).unwrap();
        let samples = sample_batch(8, 12);
        let t = DiagThresholds::default();
        assert!(diag_flat_curve(&model, &[], 2, &t).is_err());
        assert!(diag_flat_curve(&model, &samples, 4, &t).is_err());
        assert!(diag_flat_curve(&model, &samples, 0, &t).is_err());
        assert!(deployment_checklist(&model, &samples, 0, &policy(0.9, 2), 3, &t).is_err());
        assert!(deployment_checklist(&model, &samples, 5, &policy(0.9, 2), 3, &t).is_err());
        assert!(
            deployment_checklist(&model, &samples, 3, &policy(0.9, 2), 8, &t).is_err(),
            "k must be below the sample count"
        );
    }
}
