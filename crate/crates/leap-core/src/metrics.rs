//! Analysis quantities for layer trajectories, retrieval consistency, and
//! exit behavior: similarity-to-final curves, contraction ratios,
//! directional convergence, neighborhood overlap, Spearman correlation,
//! NDCG, exit distributions, and the threshold sweep that trades quality
//! against depth.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, LayerTrace};
use crate::error::{LeapError, Result};
use crate::exit::{infer_single, ExitPolicy, ExitResult};
use crate::scalar::Scalar;
use crate::tensor::{kernels, TensorData};

/// Per-layer trajectory statistics of one forward trace. All indices are
/// 0-based over the quantities that exist: entry `i` of `stability`,
/// `alignment`, and `gradient`-like fields describes the transition into
/// layer `i + 2` (1-indexed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerAnalysis {
    /// `cos(p_l, p_L)` for each layer `l`; the last entry is 1.
    pub sim_to_final: Vec<f64>,
    /// `cos(p_l, p_{l-1})` for `l = 2..=L`.
    pub stability: Vec<f64>,
    /// `‖p_{l+1} - p_l‖ / ‖p_l - p_{l-1}‖` for `l = 2..=L-1`; `None` marks a
    /// vanishing denominator.
    pub contraction: Vec<Option<f64>>,
    /// `cos(p_{l+1} - p_l, p_L - p_l)` for `l = 1..=L-1`; `None` marks a
    /// vanishing displacement. The final transition is 1 by construction.
    pub alignment: Vec<Option<f64>>,
}

/// Per-transition convergence direction: the change in similarity-to-final
/// and whether each step moves toward the final embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionalConvergence {
    /// `sim_to_final[l+1] - sim_to_final[l]` for `l = 1..=L-1`.
    pub gradient: Vec<f64>,
    /// `gradient >= 0` per transition.
    pub nonnegative: Vec<bool>,
    /// Same displacement cosines as [`LayerAnalysis::alignment`].
    pub alignment: Vec<Option<f64>>,
}

/// Where samples stop when a policy is applied over a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExitDistribution {
    /// `p_l` for `l = 1..=L`; sums to 1.
    pub probabilities: Vec<f64>,
    /// `Σ l · p_l`.
    pub expected_layers: f64,
    /// `L / E[l]`.
    pub layer_reduction: f64,
    /// `Σ_{j<=l} p_j` per layer.
    pub cumulative: Vec<f64>,
}

/// One point of the quality-depth tradeoff sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParetoRow {
    pub theta: f64,
    /// Spearman correlation of pair similarities on exited embeddings
    /// against the graded gold scores.
    pub quality: f64,
    pub expected_layers: f64,
    pub layer_reduction: f64,
    /// Fraction of samples exited at or before the reference layer.
    pub exit_at_ref: f64,
}

impl ParetoRow {
    pub fn csv_header(l_ref: usize) -> String {
        format!("theta,spearman,expected_layers,layer_reduction,exit_at_l{l_ref}")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.6},{:.4},{:.4},{:.4}",
            self.theta, self.quality, self.expected_layers, self.layer_reduction, self.exit_at_ref
        )
    }
}

/// Layer-quality gates for treating a layer as a usable exit point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ViabilityThresholds {
    pub sim_to_final: f64,
    pub nn_overlap: f64,
}

impl Default for ViabilityThresholds {
    fn default() -> Self {
        ViabilityThresholds { sim_to_final: 0.95, nn_overlap: 0.80 }
    }
}

impl ViabilityThresholds {
    /// A layer is viable when both its similarity to the final layer and its
    /// neighborhood overlap clear the gates.
    pub fn viable(&self, sim: f64, nn: f64) -> bool {
        sim >= self.sim_to_final && nn >= self.nn_overlap
    }
}

fn pooled_rows<F: Scalar>(trace: &LayerTrace<F>) -> Vec<Vec<f64>> {
    trace
        .pooled
        .iter()
        .map(|p| p.data().iter().map(|&v| v.to_f64().expect("finite value")).collect())
        .collect()
}

/// Convert embedding vectors to plain `f64` rows for the analysis functions.
pub fn embedding_rows<F: Scalar>(embeddings: &[TensorData<F>]) -> Vec<Vec<f64>> {
    embeddings
        .iter()
        .map(|e| e.data().iter().map(|&v| v.to_f64().expect("finite value")).collect())
        .collect()
}

fn cos_or_err(a: &[f64], b: &[f64]) -> Result<f64> {
    kernels::cosine(a, b)
        .map(|c| c.clamp(-1.0, 1.0))
        .ok_or_else(|| LeapError::degenerate("zero-norm vector in cosine"))
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

impl LayerAnalysis {
    pub fn from_trace<F: Scalar>(trace: &LayerTrace<F>) -> Result<Self> {
        let p = pooled_rows(trace);
        let l_total = p.len();
        if l_total < 2 {
            return Err(LeapError::contract(format!(
                "layer analysis needs at least 2 layers, got {l_total}"
            )));
        }
        let last = &p[l_total - 1];
        let sim_to_final =
            p.iter().map(|row| cos_or_err(row, last)).collect::<Result<Vec<_>>>()?;
        let stability =
            p.windows(2).map(|w| cos_or_err(&w[1], &w[0])).collect::<Result<Vec<_>>>()?;
        let contraction = if l_total >= 3 { contraction_from_rows(&p) } else { Vec::new() };
        let alignment = alignment_from_rows(&p);
        Ok(LayerAnalysis { sim_to_final, stability, contraction, alignment })
    }
}

fn contraction_from_rows(p: &[Vec<f64>]) -> Vec<Option<f64>> {
    let l_total = p.len();
    let mut out = Vec::with_capacity(l_total - 2);
    for l in 2..l_total {
        let num = kernels::l2_norm(&sub(&p[l], &p[l - 1]));
        let den = kernels::l2_norm(&sub(&p[l - 1], &p[l - 2]));
        out.push(if den < 1e-12 { None } else { Some(num / den) });
    }
    out
}

fn alignment_from_rows(p: &[Vec<f64>]) -> Vec<Option<f64>> {
    let l_total = p.len();
    let last = &p[l_total - 1];
    let mut out = Vec::with_capacity(l_total - 1);
    for l in 0..l_total - 1 {
        let step = sub(&p[l + 1], &p[l]);
        let to_final = sub(last, &p[l]);
        out.push(kernels::cosine(&step, &to_final).map(|c| c.clamp(-1.0, 1.0)));
    }
    out
}

/// Contraction ratios `γ_l = ‖p_{l+1}-p_l‖ / ‖p_l-p_{l-1}‖` for
/// `l = 2..=L-1`. Vanishing denominators yield `None` rather than an error
/// so downstream medians can skip them.
pub fn contraction_ratio<F: Scalar>(trace: &LayerTrace<F>) -> Result<Vec<Option<f64>>> {
    let p = pooled_rows(trace);
    if p.len() < 3 {
        return Err(LeapError::contract(format!(
            "contraction ratio needs at least 3 layers, got {}",
            p.len()
        )));
    }
    Ok(contraction_from_rows(&p))
}

/// Median over the defined entries; `None` when every entry is undefined.
pub fn median_defined(values: &[Option<f64>]) -> Option<f64> {
    let mut defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return None;
    }
    defined.sort_by(|a, b| a.total_cmp(b));
    let n = defined.len();
    Some(if n % 2 == 1 { defined[n / 2] } else { 0.5 * (defined[n / 2 - 1] + defined[n / 2]) })
}

/// Per-transition similarity gradient and displacement alignment.
pub fn directional_convergence<F: Scalar>(
    trace: &LayerTrace<F>,
) -> Result<DirectionalConvergence> {
    let analysis = LayerAnalysis::from_trace(trace)?;
    let gradient: Vec<f64> =
        analysis.sim_to_final.windows(2).map(|w| w[1] - w[0]).collect();
    let nonnegative = gradient.iter().map(|&g| g >= 0.0).collect();
    Ok(DirectionalConvergence { gradient, nonnegative, alignment: analysis.alignment })
}

/// Per-sample overlap between each point's `k` nearest neighbors (cosine,
/// self excluded, ties broken by lower index) in the layer space and in the
/// final space, plus the mean overlap.
pub fn nn_at_k(
    layer: &[Vec<f64>],
    final_: &[Vec<f64>],
    k: usize,
) -> Result<(Vec<f64>, f64)> {
    let n = layer.len();
    if n != final_.len() {
        return Err(LeapError::contract(format!(
            "layer set has {n} points, final set has {}",
            final_.len()
        )));
    }
    if k == 0 {
        return Err(LeapError::contract("k must be at least 1".to_string()));
    }
    if n <= k {
        return Err(LeapError::contract(format!(
            "need more than k={k} points, got {n}"
        )));
    }
    let mut overlaps = Vec::with_capacity(n);
    for i in 0..n {
        let a = neighbor_set(layer, i, k)?;
        let b = neighbor_set(final_, i, k)?;
        let inter = a.iter().filter(|x| b.contains(x)).count();
        overlaps.push(inter as f64 / k as f64);
    }
    let mean = overlaps.iter().sum::<f64>() / n as f64;
    Ok((overlaps, mean))
}

fn neighbor_set(points: &[Vec<f64>], i: usize, k: usize) -> Result<Vec<usize>> {
    let mut sims: Vec<(usize, f64)> = Vec::with_capacity(points.len() - 1);
    for (j, p) in points.iter().enumerate() {
        if j == i {
            continue;
        }
        sims.push((j, cos_or_err(&points[i], p)?));
    }
    sims.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    Ok(sims.into_iter().take(k).map(|(j, _)| j).collect())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LeapError::contract(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(LeapError::contract(format!(
            "rank correlation needs at least 3 pairs, got {}",
            a.len()
        )));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos + 1;
        while end < n && values[order[end]] == values[order[pos]] {
            end += 1;
        }
        // 1-based ranks pos+1..=end averaged over the tie group.
        let avg = (pos + 1 + end) as f64 / 2.0;
        for &idx in &order[pos..end] {
            ranks[idx] = avg;
        }
        pos = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va < 1e-300 || vb < 1e-300 {
        return Err(LeapError::degenerate(
            "rank correlation undefined for constant input",
        ));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// NDCG@k with log2 discounts: `DCG = Σ gain_i / log2(i + 1)` over the first
/// `k` ranked ids, normalized by the ideal ordering of all gains. Returns 0
/// when nothing relevant exists.
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashMap<usize, f64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(LeapError::contract("k must be at least 1".to_string()));
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| relevant.get(id).copied().unwrap_or(0.0) / ((i + 2) as f64).log2())
        .sum();
    let mut gains: Vec<f64> = relevant.values().copied().collect();
    gains.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = gains
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum();
    if idcg <= 0.0 {
        return Ok(0.0);
    }
    Ok(dcg / idcg)
}

impl ExitDistribution {
    /// Histogram of 1-indexed exit layers over a corpus.
    pub fn from_layers(exit_layers: &[usize], total_layers: usize) -> Result<Self> {
        if exit_layers.is_empty() {
            return Err(LeapError::contract("exit distribution needs at least one sample".to_string()));
        }
        if total_layers == 0 {
            return Err(LeapError::contract("total_layers must be positive".to_string()));
        }
        let mut counts = vec![0usize; total_layers];
        for &l in exit_layers {
            if l == 0 || l > total_layers {
                return Err(LeapError::contract(format!(
                    "exit layer {l} outside 1..={total_layers}"
                )));
            }
            counts[l - 1] += 1;
        }
        let n = exit_layers.len() as f64;
        let probabilities: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        let expected_layers: f64 =
            probabilities.iter().enumerate().map(|(i, &p)| (i + 1) as f64 * p).sum();
        let mut cumulative = Vec::with_capacity(total_layers);
        let mut acc = 0.0;
        for &p in &probabilities {
            acc += p;
            cumulative.push(acc);
        }
        Ok(ExitDistribution {
            probabilities,
            expected_layers,
            layer_reduction: total_layers as f64 / expected_layers,
            cumulative,
        })
    }

    pub fn from_results<F: Scalar>(
        results: &[ExitResult<F>],
        total_layers: usize,
    ) -> Result<Self> {
        let layers: Vec<usize> = results.iter().map(|r| r.exit_layer).collect();
        Self::from_layers(&layers, total_layers)
    }

    /// Fraction of samples exited at or before layer `l` (1-indexed).
    pub fn cumulative_at(&self, l: usize) -> f64 {
        if l == 0 {
            0.0
        } else {
            self.cumulative[(l - 1).min(self.cumulative.len() - 1)]
        }
    }
}

/// Sweep the exit threshold over a grid: for each θ, run adaptive inference
/// on every sample, score pair similarities on the exited embeddings against
/// the gold scores, and record the depth statistics. `l_ref` is the
/// reference layer for the cumulative exit-rate column.
pub fn pareto_sweep<F: Scalar>(
    model: &EncoderModel<F>,
    samples: &[Vec<u32>],
    pairs: &[(usize, usize, f64)],
    theta_grid: &[f64],
    policy_base: &ExitPolicy,
    l_ref: usize,
) -> Result<Vec<ParetoRow>> {
    if theta_grid.is_empty() {
        return Err(LeapError::contract("theta grid must be nonempty".to_string()));
    }
    if let Some(&(a, b, _)) = pairs.iter().find(|&&(a, b, _)| a >= samples.len() || b >= samples.len())
    {
        return Err(LeapError::contract(format!(
            "pair ({a}, {b}) indexes outside {} samples",
            samples.len()
        )));
    }
    let total_layers = model.config().num_layers;
    let mut rows = Vec::with_capacity(theta_grid.len());
    for &theta in theta_grid {
        let policy = ExitPolicy { theta, ..*policy_base };
        let results: Vec<ExitResult<F>> = samples
            .iter()
            .map(|tokens| infer_single(model, tokens, None, &policy))
            .collect::<Result<_>>()?;
        let dist = ExitDistribution::from_results(&results, total_layers)?;
        let rows_f64 = embedding_rows(
            &results.iter().map(|r| r.embedding.clone()).collect::<Vec<_>>(),
        );
        let pred: Vec<f64> = pairs
            .iter()
            .map(|&(a, b, _)| cos_or_err(&rows_f64[a], &rows_f64[b]))
            .collect::<Result<_>>()?;
        let gold: Vec<f64> = pairs.iter().map(|&(_, _, s)| s).collect();
        let quality = spearman(&pred, &gold)?;
        rows.push(ParetoRow {
            theta,
            quality,
            expected_layers: dist.expected_layers,
            layer_reduction: dist.layer_reduction,
            exit_at_ref: dist.cumulative_at(l_ref),
        });
    }
    Ok(rows)
}
