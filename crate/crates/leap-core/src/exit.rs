//! Inference-time adaptive depth. A forward pass runs layer by layer; once
//! consecutive pooled embeddings stop moving (cosine between the current
//! layer and the one `patience` steps back reaches `theta`), the pass stops
//! and that layer's embedding is returned. Layers past the exit are never
//! computed.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{LeapError, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, TensorData};

/// How the per-layer convergence signal turns into a stop decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStrategy {
    /// Stop at the first layer whose similarity clears the threshold.
    Convergence,
    /// Stop once the threshold holds for `pabee_patience` consecutive layers.
    Pabee,
    /// Never stop early; run the full stack.
    None,
}

/// Early-exit decision rule. `patience` is the lookback distance k in the
/// similarity `cos(p_l, p_{l-k})`; `l_min` is the earliest layer allowed to
/// exit; ties at exactly `theta` exit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub theta: f64,
    pub patience: usize,
    pub l_min: usize,
    pub strategy: ExitStrategy,
    pub pabee_patience: usize,
}

impl Default for ExitPolicy {
    fn default() -> Self {
        ExitPolicy {
            theta: 0.95,
            patience: 1,
            l_min: 6,
            strategy: ExitStrategy::Convergence,
            pabee_patience: 2,
        }
    }
}

impl ExitPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(LeapError::config(format!(
                "theta must lie in (0, 1], got {}",
                self.theta
            )));
        }
        if self.patience == 0 {
            return Err(LeapError::config("patience must be at least 1".to_string()));
        }
        if self.l_min == 0 {
            return Err(LeapError::config("l_min must be at least 1".to_string()));
        }
        if self.strategy == ExitStrategy::Pabee && self.pabee_patience == 0 {
            return Err(LeapError::config("pabee_patience must be at least 1".to_string()));
        }
        Ok(())
    }

    /// Lookback distance actually used for the similarity signal. The
    /// patience baseline always compares adjacent layers.
    fn lookback(&self) -> usize {
        match self.strategy {
            ExitStrategy::Pabee => 1,
            _ => self.patience,
        }
    }
}

/// Outcome of one adaptive forward pass.
#[derive(Debug, Clone)]
pub struct ExitResult<F: Scalar> {
    /// 1-indexed layer whose embedding was returned.
    pub exit_layer: usize,
    /// Unit-norm pooled embedding from `exit_layer`.
    pub embedding: TensorData<F>,
    /// `(layer, cos(p_l, p_{l-k}))` for every layer where the signal exists.
    pub similarity_trail: Vec<(usize, f64)>,
    pub exited_early: bool,
}

impl<F: Scalar> ExitResult<F> {
    /// One JSON-lines record; the embedding is omitted to keep logs small.
    pub fn jsonl_record(&self, id: &str) -> serde_json::Value {
        let trail: Vec<serde_json::Value> = self
            .similarity_trail
            .iter()
            .map(|&(l, s)| serde_json::json!([l, s]))
            .collect();
        serde_json::json!({
            "id": id,
            "exit_layer": self.exit_layer,
            "exited_early": self.exited_early,
            "trail": trail,
        })
    }
}

/// Write one JSON-lines record per result.
pub fn write_exit_results<F: Scalar>(
    path: &Path,
    results: &[(String, ExitResult<F>)],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, r) in results {
        serde_json::to_writer(&mut out, &r.jsonl_record(id))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Tracks the stop decision as per-layer similarities stream in.
struct ExitDecider {
    policy: ExitPolicy,
    consecutive: usize,
}

impl ExitDecider {
    fn new(policy: ExitPolicy) -> Self {
        ExitDecider { policy, consecutive: 0 }
    }

    /// Feed the similarity observed at layer `l`; true means stop here.
    fn observe(&mut self, l: usize, s: f64) -> bool {
        let p = &self.policy;
        match p.strategy {
            ExitStrategy::None => false,
            ExitStrategy::Convergence => l >= p.l_min && l > p.patience && s >= p.theta,
            ExitStrategy::Pabee => {
                if l >= p.l_min && s >= p.theta {
                    self.consecutive += 1;
                } else {
                    self.consecutive = 0;
                }
                self.consecutive >= p.pabee_patience
            }
        }
    }
}

fn normalized<F: Scalar>(pooled: &TensorData<F>) -> Result<TensorData<F>> {
    let n = kernels::l2_norm(pooled.data());
    if n.to_f64().expect("norm is finite") < 1e-30 {
        return Err(LeapError::degenerate("pooled embedding has zero norm"));
    }
    let data = pooled.data().iter().map(|&v| v / n).collect();
    Ok(TensorData::new(pooled.shape().to_vec(), data).expect("shape preserved"))
}

fn run_single<F: Scalar>(
    model: &EncoderModel<F>,
    tokens: &[u32],
    mask: Option<&[bool]>,
    policy: &ExitPolicy,
    allow_exit: bool,
) -> Result<(ExitResult<F>, usize)> {
    policy.validate()?;
    let total = model.config().num_layers;
    if policy.l_min > total {
        return Err(LeapError::contract(format!(
            "l_min {} exceeds model depth {total}",
            policy.l_min
        )));
    }
    let k = policy.lookback();
    let mut fwd = model.stepwise_masked(tokens, mask)?;
    let mut decider = ExitDecider::new(*policy);
    let mut history: Vec<TensorData<F>> = Vec::with_capacity(total);
    let mut trail = Vec::new();

    while let Some(pooled) = fwd.step() {
        let l = fwd.layers_done();
        history.push(pooled);
        if l > k {
            let prev = &history[l - k - 1];
            let cur = &history[l - 1];
            let s = match kernels::cosine(cur.data(), prev.data()) {
                Some(c) => c.to_f64().expect("finite cosine"),
                None => return Err(LeapError::degenerate("pooled embedding has zero norm")),
            };
            trail.push((l, s));
            if decider.observe(l, s) && allow_exit {
                let result = ExitResult {
                    exit_layer: l,
                    embedding: normalized(&history[l - 1])?,
                    similarity_trail: trail,
                    exited_early: true,
                };
                return Ok((result, fwd.layers_done()));
            }
        }
    }
    let result = ExitResult {
        exit_layer: total,
        embedding: normalized(&history[total - 1])?,
        similarity_trail: trail,
        exited_early: false,
    };
    Ok((result, fwd.layers_done()))
}

/// Adaptive forward pass over one sample.
pub fn infer_single<F: Scalar>(
    model: &EncoderModel<F>,
    tokens: &[u32],
    mask: Option<&[bool]>,
    policy: &ExitPolicy,
) -> Result<ExitResult<F>> {
    Ok(run_single(model, tokens, mask, policy, true)?.0)
}

/// [`infer_single`] plus the number of layers actually executed, for
/// asserting that nothing past the exit layer ran.
pub fn infer_single_counted<F: Scalar>(
    model: &EncoderModel<F>,
    tokens: &[u32],
    mask: Option<&[bool]>,
    policy: &ExitPolicy,
) -> Result<(ExitResult<F>, usize)> {
    run_single(model, tokens, mask, policy, true)
}

/// Full-depth pass with the convergence signal computed but exits
/// suppressed; isolates the cost of monitoring itself.
pub fn infer_monitored_no_exit<F: Scalar>(
    model: &EncoderModel<F>,
    tokens: &[u32],
    mask: Option<&[bool]>,
    policy: &ExitPolicy,
) -> Result<ExitResult<F>> {
    Ok(run_single(model, tokens, mask, policy, false)?.0)
}

/// Patience-based baseline: exit once the adjacent-layer similarity clears
/// the threshold for `p` consecutive layers at or past `l_min`.
pub fn infer_pabee<F: Scalar>(
    model: &EncoderModel<F>,
    tokens: &[u32],
    mask: Option<&[bool]>,
    policy: &ExitPolicy,
    p: usize,
) -> Result<ExitResult<F>> {
    let pabee = ExitPolicy { strategy: ExitStrategy::Pabee, pabee_patience: p, ..*policy };
    infer_single(model, tokens, mask, &pabee)
}

/// Batched adaptive inference. Every sample advances one layer per round
/// until all have exited, so compute runs to the latest exit in the batch;
/// each sample's embedding is snapshotted at its own exit layer and is
/// bit-identical to [`infer_single`] on that sample.
pub fn infer_batch<F: Scalar>(
    model: &EncoderModel<F>,
    batch: &[Vec<u32>],
    policy: &ExitPolicy,
) -> Result<(Vec<ExitResult<F>>, usize)> {
    policy.validate()?;
    if batch.is_empty() {
        return Err(LeapError::contract("batch must be nonempty".to_string()));
    }
    let total = model.config().num_layers;
    if policy.l_min > total {
        return Err(LeapError::contract(format!(
            "l_min {} exceeds model depth {total}",
            policy.l_min
        )));
    }
    let k = policy.lookback();

    struct Lane<'m, F: Scalar> {
        fwd: crate::encoder::StepwiseForward<'m, F>,
        decider: ExitDecider,
        history: Vec<TensorData<F>>,
        trail: Vec<(usize, f64)>,
        exit: Option<(usize, bool)>,
    }
    let mut lanes: Vec<Lane<'_, F>> = batch
        .iter()
        .map(|tokens| {
            Ok(Lane {
                fwd: model.stepwise_masked(tokens, None)?,
                decider: ExitDecider::new(*policy),
                history: Vec::with_capacity(total),
                trail: Vec::new(),
                exit: None,
            })
        })
        .collect::<Result<_>>()?;

    let mut executed_layers = 0;
    for l in 1..=total {
        let all_done = lanes.iter().all(|lane| lane.exit.is_some());
        if all_done {
            break;
        }
        executed_layers = l;
        for lane in &mut lanes {
            let pooled = lane.fwd.step().expect("stack not exhausted");
            lane.history.push(pooled);
            if lane.exit.is_none() && l > k {
                let s = match kernels::cosine(
                    lane.history[l - 1].data(),
                    lane.history[l - k - 1].data(),
                ) {
                    Some(c) => c.to_f64().expect("finite cosine"),
                    None => {
                        return Err(LeapError::degenerate("pooled embedding has zero norm"))
                    }
                };
                lane.trail.push((l, s));
                if lane.decider.observe(l, s) {
                    lane.exit = Some((l, true));
                }
            }
        }
    }

    let results = lanes
        .into_iter()
        .map(|lane| {
            let (exit_layer, exited_early) = lane.exit.unwrap_or((total, false));
            Ok(ExitResult {
                exit_layer,
                embedding: normalized(&lane.history[exit_layer - 1])?,
                similarity_trail: lane.trail,
                exited_early,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((results, executed_layers))
}

/// Fractional wall-clock cost of convergence monitoring: full-depth passes
/// with the signal computed but exits suppressed, against plain full-depth
/// passes. A few unmeasured rounds warm caches first.
pub fn monitoring_overhead<F: Scalar>(
    model: &EncoderModel<F>,
    batch: &[Vec<u32>],
    iters: usize,
    policy: &ExitPolicy,
) -> Result<f64> {
    if iters == 0 {
        return Err(LeapError::contract("iters must be at least 1".to_string()));
    }
    if batch.is_empty() {
        return Err(LeapError::contract("batch must be nonempty".to_string()));
    }
    policy.validate()?;

    let plain_pass = |acc: &mut f64| -> Result<()> {
        for tokens in batch {
            let e = model.encode_final(tokens, None)?;
            *acc += e.data()[0].to_f64().unwrap_or(0.0);
        }
        Ok(())
    };
    let monitored_pass = |acc: &mut f64| -> Result<()> {
        for tokens in batch {
            let r = infer_monitored_no_exit(model, tokens, None, policy)?;
            *acc += r.embedding.data()[0].to_f64().unwrap_or(0.0);
        }
        Ok(())
    };

    let mut sink = 0.0;
    for _ in 0..iters.min(5).max(2) {
        plain_pass(&mut sink)?;
        monitored_pass(&mut sink)?;
    }

    let t0 = Instant::now();
    for _ in 0..iters {
        plain_pass(&mut sink)?;
    }
    let t_plain = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    for _ in 0..iters {
        monitored_pass(&mut sink)?;
    }
    let t_monitored = t1.elapsed().as_secs_f64();

    // The sink keeps the optimizer from discarding the forward passes.
    if !sink.is_finite() {
        return Err(LeapError::NonFinite("monitoring probe accumulated non-finite values"));
    }
    Ok((t_monitored - t_plain) / t_plain)
}
