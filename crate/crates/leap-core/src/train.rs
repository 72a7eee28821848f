//! Training loops: a similarity-regression teacher, distillation of students
//! under any subset of the loss terms, and the ablation and sensitivity
//! sweeps built from repeated distillation runs. All loops are single
//! threaded and deterministic for a fixed seed.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ScoredPair, SyntheticCorpus};
use crate::encoder::{uniform_layer_map, EncoderModel, LayerTrace, Projection};
use crate::error::{LeapError, Result};
use crate::exit::{self, ExitPolicy};
use crate::losses::{total_loss, LeapLossWeights, LossBreakdown, LossMask};
use crate::metrics::{self, ExitDistribution};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorData};

/// Adaptive-moment optimizer settings. Weight decay is decoupled from the
/// gradient and off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with per-parameter first and second moments. Parameters that
/// receive no gradient in a step are left untouched.
pub struct Adam<F: Scalar> {
    cfg: AdamConfig,
    m: Vec<TensorData<F>>,
    v: Vec<TensorData<F>>,
    t: u32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &[TensorData<F>], cfg: AdamConfig) -> Self {
        let m = params.iter().map(|p| TensorData::zeros(p.shape().to_vec())).collect();
        let v = params.iter().map(|p| TensorData::zeros(p.shape().to_vec())).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn step(
        &mut self,
        params: &mut [TensorData<F>],
        grads: &[Option<TensorData<F>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(LeapError::contract(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(LeapError::dimension(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i].to_f64().unwrap_or(f64::NAN);
                let mi = b1 * md[i].to_f64().unwrap_or(0.0) + (1.0 - b1) * gi;
                let vi = b2 * vd[i].to_f64().unwrap_or(0.0) + (1.0 - b2) * gi * gi;
                md[i] = F::from(mi).unwrap_or_else(F::zero);
                vd[i] = F::from(vi).unwrap_or_else(F::zero);
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let mut pi = pd[i].to_f64().unwrap_or(0.0);
                pi -= lr * (mhat / (vhat.sqrt() + self.cfg.eps));
                if self.cfg.weight_decay > 0.0 {
                    pi -= lr * self.cfg.weight_decay * pd[i].to_f64().unwrap_or(0.0);
                }
                pd[i] = F::from(pi).unwrap_or_else(F::zero);
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their global norm is at most `max_norm`.
/// Returns the factor applied (1.0 when already within bounds).
pub fn clip_global_norm<F: Scalar>(grads: &mut [Option<TensorData<F>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g.data() {
            let v = x.to_f64().unwrap_or(0.0);
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut().flatten() {
        for x in g.data_mut() {
            let v = x.to_f64().unwrap_or(0.0) * factor;
            *x = F::from(v).unwrap_or_else(F::zero);
        }
    }
    factor
}

/// Linear warmup into a cosine decay. `step` is zero based.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_fraction: f64, lr_max: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = (total_steps as f64 * warmup_fraction).floor() as usize;
    if warmup > 0 && step < warmup {
        return lr_max * (step + 1) as f64 / warmup as f64;
    }
    let span = (total_steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// One optimizer step: the learning rate used, the position in the overall
/// schedule, and named loss components summing to `total` under the run's
/// weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub schedule_fraction: f64,
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

/// End-of-epoch validation snapshot. `val_exit_rate` is absent for models
/// trained without an exit policy in play (the teacher).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub val_spearman: f64,
    pub val_exit_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Append one step, enforcing strictly increasing step numbers and
    /// finite values.
    pub fn record_step(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if rec.step <= last.step {
                return Err(LeapError::contract(format!(
                    "step {} recorded after step {}",
                    rec.step, last.step
                )));
            }
        }
        let finite = rec.total.is_finite()
            && rec.lr.is_finite()
            && rec.schedule_fraction.is_finite()
            && rec.components.iter().all(|(_, v)| v.is_finite());
        if !finite {
            return Err(LeapError::NonFinite("training log rejected a non-finite record"));
        }
        self.steps.push(rec);
        Ok(())
    }

    pub fn record_epoch(&mut self, rec: EpochRecord) -> Result<()> {
        let finite = rec.mean_total.is_finite()
            && rec.val_spearman.is_finite()
            && rec.val_exit_rate.map_or(true, f64::is_finite);
        if !finite {
            return Err(LeapError::NonFinite("training log rejected a non-finite record"));
        }
        self.epochs.push(rec);
        Ok(())
    }

    /// `step,lr,schedule_fraction,total,<component names>`; all records must
    /// share the component layout of the first.
    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,lr,schedule_fraction,total");
        if let Some(first) = self.steps.first() {
            for (name, _) in &first.components {
                out.push(',');
                out.push_str(name);
            }
        }
        out.push('\n');
        for rec in &self.steps {
            out.push_str(&format!(
                "{},{},{},{}",
                rec.step, rec.lr, rec.schedule_fraction, rec.total
            ));
            for (_, v) in &rec.components {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,mean_total,val_spearman,val_exit_rate\n");
        for rec in &self.epochs {
            let rate = rec.val_exit_rate.map(|r| r.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{rate}\n",
                rec.epoch, rec.mean_total, rec.val_spearman
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Write a checkpoint next to its destination, then rename into place so a
/// crash never leaves a half-written file under the final name.
pub fn atomic_save_weights<F: Scalar>(model: &EncoderModel<F>, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    model.save_weights(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Teacher training settings: pair-similarity regression plus a spread
/// penalty that keeps intermediate layers away from the final embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    /// Weight on the spread penalty.
    pub spread_weight: f64,
    /// Pre-final layers may sit at most this close (cosine) to the final
    /// embedding before the penalty engages.
    pub spread_margin: f64,
    /// Weight on the consecutive-layer separation penalty.
    pub adjacent_weight: f64,
    /// Consecutive trace layers may sit at most this close (cosine) to each
    /// other before the penalty engages.
    pub adjacent_margin: f64,
    /// Layer distance of the separated pairs. A student whose layer map
    /// strides the teacher trace inherits the geometry of same-stride pairs,
    /// so the penalty should separate those.
    pub separation_stride: usize,
    /// Stop after any epoch whose validation Spearman reaches this.
    pub early_stop_spearman: Option<f64>,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            lr: 2e-3,
            batch_size: 16,
            epochs: 4,
            warmup_fraction: 0.1,
            seed: 11,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            spread_weight: 1.0,
            spread_margin: 0.5,
            adjacent_weight: 1.0,
            adjacent_margin: 0.75,
            separation_stride: 1,
            early_stop_spearman: Some(0.85),
        }
    }
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(LeapError::config(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(LeapError::config(format!("bad learning rate {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(LeapError::config("batch size and epochs must be positive".to_string()));
        }
        if self.spread_weight < 0.0 || !(-1.0..=1.0).contains(&self.spread_margin) {
            return Err(LeapError::config("bad spread penalty settings".to_string()));
        }
        if self.adjacent_weight < 0.0 || !(-1.0..=1.0).contains(&self.adjacent_margin) {
            return Err(LeapError::config("bad adjacent separation settings".to_string()));
        }
        if self.separation_stride == 0 {
            return Err(LeapError::config("separation stride must be positive".to_string()));
        }
        Ok(())
    }
}

/// Mean Spearman-ready predictions: cosine of full-depth final embeddings
/// for each pair, correlated against gold.
pub fn spearman_full_on<F: Scalar>(
    model: &EncoderModel<F>,
    corpus: &SyntheticCorpus,
    pairs: &[ScoredPair],
) -> Result<f64> {
    let ids: BTreeSet<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    let mut emb = std::collections::HashMap::new();
    for &id in &ids {
        let trace = model.forward_trace(&corpus.sentences[id].tokens, None)?;
        let layers = trace.normalized_layers()?;
        let last = layers.last().expect("nonempty trace");
        emb.insert(id, last.data().iter().map(|&v| v.to_f64().unwrap_or(0.0)).collect::<Vec<f64>>());
    }
    let preds: Vec<f64> = pairs
        .iter()
        .map(|p| {
            crate::tensor::kernels::cosine(emb[&p.a].as_slice(), emb[&p.b].as_slice())
                .ok_or_else(|| LeapError::degenerate("zero-norm embedding"))
        })
        .collect::<Result<_>>()?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    metrics::spearman(&preds, &gold)
}

/// Quality and exit behavior of a student on a pair set: Spearman with
/// full-depth embeddings, Spearman with early-exit embeddings, and the exit
/// statistics over the referenced sentences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub spearman_full: f64,
    pub spearman_exited: f64,
    pub exit_rate: f64,
    pub expected_layers: f64,
    pub layer_reduction: f64,
}

pub fn evaluate_student<F: Scalar>(
    model: &EncoderModel<F>,
    corpus: &SyntheticCorpus,
    pairs: &[ScoredPair],
    policy: &ExitPolicy,
) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(LeapError::contract("evaluation pair set is empty".to_string()));
    }
    let depth = model.config().num_layers;
    let ids: BTreeSet<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    let mut full = std::collections::HashMap::new();
    let mut exited = std::collections::HashMap::new();
    let mut results = Vec::with_capacity(ids.len());
    for &id in &ids {
        let tokens = &corpus.sentences[id].tokens;
        let trace = model.forward_trace(tokens, None)?;
        let layers = trace.normalized_layers()?;
        let last = layers.last().expect("nonempty trace");
        full.insert(
            id,
            last.data().iter().map(|&v| v.to_f64().unwrap_or(0.0)).collect::<Vec<f64>>(),
        );
        let res = exit::infer_single(model, tokens, None, policy)?;
        exited.insert(
            id,
            res.embedding.data().iter().map(|&v| v.to_f64().unwrap_or(0.0)).collect::<Vec<f64>>(),
        );
        results.push(res);
    }
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    let preds_of = |emb: &std::collections::HashMap<usize, Vec<f64>>| -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|p| {
                crate::tensor::kernels::cosine(emb[&p.a].as_slice(), emb[&p.b].as_slice())
                    .ok_or_else(|| LeapError::degenerate("zero-norm embedding"))
            })
            .collect()
    };
    let dist = ExitDistribution::from_results(&results, depth)?;
    let exit_rate =
        results.iter().filter(|r| r.exit_layer < depth).count() as f64 / results.len() as f64;
    Ok(EvalSummary {
        spearman_full: metrics::spearman(&preds_of(&full)?, &gold)?,
        spearman_exited: metrics::spearman(&preds_of(&exited)?, &gold)?,
        exit_rate,
        expected_layers: dist.expected_layers,
        layer_reduction: dist.layer_reduction,
    })
}

fn assert_finite_total(total: f64, step: usize, components: &[(String, f64)]) -> Result<()> {
    if total.is_finite() {
        return Ok(());
    }
    Err(LeapError::contract(format!(
        "training diverged at step {step}: total {total}, components {components:?}"
    )))
}

/// Train an encoder to regress pair similarity on its final embedding while
/// holding intermediate layers away from it and away from each other, so
/// every block of the trace carries a real transformation. Returns the
/// trained model and the log.
pub fn train_teacher<F: Scalar>(
    init: &EncoderModel<F>,
    cfg: &TeacherTrainConfig,
    corpus: &SyntheticCorpus,
    train_pairs: &[ScoredPair],
    val_pairs: &[ScoredPair],
) -> Result<(EncoderModel<F>, TrainLog)> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(LeapError::contract("no training pairs".to_string()));
    }
    let depth = init.config().num_layers;
    let mut params: Vec<TensorData<F>> =
        init.param_refs().iter().map(|(_, v)| (*v).clone()).collect();
    let mut adam = Adam::new(&params, cfg.adam);
    let mut log = TrainLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let batches_per_epoch = (train_pairs.len() / cfg.batch_size).max(1);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size).take(batches_per_epoch) {
            let model = init.with_params(&params)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let mut sq_terms: Vec<Tensor> = Vec::with_capacity(chunk.len());
            let mut spread_terms: Vec<Tensor> = Vec::new();
            let mut adjacent_terms: Vec<Tensor> = Vec::new();
            let hinge_sq = |g: &mut Graph<F>, cos: Tensor, margin: f64| -> Result<Tensor> {
                let over = g.add_const(cos, -margin)?;
                let hinge = g.clamp_min(over, 0.0)?;
                g.mul(hinge, hinge)
            };
            for &pi in chunk {
                let pair = &train_pairs[pi];
                let mut pair_embs = [None, None];
                for (slot, id) in [(0usize, pair.a), (1usize, pair.b)] {
                    let trace = bound.forward_trace(&mut g, &corpus.sentences[id].tokens)?;
                    for l in 1..depth {
                        let cos = g.dot(trace.normalized[l - 1], trace.final_embedding)?;
                        spread_terms.push(hinge_sq(&mut g, cos, cfg.spread_margin)?);
                        if l >= cfg.separation_stride {
                            let adj = g.dot(
                                trace.normalized[l - cfg.separation_stride],
                                trace.normalized[l],
                            )?;
                            adjacent_terms.push(hinge_sq(&mut g, adj, cfg.adjacent_margin)?);
                        }
                    }
                    pair_embs[slot] = Some(trace.final_embedding);
                }
                let sim = g.dot(pair_embs[0].unwrap(), pair_embs[1].unwrap())?;
                let diff = g.add_const(sim, -(pair.gold / 5.0))?;
                sq_terms.push(g.mul(diff, diff)?);
            }
            let sim_mse = mean_of(&mut g, &sq_terms)?;
            let spread = mean_of(&mut g, &spread_terms)?;
            let adjacent = mean_of(&mut g, &adjacent_terms)?;
            let weighted_spread = g.scale(spread, cfg.spread_weight)?;
            let weighted_adjacent = g.scale(adjacent, cfg.adjacent_weight)?;
            let penalties = g.add(weighted_spread, weighted_adjacent)?;
            let loss = g.add(sim_mse, penalties)?;

            let total = g.scalar_value(loss).to_f64().unwrap_or(f64::NAN);
            let components = vec![
                ("sim_mse".to_string(), g.scalar_value(sim_mse).to_f64().unwrap_or(f64::NAN)),
                ("trace_spread".to_string(), g.scalar_value(spread).to_f64().unwrap_or(f64::NAN)),
                ("adjacent_sep".to_string(), g.scalar_value(adjacent).to_f64().unwrap_or(f64::NAN)),
            ];
            assert_finite_total(total, step, &components)?;

            let grads = g.backward(loss)?;
            let mut grad_vec: Vec<Option<TensorData<F>>> =
                bound.handles().iter().map(|&h| grads.get(h).cloned()).collect();
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grad_vec, max);
            }
            let lr = cosine_lr(step, total_steps, cfg.warmup_fraction, cfg.lr);
            adam.step(&mut params, &grad_vec, lr)?;

            log.record_step(StepRecord {
                step,
                lr,
                schedule_fraction: step as f64 / total_steps as f64,
                total,
                components,
            })?;
            epoch_total += total;
            epoch_batches += 1;
            step += 1;
        }

        let model = init.with_params(&params)?;
        let val_spearman = spearman_full_on(&model, corpus, val_pairs)?;
        log.record_epoch(EpochRecord {
            epoch,
            mean_total: epoch_total / epoch_batches as f64,
            val_spearman,
            val_exit_rate: None,
        })?;
        if cfg.early_stop_spearman.map_or(false, |t| val_spearman >= t) {
            break;
        }
    }
    Ok((init.with_params(&params)?, log))
}

fn mean_of<F: Scalar>(g: &mut Graph<F>, terms: &[Tensor]) -> Result<Tensor> {
    if terms.is_empty() {
        return Ok(g.constant(TensorData::scalar(F::zero())));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Distillation settings. The mask picks which loss terms are active; the
/// weights carry their coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub weights: LeapLossWeights,
    pub mask: LossMask,
    /// Cap on the number of training sentences (prefix of the corpus).
    pub max_sentences: Option<usize>,
    /// Policy used for per-epoch validation exit statistics.
    pub eval_policy: ExitPolicy,
    /// Values tried by the sensitivity sweep.
    pub beta_sweep: Vec<f64>,
}

impl TrainConfig {
    pub fn default_for(l_s: usize, seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 4,
            warmup_fraction: 0.1,
            seed,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            weights: LeapLossWeights::default_for(l_s),
            mask: LossMask::full(),
            max_sentences: None,
            eval_policy: ExitPolicy::default(),
            beta_sweep: vec![0.1, 0.4, 0.8],
        }
    }

    pub fn validate(&self, l_s: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(LeapError::config(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(LeapError::config(format!("bad learning rate {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(LeapError::config("batch size and epochs must be positive".to_string()));
        }
        if self.mask.contrast && self.batch_size < 2 {
            return Err(LeapError::config(
                "contrastive loss needs batches of at least 2".to_string(),
            ));
        }
        self.weights.validate(l_s)?;
        self.eval_policy.validate()
    }
}

/// Frozen per-sentence teacher traces, computed once and bound as constants
/// into every training step.
pub struct TeacherCache<F: Scalar> {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub traces: Vec<LayerTrace<F>>,
}

impl<F: Scalar> TeacherCache<F> {
    pub fn build(teacher: &EncoderModel<F>, sentences: &[Vec<u32>]) -> Result<Self> {
        let traces = sentences
            .iter()
            .map(|tokens| teacher.forward_trace(tokens, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(TeacherCache {
            hidden_dim: teacher.config().hidden_dim,
            num_layers: teacher.config().num_layers,
            traces,
        })
    }
}

pub struct DistillOutcome<F: Scalar> {
    pub student: EncoderModel<F>,
    pub projection: Option<Projection<F>>,
    pub log: TrainLog,
}

/// Distill a student against cached teacher traces. The projection (created
/// when hidden sizes differ) trains jointly with the student.
pub fn distill_cached<F: Scalar>(
    cache: &TeacherCache<F>,
    student_init: &EncoderModel<F>,
    cfg: &TrainConfig,
    sentences: &[Vec<u32>],
    corpus: &SyntheticCorpus,
    val_pairs: &[ScoredPair],
) -> Result<DistillOutcome<F>> {
    let l_s = student_init.config().num_layers;
    cfg.validate(l_s)?;
    let n = cfg.max_sentences.unwrap_or(sentences.len()).min(sentences.len());
    if n == 0 {
        return Err(LeapError::contract("no training sentences".to_string()));
    }
    if cache.traces.len() < n {
        return Err(LeapError::contract(format!(
            "teacher cache covers {} sentences, need {n}",
            cache.traces.len()
        )));
    }
    let d_s = student_init.config().hidden_dim;
    let needs_projection = d_s != cache.hidden_dim;
    let projection_init = needs_projection
        .then(|| Projection::<F>::init(d_s, cache.hidden_dim, cfg.seed.wrapping_add(1)));
    let pi = uniform_layer_map(l_s, cache.num_layers)?;

    let mut params: Vec<TensorData<F>> =
        student_init.param_refs().iter().map(|(_, v)| (*v).clone()).collect();
    let n_student = params.len();
    if let Some(p) = &projection_init {
        params.push(p.weight.clone());
    }
    let mut adam = Adam::new(&params, cfg.adam);
    let mut log = TrainLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let batches_per_epoch = (n / cfg.batch_size).max(1);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size).take(batches_per_epoch) {
            if cfg.mask.contrast && chunk.len() < 2 {
                continue;
            }
            let model = student_init.with_params(&params[..n_student])?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let proj_handle = if projection_init.is_some() {
                let current =
                    Projection::<F> { weight: params[n_student].clone(), trainable: true };
                Some(current.bind(&mut g))
            } else {
                None
            };
            let mut students = Vec::with_capacity(chunk.len());
            let mut teachers = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                students.push(bound.forward_trace(&mut g, &sentences[idx])?);
                teachers.push(cache.traces[idx].bind_constants(&mut g)?);
            }
            let fraction = step as f64 / total_steps as f64;
            let nodes = total_loss(
                &mut g,
                &students,
                &teachers,
                proj_handle,
                &cfg.weights,
                &pi,
                fraction,
                cfg.mask,
            )?;
            let breakdown = LossBreakdown::from_nodes(&g, &nodes);
            let components = breakdown_components(&breakdown);
            assert_finite_total(breakdown.total, step, &components)?;

            let grads = g.backward(nodes.total)?;
            let mut grad_vec: Vec<Option<TensorData<F>>> =
                bound.handles().iter().map(|&h| grads.get(h).cloned()).collect();
            if let Some(h) = proj_handle {
                grad_vec.push(grads.get(h).cloned());
            }
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grad_vec, max);
            }
            let lr = cosine_lr(step, total_steps, cfg.warmup_fraction, cfg.lr);
            adam.step(&mut params, &grad_vec, lr)?;

            log.record_step(StepRecord {
                step,
                lr,
                schedule_fraction: fraction,
                total: breakdown.total,
                components,
            })?;
            epoch_total += breakdown.total;
            epoch_batches += 1;
            step += 1;
        }

        let model = student_init.with_params(&params[..n_student])?;
        let summary = evaluate_student(&model, corpus, val_pairs, &cfg.eval_policy)?;
        log.record_epoch(EpochRecord {
            epoch,
            mean_total: epoch_total / epoch_batches.max(1) as f64,
            val_spearman: summary.spearman_exited,
            val_exit_rate: Some(summary.exit_rate),
        })?;
    }

    let student = student_init.with_params(&params[..n_student])?;
    let projection = projection_init.map(|p| Projection {
        weight: params[n_student].clone(),
        trainable: p.trainable,
    });
    Ok(DistillOutcome { student, projection, log })
}

/// [`distill_cached`] with the teacher cache built on the fly from the
/// corpus sentences.
pub fn distill<F: Scalar>(
    teacher: &EncoderModel<F>,
    student_init: &EncoderModel<F>,
    cfg: &TrainConfig,
    corpus: &SyntheticCorpus,
    val_pairs: &[ScoredPair],
) -> Result<DistillOutcome<F>> {
    let sentences: Vec<Vec<u32>> =
        corpus.sentences.iter().map(|s| s.tokens.clone()).collect();
    let n = cfg.max_sentences.unwrap_or(sentences.len()).min(sentences.len());
    let cache = TeacherCache::build(teacher, &sentences[..n])?;
    distill_cached(&cache, student_init, cfg, &sentences, corpus, val_pairs)
}

fn breakdown_components(b: &LossBreakdown) -> Vec<(String, f64)> {
    vec![
        ("final".to_string(), b.final_loss),
        ("inter".to_string(), b.inter),
        ("exit_teacher".to_string(), b.exit_teacher),
        ("exit_student".to_string(), b.exit_student),
        ("contrast".to_string(), b.contrast),
        ("late".to_string(), b.late),
        ("redund".to_string(), b.redund),
    ]
}

/// The four cumulative loss configurations compared in the ablation.
pub fn standard_ablation_masks() -> Vec<(String, LossMask)> {
    vec![
        ("final_only".to_string(), LossMask::final_only()),
        (
            "final_inter".to_string(),
            LossMask { inter: true, ..LossMask::final_only() },
        ),
        ("final_inter_contrast".to_string(), LossMask::baseline()),
        ("full".to_string(), LossMask::full()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub exit_rate: f64,
    pub expected_layers: f64,
    pub spearman_exited: f64,
    pub spearman_full: f64,
}

/// Distill once per mask (same seed and budget) and evaluate each student
/// on the same held-out pairs.
pub fn ablation_suite<F: Scalar>(
    cache: &TeacherCache<F>,
    student_init: &EncoderModel<F>,
    base_cfg: &TrainConfig,
    sentences: &[Vec<u32>],
    corpus: &SyntheticCorpus,
    val_pairs: &[ScoredPair],
    eval_pairs: &[ScoredPair],
    masks: &[(String, LossMask)],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(masks.len());
    for (label, mask) in masks {
        let cfg = TrainConfig { mask: *mask, ..base_cfg.clone() };
        let out = distill_cached(cache, student_init, &cfg, sentences, corpus, val_pairs)?;
        let summary = evaluate_student(&out.student, corpus, eval_pairs, &cfg.eval_policy)?;
        rows.push(AblationRow {
            label: label.clone(),
            exit_rate: summary.exit_rate,
            expected_layers: summary.expected_layers,
            spearman_exited: summary.spearman_exited,
            spearman_full: summary.spearman_full,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    pub exit_rate: f64,
    pub expected_layers: f64,
    pub layer_reduction: f64,
    pub spearman_exited: f64,
}

/// Distill once per exit-loss weight and evaluate each student on the same
/// held-out pairs.
pub fn beta_sensitivity<F: Scalar>(
    cache: &TeacherCache<F>,
    student_init: &EncoderModel<F>,
    base_cfg: &TrainConfig,
    sentences: &[Vec<u32>],
    corpus: &SyntheticCorpus,
    val_pairs: &[ScoredPair],
    eval_pairs: &[ScoredPair],
    betas: &[f64],
) -> Result<Vec<BetaRow>> {
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut cfg = base_cfg.clone();
        cfg.weights.beta = beta;
        let out = distill_cached(cache, student_init, &cfg, sentences, corpus, val_pairs)?;
        let summary = evaluate_student(&out.student, corpus, eval_pairs, &cfg.eval_policy)?;
        rows.push(BetaRow {
            beta,
            exit_rate: summary.exit_rate,
            expected_layers: summary.expected_layers,
            layer_reduction: summary.layer_reduction,
            spearman_exited: summary.spearman_exited,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, CorpusConfig};
    use crate::encoder::{EncoderConfig, Pooling};

    fn tiny_corpus(seed: u64) -> (SyntheticCorpus, Vec<ScoredPair>, Vec<ScoredPair>) {
        let cfg = CorpusConfig {
            seed,
            n_sentences: 120,
            n_pairs: 90,
            vocab_size: 32,
            topics: 4,
            min_len: 6,
            max_len: 10,
        };
        let c = corpus::generate(&cfg).unwrap();
        let split = corpus::split(&c, (0.8, 0.1, 0.1), 3).unwrap();
        (c, split.train, split.val)
    }

    fn tiny_encoder(layers: usize, dim: usize, seed: u64, std: f64) -> EncoderModel<f64> {
        EncoderModel::init(
            EncoderConfig {
                num_layers: layers,
                hidden_dim: dim,
                num_heads: 2,
                ff_dim: dim + 4,
                vocab_size: 32,
                max_seq_len: 16,
                pooling: Pooling::Mean,
            },
            seed,
            std,
        )
        .unwrap()
    }

    fn quick_teacher_cfg(seed: u64) -> TeacherTrainConfig {
        TeacherTrainConfig {
            lr: 2e-3,
            batch_size: 8,
            epochs: 2,
            seed,
            early_stop_spearman: None,
            ..TeacherTrainConfig::default()
        }
    }

    fn quick_distill_cfg(l_s: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 6,
            epochs: 1,
            max_sentences: Some(36),
            eval_policy: ExitPolicy { l_min: 2, theta: 0.95, ..ExitPolicy::default() },
            ..TrainConfig::default_for(l_s, seed)
        }
    }

    #[test]
    fn adam_matches_hand_computed_steps() {
        let cfg = AdamConfig::default();
        let mut params = vec![TensorData::<f64>::vector(vec![1.0, -2.0])];
        let mut adam = Adam::new(&params, cfg);
        let grad = TensorData::vector(vec![0.5, -1.5]);
        adam.step(&mut params, &[Some(grad.clone())], 0.1).unwrap();

        let mut expect = [1.0f64, -2.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let g = [0.5f64, -1.5];
        for i in 0..2 {
            m[i] = 0.1 * g[i];
            v[i] = 0.001 * g[i] * g[i];
            let mhat = m[i] / (1.0 - 0.9);
            let vhat = v[i] / (1.0 - 0.999);
            expect[i] -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
        }
        for i in 0..2 {
            assert!((params[0].data()[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_with_zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![TensorData::<f64>::vector(vec![0.3, -0.7, 2.0])];
        let before = params.clone();
        let mut adam = Adam::new(&params, AdamConfig::default());
        let zero = TensorData::zeros(vec![3]);
        adam.step(&mut params, &[Some(zero)], 0.5).unwrap();
        assert_eq!(params, before);
        adam.step(&mut params, &[None], 0.5).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn clip_rescales_only_when_norm_exceeds_cap() {
        let mut grads = vec![Some(TensorData::<f64>::vector(vec![6.0, 8.0]))];
        let factor = clip_global_norm(&mut grads, 1.0);
        assert!((factor - 0.1).abs() < 1e-12);
        let d = grads[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);

        let mut small = vec![Some(TensorData::<f64>::vector(vec![0.3, 0.4]))];
        assert_eq!(clip_global_norm(&mut small, 1.0), 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.3, 0.4]);
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let total = 100;
        let lr = |s| cosine_lr(s, total, 0.1, 1.0);
        assert!((lr(0) - 0.1).abs() < 1e-12);
        assert!((lr(4) - 0.5).abs() < 1e-12);
        assert!((lr(9) - 1.0).abs() < 1e-12);
        assert!((lr(10) - 1.0).abs() < 1e-12);
        for s in 10..99 {
            assert!(lr(s + 1) <= lr(s) + 1e-12);
        }
        assert!(lr(99) < 0.01);
        assert_eq!(cosine_lr(5, 0, 0.1, 1.0), 0.0);
    }

    #[test]
    fn log_rejects_non_finite_and_out_of_order_records() {
        let mut log = TrainLog::default();
        let rec = |step: usize, total: f64| StepRecord {
            step,
            lr: 0.1,
            schedule_fraction: 0.0,
            total,
            components: vec![("final".to_string(), total)],
        };
        log.record_step(rec(0, 1.0)).unwrap();
        assert!(log.record_step(rec(0, 1.0)).is_err());
        assert!(log.record_step(rec(1, f64::NAN)).is_err());
        assert!(log
            .record_epoch(EpochRecord {
                epoch: 0,
                mean_total: f64::INFINITY,
                val_spearman: 0.0,
                val_exit_rate: None,
            })
            .is_err());
    }

    #[test]
    fn csv_outputs_have_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = TrainLog::default();
        for s in 0..3 {
            log.record_step(StepRecord {
                step: s,
                lr: 0.1,
                schedule_fraction: s as f64 / 3.0,
                total: 1.0 / (s + 1) as f64,
                components: vec![
                    ("final".to_string(), 0.5),
                    ("inter".to_string(), 0.25),
                ],
            })
            .unwrap();
        }
        log.record_epoch(EpochRecord {
            epoch: 0,
            mean_total: 0.6,
            val_spearman: 0.8,
            val_exit_rate: Some(0.4),
        })
        .unwrap();
        log.record_epoch(EpochRecord {
            epoch: 1,
            mean_total: 0.5,
            val_spearman: 0.82,
            val_exit_rate: None,
        })
        .unwrap();

        let steps_path = dir.path().join("steps.csv");
        let epochs_path = dir.path().join("epochs.csv");
        log.write_steps_csv(&steps_path).unwrap();
        log.write_epochs_csv(&epochs_path).unwrap();

        let steps = std::fs::read_to_string(&steps_path).unwrap();
        let mut lines = steps.lines();
        assert_eq!(lines.next().unwrap(), "step,lr,schedule_fraction,total,final,inter");
        assert_eq!(lines.count(), 3);
        let first_row: Vec<&str> = steps.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(first_row.len(), 6);
        assert_eq!(first_row[3].parse::<f64>().unwrap(), 1.0);

        let epochs = std::fs::read_to_string(&epochs_path).unwrap();
        assert!(epochs.starts_with("epoch,mean_total,val_spearman,val_exit_rate\n"));
        assert!(epochs.lines().nth(1).unwrap().ends_with(",0.4"));
        assert!(epochs.lines().nth(2).unwrap().ends_with(','));
    }

    #[test]
    fn teacher_smoke_run_improves_epoch_over_epoch() {
        let (c, train, val) = tiny_corpus(21);
        let init = tiny_encoder(3, 12, 5, 0.3);
        let (_, log) = train_teacher(&init, &quick_teacher_cfg(7), &c, &train, &val).unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert!(
            log.epochs[1].mean_total < log.epochs[0].mean_total,
            "epoch losses {:?}",
            log.epochs
        );
        assert!(log.steps.iter().all(|s| s.total.is_finite()));
    }

    #[test]
    fn zero_learning_rate_leaves_teacher_unchanged() {
        let (c, train, val) = tiny_corpus(22);
        let init = tiny_encoder(3, 12, 6, 0.3);
        let cfg = TeacherTrainConfig { lr: 0.0, epochs: 1, ..quick_teacher_cfg(8) };
        let (trained, _) = train_teacher(&init, &cfg, &c, &train, &val).unwrap();
        let before: Vec<_> = init.param_refs();
        let after: Vec<_> = trained.param_refs();
        for ((_, a), (_, b)) in before.iter().zip(after.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fixed_seed_reproduces_teacher_log_and_weights() {
        let (c, train, val) = tiny_corpus(23);
        let init = tiny_encoder(3, 12, 7, 0.3);
        let cfg = quick_teacher_cfg(9);
        let (m1, l1) = train_teacher(&init, &cfg, &c, &train, &val).unwrap();
        let (m2, l2) = train_teacher(&init, &cfg, &c, &train, &val).unwrap();
        assert_eq!(l1, l2);
        for ((_, a), (_, b)) in m1.param_refs().iter().zip(m2.param_refs().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn distilling_teacher_into_itself_at_zero_lr_gives_zero_final_loss() {
        let (c, _, val) = tiny_corpus(24);
        let teacher = tiny_encoder(3, 12, 9, 0.3);
        let mut cfg = quick_distill_cfg(3, 10);
        cfg.lr = 0.0;
        cfg.mask = LossMask::final_only();
        let out = distill(&teacher, &teacher, &cfg, &c, &val).unwrap();
        assert!(!out.log.steps.is_empty());
        for rec in &out.log.steps {
            let final_loss = rec.components.iter().find(|(n, _)| n == "final").unwrap().1;
            assert!(final_loss.abs() < 1e-12, "final loss {final_loss} at step {}", rec.step);
        }
        assert!(out.projection.is_none());
    }

    #[test]
    fn distillation_with_projection_trains_and_logs() {
        let (c, _, val) = tiny_corpus(25);
        let teacher = tiny_encoder(3, 12, 11, 0.3);
        let student = tiny_encoder(2, 8, 12, 0.3);
        let cfg = quick_distill_cfg(2, 13);
        let out = distill(&teacher, &student, &cfg, &c, &val).unwrap();
        assert!(out.projection.is_some());
        let proj = out.projection.unwrap();
        assert_eq!(proj.weight.shape(), &[8, 12]);
        assert_eq!(out.log.steps.len(), 6);
        assert_eq!(out.log.epochs.len(), 1);
        let steps: Vec<usize> = out.log.steps.iter().map(|s| s.step).collect();
        assert!(steps.windows(2).all(|w| w[1] > w[0]));
        let trained_differs = out
            .student
            .param_refs()
            .iter()
            .zip(student.param_refs().iter())
            .any(|((_, a), (_, b))| a != b);
        assert!(trained_differs, "training should move the student");
    }

    #[test]
    fn fixed_seed_reproduces_distillation_exactly() {
        let (c, _, val) = tiny_corpus(26);
        let teacher = tiny_encoder(3, 12, 14, 0.3);
        let student = tiny_encoder(2, 8, 15, 0.3);
        let cfg = quick_distill_cfg(2, 16);
        let o1 = distill(&teacher, &student, &cfg, &c, &val).unwrap();
        let o2 = distill(&teacher, &student, &cfg, &c, &val).unwrap();
        assert_eq!(o1.log, o2.log);
        for ((_, a), (_, b)) in o1.student.param_refs().iter().zip(o2.student.param_refs().iter())
        {
            assert_eq!(a, b);
        }
        assert_eq!(o1.projection.unwrap().weight, o2.projection.unwrap().weight);
    }

    #[test]
    fn zero_beta_matches_mask_without_exit_terms() {
        let (c, _, val) = tiny_corpus(27);
        let teacher = tiny_encoder(3, 12, 17, 0.3);
        let student = tiny_encoder(2, 8, 18, 0.3);

        let mut with_zero_beta = quick_distill_cfg(2, 19);
        with_zero_beta.weights.beta = 0.0;

        let mut without_exit = quick_distill_cfg(2, 19);
        without_exit.mask = LossMask { exit: false, ..LossMask::full() };

        let a = distill(&teacher, &student, &with_zero_beta, &c, &val).unwrap();
        let b = distill(&teacher, &student, &without_exit, &c, &val).unwrap();
        for ((_, pa), (_, pb)) in a.student.param_refs().iter().zip(b.student.param_refs().iter())
        {
            assert_eq!(pa, pb, "zero-weighted exit terms must not influence training");
        }
    }

    #[test]
    fn ablation_suite_emits_one_row_per_mask_and_none_for_empty() {
        let (c, _, val) = tiny_corpus(28);
        let teacher = tiny_encoder(3, 12, 20, 0.3);
        let student = tiny_encoder(2, 8, 21, 0.3);
        let sentences: Vec<Vec<u32>> = c.sentences.iter().map(|s| s.tokens.clone()).collect();
        let cache = TeacherCache::build(&teacher, &sentences[..36]).unwrap();
        let cfg = quick_distill_cfg(2, 22);

        let empty = ablation_suite(&cache, &student, &cfg, &sentences, &c, &val, &val, &[])
            .unwrap();
        assert!(empty.is_empty());

        let masks = standard_ablation_masks();
        assert_eq!(masks.len(), 4);
        let rows =
            ablation_suite(&cache, &student, &cfg, &sentences, &c, &val, &val, &masks[..2])
                .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].label, "final_only");
        assert!(rows.iter().all(|r| r.exit_rate.is_finite() && r.spearman_exited.is_finite()));
    }

    #[test]
    fn beta_sensitivity_emits_one_row_per_value() {
        let (c, _, val) = tiny_corpus(29);
        let teacher = tiny_encoder(3, 12, 23, 0.3);
        let student = tiny_encoder(2, 8, 24, 0.3);
        let sentences: Vec<Vec<u32>> = c.sentences.iter().map(|s| s.tokens.clone()).collect();
        let cache = TeacherCache::build(&teacher, &sentences[..36]).unwrap();
        let cfg = quick_distill_cfg(2, 25);
        let rows =
            beta_sensitivity(&cache, &student, &cfg, &sentences, &c, &val, &val, &[0.4]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].beta, 0.4);
        assert!(rows[0].layer_reduction >= 1.0);
    }

    #[test]
    fn atomic_checkpoint_round_trips_and_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_encoder(2, 8, 26, 0.3);
        let path = dir.path().join("model.bin");
        atomic_save_weights(&model, &path).unwrap();
        assert!(path.exists());
        assert!(!dir.path().join("model.bin.tmp").exists());
        let loaded = EncoderModel::<f64>::load_weights(&path).unwrap();
        for ((_, a), (_, b)) in model.param_refs().iter().zip(loaded.param_refs().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn config_validation_catches_bad_settings() {
        let mut cfg = TrainConfig::default_for(2, 1);
        assert!(cfg.validate(2).is_ok());
        cfg.warmup_fraction = 1.0;
        assert!(cfg.validate(2).is_err());
        let mut cfg = TrainConfig::default_for(2, 1);
        cfg.batch_size = 1;
        assert!(cfg.validate(2).is_err(), "contrastive loss needs batch of 2");
        cfg.mask.contrast = false;
        assert!(cfg.validate(2).is_ok());
        let mut cfg = TeacherTrainConfig::default();
        cfg.lr = f64::NAN;
        assert!(cfg.validate().is_err());
    }
}
