//! The distillation loss suite. Every term is built from per-layer unit-norm
//! pooled embeddings recorded on the autodiff tape, so one backward call
//! yields gradients for the whole composite objective.
//!
//! Terms and their roles:
//! - `loss_final`: align the student's last-layer embedding with the
//!   teacher's.
//! - `loss_inter`: align every student layer with its mapped teacher layer.
//! - `loss_exit`: soft-margin pressure pushing intermediate layers over a
//!   similarity threshold against two targets, the teacher's final embedding
//!   and a stop-gradient copy of the student's own final embedding.
//! - `loss_contrast`: match the student's batch similarity distribution to
//!   the teacher's.
//! - `loss_late`: extra pull on a late-layer window toward the student's
//!   final embedding.
//! - `loss_redund`: reward (capped) movement between adjacent layers so the
//!   stack does not collapse into identical layers.

use serde::{Deserialize, Serialize};

use crate::encoder::GraphTrace;
use crate::error::{LeapError, Result};
use crate::scalar::Scalar;
use crate::tensor::{gradcheck, Graph, Tensor, TensorData};

/// Weights and shape parameters for the composite loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeapLossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub beta_student: f64,
    pub gamma_redund: f64,
    pub delta_contrast: f64,
    pub epsilon_late: f64,
    pub tau_train: f64,
    pub tau_contrast: f64,
    pub sharpness: f64,
    /// Per-layer exit-loss weights, index l-1 for layer l.
    pub layer_weights: Vec<f64>,
    pub redund_cap: f64,
    /// Inclusive 1-indexed layer window for the late-alignment term.
    pub late_window: (usize, usize),
}

impl LeapLossWeights {
    /// Defaults for a student of `l_s` layers. Later layers get full weight
    /// `l / L_s`; layers below 6 get half, concentrating exit pressure where
    /// exits are useful. The late window targets layers 9 through 11 where
    /// the depth allows.
    pub fn default_for(l_s: usize) -> Self {
        let hi = l_s.saturating_sub(1).max(1);
        LeapLossWeights {
            alpha: 0.3,
            beta: 0.4,
            beta_student: 0.7,
            gamma_redund: 0.05,
            delta_contrast: 0.3,
            epsilon_late: 0.2,
            tau_train: 0.98,
            tau_contrast: 0.1,
            sharpness: 10.0,
            layer_weights: default_layer_weights(l_s),
            redund_cap: 0.5,
            late_window: (9.min(hi), 11.min(hi)),
        }
    }

    pub fn validate(&self, l_s: usize) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("beta_student", self.beta_student),
            ("gamma_redund", self.gamma_redund),
            ("delta_contrast", self.delta_contrast),
            ("epsilon_late", self.epsilon_late),
            ("sharpness", self.sharpness),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(LeapError::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.tau_train > 0.0 && self.tau_train <= 1.0) {
            return Err(LeapError::config(format!(
                "tau_train must lie in (0, 1], got {}",
                self.tau_train
            )));
        }
        if !(self.tau_contrast > 0.0) {
            return Err(LeapError::config(format!(
                "tau_contrast must be positive, got {}",
                self.tau_contrast
            )));
        }
        if !(self.redund_cap > 0.0) {
            return Err(LeapError::config(format!(
                "redund_cap must be positive, got {}",
                self.redund_cap
            )));
        }
        if self.layer_weights.len() != l_s {
            return Err(LeapError::config(format!(
                "layer_weights has {} entries for {} layers",
                self.layer_weights.len(),
                l_s
            )));
        }
        if self.layer_weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(LeapError::config("layer_weights must be finite and >= 0".to_string()));
        }
        let (lo, hi) = self.late_window;
        if lo == 0 || lo > hi || hi > l_s.saturating_sub(1) {
            return Err(LeapError::config(format!(
                "late_window ({lo}, {hi}) must satisfy 1 <= lo <= hi <= {}",
                l_s.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

/// `w_l = l / L_s`, halved below layer 6.
pub fn default_layer_weights(l_s: usize) -> Vec<f64> {
    (1..=l_s)
        .map(|l| {
            let base = l as f64 / l_s as f64;
            if l < 6 {
                0.5 * base
            } else {
                base
            }
        })
        .collect()
}

/// Weight on the student-target exit term as training progresses: off for
/// the first tenth, ramping linearly to full strength at six tenths.
pub fn progressive_ramp(fraction: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(LeapError::contract(format!(
            "schedule fraction {fraction} outside [0, 1]"
        )));
    }
    Ok(if fraction < 0.1 {
        0.0
    } else if fraction <= 0.6 {
        (fraction - 0.1) / 0.5
    } else {
        1.0
    })
}

/// Graph handles for every term of one composite loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Tensor,
    pub final_loss: Tensor,
    pub inter: Tensor,
    pub exit_teacher: Tensor,
    /// Already multiplied by the progressive ramp.
    pub exit_student: Tensor,
    pub contrast: Tensor,
    pub late: Tensor,
    pub redund: Tensor,
}

/// Scalar values of one composite loss evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub final_loss: f64,
    pub inter: f64,
    pub exit_teacher: f64,
    /// After the progressive ramp.
    pub exit_student: f64,
    pub contrast: f64,
    pub late: f64,
    pub redund: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_nodes<F: Scalar>(g: &Graph<F>, nodes: &LossNodes) -> Self {
        let v = |t: Tensor| g.scalar_value(t).to_f64().expect("finite loss");
        LossBreakdown {
            final_loss: v(nodes.final_loss),
            inter: v(nodes.inter),
            exit_teacher: v(nodes.exit_teacher),
            exit_student: v(nodes.exit_student),
            contrast: v(nodes.contrast),
            late: v(nodes.late),
            redund: v(nodes.redund),
            total: v(nodes.total),
        }
    }

    /// Recompose the total from the parts with the module's weights.
    pub fn recomposed(&self, w: &LeapLossWeights) -> f64 {
        self.final_loss
            + w.alpha * self.inter
            + w.beta * (self.exit_teacher + w.beta_student * self.exit_student)
            + w.delta_contrast * self.contrast
            + w.epsilon_late * self.late
            + w.gamma_redund * self.redund
    }
}

/// Selects which loss terms participate, for baseline and ablation runs.
/// `final` and `inter` form the plain distillation recipe; the exit terms
/// are the convergence objective under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub inter: bool,
    pub exit: bool,
    pub contrast: bool,
    pub late: bool,
    pub redund: bool,
}

impl LossMask {
    /// Every term active.
    pub fn full() -> Self {
        LossMask { inter: true, exit: true, contrast: true, late: true, redund: true }
    }

    /// Conventional distillation: no exit pressure, no refinement terms.
    pub fn baseline() -> Self {
        LossMask { inter: true, exit: false, contrast: true, late: false, redund: false }
    }

    /// Final-layer matching only.
    pub fn final_only() -> Self {
        LossMask { inter: false, exit: false, contrast: false, late: false, redund: false }
    }
}

fn project<F: Scalar>(g: &mut Graph<F>, e: Tensor, projection: Option<Tensor>) -> Result<Tensor> {
    match projection {
        Some(w) => g.matmul(e, w),
        None => Ok(e),
    }
}

fn check_dims<F: Scalar>(
    g: &Graph<F>,
    student: Tensor,
    teacher: Tensor,
    projection: Option<Tensor>,
) -> Result<()> {
    if projection.is_none() && g.value(student).numel() != g.value(teacher).numel() {
        return Err(LeapError::dimension(format!(
            "student dim {} vs teacher dim {} with no projection",
            g.value(student).numel(),
            g.value(teacher).numel()
        )));
    }
    Ok(())
}

/// `1 - cos` between the student's and teacher's final embeddings.
pub fn loss_final<F: Scalar>(
    g: &mut Graph<F>,
    student_final: Tensor,
    teacher_final: Tensor,
    projection: Option<Tensor>,
) -> Result<Tensor> {
    check_dims(g, student_final, teacher_final, projection)?;
    let s = project(g, student_final, projection)?;
    let c = g.cosine_sim(s, teacher_final)?;
    let neg = g.scale(c, -1.0)?;
    g.add_const(neg, 1.0)
}

/// Mean of `1 - cos` between each student layer and its mapped teacher
/// layer. `pi` is 1-indexed into the teacher stack.
pub fn loss_inter<F: Scalar>(
    g: &mut Graph<F>,
    student_layers: &[Tensor],
    teacher_layers: &[Tensor],
    pi: &[usize],
    projection: Option<Tensor>,
) -> Result<Tensor> {
    if pi.len() != student_layers.len() {
        return Err(LeapError::contract(format!(
            "layer map covers {} layers, student has {}",
            pi.len(),
            student_layers.len()
        )));
    }
    if let Some(&bad) = pi.iter().find(|&&t| t == 0 || t > teacher_layers.len()) {
        return Err(LeapError::contract(format!(
            "layer map entry {bad} outside teacher stack of {}",
            teacher_layers.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (l, &s) in student_layers.iter().enumerate() {
        let t = teacher_layers[pi[l] - 1];
        check_dims(g, s, t, projection)?;
        let sp = project(g, s, projection)?;
        let c = g.cosine_sim(sp, t)?;
        let neg = g.scale(c, -1.0)?;
        let term = g.add_const(neg, 1.0)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    g.scale(acc.expect("at least one layer"), 1.0 / student_layers.len() as f64)
}

/// Both exit terms. The student-target term detaches the final embedding
/// internally, so no gradient reaches it through the target.
pub fn loss_exit<F: Scalar>(
    g: &mut Graph<F>,
    student_layers: &[Tensor],
    teacher_final: Tensor,
    projection: Option<Tensor>,
    w: &LeapLossWeights,
) -> Result<(Tensor, Tensor)> {
    let l_s = student_layers.len();
    if l_s < 2 {
        return Err(LeapError::contract(
            "exit loss needs at least 2 layers for the student-target term".to_string(),
        ));
    }
    let target = g.detach(*student_layers.last().unwrap())?;
    let teacher_term = exit_term(g, student_layers, teacher_final, projection, w, l_s)?;
    let student_term = exit_term(g, &student_layers[..l_s - 1], target, None, w, l_s - 1)?;
    Ok((teacher_term, student_term))
}

/// Same as [`loss_exit`]'s student term but against a caller-supplied
/// target, so numeric gradient checks can hold the target fixed while
/// parameters are perturbed.
pub fn loss_exit_student_with_target<F: Scalar>(
    g: &mut Graph<F>,
    student_layers: &[Tensor],
    target: Tensor,
    w: &LeapLossWeights,
) -> Result<Tensor> {
    let l_s = student_layers.len();
    if l_s < 2 {
        return Err(LeapError::contract(
            "exit loss needs at least 2 layers for the student-target term".to_string(),
        ));
    }
    exit_term(g, &student_layers[..l_s - 1], target, None, w, l_s - 1)
}

/// `(1/denom) * sum_l w_l * sigmoid(sharpness * (tau - cos(e_l, target)))`.
fn exit_term<F: Scalar>(
    g: &mut Graph<F>,
    layers: &[Tensor],
    target: Tensor,
    projection: Option<Tensor>,
    w: &LeapLossWeights,
    denom: usize,
) -> Result<Tensor> {
    if w.layer_weights.len() < layers.len() {
        return Err(LeapError::config(format!(
            "layer_weights covers {} layers, need {}",
            w.layer_weights.len(),
            layers.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (l, &e) in layers.iter().enumerate() {
        check_dims(g, e, target, projection)?;
        let ep = project(g, e, projection)?;
        let c = g.cosine_sim(ep, target)?;
        let neg = g.scale(c, -1.0)?;
        let margin = g.add_const(neg, w.tau_train)?;
        let sharp = g.scale(margin, w.sharpness)?;
        let sig = g.sigmoid(sharp)?;
        let weighted = g.scale(sig, w.layer_weights[l])?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => g.add(a, weighted)?,
        });
    }
    g.scale(acc.expect("nonempty layer set"), 1.0 / denom as f64)
}

/// Row-averaged KL from the student's batch similarity distribution to the
/// teacher's, diagonals excluded. Both inputs are unit-norm final
/// embeddings, one per sample.
pub fn loss_contrast<F: Scalar>(
    g: &mut Graph<F>,
    student_finals: &[Tensor],
    teacher_finals: &[Tensor],
    tau_contrast: f64,
) -> Result<Tensor> {
    let b = student_finals.len();
    if b < 2 {
        return Err(LeapError::contract(format!(
            "similarity-structure loss needs a batch of at least 2, got {b}"
        )));
    }
    if teacher_finals.len() != b {
        return Err(LeapError::contract(format!(
            "student batch {b} vs teacher batch {}",
            teacher_finals.len()
        )));
    }
    let p_student = sim_distribution(g, student_finals, tau_contrast)?;
    let p_teacher = sim_distribution(g, teacher_finals, tau_contrast)?;
    let log_s = g.log(p_student)?;
    let log_t = g.log(p_teacher)?;
    let diff = g.sub(log_s, log_t)?;
    let prod = g.mul(p_student, diff)?;
    let total = g.sum(prod)?;
    g.scale(total, 1.0 / b as f64)
}

/// Row-softmax of the off-diagonal cosine similarity matrix at the given
/// temperature.
fn sim_distribution<F: Scalar>(
    g: &mut Graph<F>,
    finals: &[Tensor],
    tau: f64,
) -> Result<Tensor> {
    let stacked = g.stack_rows(finals)?;
    let t = g.transpose(stacked)?;
    let sims = g.matmul(stacked, t)?;
    let off = g.off_diagonal(sims)?;
    let scaled = g.scale(off, 1.0 / tau)?;
    g.softmax_rows(scaled)
}

/// Mean of `sqrt(max(1 - cos(e_l, e_final), 0))` over the late-layer window.
pub fn loss_late<F: Scalar>(
    g: &mut Graph<F>,
    student_layers: &[Tensor],
    window: (usize, usize),
) -> Result<Tensor> {
    let l_s = student_layers.len();
    let (lo, hi) = window;
    if lo == 0 || lo > hi || hi > l_s.saturating_sub(1) {
        return Err(LeapError::contract(format!(
            "late window ({lo}, {hi}) must satisfy 1 <= lo <= hi <= {}",
            l_s.saturating_sub(1)
        )));
    }
    let final_e = *student_layers.last().unwrap();
    let mut acc: Option<Tensor> = None;
    for l in lo..=hi {
        let c = g.cosine_sim(student_layers[l - 1], final_e)?;
        let neg = g.scale(c, -1.0)?;
        let gap = g.add_const(neg, 1.0)?;
        let safe = g.clamp_min(gap, 0.0)?;
        let term = g.sqrt(safe)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    g.scale(acc.expect("nonempty window"), 1.0 / (hi - lo + 1) as f64)
}

/// Negative mean of capped adjacent-layer displacement: more movement (up to
/// the cap) lowers the loss.
pub fn loss_redund<F: Scalar>(
    g: &mut Graph<F>,
    student_layers: &[Tensor],
    cap: f64,
) -> Result<Tensor> {
    let l_s = student_layers.len();
    if l_s < 2 {
        return Err(LeapError::contract("redundancy loss needs at least 2 layers".to_string()));
    }
    let mut acc: Option<Tensor> = None;
    for pair in student_layers.windows(2) {
        let diff = g.sub(pair[1], pair[0])?;
        let dist = g.norm(diff)?;
        let capped = g.clamp_max(dist, cap)?;
        acc = Some(match acc {
            None => capped,
            Some(a) => g.add(a, capped)?,
        });
    }
    g.scale(acc.expect("at least one adjacent pair"), -1.0 / (l_s - 1) as f64)
}

/// Composite objective over a batch of trace pairs. Per-sample terms are
/// averaged across the batch; the similarity-structure term sees the whole
/// batch at once. Masked-off terms contribute exact zeros and record no
/// gradient subgraph.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    students: &[GraphTrace],
    teachers: &[GraphTrace],
    projection: Option<Tensor>,
    w: &LeapLossWeights,
    pi: &[usize],
    schedule_fraction: f64,
    mask: LossMask,
) -> Result<LossNodes> {
    if students.is_empty() || students.len() != teachers.len() {
        return Err(LeapError::contract(format!(
            "batch of {} student and {} teacher traces",
            students.len(),
            teachers.len()
        )));
    }
    let l_s = students[0].normalized.len();
    w.validate(l_s)?;
    let ramp = progressive_ramp(schedule_fraction)?;
    let b = students.len();
    let inv_b = 1.0 / b as f64;

    let mut final_acc: Option<Tensor> = None;
    let mut inter_acc: Option<Tensor> = None;
    let mut exit_t_acc: Option<Tensor> = None;
    let mut exit_s_acc: Option<Tensor> = None;
    let mut late_acc: Option<Tensor> = None;
    let mut redund_acc: Option<Tensor> = None;
    let add_into = |g: &mut Graph<F>, acc: &mut Option<Tensor>, t: Tensor| -> Result<()> {
        *acc = Some(match acc.take() {
            None => t,
            Some(a) => g.add(a, t)?,
        });
        Ok(())
    };

    for (s, t) in students.iter().zip(teachers) {
        let lf = loss_final(g, s.final_embedding, t.final_embedding, projection)?;
        add_into(g, &mut final_acc, lf)?;
        if mask.inter {
            let li = loss_inter(g, &s.normalized, &t.normalized, pi, projection)?;
            add_into(g, &mut inter_acc, li)?;
        }
        if mask.exit {
            let (lt, ls) = loss_exit(g, &s.normalized, t.final_embedding, projection, w)?;
            add_into(g, &mut exit_t_acc, lt)?;
            add_into(g, &mut exit_s_acc, ls)?;
        }
        if mask.late {
            let ll = loss_late(g, &s.normalized, w.late_window)?;
            add_into(g, &mut late_acc, ll)?;
        }
        if mask.redund {
            let lr = loss_redund(g, &s.normalized, w.redund_cap)?;
            add_into(g, &mut redund_acc, lr)?;
        }
    }

    let zero = g.constant(TensorData::scalar(F::zero()));
    let mean_or_zero = |g: &mut Graph<F>, acc: Option<Tensor>| -> Result<Tensor> {
        match acc {
            Some(a) => g.scale(a, inv_b),
            None => Ok(zero),
        }
    };
    let final_loss = mean_or_zero(g, final_acc)?;
    let inter = mean_or_zero(g, inter_acc)?;
    let exit_teacher = mean_or_zero(g, exit_t_acc)?;
    let exit_student_raw = mean_or_zero(g, exit_s_acc)?;
    let exit_student = g.scale(exit_student_raw, ramp)?;
    let late = mean_or_zero(g, late_acc)?;
    let redund = mean_or_zero(g, redund_acc)?;

    let contrast = if mask.contrast {
        let s_finals: Vec<Tensor> = students.iter().map(|s| s.final_embedding).collect();
        let t_finals: Vec<Tensor> = teachers.iter().map(|t| t.final_embedding).collect();
        loss_contrast(g, &s_finals, &t_finals, w.tau_contrast)?
    } else {
        zero
    };

    let exit_s_weighted = g.scale(exit_student, w.beta_student)?;
    let exit_combined = g.add(exit_teacher, exit_s_weighted)?;
    let exit_scaled = g.scale(exit_combined, w.beta)?;
    let inter_scaled = g.scale(inter, w.alpha)?;
    let contrast_scaled = g.scale(contrast, w.delta_contrast)?;
    let late_scaled = g.scale(late, w.epsilon_late)?;
    let redund_scaled = g.scale(redund, w.gamma_redund)?;

    let mut total = g.add(final_loss, inter_scaled)?;
    total = g.add(total, exit_scaled)?;
    total = g.add(total, contrast_scaled)?;
    total = g.add(total, late_scaled)?;
    total = g.add(total, redund_scaled)?;

    Ok(LossNodes {
        total,
        final_loss,
        inter,
        exit_teacher,
        exit_student,
        contrast,
        late,
        redund,
    })
}

/// Checks every loss component's analytic gradient against central
/// differences on a small randomized model and returns one report per
/// component plus the weighted total.
///
/// The student-target exit term is measured against a frozen copy of the
/// base-point final embedding: its backward pass stops at the detach node,
/// so the numeric probe must hold the target fixed too or the two would
/// disagree by exactly the gradient flowing through the target.
pub fn gradient_audit(
    seed: u64,
    step: f64,
    rtol: f64,
    atol: f64,
) -> Result<Vec<(String, gradcheck::FdReport)>> {
    use crate::encoder::{uniform_layer_map, EncoderConfig, EncoderModel, Pooling, Projection};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let student_cfg = EncoderConfig {
        num_layers: 2,
        hidden_dim: 4,
        num_heads: 2,
        ff_dim: 6,
        vocab_size: 12,
        max_seq_len: 6,
        pooling: Pooling::Mean,
    };
    let teacher_cfg = EncoderConfig {
        num_layers: 3,
        hidden_dim: 6,
        num_heads: 2,
        ff_dim: 8,
        vocab_size: 12,
        max_seq_len: 6,
        pooling: Pooling::Mean,
    };
    let student = EncoderModel::<f64>::init(student_cfg, seed, 0.4)?;
    let teacher = EncoderModel::<f64>::init(teacher_cfg, seed.wrapping_add(1), 0.4)?;
    let projection = Projection::<f64>::init(4, 6, seed.wrapping_add(2));
    let pi = uniform_layer_map(2, 3)?;
    let mut weights = LeapLossWeights::default_for(2);
    weights.late_window = (1, 1);
    let schedule_fraction = 0.35;
    let ramp = progressive_ramp(schedule_fraction)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let batch: Vec<Vec<u32>> =
        (0..2).map(|_| (0..5).map(|_| rng.gen_range(0..12u32)).collect()).collect();
    let teacher_traces: Vec<_> =
        batch.iter().map(|t| teacher.forward_trace(t, None)).collect::<Result<_>>()?;

    // Analytic gradients for every component from one taped evaluation.
    let mut g = Graph::<f64>::new();
    let bound = student.bind(&mut g, true);
    let students: Vec<GraphTrace> =
        batch.iter().map(|t| bound.forward_trace(&mut g, t)).collect::<Result<_>>()?;
    let teachers: Vec<GraphTrace> =
        teacher_traces.iter().map(|t| t.bind_constants(&mut g)).collect::<Result<_>>()?;
    let proj_handle = projection.bind(&mut g);
    let nodes = total_loss(
        &mut g,
        &students,
        &teachers,
        Some(proj_handle),
        &weights,
        &pi,
        schedule_fraction,
        LossMask::full(),
    )?;

    // Pinned stop-gradient targets: base-point student finals as plain values.
    let pinned_targets: Vec<TensorData<f64>> =
        students.iter().map(|s| g.value(s.final_embedding).clone()).collect();

    let mut params: Vec<TensorData<f64>> =
        student.param_refs().into_iter().map(|(_, t)| t.clone()).collect();
    let n_student = params.len();
    params.push(projection.weight.clone());
    let all_handles: Vec<Tensor> =
        bound.handles().iter().copied().chain(std::iter::once(proj_handle)).collect();

    let components: [(&str, Tensor); 8] = [
        ("final", nodes.final_loss),
        ("inter", nodes.inter),
        ("exit_teacher", nodes.exit_teacher),
        ("exit_student", nodes.exit_student),
        ("contrast", nodes.contrast),
        ("late", nodes.late),
        ("redund", nodes.redund),
        ("total", nodes.total),
    ];

    let mut reports = Vec::with_capacity(components.len());
    for (name, node) in components {
        let grads = g.backward(node)?;
        let analytic: Vec<Option<TensorData<f64>>> =
            all_handles.iter().map(|&h| grads.get(h).cloned()).collect();

        let eval = |vals: &[TensorData<f64>]| -> Result<f64> {
            let model = student.with_params(&vals[..n_student])?;
            let proj_w = vals[n_student].clone();
            let mut eg = Graph::<f64>::new();
            let b = model.bind(&mut eg, false);
            let straces: Vec<GraphTrace> =
                batch.iter().map(|t| b.forward_trace(&mut eg, t)).collect::<Result<_>>()?;
            let ttraces: Vec<GraphTrace> = teacher_traces
                .iter()
                .map(|t| t.bind_constants(&mut eg))
                .collect::<Result<_>>()?;
            let pw = eg.constant(proj_w);
            let inv_b = 1.0 / batch.len() as f64;
            let value = match name {
                "exit_student" => {
                    let mut acc = 0.0;
                    for (s, pinned) in straces.iter().zip(&pinned_targets) {
                        let target = eg.constant(pinned.clone());
                        let term = loss_exit_student_with_target(
                            &mut eg,
                            &s.normalized,
                            target,
                            &weights,
                        )?;
                        acc += eg.scalar_value(term);
                    }
                    acc * inv_b * ramp
                }
                "total" => {
                    let mut final_s = 0.0;
                    let mut inter_s = 0.0;
                    let mut exit_t_s = 0.0;
                    let mut exit_s_s = 0.0;
                    let mut late_s = 0.0;
                    let mut redund_s = 0.0;
                    for (s, (t, pinned)) in
                        straces.iter().zip(ttraces.iter().zip(&pinned_targets))
                    {
                        let lf =
                            loss_final(&mut eg, s.final_embedding, t.final_embedding, Some(pw))?;
                        final_s += eg.scalar_value(lf);
                        let li =
                            loss_inter(&mut eg, &s.normalized, &t.normalized, &pi, Some(pw))?;
                        inter_s += eg.scalar_value(li);
                        let (lt, _) =
                            loss_exit(&mut eg, &s.normalized, t.final_embedding, Some(pw), &weights)?;
                        exit_t_s += eg.scalar_value(lt);
                        let target = eg.constant(pinned.clone());
                        let ls = loss_exit_student_with_target(
                            &mut eg,
                            &s.normalized,
                            target,
                            &weights,
                        )?;
                        exit_s_s += eg.scalar_value(ls);
                        let ll = loss_late(&mut eg, &s.normalized, weights.late_window)?;
                        late_s += eg.scalar_value(ll);
                        let lr = loss_redund(&mut eg, &s.normalized, weights.redund_cap)?;
                        redund_s += eg.scalar_value(lr);
                    }
                    let s_finals: Vec<Tensor> =
                        straces.iter().map(|s| s.final_embedding).collect();
                    let t_finals: Vec<Tensor> =
                        ttraces.iter().map(|t| t.final_embedding).collect();
                    let lc = loss_contrast(&mut eg, &s_finals, &t_finals, weights.tau_contrast)?;
                    let contrast = eg.scalar_value(lc);
                    final_s * inv_b
                        + weights.alpha * inter_s * inv_b
                        + weights.beta
                            * (exit_t_s * inv_b
                                + weights.beta_student * ramp * exit_s_s * inv_b)
                        + weights.delta_contrast * contrast
                        + weights.epsilon_late * late_s * inv_b
                        + weights.gamma_redund * redund_s * inv_b
                }
                "contrast" => {
                    let s_finals: Vec<Tensor> =
                        straces.iter().map(|s| s.final_embedding).collect();
                    let t_finals: Vec<Tensor> =
                        ttraces.iter().map(|t| t.final_embedding).collect();
                    let lc = loss_contrast(&mut eg, &s_finals, &t_finals, weights.tau_contrast)?;
                    eg.scalar_value(lc)
                }
                _ => {
                    let mut acc = 0.0;
                    for (s, t) in straces.iter().zip(&ttraces) {
                        let term = match name {
                            "final" => {
                                loss_final(&mut eg, s.final_embedding, t.final_embedding, Some(pw))?
                            }
                            "inter" => {
                                loss_inter(&mut eg, &s.normalized, &t.normalized, &pi, Some(pw))?
                            }
                            "exit_teacher" => {
                                loss_exit(&mut eg, &s.normalized, t.final_embedding, Some(pw), &weights)?
                                    .0
                            }
                            "late" => loss_late(&mut eg, &s.normalized, weights.late_window)?,
                            "redund" => loss_redund(&mut eg, &s.normalized, weights.redund_cap)?,
                            other => unreachable!("unknown component {other}"),
                        };
                        acc += eg.scalar_value(term);
                    }
                    acc * inv_b
                }
            };
            Ok(value)
        };

        let report = gradcheck::check_gradients(eval, &params, &analytic, step, rtol, atol)?;
        reports.push((name.to_string(), report));
    }
    Ok(reports)
}
