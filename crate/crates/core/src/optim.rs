//! Nonlinear least squares and scheduled first-order descent over named
//! parameter blocks.
//!
//! A problem is a list of [`ParameterBlock`]s plus an evaluator. Vector blocks
//! are updated additively; pose blocks are updated on the left through the
//! exponential map, `T ← exp(δ)·T`, with `δ = [ω, v]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PoseSE3, Twist};

/// Pose blocks are re-orthonormalized after this many updates.
const ORTHONORMALIZE_EVERY: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite residual or Jacobian at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("normal equations are singular even with damping λ = {lambda:e}")]
    Unsolvable { lambda: f64 },
    #[error("evaluation outside the model domain: {0}")]
    Domain(String),
    #[error("ill-posed problem: {residuals} residuals for {parameters} free parameters")]
    UnderDetermined { residuals: usize, parameters: usize },
    #[error("invalid problem: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockValue {
    Vector(DVector<f64>),
    Pose(PoseSE3),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockRole {
    Intrinsics,
    Pose,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub name: String,
    pub value: BlockValue,
    pub role: BlockRole,
    pub frozen: bool,
    /// Per-coordinate scale used by first-order steps; steps are taken in
    /// coordinates normalized by this scale.
    pub step_scale: Option<DVector<f64>>,
    updates: usize,
}

impl ParameterBlock {
    pub fn vector(name: impl Into<String>, values: DVector<f64>) -> Self {
        Self::new(name, BlockValue::Vector(values), BlockRole::Other)
    }

    pub fn intrinsics(name: impl Into<String>, values: DVector<f64>) -> Self {
        Self::new(name, BlockValue::Vector(values), BlockRole::Intrinsics)
    }

    pub fn pose(name: impl Into<String>, pose: PoseSE3) -> Self {
        Self::new(name, BlockValue::Pose(pose), BlockRole::Pose)
    }

    fn new(name: impl Into<String>, value: BlockValue, role: BlockRole) -> Self {
        Self {
            name: name.into(),
            value,
            role,
            frozen: false,
            step_scale: None,
            updates: 0,
        }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn with_step_scale(mut self, scale: DVector<f64>) -> Self {
        self.step_scale = Some(scale);
        self
    }

    /// Tangent dimension.
    pub fn dim(&self) -> usize {
        match &self.value {
            BlockValue::Vector(v) => v.len(),
            BlockValue::Pose(_) => 6,
        }
    }

    pub fn as_vector(&self) -> Option<&DVector<f64>> {
        match &self.value {
            BlockValue::Vector(v) => Some(v),
            BlockValue::Pose(_) => None,
        }
    }

    pub fn as_vector_mut(&mut self) -> Option<&mut DVector<f64>> {
        match &mut self.value {
            BlockValue::Vector(v) => Some(v),
            BlockValue::Pose(_) => None,
        }
    }

    pub fn as_pose(&self) -> Option<&PoseSE3> {
        match &self.value {
            BlockValue::Pose(p) => Some(p),
            BlockValue::Vector(_) => None,
        }
    }

    /// Applies a tangent-space step.
    pub fn apply_update(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.dim());
        self.updates += 1;
        match &mut self.value {
            BlockValue::Vector(v) => {
                for (x, d) in v.iter_mut().zip(delta) {
                    *x += d;
                }
            }
            BlockValue::Pose(p) => {
                let mut next = p.retract(&Twist::from_slice(delta));
                if self.updates.is_multiple_of(ORTHONORMALIZE_EVERY) {
                    next = next.orthonormalized();
                }
                *p = next;
            }
        }
    }
}

/// Jacobian of the residual vector with respect to one block. Rows outside
/// `row_start .. row_start + values.nrows()` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockJacobian {
    pub row_start: usize,
    pub values: DMatrix<f64>,
}

impl BlockJacobian {
    fn rows(&self) -> std::ops::Range<usize> {
        self.row_start..self.row_start + self.values.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub residuals: DVector<f64>,
    /// One entry per block; `None` is allowed for frozen blocks.
    pub jacobians: Vec<Option<BlockJacobian>>,
}

pub trait ResidualProblem {
    /// Stacked residuals and, if requested, per-block Jacobians. Points where
    /// the model is undefined are reported as [`OptimError::Domain`].
    fn evaluate(&self, blocks: &[ParameterBlock], with_jacobians: bool) -> Result<Evaluation, OptimError>;

    /// Projects blocks back onto their admissible set after a step.
    fn constrain(&self, _blocks: &mut [ParameterBlock]) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub max_iters: usize,
    pub cost_tol: f64,
    pub step_tol: f64,
    pub lambda_init: f64,
    pub lambda_max: f64,
    /// Pose blocks are eliminated by Schur complement when more than this
    /// many are free.
    pub schur_min_poses: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.lambda_init > 0.0
            && self.lambda_max > self.lambda_init
            && self.cost_tol >= 0.0
            && self.step_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::Invalid(format!("bad solver settings: {self:?}")))
        }
    }
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            cost_tol: 1e-10,
            step_tol: 1e-10,
            lambda_init: 1e-4,
            lambda_max: 1e8,
            schur_min_poses: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ZeroCost,
    CostConverged,
    StepConverged,
    MaxIterations,
    DampingLimit,
    NoFreeParameters,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// LM iteration or descent epoch.
    pub index: usize,
    pub cost: f64,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub learning_rate: Option<f64>,
    /// Snapshot of the vector blocks, concatenated.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub params: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
}

impl SolveTrace {
    /// Costs of accepted LM steps (or all recorded descent epochs), preceded
    /// by the initial cost.
    pub fn accepted_costs(&self) -> Vec<f64> {
        std::iter::once(self.initial_cost)
            .chain(self.iterations.iter().filter(|r| r.accepted).map(|r| r.cost))
            .collect()
    }

    /// Appends another solve's iterations, renumbered after this trace's.
    pub fn extend(&mut self, other: SolveTrace) {
        let offset = self.iterations.len();
        self.iterations.extend(other.iterations.into_iter().map(|mut r| {
            r.index += offset;
            r
        }));
        self.final_cost = other.final_cost;
        self.termination = other.termination;
    }
}

fn half_squared_norm(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

fn is_finite(e: &Evaluation) -> bool {
    e.residuals.iter().all(|x| x.is_finite())
        && e.jacobians
            .iter()
            .flatten()
            .all(|j| j.values.iter().all(|x| x.is_finite()))
}

/// Free blocks and their offsets in the stacked step vector.
struct Layout {
    active: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(blocks: &[ParameterBlock]) -> Self {
        let active: Vec<usize> = (0..blocks.len())
            .filter(|&i| !blocks[i].frozen && blocks[i].dim() > 0)
            .collect();
        let mut offsets = Vec::with_capacity(active.len());
        let mut total = 0;
        for &i in &active {
            offsets.push(total);
            total += blocks[i].dim();
        }
        Self { active, offsets, total }
    }
}

fn overlap(a: &BlockJacobian, b: &BlockJacobian) -> Option<std::ops::Range<usize>> {
    let start = a.row_start.max(b.row_start);
    let end = a.rows().end.min(b.rows().end);
    (start < end).then_some(start..end)
}

/// `J_aᵀ J_b` over the rows both blocks touch.
fn cross_term(a: &BlockJacobian, b: &BlockJacobian) -> Option<DMatrix<f64>> {
    let rows = overlap(a, b)?;
    let n = rows.len();
    let ja = a.values.rows(rows.start - a.row_start, n);
    let jb = b.values.rows(rows.start - b.row_start, n);
    Some(ja.transpose() * jb)
}

/// `−J_aᵀ r`.
fn gradient_term(j: &BlockJacobian, r: &DVector<f64>) -> DVector<f64> {
    -(j.values.transpose() * r.rows(j.row_start, j.values.nrows()))
}

struct NormalEquations<'a> {
    layout: &'a Layout,
    jacobians: Vec<&'a BlockJacobian>,
    residuals: &'a DVector<f64>,
    /// Indices (into `layout.active`) eliminated by Schur complement.
    eliminated: Vec<usize>,
    kept: Vec<usize>,
}

impl<'a> NormalEquations<'a> {
    fn new(
        layout: &'a Layout,
        blocks: &[ParameterBlock],
        eval: &'a Evaluation,
        config: &LmConfig,
    ) -> Result<Self, OptimError> {
        let mut jacobians = Vec::with_capacity(layout.active.len());
        for &bi in &layout.active {
            let j =
                eval.jacobians.get(bi).and_then(|j| j.as_ref()).ok_or_else(|| {
                    OptimError::Invalid(format!("missing Jacobian for free block '{}'", blocks[bi].name))
                })?;
            if j.values.ncols() != blocks[bi].dim() || j.rows().end > eval.residuals.len() {
                return Err(OptimError::Invalid(format!(
                    "Jacobian of block '{}' has shape {}x{} at row {}",
                    blocks[bi].name,
                    j.values.nrows(),
                    j.values.ncols(),
                    j.row_start
                )));
            }
            jacobians.push(j);
        }

        let poses: Vec<usize> = (0..layout.active.len())
            .filter(|&k| matches!(blocks[layout.active[k]].value, BlockValue::Pose(_)))
            .collect();
        let mut disjoint = true;
        'outer: for (i, &a) in poses.iter().enumerate() {
            for &b in &poses[i + 1..] {
                if overlap(jacobians[a], jacobians[b]).is_some() {
                    disjoint = false;
                    break 'outer;
                }
            }
        }
        let (eliminated, kept) = if disjoint && poses.len() > config.schur_min_poses {
            let kept = (0..layout.active.len()).filter(|k| !poses.contains(k)).collect();
            (poses, kept)
        } else {
            (Vec::new(), (0..layout.active.len()).collect())
        };
        Ok(Self {
            layout,
            jacobians,
            residuals: &eval.residuals,
            eliminated,
            kept,
        })
    }

    fn dim(&self, k: usize) -> usize {
        self.jacobians[k].values.ncols()
    }

    /// Dense normal matrix and gradient over the given subset of blocks.
    fn assemble(&self, subset: &[usize], lambda: f64) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
        let mut offsets = Vec::with_capacity(subset.len());
        let mut n = 0;
        for &k in subset {
            offsets.push(n);
            n += self.dim(k);
        }
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for (i, &a) in subset.iter().enumerate() {
            g.rows_mut(offsets[i], self.dim(a))
                .copy_from(&gradient_term(self.jacobians[a], self.residuals));
            for (j, &b) in subset.iter().enumerate().skip(i) {
                if let Some(block) = cross_term(self.jacobians[a], self.jacobians[b]) {
                    h.view_mut((offsets[i], offsets[j]), block.shape()).copy_from(&block);
                    if i != j {
                        h.view_mut((offsets[j], offsets[i]), (block.ncols(), block.nrows()))
                            .copy_from(&block.transpose());
                    }
                }
            }
        }
        for d in 0..n {
            h[(d, d)] += lambda;
        }
        (h, g, offsets)
    }

    /// Solves `(JᵀJ + λI)·δ = −Jᵀr`; `None` when the damped system is not
    /// positive definite.
    fn solve(&self, lambda: f64) -> Option<DVector<f64>> {
        let mut step = DVector::zeros(self.layout.total);
        let (h_kk, g_k, k_offsets) = self.assemble(&self.kept, lambda);
        if self.eliminated.is_empty() {
            let delta = h_kk.cholesky()?.solve(&g_k);
            for (i, &k) in self.kept.iter().enumerate() {
                step.rows_mut(self.layout.offsets[k], self.dim(k))
                    .copy_from(&delta.rows(k_offsets[i], self.dim(k)));
            }
            return Some(step);
        }

        // Eliminate the (mutually independent) pose blocks.
        let nk = g_k.len();
        let mut schur = h_kk;
        let mut rhs = g_k;
        let mut per_pose = Vec::with_capacity(self.eliminated.len());
        for &f in &self.eliminated {
            let jf = self.jacobians[f];
            let mut h_ff = jf.values.transpose() * &jf.values;
            for d in 0..h_ff.nrows() {
                h_ff[(d, d)] += lambda;
            }
            let chol = h_ff.cholesky()?;
            let g_f = gradient_term(jf, self.residuals);
            let mut h_kf = DMatrix::zeros(nk, self.dim(f));
            for (i, &k) in self.kept.iter().enumerate() {
                if let Some(block) = cross_term(self.jacobians[k], jf) {
                    h_kf.view_mut((k_offsets[i], 0), block.shape()).copy_from(&block);
                }
            }
            let inv_h_fk = chol.solve(&h_kf.transpose());
            let inv_g_f = chol.solve(&g_f);
            schur -= &h_kf * &inv_h_fk;
            rhs -= &h_kf * &inv_g_f;
            per_pose.push((f, chol, g_f, h_kf));
        }
        let delta_k = if nk > 0 {
            schur.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        for (i, &k) in self.kept.iter().enumerate() {
            step.rows_mut(self.layout.offsets[k], self.dim(k))
                .copy_from(&delta_k.rows(k_offsets[i], self.dim(k)));
        }
        for (f, chol, g_f, h_kf) in per_pose {
            let delta_f = chol.solve(&(g_f - h_kf.transpose() * &delta_k));
            step.rows_mut(self.layout.offsets[f], self.dim(f)).copy_from(&delta_f);
        }
        Some(step)
    }
}

fn apply_step(blocks: &mut [ParameterBlock], layout: &Layout, step: &DVector<f64>) {
    for (k, &bi) in layout.active.iter().enumerate() {
        let dim = blocks[bi].dim();
        let delta: Vec<f64> = step.rows(layout.offsets[k], dim).iter().copied().collect();
        blocks[bi].apply_update(&delta);
    }
}

/// Levenberg–Marquardt with additive damping `(JᵀJ + λI)`.
///
/// λ is divided by 3 after an accepted step and doubled after a rejected one.
/// A trial step that leaves the model domain counts as rejected.
pub fn lm_solve<P: ResidualProblem + ?Sized>(
    problem: &P,
    mut blocks: Vec<ParameterBlock>,
    config: &LmConfig,
) -> Result<(Vec<ParameterBlock>, SolveTrace), OptimError> {
    config.validate()?;
    let mut eval = problem.evaluate(&blocks, true)?;
    if !is_finite(&eval) {
        return Err(OptimError::NonFinite { iteration: 0 });
    }
    let mut cost = half_squared_norm(&eval.residuals);
    let mut trace = SolveTrace {
        initial_cost: cost,
        final_cost: cost,
        iterations: Vec::new(),
        termination: Termination::MaxIterations,
    };
    let layout = Layout::new(&blocks);
    if cost == 0.0 {
        trace.termination = Termination::ZeroCost;
        return Ok((blocks, trace));
    }
    if layout.total == 0 {
        trace.termination = Termination::NoFreeParameters;
        return Ok((blocks, trace));
    }
    if eval.residuals.len() < layout.total {
        return Err(OptimError::UnderDetermined {
            residuals: eval.residuals.len(),
            parameters: layout.total,
        });
    }

    let mut lambda = config.lambda_init;
    for iteration in 1..=config.max_iters {
        let normal = NormalEquations::new(&layout, &blocks, &eval, config)?;
        let Some(step) = normal.solve(lambda) else {
            trace.iterations.push(IterationRecord {
                index: iteration,
                cost,
                accepted: false,
                lambda: Some(lambda),
                step_norm: None,
                learning_rate: None,
                params: None,
            });
            lambda *= 2.0;
            if lambda >= config.lambda_max {
                return Err(OptimError::Unsolvable { lambda });
            }
            continue;
        };
        let step_norm = step.norm();
        if !step_norm.is_finite() {
            return Err(OptimError::NonFinite { iteration });
        }
        if step_norm < config.step_tol {
            trace.termination = Termination::StepConverged;
            break;
        }

        let mut trial = blocks.clone();
        apply_step(&mut trial, &layout, &step);
        problem.constrain(&mut trial);
        let trial_eval = match problem.evaluate(&trial, true) {
            Ok(e) => Some(e),
            Err(OptimError::Domain(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(e) = &trial_eval {
            if !is_finite(e) {
                return Err(OptimError::NonFinite { iteration });
            }
        }
        let trial_cost = trial_eval
            .as_ref()
            .map_or(f64::INFINITY, |e| half_squared_norm(&e.residuals));
        let accepted = trial_cost < cost;
        trace.iterations.push(IterationRecord {
            index: iteration,
            cost: if accepted { trial_cost } else { cost },
            accepted,
            lambda: Some(lambda),
            step_norm: Some(step_norm),
            learning_rate: None,
            params: None,
        });
        if accepted {
            let relative = (cost - trial_cost) / cost;
            blocks = trial;
            eval = trial_eval.expect("accepted step has an evaluation");
            cost = trial_cost;
            lambda /= 3.0;
            if cost == 0.0 {
                trace.termination = Termination::ZeroCost;
                break;
            }
            if relative < config.cost_tol {
                trace.termination = Termination::CostConverged;
                break;
            }
        } else {
            lambda *= 2.0;
            if lambda >= config.lambda_max {
                trace.termination = Termination::DampingLimit;
                break;
            }
        }
    }
    trace.final_cost = cost;
    Ok((blocks, trace))
}

/// Step-decayed first-order schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdSchedule {
    /// Base learning rate of the intrinsics block.
    pub learning_rate: f64,
    /// Base learning rate of every other block.
    pub other_learning_rate: f64,
    /// Multiplicative decay applied every `step_size` epochs.
    pub gamma: f64,
    pub step_size: usize,
    /// Epochs during which intrinsics blocks stay frozen.
    pub warm_start_epochs: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for GdSchedule {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            other_learning_rate: 2e-4,
            gamma: 0.5,
            step_size: 30,
            warm_start_epochs: 10,
            epochs: 50,
            steps_per_epoch: 10,
        }
    }
}

impl GdSchedule {
    /// `base·γ^⌊epoch/step_size⌋`.
    pub fn decay_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.gamma.powi((epoch / self.step_size) as i32)
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.decay_at(self.learning_rate, epoch)
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let positive = [self.learning_rate, self.other_learning_rate, self.gamma]
            .iter()
            .all(|&x| x > 0.0 && x.is_finite());
        if !positive || self.step_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(OptimError::Invalid(format!(
                "schedule values must be positive: {self:?}"
            )));
        }
        if self.warm_start_epochs >= self.epochs {
            return Err(OptimError::Invalid(format!(
                "warm start ({}) must be shorter than the run ({} epochs)",
                self.warm_start_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// A scalar loss with its gradient for every block (tangent coordinates for
/// pose blocks).
pub trait GradientObjective {
    fn evaluate(&mut self, blocks: &[ParameterBlock]) -> Result<(f64, Vec<DVector<f64>>), OptimError>;

    fn constrain(&self, _blocks: &mut [ParameterBlock]) {}
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Backtracking gives up on a step once its multiplier falls below this.
const MIN_BACKOFF: f64 = 1.0 / 1024.0;

#[derive(Clone)]
struct Moments {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

fn snapshot(blocks: &[ParameterBlock]) -> Vec<f64> {
    blocks
        .iter()
        .filter_map(|b| b.as_vector())
        .flat_map(|v| v.iter().copied())
        .collect()
}

/// Adam-style descent under a [`GdSchedule`], with a monotone safeguard.
///
/// Each step is computed in coordinates normalized by the block's
/// `step_scale`. A step that would raise the loss, or that leaves the
/// objective's domain, is retried at half length;
/// the multiplier recovers by doubling after every accepted step. The trace
/// holds one record per epoch (taken at the start of the epoch) plus a final
/// record.
pub fn gd_solve<O: GradientObjective + ?Sized>(
    objective: &mut O,
    schedule: &GdSchedule,
    mut blocks: Vec<ParameterBlock>,
) -> Result<(Vec<ParameterBlock>, SolveTrace), OptimError> {
    schedule.validate()?;
    let (mut loss, mut grads) = objective.evaluate(&blocks)?;
    if !loss.is_finite() {
        return Err(OptimError::NonFiniteLoss { epoch: 0 });
    }
    if grads.len() != blocks.len() {
        return Err(OptimError::Invalid("one gradient per block required".into()));
    }
    let mut trace = SolveTrace {
        initial_cost: loss,
        final_cost: loss,
        iterations: Vec::new(),
        termination: Termination::Completed,
    };
    let mut moments: Vec<Moments> = blocks
        .iter()
        .map(|b| Moments {
            m: DVector::zeros(b.dim()),
            v: DVector::zeros(b.dim()),
            t: 0,
        })
        .collect();
    let mut backoff = 1.0_f64;

    for epoch in 0..schedule.epochs {
        let lr_intrinsics = schedule.learning_rate_at(epoch);
        let lr_other = schedule.decay_at(schedule.other_learning_rate, epoch);
        trace.iterations.push(IterationRecord {
            index: epoch,
            cost: loss,
            accepted: true,
            lambda: None,
            step_norm: None,
            learning_rate: Some(lr_intrinsics),
            params: Some(snapshot(&blocks)),
        });
        let trainable: Vec<bool> = blocks
            .iter()
            .map(|b| !b.frozen && !(b.role == BlockRole::Intrinsics && epoch < schedule.warm_start_epochs))
            .collect();
        if !trainable.iter().any(|&t| t) {
            continue;
        }

        for _ in 0..schedule.steps_per_epoch {
            loop {
                let mut trial = blocks.clone();
                let mut trial_moments = moments.clone();
                for (i, block) in trial.iter_mut().enumerate() {
                    if !trainable[i] {
                        continue;
                    }
                    let lr = if block.role == BlockRole::Intrinsics {
                        lr_intrinsics
                    } else {
                        lr_other
                    };
                    let scale = block
                        .step_scale
                        .clone()
                        .unwrap_or_else(|| DVector::from_element(block.dim(), 1.0));
                    let g = grads[i].component_mul(&scale);
                    let mo = &mut trial_moments[i];
                    mo.t += 1;
                    mo.m = &mo.m * ADAM_BETA1 + &g * (1.0 - ADAM_BETA1);
                    mo.v = &mo.v * ADAM_BETA2 + g.component_mul(&g) * (1.0 - ADAM_BETA2);
                    let m_hat = &mo.m / (1.0 - ADAM_BETA1.powi(mo.t));
                    let v_hat = &mo.v / (1.0 - ADAM_BETA2.powi(mo.t));
                    let step: Vec<f64> = (0..block.dim())
                        .map(|k| -lr * backoff * scale[k] * m_hat[k] / (v_hat[k].sqrt() + ADAM_EPS))
                        .collect();
                    block.apply_update(&step);
                }
                objective.constrain(&mut trial);
                let (trial_loss, trial_grads) = match objective.evaluate(&trial) {
                    Ok(v) => v,
                    Err(OptimError::Domain(_)) => (f64::INFINITY, Vec::new()),
                    Err(e) => return Err(e),
                };
                if trial_loss.is_nan() {
                    return Err(OptimError::NonFiniteLoss { epoch });
                }
                if trial_loss <= loss {
                    blocks = trial;
                    moments = trial_moments;
                    loss = trial_loss;
                    grads = trial_grads;
                    backoff = (backoff * 2.0).min(1.0);
                    break;
                }
                backoff *= 0.5;
                if backoff < MIN_BACKOFF {
                    backoff = MIN_BACKOFF;
                    break;
                }
            }
        }
    }
    trace.iterations.push(IterationRecord {
        index: schedule.epochs,
        cost: loss,
        accepted: true,
        lambda: None,
        step_norm: None,
        learning_rate: Some(schedule.learning_rate_at(schedule.epochs)),
        params: Some(snapshot(&blocks)),
    });
    trace.final_cost = loss;
    Ok((blocks, trace))
}
