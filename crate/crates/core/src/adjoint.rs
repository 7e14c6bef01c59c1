//! Transient adjoint sensitivities.
//!
//! The adjoint is taken of the discrete forward map. With
//! `A_k = Jg + ∂i_nl/∂φ` at `(φ_k, t_k)`, the forward step `j` linearizes to
//!
//! ```text
//! P_j s_{j+1} + Q_j s_j + ρ_j = 0,   P_j = Jc/h + θ A_{j+1},   Q_j = −Jc/h + (1−θ) A_j
//! ρ_j = dJc (φ_{j+1} − φ_j)/h + dJg (θ φ_{j+1} + (1−θ) φ_j)
//! ```
//!
//! so one backward sweep with the transposed step matrices gives the
//! derivative of `e·φ_m` with respect to every parameter. In the limit this
//! is `Jc^T λ̇ − A^T λ = e`, integrated backward from `λ(t_m) = 0`.
//!
//! Two adjoint fields are carried per instant:
//!
//! * `lambda`, forced by `e` at every step, weights the interval sensitivity
//!   `∫ dU/dp dt` over `[t0, t_m]` with the scheme's own quadrature
//!   (right-endpoint for implicit Euler, trapezoid for trapezoidal);
//! * `mu = ∂λ/∂t_m`, the homogeneous solution started by the terminal step
//!   of `lambda`, weights the pointwise sensitivity `dU/dp(t_m)`.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut, Dyn, LU};
use rayon::prelude::*;
use thiserror::Error;

use crate::csv;
use crate::mna::{assemble, DofMap, MnaError, StampedSystem};
use crate::netlist::{Netlist, Parameter};
use crate::parareal::{
    parareal_solve, warn_stride, BoxError, PararealConfig, PararealError, PararealReport, Piece,
    Propagator, Subinterval,
};
use crate::sparse::SparseMatrix;
use crate::transient::{
    dc_operating_point, integrate, InitialState, TimeGrid, Trajectory, TransientError,
};

#[derive(Debug, Error)]
pub enum AdjointError {
    #[error("t = {0:e} is not a point of the time grid")]
    OffGrid(f64),
    #[error("t = {t:e} is outside the trajectory span [{t0:e}, {t1:e}]")]
    OutsideTrajectory { t: f64, t0: f64, t1: f64 },
    #[error("singular transposed step matrix at grid point {0}")]
    Singular(usize),
    #[error("singular initial-state Jacobian")]
    SingularInitial,
    #[error("invalid quantity of interest: {0}")]
    InvalidQoi(String),
    #[error("no analysis instants")]
    NoInstants,
    #[error("relative perturbation must be positive, got {0}")]
    InvalidDelta(f64),
    #[error(transparent)]
    Transient(#[from] TransientError),
    #[error(transparent)]
    Mna(#[from] MnaError),
    #[error(transparent)]
    Parareal(#[from] PararealError),
}

pub type Result<T> = std::result::Result<T, AdjointError>;

/// Linear quantity of interest `U(φ) = e·φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qoi {
    pub label: String,
    /// Unit of `U` for report headers.
    pub unit: String,
    pub weights: DVector<f64>,
}

impl Qoi {
    /// Parses `v(node)`, `v(a,b)`, `i(element)` or a bare node name.
    pub fn parse(selector: &str, dofs: &DofMap) -> Result<Qoi> {
        let s = selector.trim();
        let bad = |why: &str| AdjointError::InvalidQoi(format!("'{selector}': {why}"));
        let mut w = DVector::zeros(dofs.n_dofs);
        let inner = |prefix: char| -> Option<&str> {
            let lower = s.to_ascii_lowercase();
            (lower.starts_with(prefix) && s[1..].trim_start().starts_with('(') && s.ends_with(')'))
                .then(|| s[1..].trim_start()[1..].trim_end_matches(')'))
        };
        let unit;
        if let Some(args) = inner('v') {
            let nodes: Vec<&str> = args.split(',').map(str::trim).collect();
            if nodes.is_empty() || nodes.len() > 2 || nodes.iter().any(|n| n.is_empty()) {
                return Err(bad("expected v(node) or v(a,b)"));
            }
            for (k, name) in nodes.iter().enumerate() {
                if let Some(i) = dofs.node(name)? {
                    w[i] += if k == 0 { 1.0 } else { -1.0 };
                }
            }
            unit = "V";
        } else if let Some(args) = inner('i') {
            w[dofs.branch(args.trim())?] = 1.0;
            unit = "A";
        } else if !s.is_empty() && !s.contains(['(', ')', ',']) {
            if let Some(i) = dofs.node(s)? {
                w[i] = 1.0;
            }
            unit = "V";
        } else {
            return Err(bad("expected v(node), v(a,b) or i(element)"));
        }
        if w.amax() == 0.0 {
            return Err(bad("selects only the ground node"));
        }
        Ok(Qoi {
            label: s.to_string(),
            unit: unit.into(),
            weights: w,
        })
    }

    pub fn from_weights(label: impl Into<String>, weights: DVector<f64>) -> Qoi {
        Qoi {
            label: label.into(),
            unit: "1".into(),
            weights,
        }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Qoi, b: f64) -> Qoi {
        Qoi {
            label: format!("{a}*{} + {b}*{}", self.label, other.label),
            unit: if self.unit == other.unit {
                self.unit.clone()
            } else {
                "1".into()
            },
            weights: &self.weights * a + &other.weights * b,
        }
    }

    pub fn eval(&self, phi: &DVector<f64>) -> f64 {
        self.weights.dot(phi)
    }
}

/// Grid indices inside `[t_start, t_end]`, which must lie inside the grid.
pub fn window_instants(grid: &TimeGrid, t_start: f64, t_end: f64) -> Result<Vec<usize>> {
    let slack = 1e-6 * grid.dt;
    for t in [t_start, t_end] {
        if t < grid.t0 - slack || t > grid.time(grid.n_steps) + slack {
            return Err(AdjointError::OutsideTrajectory {
                t,
                t0: grid.t0,
                t1: grid.time(grid.n_steps),
            });
        }
    }
    let idx: Vec<usize> = grid.indices_between(t_start, t_end).collect();
    if idx.is_empty() {
        return Err(AdjointError::NoInstants);
    }
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    pub t_m: f64,
    /// Grid index of `t_m`.
    pub index: usize,
    pub weights: DVector<f64>,
    /// `λ(t_k)`, `k = 0..=index`; the last entry is zero.
    pub lambda: Vec<DVector<f64>>,
    /// `∂λ/∂t_m (t_k)`; the last entry repeats the one before.
    pub mu: Vec<DVector<f64>>,
}

/// Linearization and factorizations along one trajectory, shared by all
/// instants analyzed on it.
pub struct AdjointContext<'a> {
    pub sys: &'a StampedSystem,
    pub traj: &'a Trajectory,
    theta: f64,
    jc_t: SparseMatrix,
    /// Index into `a_t` for each grid point.
    a_index: Vec<usize>,
    /// Distinct `A_k^T`, consecutive repeats merged.
    a_t: Vec<DMatrix<f64>>,
    /// LU of `Jc^T/dt + θ A^T` per entry of `a_t`.
    fine_lu: Vec<LU<f64, Dyn, Dyn>>,
    /// `φ_0` sensitivity per parameter (zero for a fixed start).
    s0: Vec<DVector<f64>>,
    /// `h Q_0 s_0` per parameter.
    q0s0: Vec<DVector<f64>>,
    /// `φ_{j+1} − φ_j` and `θ φ_{j+1} + (1−θ) φ_j` per step.
    increments: Vec<DVector<f64>>,
    averages: Vec<DVector<f64>>,
    solves: AtomicUsize,
}

impl fmt::Debug for AdjointContext<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdjointContext")
            .field("grid", &self.traj.grid)
            .field("distinct_linearizations", &self.a_t.len())
            .finish()
    }
}

impl<'a> AdjointContext<'a> {
    pub fn new(sys: &'a StampedSystem, traj: &'a Trajectory) -> Result<Self> {
        let n = sys.n_dofs();
        if traj.states[0].len() != n {
            return Err(TransientError::DimensionMismatch {
                expected: n,
                got: traj.states[0].len(),
            }
            .into());
        }
        let theta = traj.scheme.theta();
        let dt = traj.grid.dt;
        let jc_t =
            SparseMatrix::from_triplets(n, sys.jc.iter().map(|(r, c, v)| (c, r, v)).collect());
        let mut a_index = Vec::with_capacity(traj.len());
        let mut a_t: Vec<DMatrix<f64>> = Vec::new();
        let mut fine_lu = Vec::new();
        for (k, phi) in traj.states.iter().enumerate() {
            let a = sys.conductance_at(phi, traj.time(k)).transpose();
            if a_t.last() != Some(&a) {
                let lu = (sys.jc_dense().transpose() / dt + &a * theta).lu();
                fine_lu.push(lu);
                a_t.push(a);
            }
            a_index.push(a_t.len() - 1);
        }

        let np = sys.params.len();
        let (mut s0, mut q0s0) = (vec![DVector::zeros(n); np], vec![DVector::zeros(n); np]);
        if traj.initial == InitialState::DcOperatingPoint {
            let a0 = a_t[a_index[0]].transpose();
            let lu = a0.clone().lu();
            for (p, stamp) in sys.param_stamps.iter().enumerate() {
                let rhs = -stamp.djg.mul_vec(&traj.states[0]);
                let s = lu.solve(&rhs).ok_or(AdjointError::SingularInitial)?;
                q0s0[p] = -sys.jc.mul_vec(&s) + (&a0 * &s) * ((1.0 - theta) * dt);
                s0[p] = s;
            }
        }
        let steps = traj.states.windows(2);
        let increments = steps.clone().map(|w| &w[1] - &w[0]).collect();
        let averages = steps
            .map(|w| &w[1] * theta + &w[0] * (1.0 - theta))
            .collect();
        Ok(AdjointContext {
            sys,
            traj,
            theta,
            jc_t,
            a_index,
            a_t,
            fine_lu,
            s0,
            q0s0,
            increments,
            averages,
            solves: AtomicUsize::new(0),
        })
    }

    /// Number of adjoint solves performed so far.
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn index_of(&self, t_m: f64) -> Result<usize> {
        let grid = &self.traj.grid;
        let t1 = grid.time(self.traj.len() - 1);
        if t_m < grid.t0 - 1e-6 * grid.dt || t_m > t1 + 1e-6 * grid.dt {
            return Err(AdjointError::OutsideTrajectory {
                t: t_m,
                t0: grid.t0,
                t1,
            });
        }
        grid.index_of(t_m).ok_or(AdjointError::OffGrid(t_m))
    }

    fn check_weights(&self, e: &DVector<f64>) -> Result<()> {
        if e.len() != self.sys.n_dofs() {
            return Err(AdjointError::InvalidQoi(format!(
                "{} weights for {} unknowns",
                e.len(),
                self.sys.n_dofs()
            )));
        }
        Ok(())
    }

    /// Backward step from grid point `b` over a step of length `h`; `h_next`
    /// is the length of the step after `b` (0 at the terminal point). `x` and
    /// `out` are stacked `[λ; μ]`.
    #[allow(clippy::too_many_arguments)]
    fn step_into(
        &self,
        lu: &LU<f64, Dyn, Dyn>,
        b: usize,
        h: f64,
        h_next: f64,
        x: &DVector<f64>,
        e: &DVector<f64>,
        out: &mut DVector<f64>,
    ) -> Result<()> {
        let n = e.len();
        let w = self.theta * h + (1.0 - self.theta) * h_next;
        let explicit = self.theta < 1.0 && h_next > 0.0;
        let a = &self.a_t[self.a_index[b]];
        for c in 0..2 {
            let v = &x.as_slice()[c * n..(c + 1) * n];
            let col = &mut out.as_mut_slice()[c * n..(c + 1) * n];
            self.jc_t.mul_into(v, col, 1.0 / h);
            let mut col = DVectorViewMut::from_slice(col, n);
            if explicit {
                col.gemv(
                    -(1.0 - self.theta) * h_next / h,
                    a,
                    &DVectorView::from_slice(v, n),
                    1.0,
                );
            }
            if c == 0 {
                col.axpy(-w / h, e, 1.0);
            } else if h_next == 0.0 {
                col.axpy(-1.0 / h, e, 1.0);
            }
            if !lu.solve_mut(&mut col) {
                return Err(AdjointError::Singular(b));
            }
        }
        Ok(())
    }

    /// Fine backward step from grid point `b` to `b − 1` for instant `m`.
    fn fine_step(
        &self,
        b: usize,
        m: usize,
        x: &DVector<f64>,
        e: &DVector<f64>,
        out: &mut DVector<f64>,
    ) -> Result<()> {
        let dt = self.traj.grid.dt;
        let h_next = if b == m { 0.0 } else { dt };
        self.step_into(&self.fine_lu[self.a_index[b]], b, dt, h_next, x, e, out)
    }

    fn unstack(
        &self,
        t_m: f64,
        m: usize,
        e: &DVector<f64>,
        stacked: Vec<DVector<f64>>,
    ) -> AdjointSolution {
        // `stacked[k]` is the state at grid point k.
        let n = e.len();
        let mut lambda: Vec<DVector<f64>> =
            stacked.iter().map(|x| x.rows(0, n).into_owned()).collect();
        let mut mu: Vec<DVector<f64>> = stacked.iter().map(|x| x.rows(n, n).into_owned()).collect();
        lambda[m] = DVector::zeros(n);
        mu[m] = if m > 0 {
            mu[m - 1].clone()
        } else {
            DVector::zeros(n)
        };
        AdjointSolution {
            t_m,
            index: m,
            weights: e.clone(),
            lambda,
            mu,
        }
    }

    /// Sequential backward solve for the instant `t_m`.
    pub fn solve(&self, t_m: f64, e: &DVector<f64>) -> Result<AdjointSolution> {
        self.check_weights(e)?;
        let m = self.index_of(t_m)?;
        self.solves.fetch_add(1, Ordering::Relaxed);
        let mut stacked = vec![DVector::zeros(2 * e.len()); m + 1];
        for b in (1..=m).rev() {
            let (head, tail) = stacked.split_at_mut(b);
            self.fine_step(b, m, &tail[0], e, &mut head[b - 1])?;
        }
        Ok(self.unstack(self.traj.time(m), m, e, stacked))
    }

    /// Backward solve for `t_m` through parareal.
    pub fn solve_parareal(
        &self,
        t_m: f64,
        e: &DVector<f64>,
        cfg: &PararealConfig,
    ) -> Result<(AdjointSolution, PararealReport)> {
        self.check_weights(e)?;
        let m = self.index_of(t_m)?;
        if m == 0 {
            return Ok((self.solve(t_m, e)?, PararealReport::empty(cfg)));
        }
        let cfg = PararealConfig {
            n_subintervals: cfg.n_subintervals.min(m),
            ..*cfg
        };
        self.solves.fetch_add(1, Ordering::Relaxed);
        let mut fine = AdjointPropagator::new(self, m, e.clone(), 1);
        let mut coarse = AdjointPropagator::new(self, m, e.clone(), cfg.coarse_stride);
        let x0 = DVector::zeros(2 * e.len());
        let out = parareal_solve(&mut fine, &mut coarse, &x0, m, &cfg)?;
        // Slot s ends at grid point m − s.
        let stacked: Vec<DVector<f64>> = out.states.into_iter().rev().collect();
        Ok((self.unstack(self.traj.time(m), m, e, stacked), out.report))
    }

    /// `∂λ/∂t_m` by differencing the interval adjoints of `t_m` and the next
    /// grid point; defined on points `0..=m`.
    pub fn mu_by_difference(&self, t_m: f64, e: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let m = self.index_of(t_m)?;
        let next = self.traj.time(m + 1);
        if m + 1 >= self.traj.len() {
            return Err(AdjointError::OutsideTrajectory {
                t: next,
                t0: self.traj.grid.t0,
                t1: self.traj.time(self.traj.len() - 1),
            });
        }
        let a = self.solve(t_m, e)?;
        let b = self.solve(next, e)?;
        let dt = self.traj.grid.dt;
        Ok((0..=m)
            .map(|k| (&b.lambda[k] - &a.lambda[k]) / dt)
            .collect())
    }

    fn weighted(&self, field: &[DVector<f64>], m: usize, p: usize) -> f64 {
        let stamp = &self.sys.param_stamps[p];
        let h = self.traj.grid.dt;
        let mut sum = 0.0;
        if !stamp.djc.is_empty() {
            sum += (0..m)
                .map(|j| stamp.djc.bilinear(&field[j], &self.increments[j]))
                .sum::<f64>();
        }
        if !stamp.djg.is_empty() {
            sum += h
                * (0..m)
                    .map(|j| stamp.djg.bilinear(&field[j], &self.averages[j]))
                    .sum::<f64>();
        }
        sum
    }

    fn check_params(&self, params: &[usize]) -> Result<()> {
        match params.iter().find(|&&p| p >= self.sys.param_stamps.len()) {
            Some(&p) => Err(MnaError::UnknownParameter(p).into()),
            None => Ok(()),
        }
    }

    /// `dU/dp_i(t_m)` for each listed parameter.
    pub fn pointwise_sensitivity(
        &self,
        adj: &AdjointSolution,
        params: &[usize],
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let m = adj.index;
        Ok(params
            .iter()
            .map(|&p| {
                if m == 0 {
                    return adj.weights.dot(&self.s0[p]);
                }
                self.weighted(&adj.mu, m, p) + adj.mu[0].dot(&self.q0s0[p])
            })
            .collect())
    }

    /// `∫_{t0}^{t_m} dU/dp_i dt` for each listed parameter.
    pub fn interval_sensitivity(
        &self,
        adj: &AdjointSolution,
        params: &[usize],
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let m = adj.index;
        if m == 0 {
            return Ok(vec![0.0; params.len()]);
        }
        let w0 = (1.0 - self.theta) * self.traj.grid.dt;
        Ok(params
            .iter()
            .map(|&p| {
                self.weighted(&adj.lambda, m, p)
                    + adj.lambda[0].dot(&self.q0s0[p])
                    + w0 * adj.weights.dot(&self.s0[p])
            })
            .collect())
    }
}

impl PararealReport {
    fn empty(cfg: &PararealConfig) -> Self {
        PararealReport {
            n_subintervals: 0,
            workers: cfg.workers,
            iterations: 0,
            converged: true,
            jump_history: Vec::new(),
            coarse_time_s: 0.0,
            coarse_sweep_s: 0.0,
            coarse_times_s: Vec::new(),
            setup_s: 0.0,
            fine_times_s: Vec::new(),
            fine_total_s: 0.0,
            fine_critical_s: 0.0,
            fine_solves: 0,
            total_wall_s: 0.0,
        }
    }
}

/// Adjoint propagator; slot `s` is the backward step from grid point
/// `m − s` to `m − s − 1`. Stride 1 is the fine (sequential) solver; larger
/// strides linearize at the coarse points of the forward trajectory.
pub struct AdjointPropagator<'c, 'a> {
    ctx: &'c AdjointContext<'a>,
    m: usize,
    e: DVector<f64>,
    stride: usize,
    coarse_lu: Vec<LU<f64, Dyn, Dyn>>,
    /// Per subinterval: (later point, step length, LU index).
    plan: Vec<Vec<(usize, f64, usize)>>,
}

impl<'c, 'a> AdjointPropagator<'c, 'a> {
    pub fn new(ctx: &'c AdjointContext<'a>, m: usize, e: DVector<f64>, stride: usize) -> Self {
        AdjointPropagator {
            ctx,
            m,
            e,
            stride: stride.max(1),
            coarse_lu: Vec::new(),
            plan: Vec::new(),
        }
    }
}

impl Propagator for AdjointPropagator<'_, '_> {
    fn prepare(&mut self, subs: &[Subinterval]) -> std::result::Result<(), BoxError> {
        if self.stride == 1 {
            return Ok(());
        }
        warn_stride(self.stride, subs);
        let ctx = self.ctx;
        let dt = ctx.traj.grid.dt;
        let jc_t = ctx.sys.jc_dense().transpose();
        let mut cache: HashMap<(usize, u64), usize> = HashMap::new();
        self.plan = subs
            .iter()
            .map(|sub| {
                let pts = sub.strided(self.stride);
                pts.windows(2)
                    .map(|w| {
                        let b = self.m - w[0];
                        let h = (w[1] - w[0]) as f64 * dt;
                        let key = (ctx.a_index[b], h.to_bits());
                        let idx = *cache.entry(key).or_insert_with(|| {
                            let lu = (&jc_t / h + &ctx.a_t[key.0] * ctx.theta).lu();
                            self.coarse_lu.push(lu);
                            self.coarse_lu.len() - 1
                        });
                        (b, h, idx)
                    })
                    .collect()
            })
            .collect();
        Ok(())
    }

    fn propagate(
        &self,
        x: &DVector<f64>,
        sub: &Subinterval,
        keep: bool,
    ) -> std::result::Result<Piece, BoxError> {
        let mut states = Vec::with_capacity(if keep { sub.len() } else { 1 });
        let mut y = x.clone();
        let mut next = DVector::zeros(x.len());
        if self.stride == 1 {
            for s in sub.start..sub.end {
                self.ctx
                    .fine_step(self.m - s, self.m, &y, &self.e, &mut next)?;
                std::mem::swap(&mut y, &mut next);
                if keep {
                    states.push(y.clone());
                }
            }
        } else {
            let dt = self.ctx.traj.grid.dt;
            let mut h_next = if sub.start == 0 { 0.0 } else { dt };
            for &(b, h, idx) in &self.plan[sub.index] {
                self.ctx
                    .step_into(&self.coarse_lu[idx], b, h, h_next, &y, &self.e, &mut next)?;
                std::mem::swap(&mut y, &mut next);
                h_next = h;
                if keep {
                    states.push(y.clone());
                }
            }
        }
        if !keep {
            states.push(y);
        }
        Ok(Piece {
            states,
            newton_iterations: Vec::new(),
        })
    }
}

/// Sequential adjoint solve for one instant.
pub fn solve_adjoint(
    sys: &StampedSystem,
    traj: &Trajectory,
    t_m: f64,
    qoi: &Qoi,
) -> Result<AdjointSolution> {
    AdjointContext::new(sys, traj)?.solve(t_m, &qoi.weights)
}

/// How each per-instant adjoint solve is carried out.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SolveMode {
    /// Sequential solves, instants distributed over the rayon pool.
    #[default]
    Sequential,
    /// Each solve through parareal; instants one after another.
    Parareal(PararealConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySeries {
    pub qoi: String,
    pub qoi_unit: String,
    pub instants: Vec<f64>,
    pub params: Vec<Parameter>,
    /// `values[i][p]` = `dU/dp(t_i)`.
    pub values: Vec<Vec<f64>>,
    pub adjoint_solves: usize,
    /// Parareal reports per instant (empty for sequential solves).
    pub reports: Vec<PararealReport>,
}

impl SensitivitySeries {
    /// Column of one parameter over the instants.
    pub fn column(&self, p: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[p]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|p| self.column(p))
    }

    /// `# unit` comment lines, then `t_m,<param>...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# d{}/dp at analyzed instants t_m (s)", self.qoi)?;
        for p in &self.params {
            writeln!(out, "# {}: {}/{}", p.name, self.qoi_unit, p.kind.unit())?;
        }
        let names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        writeln!(out, "t_m,{}", names.join(","))?;
        for (t, row) in self.instants.iter().zip(&self.values) {
            let cells: Vec<String> = std::iter::once(*t)
                .chain(row.iter().copied())
                .map(csv::num)
                .collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Pointwise sensitivities of `qoi` at every instant, one adjoint solve each.
pub fn sensitivity_series(
    ctx: &AdjointContext<'_>,
    qoi: &Qoi,
    instants: &[f64],
    params: &[usize],
    mode: SolveMode,
) -> Result<SensitivitySeries> {
    if instants.is_empty() {
        return Err(AdjointError::NoInstants);
    }
    ctx.check_params(params)?;
    let before = ctx.solve_count();
    let one = |t: f64| -> Result<(f64, Vec<f64>, Option<PararealReport>)> {
        let (adj, report) = match &mode {
            SolveMode::Sequential => (ctx.solve(t, &qoi.weights)?, None),
            SolveMode::Parareal(cfg) => {
                let (a, r) = ctx.solve_parareal(t, &qoi.weights, cfg)?;
                (a, Some(r))
            }
        };
        Ok((adj.t_m, ctx.pointwise_sensitivity(&adj, params)?, report))
    };
    let rows: Vec<_> = match mode {
        SolveMode::Sequential => instants
            .par_iter()
            .map(|&t| one(t))
            .collect::<Result<_>>()?,
        SolveMode::Parareal(_) => instants.iter().map(|&t| one(t)).collect::<Result<_>>()?,
    };
    let adjoint_solves = ctx.solve_count() - before;
    log::info!(
        "{} adjoint solves for {} instants",
        adjoint_solves,
        instants.len()
    );
    let mut series = SensitivitySeries {
        qoi: qoi.label.clone(),
        qoi_unit: qoi.unit.clone(),
        instants: Vec::with_capacity(rows.len()),
        params: params.iter().map(|&p| ctx.sys.params[p].clone()).collect(),
        values: Vec::with_capacity(rows.len()),
        adjoint_solves,
        reports: Vec::new(),
    };
    for (t, v, r) in rows {
        series.instants.push(t);
        series.values.push(v);
        series.reports.extend(r);
    }
    Ok(series)
}

/// Central differences `(U(p(1+δ)) − U(p(1−δ)))/(2pδ)` at each instant,
/// from two forward solves started like `traj`.
pub fn finite_difference_series(
    netlist: &Netlist,
    traj: &Trajectory,
    param: usize,
    delta: f64,
    qoi: &Qoi,
    instants: &[f64],
) -> Result<Vec<f64>> {
    if !(delta > 0.0) {
        return Err(AdjointError::InvalidDelta(delta));
    }
    let p = netlist
        .params
        .get(param)
        .ok_or(MnaError::UnknownParameter(param))?;
    let idx: Vec<usize> = instants
        .iter()
        .map(|&t| {
            traj.grid
                .index_of(t)
                .filter(|&k| k < traj.len())
                .ok_or(AdjointError::OffGrid(t))
        })
        .collect::<Result<_>>()?;
    let last = idx.iter().copied().max().ok_or(AdjointError::NoInstants)?;
    let run = |value: f64| -> Result<Vec<f64>> {
        let sys = assemble(&netlist.with_param_value(param, value));
        let x0 = match traj.initial {
            InitialState::Fixed => traj.states[0].clone(),
            InitialState::DcOperatingPoint => dc_operating_point(&sys, traj.grid.t0)?,
        };
        if last == 0 {
            return Ok(vec![qoi.eval(&x0); idx.len()]);
        }
        let grid = TimeGrid {
            t1: traj.grid.time(last),
            n_steps: last,
            ..traj.grid
        };
        let t = integrate(&sys, &x0, &grid, traj.scheme)?;
        Ok(idx.iter().map(|&k| qoi.eval(&t.states[k])).collect())
    };
    let up = run(p.nominal * (1.0 + delta))?;
    let dn = run(p.nominal * (1.0 - delta))?;
    Ok(up
        .iter()
        .zip(&dn)
        .map(|(u, d)| (u - d) / (2.0 * p.nominal * delta))
        .collect())
}

/// Central-difference sensitivity at a single instant.
pub fn finite_difference_oracle(
    netlist: &Netlist,
    traj: &Trajectory,
    param: usize,
    delta: f64,
    qoi: &Qoi,
    t_m: f64,
) -> Result<f64> {
    Ok(finite_difference_series(netlist, traj, param, delta, qoi, &[t_m])?[0])
}
