//! Fixed-step transient solution of the MNA system.
//!
//! Both schemes are θ-methods on the step residual
//!
//! ```text
//! R_k(φ_{k+1}) = Jc (φ_{k+1} − φ_k)/h + θ G(φ_{k+1}, t_{k+1}) + (1−θ) G(φ_k, t_k)
//! G(φ, t)      = Jg φ + i_nl(φ, t) − i_s(t)
//! ```
//!
//! with θ = 1 (implicit Euler) or θ = ½ (trapezoidal), solved by full-step
//! Newton. The stored derivative is the difference quotient
//! `(φ_{k+1} − φ_k)/h`, which is exactly φ̇ of the implicit Euler residual.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::csv;
use crate::mna::{DofMap, StampedSystem};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransientError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("singular step matrix at step {step}")]
    Singular { step: usize },
    #[error("Newton did not converge at step {step} after {iterations} iterations")]
    NewtonDiverged { step: usize, iterations: u32 },
    #[error("singular DC Jacobian (floating node or capacitor-only cut set?)")]
    DcSingular,
    #[error("DC operating point did not converge after {0} Newton iterations")]
    DcDiverged(u32),
    #[error("state has {got} entries, system has {expected} unknowns")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown integration scheme '{0}' (expected implicit_euler or trapezoidal)")]
    UnknownScheme(String),
}

pub type Result<T> = std::result::Result<T, TransientError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    ImplicitEuler,
    Trapezoidal,
}

impl Scheme {
    pub fn theta(self) -> f64 {
        match self {
            Scheme::ImplicitEuler => 1.0,
            Scheme::Trapezoidal => 0.5,
        }
    }
}

impl FromStr for Scheme {
    type Err = TransientError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "implicit_euler" | "euler" | "ie" | "be" => Ok(Scheme::ImplicitEuler),
            "trapezoidal" | "trap" | "tr" => Ok(Scheme::Trapezoidal),
            _ => Err(TransientError::UnknownScheme(s.to_string())),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::ImplicitEuler => "implicit_euler",
            Scheme::Trapezoidal => "trapezoidal",
        })
    }
}

/// Uniform grid `t0 + k dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, dt: f64) -> Result<TimeGrid> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(TransientError::InvalidGrid(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if !(t1 > t0) {
            return Err(TransientError::InvalidGrid(format!(
                "need t1 > t0, got [{t0}, {t1}]"
            )));
        }
        let ratio = (t1 - t0) / dt;
        let n_steps = ratio.round();
        if (ratio - n_steps).abs() > 1e-6 || n_steps < 1.0 {
            return Err(TransientError::InvalidGrid(format!(
                "span {} is not a whole number of steps of {dt}",
                t1 - t0
            )));
        }
        Ok(TimeGrid {
            t0,
            t1,
            dt,
            n_steps: n_steps as usize,
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    /// Grid index of `t`, if `t` lies on the grid (within 1e-6 dt).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.dt;
        let k = x.round();
        if (x - k).abs() <= 1e-6 && k >= 0.0 && k <= self.n_steps as f64 {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Grid indices inside `[a, b]`.
    pub fn indices_between(&self, a: f64, b: f64) -> std::ops::RangeInclusive<usize> {
        let lo = ((a - self.t0) / self.dt - 1e-6).ceil().max(0.0) as usize;
        let hi = (((b - self.t0) / self.dt + 1e-6).floor().max(-1.0)) as isize;
        let hi = hi.min(self.n_steps as isize);
        if hi < lo as isize {
            #[allow(clippy::reversed_empty_ranges)]
            return 1..=0;
        }
        lo..=hi as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Converged when `‖Δφ‖∞ ≤ tol (1 + ‖φ‖∞)`.
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// How the initial state of a trajectory was obtained. The adjoint needs it
/// to account for the parameter dependence of the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialState {
    /// Given state, independent of the parameters.
    Fixed,
    /// DC operating point at `t0`.
    DcOperatingPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub initial: InitialState,
    pub states: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
    /// Newton iterations per step (`newton_iterations[k]` for the step ending at `k + 1`).
    pub newton_iterations: Vec<u32>,
}

/// Newton solve of one θ-step from `(x_prev, t_prev)` to `t_next`.
pub(crate) struct Stepper<'a> {
    pub sys: &'a StampedSystem,
    pub scheme: Scheme,
    pub newton: NewtonOptions,
}

pub(crate) enum StepFailure {
    Singular,
    Diverged(u32),
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a StampedSystem, scheme: Scheme) -> Self {
        Stepper {
            sys,
            scheme,
            newton: NewtonOptions::default(),
        }
    }

    pub fn step(
        &self,
        x_prev: &DVector<f64>,
        t_prev: f64,
        t_next: f64,
    ) -> std::result::Result<(DVector<f64>, u32), StepFailure> {
        let sys = self.sys;
        let h = t_next - t_prev;
        let theta = self.scheme.theta();
        let jc_h = sys.jc_dense() / h;
        let carried = if theta < 1.0 {
            let (g_prev, _) = sys.static_residual(x_prev, t_prev);
            Some(g_prev * (1.0 - theta) - &jc_h * x_prev)
        } else {
            None
        };
        let mut x = x_prev.clone();
        for iter in 1..=self.newton.max_iter {
            let (g, dg) = sys.static_residual(&x, t_next);
            let mut r = &jc_h * &x + g * theta;
            match &carried {
                Some(c) => r += c,
                None => r -= &jc_h * x_prev,
            }
            let jac: DMatrix<f64> = &jc_h + dg * theta;
            let delta = jac.lu().solve(&r).ok_or(StepFailure::Singular)?;
            x -= &delta;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(StepFailure::Diverged(iter));
            }
            if delta.amax() <= self.newton.tol * (1.0 + x.amax()) {
                return Ok((x, iter));
            }
        }
        Err(StepFailure::Diverged(self.newton.max_iter))
    }

    /// Marches over `times` (first entry is the time of `x0`), returning the
    /// states after each step and the Newton counts. `offset` is added to the
    /// step index in errors.
    pub fn march(
        &self,
        x0: &DVector<f64>,
        times: &[f64],
        offset: usize,
    ) -> Result<(Vec<DVector<f64>>, Vec<u32>)> {
        let mut states = Vec::with_capacity(times.len().saturating_sub(1));
        let mut iters = Vec::with_capacity(times.len().saturating_sub(1));
        let mut x = x0.clone();
        for (k, w) in times.windows(2).enumerate() {
            let (next, it) = self.step(&x, w[0], w[1]).map_err(|f| match f {
                StepFailure::Singular => TransientError::Singular { step: offset + k },
                StepFailure::Diverged(iterations) => TransientError::NewtonDiverged {
                    step: offset + k,
                    iterations,
                },
            })?;
            states.push(next.clone());
            iters.push(it);
            x = next;
        }
        Ok((states, iters))
    }
}

fn check_dim(sys: &StampedSystem, x: &DVector<f64>) -> Result<()> {
    if x.len() != sys.n_dofs() {
        return Err(TransientError::DimensionMismatch {
            expected: sys.n_dofs(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Solves `Jg φ + i_nl(φ, t) = i_s(t)` by Newton from φ = 0.
pub fn dc_operating_point(sys: &StampedSystem, t: f64) -> Result<DVector<f64>> {
    let opts = NewtonOptions::default();
    let mut x = DVector::zeros(sys.n_dofs());
    for _ in 0..opts.max_iter {
        let (r, jac) = sys.static_residual(&x, t);
        let delta = jac.lu().solve(&r).ok_or(TransientError::DcSingular)?;
        x -= &delta;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(TransientError::DcSingular);
        }
        if delta.amax() <= opts.tol * (1.0 + x.amax()) {
            return Ok(x);
        }
    }
    Err(TransientError::DcDiverged(opts.max_iter))
}

/// Integrates from the given initial state over `grid`.
pub fn integrate(
    sys: &StampedSystem,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    scheme: Scheme,
) -> Result<Trajectory> {
    check_dim(sys, x0)?;
    let times: Vec<f64> = (0..=grid.n_steps).map(|k| grid.time(k)).collect();
    let (states, iters) = Stepper::new(sys, scheme).march(x0, &times, 0)?;
    let mut all = Vec::with_capacity(grid.n_steps + 1);
    all.push(x0.clone());
    all.extend(states);
    Ok(Trajectory::from_states(
        *grid,
        scheme,
        InitialState::Fixed,
        all,
        iters,
    ))
}

/// Integrates from the DC operating point at `grid.t0`.
pub fn simulate(sys: &StampedSystem, grid: &TimeGrid, scheme: Scheme) -> Result<Trajectory> {
    let x0 = dc_operating_point(sys, grid.t0)?;
    let mut traj = integrate(sys, &x0, grid, scheme)?;
    traj.initial = InitialState::DcOperatingPoint;
    Ok(traj)
}

impl Trajectory {
    pub(crate) fn from_states(
        grid: TimeGrid,
        scheme: Scheme,
        initial: InitialState,
        states: Vec<DVector<f64>>,
        newton_iterations: Vec<u32>,
    ) -> Trajectory {
        let mut derivs = Vec::with_capacity(states.len());
        derivs.push(DVector::zeros(states[0].len()));
        for w in states.windows(2) {
            derivs.push((&w[1] - &w[0]) / grid.dt);
        }
        Trajectory {
            grid,
            scheme,
            initial,
            states,
            derivs,
            newton_iterations,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.grid.time(k)
    }

    /// Per step, `‖R_k‖∞ / (1 + ‖i_s(t_{k+1})‖∞)` of the discrete residual
    /// evaluated on the stored states.
    pub fn step_residuals(&self, sys: &StampedSystem) -> Vec<f64> {
        let theta = self.scheme.theta();
        let mut g_prev = sys.static_residual(&self.states[0], self.time(0)).0;
        (1..self.states.len())
            .map(|k| {
                let g = sys.static_residual(&self.states[k], self.time(k)).0;
                let r = sys.jc.mul_vec(&self.derivs[k]) + &g * theta + &g_prev * (1.0 - theta);
                g_prev = g;
                r.amax() / (1.0 + sys.source(self.time(k)).amax())
            })
            .collect()
    }

    /// Writes `t,<dof names>` and one row per grid point.
    pub fn write_csv<W: Write>(&self, dofs: &DofMap, mut out: W) -> io::Result<()> {
        writeln!(out, "t,{}", dofs.names().join(","))?;
        for (k, x) in self.states.iter().enumerate() {
            let row: Vec<String> = std::iter::once(self.time(k))
                .chain(x.iter().copied())
                .map(csv::num)
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mna::assemble;
    use crate::netlist::{builtin_circuit, parse_netlist, B6Options};

    fn sys(text: &str) -> StampedSystem {
        assemble(&parse_netlist(text).unwrap())
    }

    #[test]
    fn grid_arithmetic() {
        let g = TimeGrid::new(0.0, 0.1, 1e-6).unwrap();
        assert_eq!(g.n_steps, 100_000);
        assert_eq!(g.index_of(0.05), Some(50_000));
        assert_eq!(g.index_of(0.05 + 0.3e-6), None);
        assert_eq!(g.indices_between(1.5e-6, 4e-6), 2..=4);
        assert!(TimeGrid::new(0.0, 1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 0.0, 0.1).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn divider_operating_point() {
        let s = sys("V1 in 0 DC 5\nR1 in mid 1k\nR2 mid 0 1k");
        let x = dc_operating_point(&s, 0.0).unwrap();
        assert!((x[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn source_branch_current_sign() {
        let s = sys("V1 a 0 DC 5\nR1 a 0 10");
        let x = dc_operating_point(&s, 0.0).unwrap();
        let br = s.dofs.branch("V1").unwrap();
        assert!((x[br] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn rectifier_starts_at_rest() {
        let n = builtin_circuit("half_wave_rectifier", B6Options::default()).unwrap();
        let x = dc_operating_point(&assemble(&n), 0.0).unwrap();
        assert!(x.amax() < 1e-12);
    }

    #[test]
    fn floating_capacitor_is_singular_at_dc() {
        let s = sys("V1 a 0 DC 1\nC1 a b 1\nC2 b 0 1");
        assert_eq!(dc_operating_point(&s, 0.0), Err(TransientError::DcSingular));
    }

    #[test]
    fn rc_charging_matches_closed_form() {
        let s = sys("V1 in 0 DC 1\nR1 in c 1\nC1 c 0 1");
        let grid = TimeGrid::new(0.0, 1.0, 1e-4).unwrap();
        let traj = integrate(&s, &DVector::zeros(3), &grid, Scheme::ImplicitEuler).unwrap();
        let vc = traj.states[grid.n_steps][1];
        assert!((vc - (1.0 - (-1.0f64).exp())).abs() < 1e-3, "{vc}");
    }

    #[test]
    fn zero_source_stays_zero() {
        let s = sys("V1 in 0 DC 0\nR1 in c 1\nC1 c 0 1\nL1 c 0 1m");
        let grid = TimeGrid::new(0.0, 1e-3, 1e-5).unwrap();
        for scheme in [Scheme::ImplicitEuler, Scheme::Trapezoidal] {
            let traj = integrate(&s, &DVector::zeros(s.n_dofs()), &grid, scheme).unwrap();
            assert!(traj.states.iter().all(|x| x.amax() == 0.0));
        }
    }

    fn rc_max_error(scheme: Scheme, dt: f64) -> f64 {
        // Sine drive so the solution is smooth from t = 0 for both schemes.
        let s = sys("V1 in 0 SIN(1 1 0)\nR1 in c 1\nC1 c 0 1");
        let grid = TimeGrid::new(0.0, 1.0, dt).unwrap();
        let traj = integrate(&s, &DVector::zeros(3), &grid, scheme).unwrap();
        let w = 2.0 * std::f64::consts::PI;
        // v' = sin(wt) - v, v(0) = 0
        let exact = |t: f64| (w * (-t).exp() + (w * t).sin() - w * (w * t).cos()) / (1.0 + w * w);
        (0..=grid.n_steps)
            .map(|k| (traj.states[k][1] - exact(grid.time(k))).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn order_of_accuracy() {
        let ie =
            rc_max_error(Scheme::ImplicitEuler, 1e-2) / rc_max_error(Scheme::ImplicitEuler, 5e-3);
        assert!((ie - 2.0).abs() < 0.2, "implicit Euler ratio {ie}");
        let tr = rc_max_error(Scheme::Trapezoidal, 1e-2) / rc_max_error(Scheme::Trapezoidal, 5e-3);
        assert!((tr - 4.0).abs() < 0.4, "trapezoidal ratio {tr}");
    }

    #[test]
    fn residual_and_determinism_on_rectifier() {
        let n = builtin_circuit("half_wave_rectifier", B6Options::default()).unwrap();
        let s = assemble(&n);
        let grid = TimeGrid::new(0.0, 0.04, 1e-5).unwrap();
        let a = simulate(&s, &grid, Scheme::ImplicitEuler).unwrap();
        let b = simulate(&s, &grid, Scheme::ImplicitEuler).unwrap();
        assert_eq!(a, b);
        let worst = a.step_residuals(&s).into_iter().fold(0.0, f64::max);
        assert!(worst <= 1e-10, "{worst}");
        // Output charges to near the peak and then sags during discharge.
        let vout: Vec<f64> = a.states.iter().map(|x| x[1]).collect();
        let peak = vout.iter().cloned().fold(f64::MIN, f64::max);
        assert!(peak > 8.5 && peak < 10.0, "{peak}");
        assert!(vout.iter().all(|&v| v > -1e-9));
    }

    #[test]
    fn csv_shape() {
        let s = sys("V1 in 0 DC 1\nR1 in c 1\nC1 c 0 1");
        let grid = TimeGrid::new(0.0, 1e-3, 1e-4).unwrap();
        let traj = integrate(&s, &DVector::zeros(3), &grid, Scheme::ImplicitEuler).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&s.dofs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines[0], "t,v(in),v(c),i(V1)");
        let first: Vec<f64> = lines[2].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(first[0], 1e-4);
        assert_eq!(first[2], traj.states[1][1]);
    }

    #[test]
    fn dimension_mismatch() {
        let s = sys("R1 a 0 1");
        let grid = TimeGrid::new(0.0, 1.0, 0.5).unwrap();
        assert!(matches!(
            integrate(&s, &DVector::zeros(3), &grid, Scheme::ImplicitEuler),
            Err(TransientError::DimensionMismatch {
                expected: 1,
                got: 3
            })
        ));
    }
}
