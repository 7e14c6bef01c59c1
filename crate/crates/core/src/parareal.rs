//! Parareal iteration over pluggable fine and coarse propagators.
//!
//! A propagation problem is a chain of `n_slots` unit steps. Slot `s` maps
//! state `s` to state `s + 1`; the forward solve uses slots = time steps and
//! the adjoint solve runs its slots backwards in time. The chain is split into
//! contiguous subintervals and the interface states are corrected by
//!
//! ```text
//! X^k_{n+1} = F(X^{k-1}_n) + G(X^k_n) − G(X^{k-1}_n)
//! ```
//!
//! sweeping `n` left to right, so the coarse term uses the already updated
//! `X^k_n`.

use std::error::Error as StdError;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::mna::StampedSystem;
use crate::transient::{InitialState, Scheme, Stepper, TimeGrid, Trajectory};

pub type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum PararealError {
    #[error("cannot split {n_steps} steps into {n} subintervals")]
    Partition { n_steps: usize, n: usize },
    #[error("coarse stride must be at least 1")]
    InvalidStride,
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("{stage} propagator failed on subinterval {subinterval}: {source}")]
    Propagation {
        stage: &'static str,
        subinterval: usize,
        source: BoxError,
    },
}

/// Contiguous slot range `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Subinterval {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl Subinterval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Slot boundaries visited with steps of `stride` slots, the last step
    /// shortened to end on `end`.
    pub fn strided(&self, stride: usize) -> Vec<usize> {
        let mut pts: Vec<usize> = (self.start..self.end).step_by(stride.max(1)).collect();
        pts.push(self.end);
        pts
    }
}

/// Splits `n_steps` slots into `n` pieces whose sizes differ by at most one,
/// longer pieces first.
pub fn partition(n_steps: usize, n: usize) -> Result<Vec<Subinterval>, PararealError> {
    if n == 0 || n > n_steps {
        return Err(PararealError::Partition { n_steps, n });
    }
    let (base, extra) = (n_steps / n, n_steps % n);
    let mut start = 0;
    Ok((0..n)
        .map(|index| {
            let len = base + usize::from(index < extra);
            let sub = Subinterval {
                index,
                start,
                end: start + len,
            };
            start += len;
            sub
        })
        .collect())
}

/// `max_n ‖new_n − old_n‖∞ / (1 + ‖new_n‖∞)`; zero for no interfaces.
pub fn jump_norm(old: &[DVector<f64>], new: &[DVector<f64>]) -> f64 {
    assert_eq!(old.len(), new.len(), "interface lists differ in length");
    old.iter()
        .zip(new)
        .map(|(a, b)| (b - a).amax() / (1.0 + b.amax()))
        .fold(0.0, f64::max)
}

/// Result of propagating across one subinterval.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Piece {
    /// State after each slot, or only the final state when not kept.
    pub states: Vec<DVector<f64>>,
    /// Newton iterations per slot, when the propagator counts them.
    pub newton_iterations: Vec<u32>,
}

impl Piece {
    pub fn last(&self) -> &DVector<f64> {
        self.states
            .last()
            .expect("propagation yields at least one state")
    }
}

pub trait Propagator: Sync {
    /// Called once with the partition before any propagation.
    fn prepare(&mut self, _subs: &[Subinterval]) -> Result<(), BoxError> {
        Ok(())
    }

    /// Evolves `x` across the slots of `sub`. With `keep` every intermediate
    /// slot state is returned, otherwise only the end state.
    fn propagate(&self, x: &DVector<f64>, sub: &Subinterval, keep: bool)
        -> Result<Piece, BoxError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PararealConfig {
    pub n_subintervals: usize,
    /// Relative ∞-norm bound on the interface update.
    pub tol: f64,
    /// Defaults to `n_subintervals`.
    pub max_iter: Option<usize>,
    /// Fine slots per coarse step.
    pub coarse_stride: usize,
    /// Fine-stage worker threads; 0 lets the pool decide.
    pub workers: usize,
}

impl PararealConfig {
    pub fn new(n_subintervals: usize) -> Self {
        PararealConfig {
            n_subintervals,
            tol: 1e-8,
            max_iter: None,
            coarse_stride: 100,
            workers: 0,
        }
    }

    fn validate(&self) -> Result<(), PararealError> {
        if self.coarse_stride == 0 {
            return Err(PararealError::InvalidStride);
        }
        if !(self.tol > 0.0) {
            return Err(PararealError::InvalidTolerance(self.tol));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PararealReport {
    pub n_subintervals: usize,
    pub workers: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Jump over the interior interfaces after each iteration.
    pub jump_history: Vec<f64>,
    /// All serial coarse propagation (initial sweep and corrections).
    pub coarse_time_s: f64,
    /// The initial serial coarse sweep alone.
    pub coarse_sweep_s: f64,
    /// Coarse propagation time per subinterval, summed over iterations.
    pub coarse_times_s: Vec<f64>,
    /// One-off propagator setup for this partition.
    pub setup_s: f64,
    /// Duration of the latest fine solve of each subinterval.
    pub fine_times_s: Vec<f64>,
    /// Number of fine subinterval solves performed.
    pub fine_solves: usize,
    /// All fine work, summed over subintervals and iterations.
    pub fine_total_s: f64,
    /// Sum over iterations of the slowest fine solve in that iteration: the
    /// fine-stage wall time with one worker per subinterval.
    pub fine_critical_s: f64,
    pub total_wall_s: f64,
}

impl PararealReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Wall time had every subinterval its own worker: the measured time
    /// with the fine stage replaced by its critical path.
    pub fn projected_wall_s(&self) -> f64 {
        (self.total_wall_s - self.fine_total_s + self.fine_critical_s).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct PararealOutcome {
    /// `n_slots + 1` states stitched from the final fine pieces.
    pub states: Vec<DVector<f64>>,
    /// Final interface values `X_0 .. X_N`.
    pub interfaces: Vec<DVector<f64>>,
    pub newton_iterations: Vec<u32>,
    pub report: PararealReport,
}

fn fail(stage: &'static str, subinterval: usize) -> impl FnOnce(BoxError) -> PararealError {
    move |source| PararealError::Propagation {
        stage,
        subinterval,
        source,
    }
}

/// Runs parareal over `n_slots` slots starting from `x0`.
pub fn parareal_solve<F: Propagator, G: Propagator>(
    fine: &mut F,
    coarse: &mut G,
    x0: &DVector<f64>,
    n_slots: usize,
    cfg: &PararealConfig,
) -> Result<PararealOutcome, PararealError> {
    let wall = Instant::now();
    cfg.validate()?;
    let subs = partition(n_slots, cfg.n_subintervals)?;
    let n = subs.len();
    let max_iter = cfg.max_iter.unwrap_or(n).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PararealError::Pool(e.to_string()))?;

    let clock = Instant::now();
    coarse.prepare(&subs).map_err(fail("coarse", 0))?;
    fine.prepare(&subs).map_err(fail("fine", 0))?;
    let setup_s = clock.elapsed().as_secs_f64();
    let (fine, coarse) = (&*fine, &*coarse);

    let mut coarse_times = vec![0.0; n];
    let run_coarse = |x: &DVector<f64>, sub: &Subinterval, times: &mut [f64]| {
        let clock = Instant::now();
        let out = coarse
            .propagate(x, sub, false)
            .map_err(fail("coarse", sub.index));
        times[sub.index] += clock.elapsed().as_secs_f64();
        out.map(|p| p.last().clone())
    };

    let mut x = Vec::with_capacity(n + 1);
    x.push(x0.clone());
    let mut g_old = Vec::with_capacity(n);
    for sub in &subs {
        let g = run_coarse(&x[sub.index], sub, &mut coarse_times)?;
        g_old.push(g.clone());
        x.push(g);
    }
    let coarse_sweep_s = coarse_times.iter().sum();

    let mut pieces: Vec<Option<Piece>> = vec![None; n];
    let mut piece_start: Vec<Option<DVector<f64>>> = vec![None; n];
    let mut fine_times = vec![0.0; n];
    let mut fine_solves = 0;
    let (mut fine_total, mut fine_critical) = (0.0, 0.0);
    let mut history = Vec::new();
    let mut converged = false;

    for k in 1..=max_iter {
        let todo: Vec<usize> = (0..n)
            .filter(|&i| piece_start[i].as_ref() != Some(&x[i]))
            .collect();
        let results: Vec<(usize, Result<Piece, BoxError>, f64)> = pool.install(|| {
            todo.par_iter()
                .map(|&i| {
                    let clock = Instant::now();
                    let r = fine.propagate(&x[i], &subs[i], true);
                    (i, r, clock.elapsed().as_secs_f64())
                })
                .collect()
        });
        fine_critical += results.iter().map(|r| r.2).fold(0.0, f64::max);
        for (i, r, secs) in results {
            fine_total += secs;
            pieces[i] = Some(r.map_err(fail("fine", i))?);
            piece_start[i] = Some(x[i].clone());
            fine_times[i] = secs;
            fine_solves += 1;
        }

        let mut next = Vec::with_capacity(n + 1);
        next.push(x0.clone());
        for sub in &subs {
            let i = sub.index;
            let f_end = pieces[i].as_ref().expect("fine piece computed").last();
            if next[i] == x[i] {
                // Unchanged start: the correction vanishes identically.
                next.push(f_end.clone());
            } else {
                let g = run_coarse(&next[i], sub, &mut coarse_times)?;
                next.push(f_end + &g - &g_old[i]);
                g_old[i] = g;
            }
        }
        let jump = jump_norm(&x[1..n], &next[1..n]);
        history.push(jump);
        log::debug!("parareal iteration {k}: jump {jump:.3e}");
        x = next;
        if jump <= cfg.tol {
            converged = true;
            break;
        }
    }

    let mut states = Vec::with_capacity(n_slots + 1);
    let mut newton = Vec::new();
    states.push(x0.clone());
    for p in pieces.into_iter().flatten() {
        states.extend(p.states);
        newton.extend(p.newton_iterations);
    }
    let report = PararealReport {
        n_subintervals: n,
        workers: pool.current_num_threads(),
        iterations: history.len(),
        converged,
        jump_history: history,
        coarse_time_s: coarse_times.iter().sum(),
        coarse_sweep_s,
        coarse_times_s: coarse_times,
        setup_s,
        fine_times_s: fine_times,
        fine_solves,
        fine_total_s: fine_total,
        fine_critical_s: fine_critical,
        total_wall_s: wall.elapsed().as_secs_f64(),
    };
    if !report.converged {
        log::warn!(
            "parareal stopped after {} iterations without reaching tol {:e}",
            report.iterations,
            cfg.tol
        );
    }
    Ok(PararealOutcome {
        states,
        interfaces: x,
        newton_iterations: newton,
        report,
    })
}

pub(crate) fn warn_stride(stride: usize, subs: &[Subinterval]) {
    if let Some(short) = subs.iter().find(|s| s.len() < stride) {
        log::warn!(
            "coarse stride {stride} exceeds subinterval {} ({} steps); coarse uses one step there",
            short.index,
            short.len()
        );
    }
}

/// Forward transient propagator; slots are time steps. Stride 1 is the fine
/// (sequential) integrator.
pub struct ForwardPropagator<'a> {
    stepper: Stepper<'a>,
    grid: TimeGrid,
    stride: usize,
}

impl<'a> ForwardPropagator<'a> {
    pub fn new(sys: &'a StampedSystem, grid: TimeGrid, scheme: Scheme, stride: usize) -> Self {
        ForwardPropagator {
            stepper: Stepper::new(sys, scheme),
            grid,
            stride: stride.max(1),
        }
    }
}

impl Propagator for ForwardPropagator<'_> {
    fn prepare(&mut self, subs: &[Subinterval]) -> Result<(), BoxError> {
        warn_stride(self.stride, subs);
        Ok(())
    }

    fn propagate(
        &self,
        x: &DVector<f64>,
        sub: &Subinterval,
        keep: bool,
    ) -> Result<Piece, BoxError> {
        let times: Vec<f64> = sub
            .strided(self.stride)
            .into_iter()
            .map(|k| self.grid.time(k))
            .collect();
        let (mut states, newton_iterations) = self.stepper.march(x, &times, sub.start)?;
        if !keep {
            states.drain(..states.len() - 1);
        }
        Ok(Piece {
            states,
            newton_iterations,
        })
    }
}

/// Forward solve through parareal; the returned trajectory keeps `initial`.
pub fn parareal_forward(
    sys: &StampedSystem,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    scheme: Scheme,
    initial: InitialState,
    cfg: &PararealConfig,
) -> Result<(Trajectory, PararealReport), PararealError> {
    let mut fine = ForwardPropagator::new(sys, *grid, scheme, 1);
    let mut coarse = ForwardPropagator::new(sys, *grid, scheme, cfg.coarse_stride);
    let out = parareal_solve(&mut fine, &mut coarse, x0, grid.n_steps, cfg)?;
    let traj = Trajectory::from_states(*grid, scheme, initial, out.states, out.newton_iterations);
    Ok((traj, out.report))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `x' = −x` propagated exactly over slots of length `h`.
    struct Exact {
        h: f64,
    }

    impl Propagator for Exact {
        fn propagate(
            &self,
            x: &DVector<f64>,
            sub: &Subinterval,
            keep: bool,
        ) -> Result<Piece, BoxError> {
            let mut out = Vec::new();
            let mut y = x.clone();
            for _ in sub.start..sub.end {
                y *= (-self.h).exp();
                out.push(y.clone());
            }
            if !keep {
                out.drain(..out.len() - 1);
            }
            Ok(Piece {
                states: out,
                ..Default::default()
            })
        }
    }

    /// One implicit Euler step per subinterval.
    struct CoarseEuler {
        h: f64,
    }

    impl Propagator for CoarseEuler {
        fn propagate(
            &self,
            x: &DVector<f64>,
            sub: &Subinterval,
            _keep: bool,
        ) -> Result<Piece, BoxError> {
            Ok(Piece {
                states: vec![x / (1.0 + self.h * sub.len() as f64)],
                ..Default::default()
            })
        }
    }

    #[test]
    fn partition_examples() {
        let lens = |n_steps, n| -> Vec<usize> {
            partition(n_steps, n)
                .unwrap()
                .iter()
                .map(|s| s.len())
                .collect()
        };
        assert_eq!(lens(100, 4), [25, 25, 25, 25]);
        assert_eq!(lens(10, 3), [4, 3, 3]);
        assert!(matches!(
            partition(5, 6),
            Err(PararealError::Partition { .. })
        ));
        assert!(partition(5, 0).is_err());
        let subs = partition(10, 3).unwrap();
        assert_eq!((subs[1].start, subs[1].end), (4, 7));
        assert_eq!(subs[2].end, 10);
    }

    #[test]
    fn strided_boundaries() {
        let s = Subinterval {
            index: 0,
            start: 0,
            end: 1000,
        };
        assert_eq!(s.strided(100).len() - 1, 10);
        assert_eq!(s.strided(1).len() - 1, 1000);
        let odd = Subinterval {
            index: 0,
            start: 5,
            end: 255,
        };
        assert_eq!(odd.strided(100), [5, 105, 205, 255]);
        assert_eq!(odd.strided(1000), [5, 255]);
    }

    #[test]
    fn jump_norm_examples() {
        let v = |x: f64| DVector::from_vec(vec![x]);
        assert_eq!(jump_norm(&[v(1.0), v(2.0)], &[v(1.0), v(2.0)]), 0.0);
        assert_eq!(jump_norm(&[v(0.0)], &[v(1.0)]), 0.5);
        assert_eq!(jump_norm(&[], &[]), 0.0);
    }

    #[test]
    fn scalar_decay_hand_example() {
        // Two subintervals of one slot each, slot length 0.5.
        let x0 = DVector::from_vec(vec![1.0]);
        let cfg = PararealConfig {
            max_iter: Some(1),
            tol: 1e-300,
            ..PararealConfig::new(2)
        };
        let out = parareal_solve(
            &mut Exact { h: 0.5 },
            &mut CoarseEuler { h: 0.5 },
            &x0,
            2,
            &cfg,
        )
        .unwrap();
        assert!((out.interfaces[1][0] - 0.60653).abs() < 1e-5);
        assert!((out.interfaces[2][0] - 0.36427).abs() < 1e-5);
        assert!(!out.report.converged);

        let cfg = PararealConfig::new(2);
        let out = parareal_solve(
            &mut Exact { h: 0.5 },
            &mut CoarseEuler { h: 0.5 },
            &x0,
            2,
            &cfg,
        )
        .unwrap();
        assert!((out.interfaces[2][0] - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(out.report.iterations, 2);
        assert!(out.report.converged);
    }

    #[test]
    fn fine_equal_coarse_converges_at_once() {
        let x0 = DVector::from_vec(vec![1.0, -2.0]);
        let out = parareal_solve(
            &mut Exact { h: 0.01 },
            &mut Exact { h: 0.01 },
            &x0,
            100,
            &PararealConfig::new(5),
        )
        .unwrap();
        assert_eq!(out.report.iterations, 1);
        assert_eq!(out.report.jump_history, [0.0]);
        assert_eq!(out.states.len(), 101);
    }

    #[test]
    fn finite_termination_and_worker_independence() {
        let x0 = DVector::from_vec(vec![1.0]);
        let h = 0.01;
        let exact: Vec<f64> = (0..=200).map(|k| (-(k as f64) * h).exp()).collect();
        for n in [1, 3, 7] {
            let cfg = PararealConfig {
                tol: 1e-300,
                ..PararealConfig::new(n)
            };
            let out =
                parareal_solve(&mut Exact { h }, &mut CoarseEuler { h }, &x0, 200, &cfg).unwrap();
            assert!(out.report.converged && out.report.iterations <= n);
            for (k, s) in out.states.iter().enumerate() {
                assert!((s[0] - exact[k]).abs() <= 1e-12 * exact[k], "n={n} k={k}");
            }
            let serial = parareal_solve(
                &mut Exact { h },
                &mut CoarseEuler { h },
                &x0,
                200,
                &PararealConfig { workers: 1, ..cfg },
            )
            .unwrap();
            assert_eq!(serial.states, out.states);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let x0 = DVector::from_vec(vec![1.0]);
        let bad = PararealConfig {
            coarse_stride: 0,
            ..PararealConfig::new(2)
        };
        assert!(matches!(
            parareal_solve(&mut Exact { h: 0.1 }, &mut Exact { h: 0.1 }, &x0, 4, &bad),
            Err(PararealError::InvalidStride)
        ));
    }
}
