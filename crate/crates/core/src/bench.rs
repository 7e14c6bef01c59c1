//! Speedup and efficiency arithmetic and the adjoint wall-clock benchmark.

use std::io::{self, Write};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::adjoint::{AdjointContext, AdjointError, Qoi};
use crate::csv;
use crate::parareal::{PararealConfig, PararealReport};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("parallel time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("number of subintervals must be at least 1")]
    ZeroSubintervals,
    #[error("at least one repetition is required")]
    NoRepetitions,
    #[error("empty list of subinterval counts")]
    EmptyList,
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// `S_p = T_s / T_p`.
pub fn speedup(t_s: f64, t_p: f64) -> Result<f64> {
    if !(t_p > 0.0) {
        return Err(BenchError::NonPositiveTime(t_p));
    }
    Ok(t_s / t_p)
}

/// `E_p = S_p / N`.
pub fn efficiency(s_p: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(BenchError::ZeroSubintervals);
    }
    Ok(s_p / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub n_subintervals: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Mean duration of one fine subinterval solve (best over repetitions in `run_bench`).
    pub fine_time_s: f64,
    /// Initial coarse sweep divided by the number of subintervals.
    pub coarse_time_s: f64,
    /// Initial coarse sweep over all subintervals.
    pub coarse_sweep_s: f64,
    pub total_wall_s: f64,
    pub total_wall_median_s: f64,
    pub sequential_wall_s: f64,
    pub speedup: f64,
    pub efficiency: f64,
    /// See [`PararealReport::projected_wall_s`].
    pub projected_wall_s: f64,
    pub projected_speedup: f64,
    pub projected_efficiency: f64,
}

impl BenchRecord {
    /// Builds a row from the fastest run; speedup and efficiency follow from
    /// the stored wall times.
    pub fn from_report(
        report: &PararealReport,
        sequential_wall_s: f64,
        total_wall_median_s: f64,
    ) -> Result<Self> {
        let n = report.n_subintervals;
        let fine = &report.fine_times_s;
        let s = speedup(sequential_wall_s, report.total_wall_s)?;
        let projected = report.projected_wall_s();
        let ps = speedup(sequential_wall_s, projected)?;
        Ok(BenchRecord {
            n_subintervals: n,
            iterations: report.iterations,
            converged: report.converged,
            fine_time_s: if fine.is_empty() {
                0.0
            } else {
                fine.iter().sum::<f64>() / fine.len() as f64
            },
            coarse_time_s: report.coarse_sweep_s / n.max(1) as f64,
            coarse_sweep_s: report.coarse_sweep_s,
            total_wall_s: report.total_wall_s,
            total_wall_median_s,
            sequential_wall_s,
            speedup: s,
            efficiency: efficiency(s, n)?,
            projected_wall_s: projected,
            projected_speedup: ps,
            projected_efficiency: efficiency(ps, n)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub n_list: Vec<usize>,
    pub workers: usize,
    pub repetitions: usize,
    pub tol: f64,
    pub coarse_stride: usize,
    pub max_iter: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        let cfg = PararealConfig::new(1);
        BenchOptions {
            n_list: vec![2, 4, 8, 12, 24, 48],
            workers: 0,
            repetitions: 3,
            tol: cfg.tol,
            coarse_stride: cfg.coarse_stride,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub t_m: f64,
    pub qoi: String,
    pub repetitions: usize,
    pub sequential_wall_s: f64,
    pub sequential_wall_median_s: f64,
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench report serializes")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "n_subintervals,iterations,converged,fine_time_s,coarse_time_s,coarse_sweep_s,total_wall_s,\
             total_wall_median_s,sequential_wall_s,speedup,efficiency,projected_wall_s,projected_speedup,\
             projected_efficiency"
        )?;
        for r in &self.records {
            let nums = [
                r.fine_time_s,
                r.coarse_time_s,
                r.coarse_sweep_s,
                r.total_wall_s,
                r.total_wall_median_s,
                r.sequential_wall_s,
                r.speedup,
                r.efficiency,
                r.projected_wall_s,
                r.projected_speedup,
                r.projected_efficiency,
            ];
            let cells: Vec<String> = nums.iter().map(|&v| csv::num(v)).collect();
            writeln!(
                out,
                "{},{},{},{}",
                r.n_subintervals,
                r.iterations,
                r.converged,
                cells.join(",")
            )?;
        }
        Ok(())
    }

    /// Human-readable table: one row per subinterval count, then the
    /// sequential reference.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>12} {:>6} {:>12} {:>12} {:>12} {:>8} {:>7} {:>12} {:>8} {:>7}\n",
            "subintervals",
            "iter",
            "fine (s)",
            "coarse (s)",
            "total (s)",
            "S_p",
            "E_p",
            "proj. (s)",
            "S_p'",
            "E_p'"
        );
        for r in &self.records {
            s += &format!(
                "{:>12} {:>6} {:>12.4e} {:>12.4e} {:>12.4e} {:>8.4} {:>7.4} {:>12.4e} {:>8.4} {:>7.4}\n",
                r.n_subintervals,
                r.iterations,
                r.fine_time_s,
                r.coarse_time_s,
                r.total_wall_s,
                r.speedup,
                r.efficiency,
                r.projected_wall_s,
                r.projected_speedup,
                r.projected_efficiency
            );
        }
        s += &format!("sequential solution: {:.4e} s\n", self.sequential_wall_s);
        s
    }
}

fn min_median(mut xs: Vec<f64>) -> (f64, f64) {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let median = if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    };
    (xs[0], median)
}

/// Times one sequential adjoint solve at `t_m`, then parareal adjoint solves
/// for every entry of `n_list`. Each measurement is preceded by a discarded
/// warm-up run.
pub fn run_bench(
    ctx: &AdjointContext<'_>,
    t_m: f64,
    qoi: &Qoi,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if opts.repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    if opts.n_list.is_empty() {
        return Err(BenchError::EmptyList);
    }
    if opts.n_list.contains(&0) {
        return Err(BenchError::ZeroSubintervals);
    }
    let e = &qoi.weights;
    ctx.solve(t_m, e)?;
    let mut seq = Vec::with_capacity(opts.repetitions);
    for _ in 0..opts.repetitions {
        let clock = Instant::now();
        ctx.solve(t_m, e)?;
        seq.push(clock.elapsed().as_secs_f64());
    }
    let (sequential_wall_s, sequential_wall_median_s) = min_median(seq);
    log::info!("sequential adjoint at t_m = {t_m:e}: {sequential_wall_s:.4e} s");

    let mut records = Vec::with_capacity(opts.n_list.len());
    for &n in &opts.n_list {
        let cfg = PararealConfig {
            n_subintervals: n,
            tol: opts.tol,
            max_iter: opts.max_iter,
            coarse_stride: opts.coarse_stride,
            workers: opts.workers,
        };
        ctx.solve_parareal(t_m, e, &cfg)?;
        let mut runs = Vec::with_capacity(opts.repetitions);
        for _ in 0..opts.repetitions {
            // Timed from outside so both sides include assembling the solution.
            let clock = Instant::now();
            let mut report = ctx.solve_parareal(t_m, e, &cfg)?.1;
            report.total_wall_s = clock.elapsed().as_secs_f64();
            runs.push(report);
        }
        let (_, median) = min_median(runs.iter().map(|r| r.total_wall_s).collect());
        let best = runs
            .iter()
            .min_by(|a, b| a.total_wall_s.total_cmp(&b.total_wall_s))
            .expect("at least one run");
        let mut rec = BenchRecord::from_report(best, sequential_wall_s, median)?;
        // Fine time is a per-run mean; take its best over repetitions, like the wall time.
        rec.fine_time_s = runs
            .iter()
            .filter(|r| !r.fine_times_s.is_empty())
            .map(|r| r.fine_times_s.iter().sum::<f64>() / r.fine_times_s.len() as f64)
            .fold(rec.fine_time_s, f64::min);
        log::info!(
            "N = {n}: {} iterations, total {:.4e} s, speedup {:.4}",
            rec.iterations,
            rec.total_wall_s,
            rec.speedup
        );
        records.push(rec);
    }
    Ok(BenchReport {
        t_m,
        qoi: qoi.label.clone(),
        repetitions: opts.repetitions,
        sequential_wall_s,
        sequential_wall_median_s,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Published timings: (subintervals, fine, coarse, total), sequential 51.08 s.
    const REFERENCE_ROWS: [(usize, f64, f64, f64); 6] = [
        (2, 25.07, 0.24, 50.62),
        (4, 12.55, 0.12, 25.34),
        (8, 6.25, 0.06, 12.62),
        (12, 4.16, 0.04, 8.40),
        (24, 2.07, 0.02, 4.18),
        (48, 1.07, 0.01, 2.16),
    ];
    const REFERENCE_SEQUENTIAL: f64 = 51.08;

    #[test]
    fn speedup_examples() {
        assert!((speedup(51.08, 2.16).unwrap() - 23.648).abs() < 5e-4);
        assert!((speedup(51.08, 50.62).unwrap() - 1.0091).abs() < 5e-5);
        assert_eq!(speedup(3.5, 3.5).unwrap(), 1.0);
        assert!(matches!(
            speedup(1.0, 0.0),
            Err(BenchError::NonPositiveTime(_))
        ));
        assert!(speedup(1.0, -2.0).is_err());
    }

    #[test]
    fn efficiency_examples() {
        assert!((efficiency(23.648, 48).unwrap() - 0.4927).abs() < 5e-5);
        assert!((efficiency(2.0158, 4).unwrap() - 0.5039).abs() < 5e-5);
        assert_eq!(efficiency(7.0, 7).unwrap(), 1.0);
        assert!(matches!(
            efficiency(1.0, 0),
            Err(BenchError::ZeroSubintervals)
        ));
    }

    #[test]
    fn reference_efficiency_column_is_flat() {
        for (n, _, _, total) in REFERENCE_ROWS {
            let e = efficiency(speedup(REFERENCE_SEQUENTIAL, total).unwrap(), n).unwrap();
            assert!((e - 0.5).abs() <= 0.02, "N = {n}: {e}");
        }
    }

    #[test]
    fn min_and_median() {
        assert_eq!(min_median(vec![3.0, 1.0, 2.0]), (1.0, 2.0));
        assert_eq!(min_median(vec![4.0, 1.0, 2.0, 3.0]), (1.0, 2.5));
    }

    fn report(n: usize, total: f64) -> PararealReport {
        PararealReport {
            n_subintervals: n,
            workers: 1,
            iterations: 2,
            converged: true,
            jump_history: vec![1.0, 0.0],
            coarse_time_s: 0.02,
            coarse_sweep_s: 0.01,
            coarse_times_s: vec![0.01 / n as f64; n],
            setup_s: 0.0,
            fine_times_s: vec![0.5; n],
            fine_solves: 2 * n,
            fine_total_s: n as f64,
            fine_critical_s: 1.0,
            total_wall_s: total,
        }
    }

    #[test]
    fn record_from_report() {
        let r = BenchRecord::from_report(&report(4, 6.0), 12.0, 6.1).unwrap();
        assert_eq!(r.speedup, 2.0);
        assert_eq!(r.efficiency, 0.5);
        assert_eq!(r.projected_speedup, 4.0);
        assert_eq!(r.fine_time_s, 0.5);
        assert_eq!(r.coarse_time_s, 0.0025);
        assert_eq!(r.projected_wall_s, 3.0);
        assert!(BenchRecord::from_report(&report(2, 0.0), 5.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn efficiency_times_n_is_speedup(t_s in 1e-3f64..1e3, t_p in 1e-3f64..1e3, n in 1usize..64) {
            let r = BenchRecord::from_report(&report(n, t_p + n as f64), t_s, t_p).unwrap();
            prop_assert_eq!(r.speedup, t_s / r.total_wall_s);
            prop_assert_eq!(r.efficiency, r.speedup / n as f64);
            prop_assert!((r.efficiency * n as f64 - r.speedup).abs() <= 4.0 * f64::EPSILON * r.speedup);
        }
    }
}
