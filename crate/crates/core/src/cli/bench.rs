//! Benchmark runs over generated suites.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{emit, millis, mode_name, status_name, CliError, Common, Suite, EXIT_OK};
use crate::diff::{dqp_solve_named, DiffError, DqpOptions, FixedMask};
use crate::generators::unit_direction;
use crate::solvers::{Registry, SolveSettings};

pub const CSV_HEADER: &str = "id,n,p,m,backend,status,fwd_ms,bwd_ms,total_ms,r_p,r_d,r_g,active,mode,bwd_frac";

/// One (problem, backend) attempt. Failed attempts carry NaN metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub id: String,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub backend: String,
    pub status: String,
    pub fwd_ms: f64,
    pub bwd_ms: f64,
    pub total_ms: f64,
    pub r_p: f64,
    pub r_d: f64,
    pub r_g: f64,
    pub active: usize,
    pub mode: String,
    pub bwd_frac: f64,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.6e},{:.6e},{:.6e},{},{},{:.4}",
            self.id,
            self.n,
            self.p,
            self.m,
            self.backend,
            self.status,
            self.fwd_ms,
            self.bwd_ms,
            self.total_ms,
            self.r_p,
            self.r_d,
            self.r_g,
            self.active,
            self.mode,
            self.bwd_frac
        )
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub suite: Suite,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub dim: usize,
    pub backends: Vec<String>,
    pub settings: SolveSettings,
    pub options: DqpOptions,
}

/// Solves, differentiates once with a seeded unit `grad_z`, and times
/// both halves. The backward time runs from the first post-solve step
/// through the gradient bundle.
pub fn bench_one(
    registry: &Registry,
    id: &str,
    problem: &crate::problem::QpProblem,
    backend: &str,
    seed: u64,
    settings: &SolveSettings,
    options: &DqpOptions,
) -> BenchRecord {
    let (n, p, m) = problem.dims();
    let mut rec = BenchRecord {
        id: id.to_string(),
        n,
        p,
        m,
        backend: backend.to_string(),
        status: "error".into(),
        fwd_ms: f64::NAN,
        bwd_ms: f64::NAN,
        total_ms: f64::NAN,
        r_p: f64::NAN,
        r_d: f64::NAN,
        r_g: f64::NAN,
        active: 0,
        mode: "none".into(),
        bwd_frac: f64::NAN,
    };
    let sol = match dqp_solve_named(problem, registry, backend, settings, options) {
        Ok(sol) => sol,
        Err(DiffError::NotSolved(pt)) => {
            rec.status = status_name(pt.status).into();
            return rec;
        }
        Err(e) => {
            log::info!("{id} {backend}: {e}");
            return rec;
        }
    };
    let grad_z = unit_direction(n, seed);
    let t = Instant::now();
    let grads = sol.backward(&grad_z, None, None, FixedMask::default());
    let backward = t.elapsed();
    if grads.is_err() {
        return rec;
    }
    let r = sol.residuals();
    rec.status = status_name(sol.point().status).into();
    rec.fwd_ms = millis(sol.solve_time());
    rec.bwd_ms = millis(sol.post_solve_time() + backward);
    rec.total_ms = rec.fwd_ms + rec.bwd_ms;
    rec.r_p = r.r_p;
    rec.r_d = r.r_d;
    rec.r_g = r.r_g;
    rec.active = sol.active().len();
    rec.mode = mode_name(sol.mode()).into();
    rec.bwd_frac = if rec.total_ms > 0.0 { rec.bwd_ms / rec.total_ms } else { 0.0 };
    rec
}

pub fn run_bench(config: &BenchConfig) -> Vec<BenchRecord> {
    let registry = Registry::with_defaults();
    let mut records = Vec::new();
    for &size in &config.sizes {
        for &seed in &config.seeds {
            let problem = config.suite.build(size, config.dim, seed);
            let id = format!("{}-{size}-s{seed}", config.suite.name());
            for backend in &config.backends {
                records.push(bench_one(&registry, &id, &problem, backend, seed, &config.settings, &config.options));
            }
        }
    }
    records
}

/// Median and quartiles by linear interpolation.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some((at(0.25), at(0.5), at(0.75)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub backend: String,
    pub n: usize,
    pub solved: usize,
    pub attempts: usize,
    /// (q1, median, q3).
    pub total_ms: Option<(f64, f64, f64)>,
    pub bwd_frac: Option<(f64, f64, f64)>,
    pub r_g: Option<(f64, f64, f64)>,
}

/// Groups by (backend, n) in first-seen order.
pub fn summarize(records: &[BenchRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in records {
        let key = (r.backend.clone(), r.n);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(backend, n)| {
            let group: Vec<&BenchRecord> = records.iter().filter(|r| r.backend == backend && r.n == n).collect();
            let solved: Vec<&&BenchRecord> = group.iter().filter(|r| r.status == "solved").collect();
            let col = |f: fn(&BenchRecord) -> f64| quartiles(&solved.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                solved: solved.len(),
                attempts: group.len(),
                total_ms: col(|r| r.total_ms),
                bwd_frac: col(|r| r.bwd_frac),
                r_g: col(|r| r.r_g),
                backend,
                n,
            }
        })
        .collect()
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let fmt = |q: Option<(f64, f64, f64)>, prec: usize| match q {
        Some((a, b, c)) => format!("{b:.prec$} [{a:.prec$}, {c:.prec$}]"),
        None => "-".into(),
    };
    let mut s = String::from("# summary: median [q1, q3] over solved rows\n");
    for r in rows {
        let _ = writeln!(
            s,
            "# {} n={} solved={}/{} total_ms={} bwd_frac={} r_g={}",
            r.backend,
            r.n,
            r.solved,
            r.attempts,
            fmt(r.total_ms, 3),
            fmt(r.bwd_frac, 4),
            match r.r_g {
                Some((a, b, c)) => format!("{b:.3e} [{a:.3e}, {c:.3e}]"),
                None => "-".into(),
            }
        );
    }
    s
}

pub fn csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub(crate) fn cmd_bench(
    suite: Suite,
    sizes: &[usize],
    seeds: u64,
    dim: usize,
    common: &Common,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let config = BenchConfig {
        suite,
        sizes: sizes.to_vec(),
        seeds: (common.seed..common.seed + seeds).collect(),
        dim,
        backends: common.solvers(&["active_set", "admm"]),
        settings: common.settings(),
        options: common.options(),
    };
    let records = run_bench(&config);
    let summary = summarize(&records);
    let body = if common.json {
        serde_json::to_string_pretty(&serde_json::json!({ "records": records, "summary": summary }))
            .expect("records serialize")
            + "\n"
    } else {
        csv(&records)
    };
    emit(common, &body, out)?;
    if !common.json {
        if common.out.is_none() {
            writeln!(out)?;
        }
        out.write_all(summary_text(&summary).as_bytes())?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(seeds: u64) -> BenchConfig {
        BenchConfig {
            suite: Suite::Simplex,
            sizes: vec![20, 40],
            seeds: (0..seeds).collect(),
            dim: 2,
            backends: vec!["active_set".into(), "admm".into()],
            settings: SolveSettings::default(),
            options: DqpOptions::default(),
        }
    }

    #[test]
    fn one_row_per_attempt() {
        let records = run_bench(&config(5));
        assert_eq!(records.len(), 20);
        let summary = summarize(&records);
        assert_eq!(summary.len(), 4);
        assert!(summary.iter().all(|s| s.attempts == 5));
    }

    #[test]
    fn solved_rows_have_small_gap_and_consistent_times() {
        for r in run_bench(&config(3)) {
            assert_eq!(r.status, "solved", "{r:?}");
            assert!(r.r_g <= 1e-6, "{r:?}");
            assert!(r.fwd_ms >= 0.0 && r.bwd_ms >= 0.0);
            assert!((r.total_ms - r.fwd_ms - r.bwd_ms).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&r.bwd_frac));
        }
    }

    #[test]
    fn non_timing_columns_repeat() {
        let strip = |r: &BenchRecord| (r.id.clone(), r.status.clone(), r.r_p.to_bits(), r.r_d.to_bits(), r.r_g.to_bits(), r.active, r.mode.clone());
        let a: Vec<_> = run_bench(&config(2)).iter().map(strip).collect();
        let b: Vec<_> = run_bench(&config(2)).iter().map(strip).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_header_and_width() {
        let text = csv(&run_bench(&config(1)));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        for line in lines {
            assert_eq!(line.split(',').count(), 15);
        }
    }

    #[test]
    fn failures_recorded() {
        let mut c = config(1);
        c.backends = vec!["brute_force".into()];
        let records = run_bench(&c);
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(|r| r.status == "error"));
    }

    #[test]
    fn quartile_interpolation() {
        assert_eq!(quartiles(&[4.0, 1.0, 3.0, 2.0]), Some((1.75, 2.5, 3.25)));
        assert_eq!(quartiles(&[f64::NAN]), None);
    }
}
