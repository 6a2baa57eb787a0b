//! One pipeline per mode; every artifact is written under the output
//! directory and nothing in a CSV depends on time or thread count.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use etalab_core::assembly::{assemble, ProblemSpec};
use etalab_core::eigen::{solve_lowest_with, SolverOptions, SpectralSolution};
use etalab_core::fieldexpr::Point;
use etalab_core::hadamard::{q_boundary_with, q_metric, FluxMethod, HadamardMatrix};
use etalab_core::verify::{
    adversarial_split, check_lemma1, check_lemma2, fd_eigen_derivative_boundary_with,
    fd_eigen_derivative_metric_with, fmt17, random_metric_direction, random_smooth_field,
    split_csv, split_fraction, splitting_experiment, FdReport, SplitMode,
};
use etalab_core::fieldexpr::{TensorField, VectorField};

use crate::config::{
    parse_config, ClusterSelector, ConfigError, Experiment, FluxChoice, LemmaConfig, Mode,
    PerturbationChoice,
};
use crate::svg::{line_plot, Series};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{context}: {msg}")]
    Pipeline { context: String, msg: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn fail(context: impl Into<String>) -> impl FnOnce(String) -> RunError {
    let context = context.into();
    move |msg| RunError::Pipeline { context, msg }
}

trait Ctx<T> {
    fn ctx(self, context: &str) -> Result<T, RunError>;
}

impl<T, E: std::fmt::Display> Ctx<T> for Result<T, E> {
    fn ctx(self, context: &str) -> Result<T, RunError> {
        self.map_err(|e| fail(context)(e.to_string()))
    }
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub summary: Vec<String>,
}

struct Writer<'a> {
    dir: &'a Path,
    outcome: Outcome,
}

impl Writer<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Result<(), RunError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|source| RunError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.outcome.artifacts.push(path);
        Ok(())
    }

    fn note(&mut self, line: String) {
        self.outcome.summary.push(line);
    }
}

pub const BUILD_HASH: &str = match option_env!("ETALAB_BUILD_HASH") {
    Some(h) => h,
    None => "unknown",
};

pub fn version_line() -> String {
    format!("etalab {}", env!("CARGO_PKG_VERSION"))
}

/// Version, build hash, and every default that can reach a report.
pub fn provenance() -> String {
    let o = SolverOptions::default();
    let mut s = String::new();
    let _ = writeln!(s, "{}", version_line());
    let _ = writeln!(s, "build: {BUILD_HASH}");
    let _ = writeln!(s, "default cluster rel_gap: {:e}", crate::config::DEFAULT_REL_GAP);
    let _ = writeln!(s, "solver target residual: {:e}", o.tol);
    let _ = writeln!(s, "solver accepted residual: {:e}", o.accept);
    let _ = writeln!(s, "solver max iterations: {}", o.max_iter);
    let _ = writeln!(s, "dense solver limit: {}", o.dense_limit);
    let _ = writeln!(s, "solver start seed: {}", o.seed);
    let steps: Vec<String> = crate::config::DEFAULT_FD_STEPS.iter().map(|t| format!("{t:e}")).collect();
    let _ = writeln!(s, "default fd steps: {}", steps.join(" "));
    let _ = writeln!(s, "default split threshold: {:e}", crate::config::DEFAULT_SPLIT_THRESHOLD);
    let _ = writeln!(s, "default seed: {}", crate::config::DEFAULT_SEED);
    let l = LemmaConfig::default();
    let _ = writeln!(s, "default lemma tuples/points: {}/{}", l.tuples, l.points);
    s
}

pub fn run_file(mode: Mode, config: &Path, out: &Path) -> Result<Outcome, RunError> {
    let text = fs::read_to_string(config).map_err(|source| ConfigError::Io {
        path: config.display().to_string(),
        source,
    })?;
    let exp = parse_config(&text, mode)?;
    run(&exp, out)
}

pub fn run(exp: &Experiment, out: &Path) -> Result<Outcome, RunError> {
    fs::create_dir_all(out).map_err(|source| RunError::Io {
        path: out.display().to_string(),
        source,
    })?;
    let mut w = Writer {
        dir: out,
        outcome: Outcome::default(),
    };
    let fingerprint = match exp.mode {
        Mode::Solve => solve(exp, &mut w)?,
        Mode::HadamardMetric => hadamard(exp, &mut w, false)?,
        Mode::HadamardBoundary => hadamard(exp, &mut w, true)?,
        Mode::Sweep => sweep(exp, &mut w)?,
        Mode::SplitDemo => split_demo(exp, &mut w)?,
        Mode::Verify => {
            verify(exp, &mut w)?;
            None
        }
    };
    let mut prov = provenance();
    let _ = writeln!(prov, "mode: {}", exp.mode);
    let _ = writeln!(prov, "config sha256: {}", exp.digest);
    if let Some(f) = fingerprint {
        let _ = writeln!(prov, "problem fingerprint: {f}");
    }
    w.write("provenance.txt", &prov)?;
    Ok(w.outcome)
}

fn options(exp: &Experiment) -> SolverOptions {
    SolverOptions {
        rel_gap: exp.rel_gap(),
        ..SolverOptions::default()
    }
}

fn problem(exp: &Experiment) -> Result<ProblemSpec, RunError> {
    exp.problem().map_err(fail("building problem"))
}

fn solve_k(ps: &ProblemSpec, k: usize, opts: &SolverOptions) -> Result<SpectralSolution, RunError> {
    let ap = assemble(ps).ctx("assembly")?;
    solve_lowest_with(&ap, k, opts).ctx("eigensolver")
}

/// Solves enough eigenpairs that the selected cluster is complete.
fn solve_cluster(
    exp: &Experiment,
    ps: &ProblemSpec,
) -> Result<(SpectralSolution, Range<usize>), RunError> {
    let opts = options(exp);
    let ap = assemble(ps).ctx("assembly")?;
    let n = ap.k.n();
    let selector = exp.raw.cluster.clone().expect("validated");
    let wanted = match selector {
        ClusterSelector::Index(i) => i,
        ClusterSelector::Range { last, .. } => last,
    };
    if wanted > n {
        return Err(fail("cluster")(format!(
            "eigenvalue {wanted} requested but the problem has {n} unknowns"
        )));
    }
    let mut k = exp.raw.k.unwrap_or(0).max(wanted + 2).min(n);
    loop {
        let sol = solve_lowest_with(&ap, k, &opts).ctx("eigensolver")?;
        let cluster = match selector {
            ClusterSelector::Index(i) => sol.cluster_of(i - 1),
            ClusterSelector::Range { first, last } => first - 1..last,
        };
        if cluster.end < k || k == n || matches!(selector, ClusterSelector::Range { .. }) {
            return Ok((sol, cluster));
        }
        k = (k + 4).min(n);
    }
}

fn solve(exp: &Experiment, w: &mut Writer) -> Result<Option<String>, RunError> {
    let ps = problem(exp)?;
    let sol = solve_k(&ps, exp.raw.k.expect("validated"), &options(exp))?;
    w.write("spectrum.csv", &spectrum_csv(&sol))?;
    w.note(format!(
        "lambda_1 = {} ({} clusters among {} eigenvalues)",
        fmt17(sol.eigenvalues[0]),
        sol.clusters.len(),
        sol.len()
    ));
    Ok(Some(sol.fingerprint.clone()))
}

pub fn spectrum_csv(sol: &SpectralSolution) -> String {
    let mut s = String::from("index,eigenvalue,cluster\n");
    for (c, range) in sol.clusters.iter().enumerate() {
        for i in range.clone() {
            let _ = writeln!(s, "{},{},{}", i + 1, fmt17(sol.eigenvalues[i]), c + 1);
        }
    }
    s
}

fn hadamard(exp: &Experiment, w: &mut Writer, boundary: bool) -> Result<Option<String>, RunError> {
    let ps = problem(exp)?;
    let (sol, cluster) = solve_cluster(exp, &ps)?;
    let opts = options(exp);
    let steps = exp.fd_steps();
    let (q, fd) = if boundary {
        let v = exp.velocity().expect("validated");
        let method = match exp.raw.flux.unwrap_or_default() {
            FluxChoice::Variational => FluxMethod::Variational,
            FluxChoice::Raw => FluxMethod::RawGradient,
        };
        let q = q_boundary_with(&sol, cluster.clone(), &ps, &v, method).ctx("boundary variation")?;
        let fd = steps
            .iter()
            .map(|&t| {
                fd_eigen_derivative_boundary_with(&ps, cluster.clone(), &v, t, &opts)
                    .ctx(&format!("finite differences at t = {t:e}"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        (q, fd)
    } else {
        let q = q_metric(&sol, cluster.clone(), &ps).ctx("metric variation")?;
        let fd = steps
            .iter()
            .map(|&t| {
                fd_eigen_derivative_metric_with(&ps, cluster.clone(), t, &opts)
                    .ctx(&format!("finite differences at t = {t:e}"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        (q, fd)
    };
    w.write("qmatrix.csv", &qmatrix_csv(&q))?;
    w.write("branches.csv", &branches_csv(&q, &sol))?;
    let report = FdReport::new(cluster.clone(), steps, fd, q.branch_slopes.clone());
    w.write("fd_report.csv", &report.to_csv())?;
    w.note(format!(
        "cluster {}..{} (m = {}), slopes {:?}",
        cluster.start + 1,
        cluster.end,
        cluster.len(),
        q.branch_slopes
    ));
    Ok(Some(sol.fingerprint.clone()))
}

pub fn qmatrix_csv(q: &HadamardMatrix) -> String {
    let mut s = String::from("i,j,q\n");
    for a in 0..q.size() {
        for b in 0..q.size() {
            let _ = writeln!(
                s,
                "{},{},{}",
                q.cluster.start + a + 1,
                q.cluster.start + b + 1,
                fmt17(q.q[(a, b)])
            );
        }
    }
    s
}

pub fn branches_csv(q: &HadamardMatrix, sol: &SpectralSolution) -> String {
    let mut s = String::from("branch,lambda_mean,slope\n");
    let mean = sol.cluster_mean(&q.cluster);
    for (b, slope) in q.branch_slopes.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", b + 1, fmt17(mean), fmt17(*slope));
    }
    s
}

fn sweep(exp: &Experiment, w: &mut Writer) -> Result<Option<String>, RunError> {
    let ps = problem(exp)?;
    let cfg = exp.raw.sweep.clone().expect("validated");
    let k = exp.raw.k.expect("validated");
    let opts = options(exp);
    let ts: Vec<f64> = (0..cfg.steps)
        .map(|i| cfg.t_min + (cfg.t_max - cfg.t_min) * i as f64 / (cfg.steps - 1) as f64)
        .collect();
    let rows = ts
        .par_iter()
        .map(|&t| solve_k(&ps.at(t), k, &opts).map(|s| s.eigenvalues))
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = String::from("t");
    for i in 0..k {
        let _ = write!(csv, ",lambda_{}", i + 1);
    }
    csv.push('\n');
    for (t, row) in ts.iter().zip(&rows) {
        csv.push_str(&fmt17(*t));
        for v in row {
            let _ = write!(csv, ",{}", fmt17(*v));
        }
        csv.push('\n');
    }
    w.write("lambda_of_t.csv", &csv)?;
    let series: Vec<Series> = (0..k)
        .map(|i| Series {
            name: format!("lambda_{}", i + 1),
            values: rows.iter().map(|r| r[i]).collect(),
        })
        .collect();
    w.write(
        "lambda_of_t.svg",
        &line_plot("Eigenvalue branches along the family", "t", "lambda", &ts, &series),
    )?;
    w.note(format!("{} parameter values, {} branches", ts.len(), k));
    Ok(Some(ps.fingerprint()))
}

fn split_demo(exp: &Experiment, w: &mut Writer) -> Result<Option<String>, RunError> {
    let ps = problem(exp)?;
    let (sol, cluster) = solve_cluster(exp, &ps)?;
    let domain = exp.domain_kind().expect("validated");
    let seeds = exp.seeds();
    let threshold = exp.threshold();
    let choice = exp.raw.perturbation.unwrap_or_default();
    let mut reports = Vec::new();
    let mut modes = Vec::new();
    if matches!(choice, PerturbationChoice::Metric | PerturbationChoice::Both) {
        modes.push(SplitMode::Metric);
    }
    if matches!(choice, PerturbationChoice::Boundary | PerturbationChoice::Both) {
        modes.push(SplitMode::Boundary);
    }
    for mode in modes {
        let r = splitting_experiment(mode, &ps, &sol, cluster.clone(), &domain, &seeds, threshold)
            .ctx("splitting experiment")?;
        w.note(format!(
            "{:?}: {:.0}% of {} seeds split",
            mode,
            100.0 * split_fraction(&r),
            r.len()
        ));
        reports.extend(r);
    }
    let adv = adversarial_split(&ps, &sol, cluster.clone(), &domain, threshold)
        .ctx("symmetric control")?;
    w.note(format!(
        "symmetric control: {}",
        if adv.split { "split" } else { "not split" }
    ));
    reports.push(adv);
    w.write("split_report.csv", &split_csv(&reports))?;
    Ok(Some(sol.fingerprint.clone()))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

fn verify(exp: &Experiment, w: &mut Writer) -> Result<(), RunError> {
    let cfg = exp.raw.lemma.clone().unwrap_or_default();
    let base = exp.seed();
    let rows = (0..cfg.tuples)
        .into_par_iter()
        .map(|i| {
            let seed = base.wrapping_add(i as u64);
            lemma_residuals(seed, &cfg).map(|(r1, r2)| (seed, r1, r2))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = String::from(
        "lemma,tuple,seed,t,residual,observed_order\n",
    );
    let (mut worst1, mut min_order) = (0.0_f64, f64::INFINITY);
    for (i, (seed, r1, r2)) in rows.iter().enumerate() {
        worst1 = worst1.max(*r1);
        let _ = writeln!(csv, "1,{},{},,{},", i + 1, seed, fmt17(*r1));
        for (j, (&t, &r)) in cfg.t.iter().zip(r2).enumerate() {
            let order = if j == 0 {
                String::new()
            } else {
                let o = (r2[j - 1] / r).ln() / (cfg.t[j - 1] / t).ln();
                min_order = min_order.min(o);
                fmt17(o)
            };
            let _ = writeln!(csv, "2,{},{},{},{},{}", i + 1, seed, fmt17(t), fmt17(r), order);
        }
    }
    w.write("lemma_residuals.csv", &csv)?;
    w.note(format!(
        "lemma 1 max residual {worst1:.3e}; lemma 2 min observed order {min_order:.3}"
    ));
    Ok(())
}

/// Residuals for one random tuple: lemma 1 over `cfg.points` points, then
/// lemma 2 at each step of `cfg.t`. The tuple depends on `seed` only.
pub fn lemma_residuals(seed: u64, cfg: &LemmaConfig) -> Result<(f64, Vec<f64>), RunError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = random_points(&mut rng, cfg.points);
    let upper = vec![
        vec![random_smooth_field(&mut rng, 2), random_smooth_field(&mut rng, 2)],
        vec![random_smooth_field(&mut rng, 2)],
    ];
    let t = TensorField::symmetric_from_upper(upper).expect("2x2");
    let z = VectorField::new(vec![random_smooth_field(&mut rng, 2), random_smooth_field(&mut rng, 2)])
        .expect("2 components");
    let phi = random_smooth_field(&mut rng, 2);
    let eta = random_smooth_field(&mut rng, 2);
    let r1 = check_lemma1(&t, &z, &phi, &eta, &points).ctx("lemma 1")?;
    let h = random_metric_direction(rng.random(), 2);
    let f = random_smooth_field(&mut rng, 2);
    let r2 = cfg
        .t
        .iter()
        .map(|&s| check_lemma2(&h, &eta, &f, &points, s).ctx("lemma 2"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((r1, r2))
}
