//! Command-line driver: `run`, `grid` and `compare`.
//!
//! Exit codes: 0 success, 2 invalid input, 3 pipeline abort, 4 comparison
//! failure. The library entry points ([`execute_run`], [`execute_grid`],
//! [`compare_fpf`]) are what the binary calls.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::benchmarks::{grid_dmcs_oracle, grid_points, FpfGridOracle, GridPoint};
use crate::config::{OracleSettings, RunConfig};
use crate::fpf::{run_pipeline, ChainRecord, FpfApproximation, RegionChainResult};
use crate::optimize::{optimize, DesignProblem, OptimalDesign};
use crate::rng::StreamSplitter;
use crate::smooth::{extract_support_points, fit_surface, keeps_support, RegressionSurface};
use crate::stochastic::DesignSpace;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "fpf",
    version,
    about = "Failure probability functions by iterative density estimation"
)]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pipeline, smoothing and optimization; writes all artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: `output` from the config, else `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Direct Monte Carlo FPF on a regular grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        n_per_point: Option<u64>,
        /// Write the model's closed-form FPF instead of sampling.
        #[arg(long)]
        analytic: bool,
    },
    /// Scores a run directory against a grid table.
    Compare {
        run_dir: PathBuf,
        oracle: PathBuf,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        min_pf: Option<f64>,
        #[arg(long)]
        pass_fraction: Option<f64>,
    },
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Toml(_) => 2,
        Error::Comparison(_) => 4,
        _ => 3,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?.resolve();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub fpf: Arc<FpfApproximation>,
    pub optima: Vec<OptimumRow>,
}

fn optimum_row(
    problem: &DesignProblem,
    result: Result<OptimalDesign>,
) -> Result<(OptimumRow, Option<OptimalDesign>)> {
    match result {
        Ok(o) => Ok(((&o).into(), Some(o))),
        Err(Error::Infeasible { phi, constraint }) => {
            let objective = (problem.objective)(&phi)?;
            Ok((
                OptimumRow {
                    allowable: problem.allowable,
                    phi,
                    objective,
                    constraint,
                    active: false,
                    feasible: false,
                },
                None,
            ))
        }
        Err(e) => Err(e),
    }
}

/// Runs the pipeline, smoothing and optimization and writes every artifact
/// to `out`. A pipeline abort still writes the partial chain and a manifest
/// marked aborted before the error is returned.
pub fn execute_run(cfg: &RunConfig, out: &Path) -> Result<RunResult> {
    let cfg = cfg.clone().resolve();
    cfg.validate()?;
    let model = cfg.limit_state();
    let space = cfg.augmented_space()?;
    let streams = StreamSplitter::new(cfg.seed);
    let mut w = ArtifactWriter::new(out)?;
    w.write_bytes(CONFIG_FILE, cfg.to_toml_string()?.as_bytes())?;
    let manifest =
        |w: &ArtifactWriter, status, stages: Vec<_>, pilot, stop_reason, n_it, p_f| RunManifest {
            version: VERSION_TAG.to_string(),
            seed: cfg.seed,
            status,
            config: cfg.clone(),
            pilot,
            total_evaluations: stages
                .iter()
                .map(|s: &crate::fpf::StageCount| s.evaluations)
                .sum(),
            stages,
            model_evaluations: model.evaluations(),
            stop_reason,
            n_it,
            p_f,
            checksums: w.checksums().clone(),
        };

    let output = match run_pipeline(&model, &space, &cfg.pipeline, &streams) {
        Ok(o) => o,
        Err(abort) => {
            for level in &abort.levels {
                w.write_bytes(&samples_file(level.k), &samples_csv(&level.samples)?)?;
            }
            let p_f = abort.pilot.as_ref().map(|p| p.p_hat);
            let partial = ChainRecord {
                design: space.design.clone(),
                p_f: p_f.unwrap_or(0.0),
                levels: abort.levels.iter().map(|l| l.to_record()).collect(),
            };
            w.write_json(CHAIN_FILE, &partial)?;
            let m = manifest(
                &w,
                RunStatus::Aborted(abort.error.to_string()),
                abort.stages.clone(),
                abort.pilot.clone(),
                None,
                None,
                p_f,
            );
            w.write_json(MANIFEST_FILE, &m)?;
            return Err(abort.error);
        }
    };
    let chain = &output.chain;
    for level in &chain.levels {
        w.write_bytes(&samples_file(level.k), &samples_csv(&level.samples)?)?;
    }
    w.write_json(CHAIN_FILE, &chain.to_record())?;
    for (name, region) in chain.final_regions() {
        w.write_json(&region_file(&name), region)?;
    }

    let support = extract_support_points(chain);
    let keep: Vec<bool> = support
        .iter()
        .map(|p| keeps_support(p, chain.p_f, &chain.design, cfg.smoother.min_support_fpf))
        .collect();
    w.write_bytes(SUPPORT_FILE, &support_csv(&support, &keep)?)?;
    let selected: Vec<_> = support
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| p.clone())
        .collect();
    let surface = match fit_surface(&selected, &chain.design, &cfg.smoother) {
        Ok(s) => s,
        Err(e) => {
            let m = manifest(
                &w,
                RunStatus::Aborted(e.to_string()),
                output.stages.clone(),
                Some(output.pilot.clone()),
                Some(output.stop_reason),
                Some(chain.n_it()),
                Some(chain.p_f),
            );
            w.write_json(MANIFEST_FILE, &m)?;
            return Err(e);
        }
    };
    w.write_json(SURFACE_FILE, &surface)?;
    let mut fpf = FpfApproximation::new(output.chain.clone());
    fpf.surface = Some(surface);
    let fpf = Arc::new(fpf);

    let (grid_rows, grad_rows) = export_grids(&fpf, &cfg, cfg.export.grid_resolution)?;
    w.write_bytes(FPF_GRID_FILE, &fpf_grid_csv(&grid_rows)?)?;
    w.write_bytes(GRADIENT_GRID_FILE, &gradient_grid_csv(&grad_rows)?)?;

    let mut optima = Vec::new();
    let mut designs = Vec::new();
    for &allowable in &cfg.allowable {
        let problem = DesignProblem::with_fpf(cfg.objective(), fpf.clone(), allowable)?;
        let (row, design) = optimum_row(&problem, optimize(&problem, &cfg.optimizer, &streams))?;
        optima.push(row);
        designs.extend(design);
    }
    w.write_bytes(OPTIMA_FILE, &optima_csv(&optima)?)?;
    w.write_json(OPTIMA_TRACE_FILE, &designs)?;

    let m = manifest(
        &w,
        RunStatus::Complete,
        output.stages.clone(),
        Some(output.pilot.clone()),
        Some(output.stop_reason),
        Some(chain.n_it()),
        Some(chain.p_f),
    );
    m.check_totals()?;
    w.write_json(MANIFEST_FILE, &m)?;
    Ok(RunResult {
        manifest: m,
        fpf,
        optima,
    })
}

type GradientRow = (Vec<f64>, f64, Vec<f64>);

fn export_grids(
    fpf: &FpfApproximation,
    cfg: &RunConfig,
    resolution: usize,
) -> Result<(Vec<FpfGridRow>, Vec<GradientRow>)> {
    let model = cfg.limit_state();
    let design = fpf.design();
    let surface = fpf.surface.as_ref();
    let mut rows = Vec::new();
    let mut grads = Vec::new();
    for phi in grid_points(design, resolution) {
        let smoothed = surface.map(|s| s.fpf(&phi, fpf.p_f, design)).transpose()?;
        rows.push(FpfGridRow {
            piecewise: fpf.piecewise(&phi)?,
            smoothed,
            analytic: model.limit_state().analytic_fpf(&phi),
            phi: phi.clone(),
        });
        if let Some(s) = surface {
            grads.push((
                phi.clone(),
                smoothed.unwrap_or_default(),
                s.fpf_gradient(&phi, fpf.p_f, design)?.value,
            ));
        }
    }
    Ok((rows, grads))
}

/// Reloads the FPF of a finished run directory.
pub fn load_run_fpf(dir: &Path) -> Result<FpfApproximation> {
    let record: ChainRecord = read_json(&dir.join(CHAIN_FILE))?;
    let mut fpf = FpfApproximation::new(RegionChainResult::from_record(&record)?);
    let surface_path = dir.join(SURFACE_FILE);
    if surface_path.exists() {
        fpf.surface = Some(read_json::<RegressionSurface>(&surface_path)?);
    }
    Ok(fpf)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleManifest {
    pub version: String,
    pub seed: u64,
    pub analytic: bool,
    pub resolution: usize,
    pub n_per_point: u64,
    pub total_evaluations: u64,
    pub checksum: String,
}

/// Writes the grid oracle table (and a small manifest) to `out`.
pub fn execute_grid(
    cfg: &RunConfig,
    out: &Path,
    resolution: usize,
    n_per_point: u64,
    analytic: bool,
) -> Result<FpfGridOracle> {
    let model = cfg.limit_state();
    let space = cfg.augmented_space()?;
    let oracle = if analytic {
        let points = grid_points(&space.design, resolution)
            .into_iter()
            .map(|phi| {
                let pf_hat = model
                    .limit_state()
                    .analytic_fpf(&phi)
                    .ok_or_else(|| Error::Argument("this model has no closed-form FPF".into()))?;
                Ok(GridPoint {
                    phi,
                    pf_hat,
                    n: 0,
                    failures: 0,
                    cov: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if resolution < 2 {
            return Err(Error::Argument(format!(
                "grid resolution must be >= 2, got {resolution}"
            )));
        }
        FpfGridOracle { resolution, points }
    } else {
        grid_dmcs_oracle(
            &model,
            &space,
            resolution,
            n_per_point,
            &StreamSplitter::new(cfg.seed),
        )?
    };
    let mut w = ArtifactWriter::new(out)?;
    let bytes = grid_csv(&oracle)?;
    w.write_bytes(ORACLE_FILE, &bytes)?;
    let m = OracleManifest {
        version: VERSION_TAG.to_string(),
        seed: cfg.seed,
        analytic,
        resolution,
        n_per_point: if analytic { 0 } else { n_per_point },
        total_evaluations: model.evaluations(),
        checksum: sha256_hex(&bytes),
    };
    w.write_json("oracle_manifest.json", &m)?;
    Ok(oracle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub phi: Vec<f64>,
    pub oracle: f64,
    pub run: f64,
    pub log10_ratio: f64,
    pub scored: bool,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub settings: OracleSettings,
    pub scored: usize,
    pub within: usize,
    /// Median, 90th percentile and maximum of `|log10 ratio|` over scored points.
    pub quantiles: [f64; 3],
}

impl Comparison {
    pub fn fraction(&self) -> f64 {
        if self.scored == 0 {
            0.0
        } else {
            self.within as f64 / self.scored as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.scored > 0 && self.fraction() >= self.settings.pass_fraction
    }

    pub fn summary(&self) -> String {
        let [q50, q90, qmax] = self.quantiles;
        format!(
            "{} of {} scored points (oracle >= {:e}) within {} decades: {:.1}% (need {:.1}%); |log10 ratio| median {:.3}, p90 {:.3}, max {:.3}: {}",
            self.within,
            self.scored,
            self.settings.min_pf,
            self.settings.tolerance,
            100.0 * self.fraction(),
            100.0 * self.settings.pass_fraction,
            q50,
            q90,
            qmax,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let nd = self.rows.first().map_or(0, |r| r.phi.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = (1..=nd)
            .map(|i| format!("phi_{i}"))
            .chain(["oracle", "run", "log10_ratio", "scored", "within"].map(String::from))
            .collect();
        w.write_record(&header)?;
        for r in &self.rows {
            let rec: Vec<String> = r
                .phi
                .iter()
                .chain([&r.oracle, &r.run, &r.log10_ratio])
                .map(|&x| fmt_f64(x))
                .chain([r.scored.to_string(), r.within.to_string()])
                .collect();
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

fn oracle_bounds(oracle: &FpfGridOracle) -> Vec<[f64; 2]> {
    let nd = oracle.points.first().map_or(0, |p| p.phi.len());
    (0..nd)
        .map(|d| {
            oracle
                .points
                .iter()
                .fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], p| {
                    [lo.min(p.phi[d]), hi.max(p.phi[d])]
                })
        })
        .collect()
}

/// Scores `fpf` against a grid table. The grid must span the design box.
pub fn compare_fpf(
    fpf: &dyn Fn(&[f64]) -> Result<f64>,
    design: &DesignSpace,
    oracle: &FpfGridOracle,
    settings: &OracleSettings,
) -> Result<Comparison> {
    let bounds = oracle_bounds(oracle);
    if bounds.len() != design.dim() {
        return Err(Error::Comparison(format!(
            "oracle has {} design coordinates, run has {}",
            bounds.len(),
            design.dim()
        )));
    }
    for (d, (o, r)) in bounds.iter().zip(design.bounds()).enumerate() {
        let tol = 1e-9 * (r[1] - r[0]);
        if (o[0] - r[0]).abs() > tol || (o[1] - r[1]).abs() > tol {
            return Err(Error::Comparison(format!(
                "design bounds differ on axis {}: run [{}, {}], oracle [{}, {}]",
                d + 1,
                r[0],
                r[1],
                o[0],
                o[1]
            )));
        }
    }
    let rows = oracle
        .points
        .iter()
        .map(|p| {
            let run = fpf(&p.phi)?;
            let log10_ratio = if run == p.pf_hat {
                0.0
            } else {
                (run / p.pf_hat).log10()
            };
            let scored = p.pf_hat >= settings.min_pf;
            let within = log10_ratio.abs() <= settings.tolerance;
            Ok(ComparisonRow {
                phi: p.phi.clone(),
                oracle: p.pf_hat,
                run,
                log10_ratio,
                scored,
                within,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut errs: Vec<f64> = rows
        .iter()
        .filter(|r| r.scored)
        .map(|r| r.log10_ratio.abs())
        .collect();
    errs.sort_by(f64::total_cmp);
    let q = |f: f64| {
        if errs.is_empty() {
            f64::NAN
        } else {
            errs[((errs.len() - 1) as f64 * f).round() as usize]
        }
    };
    Ok(Comparison {
        scored: errs.len(),
        within: rows.iter().filter(|r| r.scored && r.within).count(),
        quantiles: [q(0.5), q(0.9), q(1.0)],
        rows,
        settings: *settings,
    })
}

/// Compares a run directory against a grid table and writes the report next to the run.
pub fn execute_compare(
    run_dir: &Path,
    oracle_path: &Path,
    overrides: [Option<f64>; 3],
) -> Result<Comparison> {
    let manifest: RunManifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    if manifest.status != RunStatus::Complete {
        return Err(Error::Argument(format!(
            "{} holds an aborted run",
            run_dir.display()
        )));
    }
    let mut settings = manifest.config.oracle;
    let [tolerance, min_pf, pass_fraction] = overrides;
    settings.tolerance = tolerance.unwrap_or(settings.tolerance);
    settings.min_pf = min_pf.unwrap_or(settings.min_pf);
    settings.pass_fraction = pass_fraction.unwrap_or(settings.pass_fraction);
    let fpf = load_run_fpf(run_dir)?;
    let oracle = read_grid_csv(oracle_path)?;
    let cmp = compare_fpf(&|phi| fpf.value(phi), fpf.design(), &oracle, &settings)?;
    std::fs::write(run_dir.join(COMPARISON_FILE), cmp.to_csv()?)?;
    std::fs::write(
        run_dir.join("comparison.txt"),
        format!("{}\n", cmp.summary()),
    )?;
    Ok(cmp)
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Argument(format!("cannot set {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(&cfg, out);
            let r = execute_run(&cfg, &dir)?;
            let m = &r.manifest;
            println!(
                "P(F) = {:.4e}, {} iterations ({}), {} evaluations; artifacts in {}",
                m.p_f.unwrap_or(f64::NAN),
                m.n_it.unwrap_or(0),
                m.stop_reason.map(|s| s.to_string()).unwrap_or_default(),
                m.total_evaluations,
                dir.display()
            );
            for o in &r.optima {
                let tag = if o.feasible { "" } else { " (infeasible)" };
                println!(
                    "[P_F] = {:e}: phi* = {:?}, objective {:.4}, P_F(phi*) = {:.3e}{tag}",
                    o.allowable, o.phi, o.objective, o.constraint
                );
            }
            Ok(())
        }
        Command::Grid {
            config,
            out,
            seed,
            resolution,
            n_per_point,
            analytic,
        } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(&cfg, out);
            let res = resolution.unwrap_or(cfg.oracle.resolution);
            let n = n_per_point.unwrap_or(cfg.oracle.n_per_point);
            let oracle = execute_grid(&cfg, &dir, res, n, analytic)?;
            println!(
                "{} gridpoints, {} evaluations; table in {}",
                oracle.points.len(),
                oracle.total_evaluations(),
                dir.join(ORACLE_FILE).display()
            );
            Ok(())
        }
        Command::Compare {
            run_dir,
            oracle,
            tolerance,
            min_pf,
            pass_fraction,
        } => {
            let cmp = execute_compare(&run_dir, &oracle, [tolerance, min_pf, pass_fraction])?;
            println!("{}", cmp.summary());
            if cmp.passed() {
                Ok(())
            } else {
                Err(Error::Comparison(cmp.summary()))
            }
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::toy_analytic_fpf;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Comparison("x".into())), 4);
        assert_eq!(exit_code(&Error::NoSeedInRegion), 3);
        assert_eq!(exit_code(&Error::DegenerateThreshold("x".into())), 3);
    }

    fn toy_grid(resolution: usize, f: impl Fn(f64) -> f64) -> FpfGridOracle {
        let points = grid_points(&crate::benchmarks::toy_design_space(), resolution)
            .into_iter()
            .map(|phi| GridPoint {
                pf_hat: f(phi[0]),
                phi,
                n: 0,
                failures: 0,
                cov: 0.0,
            })
            .collect();
        FpfGridOracle { resolution, points }
    }

    #[test]
    fn identical_inputs_give_zero_ratios() {
        let oracle = toy_grid(21, toy_analytic_fpf);
        let design = crate::benchmarks::toy_design_space();
        let cmp = compare_fpf(
            &|phi| Ok(toy_analytic_fpf(phi[0])),
            &design,
            &oracle,
            &OracleSettings::default(),
        )
        .unwrap();
        assert!(cmp.rows.iter().all(|r| r.log10_ratio == 0.0));
        assert_eq!(cmp.scored, 19);
        assert!(cmp.passed());
    }

    #[test]
    fn scoring_counts_and_threshold() {
        let oracle = toy_grid(21, toy_analytic_fpf);
        let design = crate::benchmarks::toy_design_space();
        // a factor of 3 (0.477 decades) on the upper half of the box
        let cmp = compare_fpf(
            &|phi| Ok(toy_analytic_fpf(phi[0]) * if phi[0] > 2.0 { 3.0 } else { 1.0 }),
            &design,
            &oracle,
            &OracleSettings::default(),
        )
        .unwrap();
        assert_eq!(cmp.within, 11);
        assert!(!cmp.passed());
        assert!((cmp.quantiles[2] - 3f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn grid_mismatch_names_the_bounds() {
        let oracle = toy_grid(5, toy_analytic_fpf);
        let design = DesignSpace::new(vec![[0.0, 5.0]]).unwrap();
        match compare_fpf(&|_| Ok(0.1), &design, &oracle, &OracleSettings::default()) {
            Err(Error::Comparison(m)) => assert!(
                m.contains("axis 1") && m.contains("[0, 5]") && m.contains("[0, 4]"),
                "{m}"
            ),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["fpf", "frobnicate"]), ExitCode::from(2));
        assert_eq!(main_with_args(["fpf", "run"]), ExitCode::from(2));
        assert_eq!(
            main_with_args(["fpf", "run", "--config", "/nonexistent/x.toml"]),
            ExitCode::from(2)
        );
    }
}
