//! Run artifacts: CSV tables, JSON records and the run manifest.
//!
//! Floats are written in Rust's shortest round-trip form, so every artifact
//! reloads to the identical in-memory value. Files are written through an
//! [`ArtifactWriter`], which records a SHA-256 per file for the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmarks::{FpfGridOracle, GridPoint};
use crate::config::RunConfig;
use crate::fpf::{PilotSummary, StageCount, StopReason};
use crate::optimize::OptimalDesign;
use crate::smooth::SupportPoint;
use crate::stochastic::AugmentedSample;
use crate::{Error, Result};

pub const VERSION_TAG: &str = concat!("fpf ", env!("CARGO_PKG_VERSION"));

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const CHAIN_FILE: &str = "chain.json";
pub const SURFACE_FILE: &str = "surface.json";
pub const SUPPORT_FILE: &str = "support.csv";
pub const FPF_GRID_FILE: &str = "fpf_grid.csv";
pub const GRADIENT_GRID_FILE: &str = "gradient_grid.csv";
pub const OPTIMA_FILE: &str = "optima.csv";
pub const OPTIMA_TRACE_FILE: &str = "optima.json";
pub const ORACLE_FILE: &str = "oracle_grid.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

pub fn samples_file(k: usize) -> String {
    format!("samples/level_{k}.csv")
}

pub fn region_file(name: &str) -> String {
    format!("regions/{name}.json")
}

/// Shortest round-trip text for a float, in exponent form outside `[1e-4, 1e15)`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Argument(format!("{what}: cannot parse {field:?} as a number")))
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

fn count_prefixed(header: &csv::StringRecord, prefix: &str) -> usize {
    header
        .iter()
        .filter(|h| {
            h.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('_'))
                .is_some_and(|r| r.parse::<usize>().is_ok())
        })
        .count()
}

fn column(header: &csv::StringRecord, name: &str, file: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Argument(format!("{}: missing column {name:?}", file.display())))
}

fn csv_bytes(header: Vec<String>, rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn read_csv(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files under one directory and remembers their checksums.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    checksums: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            checksums: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checksums(&self) -> &BTreeMap<String, String> {
        &self.checksums
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.checksums.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn samples_csv(samples: &[AugmentedSample]) -> Result<Vec<u8>> {
    let (nd, nr) = samples
        .first()
        .map_or((0, 0), |s| (s.phi.len(), s.theta.len()));
    let header = indexed("phi", nd)
        .chain(indexed("theta", nr))
        .chain(indexed("u", nr))
        .chain(["performance", "margin", "failed"].map(String::from))
        .collect();
    let rows = samples.iter().map(|s| {
        s.phi
            .iter()
            .chain(&s.theta)
            .chain(&s.standard)
            .chain([&s.performance, &s.margin])
            .map(|&x| fmt_f64(x))
            .chain([s.failed.to_string()])
            .collect()
    });
    csv_bytes(header, rows)
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<AugmentedSample>> {
    let (header, rows) = read_csv(path)?;
    let (nd, nr) = (
        count_prefixed(&header, "phi"),
        count_prefixed(&header, "theta"),
    );
    let what = path.display().to_string();
    rows.iter()
        .map(|r| {
            let f = |i: usize| parse_f64(&r[i], &what);
            Ok(AugmentedSample {
                phi: (0..nd).map(f).collect::<Result<_>>()?,
                theta: (nd..nd + nr).map(f).collect::<Result<_>>()?,
                standard: (nd + nr..nd + 2 * nr).map(f).collect::<Result<_>>()?,
                performance: f(nd + 2 * nr)?,
                margin: f(nd + 2 * nr + 1)?,
                failed: r[nd + 2 * nr + 2].parse().map_err(|_| {
                    Error::Argument(format!("{what}: bad flag {:?}", &r[nd + 2 * nr + 2]))
                })?,
            })
        })
        .collect()
}

/// Support table; `selected` marks points that entered the fit.
pub fn support_csv(points: &[SupportPoint], selected: &[bool]) -> Result<Vec<u8>> {
    let nd = points.first().map_or(0, |p| p.location.len());
    let header = indexed("phi", nd)
        .chain(["value", "level", "log_variance", "selected"].map(String::from))
        .collect();
    let rows = points.iter().zip(selected).map(|(p, sel)| {
        p.location
            .iter()
            .map(|&x| fmt_f64(x))
            .chain([
                fmt_f64(p.value),
                p.level.to_string(),
                fmt_f64(p.log_variance),
                sel.to_string(),
            ])
            .collect()
    });
    csv_bytes(header, rows)
}

pub fn read_support_csv(path: &Path) -> Result<Vec<(SupportPoint, bool)>> {
    let (header, rows) = read_csv(path)?;
    let nd = count_prefixed(&header, "phi");
    let what = path.display().to_string();
    rows.iter()
        .map(|r| {
            let f = |i: usize| parse_f64(&r[i], &what);
            let level = r[nd + 1]
                .parse()
                .map_err(|_| Error::Argument(format!("{what}: bad level {:?}", &r[nd + 1])))?;
            let sel = r[nd + 3]
                .parse()
                .map_err(|_| Error::Argument(format!("{what}: bad flag {:?}", &r[nd + 3])))?;
            let point = SupportPoint {
                location: (0..nd).map(f).collect::<Result<_>>()?,
                value: f(nd)?,
                level,
                log_variance: f(nd + 2)?,
            };
            Ok((point, sel))
        })
        .collect()
}

/// Oracle table with columns `phi_1..phi_n, pf_hat, n, cov`.
pub fn grid_csv(oracle: &FpfGridOracle) -> Result<Vec<u8>> {
    let nd = oracle.points.first().map_or(0, |p| p.phi.len());
    let header = indexed("phi", nd)
        .chain(["pf_hat", "n", "cov"].map(String::from))
        .collect();
    let rows = oracle.points.iter().map(|p| {
        p.phi
            .iter()
            .map(|&x| fmt_f64(x))
            .chain([fmt_f64(p.pf_hat), p.n.to_string(), fmt_f64(p.cov)])
            .collect()
    });
    csv_bytes(header, rows)
}

pub fn read_grid_csv(path: &Path) -> Result<FpfGridOracle> {
    let (header, rows) = read_csv(path)?;
    let nd = count_prefixed(&header, "phi");
    if nd == 0 {
        return Err(Error::Argument(format!(
            "{}: no phi_ columns",
            path.display()
        )));
    }
    let (ip, inn, ic) = (
        column(&header, "pf_hat", path)?,
        column(&header, "n", path)?,
        column(&header, "cov", path)?,
    );
    let what = path.display().to_string();
    let points = rows
        .iter()
        .map(|r| {
            let n: u64 = r[inn]
                .parse()
                .map_err(|_| Error::Argument(format!("{what}: bad count {:?}", &r[inn])))?;
            let pf_hat = parse_f64(&r[ip], &what)?;
            Ok(GridPoint {
                phi: (0..nd)
                    .map(|i| parse_f64(&r[i], &what))
                    .collect::<Result<_>>()?,
                pf_hat,
                n,
                failures: (pf_hat * n as f64).round() as u64,
                cov: parse_f64(&r[ic], &what)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let resolution = (points.len() as f64).powf(1.0 / nd as f64).round() as usize;
    if resolution.pow(nd as u32) != points.len() {
        return Err(Error::Argument(format!(
            "{what}: {} rows do not form a {nd}-d grid",
            points.len()
        )));
    }
    Ok(FpfGridOracle { resolution, points })
}

/// One row of the exported FPF grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FpfGridRow {
    pub phi: Vec<f64>,
    pub piecewise: f64,
    pub smoothed: Option<f64>,
    pub analytic: Option<f64>,
}

pub fn fpf_grid_csv(rows: &[FpfGridRow]) -> Result<Vec<u8>> {
    let nd = rows.first().map_or(0, |r| r.phi.len());
    let header = indexed("phi", nd)
        .chain(["fpf_piecewise", "fpf_smoothed", "fpf_analytic"].map(String::from))
        .collect();
    let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
    let out = rows.iter().map(|r| {
        r.phi
            .iter()
            .map(|&x| fmt_f64(x))
            .chain([fmt_f64(r.piecewise), opt(r.smoothed), opt(r.analytic)])
            .collect()
    });
    csv_bytes(header, out)
}

pub fn read_fpf_grid_csv(path: &Path) -> Result<Vec<FpfGridRow>> {
    let (header, rows) = read_csv(path)?;
    let nd = count_prefixed(&header, "phi");
    let what = path.display().to_string();
    let opt = |s: &str| {
        if s.is_empty() {
            Ok(None)
        } else {
            parse_f64(s, &what).map(Some)
        }
    };
    rows.iter()
        .map(|r| {
            Ok(FpfGridRow {
                phi: (0..nd)
                    .map(|i| parse_f64(&r[i], &what))
                    .collect::<Result<_>>()?,
                piecewise: parse_f64(&r[nd], &what)?,
                smoothed: opt(&r[nd + 1])?,
                analytic: opt(&r[nd + 2])?,
            })
        })
        .collect()
}

/// Gradient field of the smoothed FPF: `phi_1..phi_n, fpf, dfpf_1..dfpf_n`.
pub fn gradient_grid_csv(rows: &[(Vec<f64>, f64, Vec<f64>)]) -> Result<Vec<u8>> {
    let nd = rows.first().map_or(0, |r| r.0.len());
    let header = indexed("phi", nd)
        .chain(["fpf".to_string()])
        .chain(indexed("dfpf", nd))
        .collect();
    let out = rows.iter().map(|(phi, v, g)| {
        phi.iter()
            .chain([v])
            .chain(g)
            .map(|&x| fmt_f64(x))
            .collect()
    });
    csv_bytes(header, out)
}

/// `(φ, FPF, ∇FPF)` as read back from `gradient_grid.csv`.
pub type GradientRow = (Vec<f64>, f64, Vec<f64>);

pub fn read_gradient_grid_csv(path: &Path) -> Result<Vec<GradientRow>> {
    let (header, rows) = read_csv(path)?;
    let nd = count_prefixed(&header, "phi");
    let what = path.display().to_string();
    rows.iter()
        .map(|r| {
            let f = |i: usize| parse_f64(&r[i], &what);
            Ok((
                (0..nd).map(f).collect::<Result<_>>()?,
                f(nd)?,
                (nd + 1..=2 * nd).map(f).collect::<Result<_>>()?,
            ))
        })
        .collect()
}

/// Optimum per allowable value; infeasible rows carry the least-violating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumRow {
    pub allowable: f64,
    pub phi: Vec<f64>,
    pub objective: f64,
    pub constraint: f64,
    pub active: bool,
    pub feasible: bool,
}

impl From<&OptimalDesign> for OptimumRow {
    fn from(o: &OptimalDesign) -> Self {
        Self {
            allowable: o.allowable,
            phi: o.phi.clone(),
            objective: o.objective,
            constraint: o.constraint,
            active: o.active,
            feasible: true,
        }
    }
}

pub fn optima_csv(rows: &[OptimumRow]) -> Result<Vec<u8>> {
    let nd = rows.first().map_or(0, |r| r.phi.len());
    let header = ["allowable".to_string()]
        .into_iter()
        .chain(indexed("phi", nd))
        .chain(["objective", "constraint", "active", "feasible"].map(String::from))
        .collect();
    let out = rows.iter().map(|r| {
        [fmt_f64(r.allowable)]
            .into_iter()
            .chain(r.phi.iter().map(|&x| fmt_f64(x)))
            .chain([
                fmt_f64(r.objective),
                fmt_f64(r.constraint),
                r.active.to_string(),
                r.feasible.to_string(),
            ])
            .collect()
    });
    csv_bytes(header, out)
}

pub fn read_optima_csv(path: &Path) -> Result<Vec<OptimumRow>> {
    let (header, rows) = read_csv(path)?;
    let nd = count_prefixed(&header, "phi");
    let what = path.display().to_string();
    let flag = |s: &str| {
        s.parse::<bool>()
            .map_err(|_| Error::Argument(format!("{what}: bad flag {s:?}")))
    };
    rows.iter()
        .map(|r| {
            Ok(OptimumRow {
                allowable: parse_f64(&r[0], &what)?,
                phi: (1..=nd)
                    .map(|i| parse_f64(&r[i], &what))
                    .collect::<Result<_>>()?,
                objective: parse_f64(&r[nd + 1], &what)?,
                constraint: parse_f64(&r[nd + 2], &what)?,
                active: flag(&r[nd + 3])?,
                feasible: flag(&r[nd + 4])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "detail")]
pub enum RunStatus {
    Complete,
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub status: RunStatus,
    /// Resolved configuration with every default expanded.
    pub config: RunConfig,
    pub pilot: Option<PilotSummary>,
    pub stages: Vec<StageCount>,
    pub total_evaluations: u64,
    pub model_evaluations: u64,
    pub stop_reason: Option<StopReason>,
    pub n_it: Option<usize>,
    pub p_f: Option<f64>,
    /// File name → SHA-256 of every other artifact.
    pub checksums: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn check_totals(&self) -> Result<()> {
        let sum: u64 = self.stages.iter().map(|s| s.evaluations).sum();
        if sum != self.total_evaluations || sum != self.model_evaluations {
            return Err(Error::internal(format!(
                "evaluation totals disagree: stages {sum}, total {}, model counter {}",
                self.total_evaluations, self.model_evaluations
            )));
        }
        Ok(())
    }

    /// Recomputes every listed checksum from disk.
    pub fn verify_checksums(&self, dir: &Path) -> Result<()> {
        for (name, sum) in &self.checksums {
            let actual = sha256_hex(&std::fs::read(dir.join(name))?);
            if &actual != sum {
                return Err(Error::internal(format!("checksum mismatch for {name}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn sample(i: usize) -> AugmentedSample {
        let x = i as f64;
        AugmentedSample {
            phi: vec![30.0 + x / 7.0, 1e-7 * x],
            theta: vec![2.0 + x, -x / 3.0],
            standard: vec![0.1 * x, f64::MIN_POSITIVE],
            performance: 1e20 + x,
            margin: -x,
            failed: i.is_multiple_of(2),
        }
    }

    #[test]
    fn float_text_round_trips() {
        for x in [
            0.0,
            -0.0,
            1.0 / 3.0,
            1e-300,
            5e-324,
            1e15,
            123456.789,
            -2.5e-5,
            f64::INFINITY,
        ] {
            let s = fmt_f64(x);
            assert_eq!(
                s.parse::<f64>().unwrap().to_bits(),
                x.to_bits(),
                "{x} -> {s}"
            );
        }
        assert_eq!(fmt_f64(1e-6), "1e-6");
        assert_eq!(fmt_f64(0.25), "0.25");
    }

    #[test]
    fn samples_round_trip() {
        let d = tmp();
        let mut w = ArtifactWriter::new(d.path()).unwrap();
        let samples: Vec<_> = (0..25).map(sample).collect();
        w.write_bytes(&samples_file(0), &samples_csv(&samples).unwrap())
            .unwrap();
        assert_eq!(
            read_samples_csv(&d.path().join(samples_file(0))).unwrap(),
            samples
        );
        assert_eq!(w.checksums().len(), 1);
    }

    #[test]
    fn grid_header_and_round_trip() {
        let oracle = FpfGridOracle {
            resolution: 2,
            points: (0..4)
                .map(|i| GridPoint {
                    phi: vec![30.0 + 20.0 * (i / 2) as f64, 30.0 + 20.0 * (i % 2) as f64],
                    pf_hat: i as f64 / 1000.0,
                    n: 1000,
                    failures: i,
                    cov: if i == 0 {
                        f64::INFINITY
                    } else {
                        0.5 / i as f64
                    },
                })
                .collect(),
        };
        let bytes = grid_csv(&oracle).unwrap();
        assert!(String::from_utf8(bytes.clone())
            .unwrap()
            .starts_with("phi_1,phi_2,pf_hat,n,cov\n"));
        let d = tmp();
        std::fs::write(d.path().join(ORACLE_FILE), &bytes).unwrap();
        assert_eq!(read_grid_csv(&d.path().join(ORACLE_FILE)).unwrap(), oracle);
    }

    #[test]
    fn other_tables_round_trip() {
        let d = tmp();
        let mut w = ArtifactWriter::new(d.path()).unwrap();
        let grid = vec![
            FpfGridRow {
                phi: vec![0.0],
                piecewise: 0.5,
                smoothed: Some(0.49),
                analytic: Some(0.5),
            },
            FpfGridRow {
                phi: vec![4.0],
                piecewise: 3e-5,
                smoothed: None,
                analytic: None,
            },
        ];
        w.write_bytes(FPF_GRID_FILE, &fpf_grid_csv(&grid).unwrap())
            .unwrap();
        assert_eq!(
            read_fpf_grid_csv(&d.path().join(FPF_GRID_FILE)).unwrap(),
            grid
        );
        let grads = vec![(vec![30.0, 31.0], 1e-3, vec![-2e-4, 1.5e-9])];
        w.write_bytes(GRADIENT_GRID_FILE, &gradient_grid_csv(&grads).unwrap())
            .unwrap();
        assert_eq!(
            read_gradient_grid_csv(&d.path().join(GRADIENT_GRID_FILE)).unwrap(),
            grads
        );
        let optima = vec![OptimumRow {
            allowable: 1e-3,
            phi: vec![30.0, 31.25],
            objective: 229.0,
            constraint: 9.99e-4,
            active: true,
            feasible: true,
        }];
        w.write_bytes(OPTIMA_FILE, &optima_csv(&optima).unwrap())
            .unwrap();
        assert_eq!(
            read_optima_csv(&d.path().join(OPTIMA_FILE)).unwrap(),
            optima
        );
        let support = vec![SupportPoint {
            location: vec![1.0, 2.0],
            value: 0.25,
            level: 2,
            log_variance: 1.0 / 7.0,
        }];
        w.write_bytes(SUPPORT_FILE, &support_csv(&support, &[true]).unwrap())
            .unwrap();
        assert_eq!(
            read_support_csv(&d.path().join(SUPPORT_FILE)).unwrap(),
            vec![(support[0].clone(), true)]
        );
    }

    #[test]
    fn checksums_detect_edits() {
        let d = tmp();
        let mut w = ArtifactWriter::new(d.path()).unwrap();
        w.write_bytes("a.txt", b"hello").unwrap();
        let config = RunConfig::from_toml_str("[model]\nkind = \"toy\"\n")
            .unwrap()
            .resolve();
        let m = RunManifest {
            version: VERSION_TAG.into(),
            seed: 1,
            status: RunStatus::Complete,
            config,
            pilot: None,
            stages: vec![StageCount {
                stage: "pilot".into(),
                evaluations: 10,
            }],
            total_evaluations: 10,
            model_evaluations: 10,
            stop_reason: None,
            n_it: None,
            p_f: None,
            checksums: w.checksums().clone(),
        };
        m.check_totals().unwrap();
        m.verify_checksums(d.path()).unwrap();
        w.write_json(MANIFEST_FILE, &m).unwrap();
        assert_eq!(
            read_json::<RunManifest>(&d.path().join(MANIFEST_FILE)).unwrap(),
            m
        );
        std::fs::write(d.path().join("a.txt"), b"hellp").unwrap();
        assert!(m.verify_checksums(d.path()).is_err());
        let bad = RunManifest {
            model_evaluations: 11,
            ..m
        };
        assert!(bad.check_totals().is_err());
    }

    proptest! {
        #[test]
        fn any_finite_float_round_trips(x in proptest::num::f64::ANY) {
            let s = fmt_f64(x);
            let y: f64 = s.parse().unwrap();
            prop_assert!(y.to_bits() == x.to_bits() || (x.is_nan() && y.is_nan()));
        }
    }
}
