use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::commands::read_kv;
use super::config::{ExperimentConfig, PtoModeName};
use super::svg::{line_chart, node_map, Series};
use crate::error::{Error, Result};

/// Noise-regularisation values shown as table rows.
pub const TABLE_ALPHAS: [f64; 4] = [0.00001, 0.001, 0.1, 0.5];

pub const RELATIVE_ERRORS_HEADER: &str =
    "run,method,delta,m_train,alpha,param_error_percent,obs_error_percent,feasibility_percent,mean_posterior_std";

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub name: String,
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    /// `modelled`, `learned` or `laplace`.
    pub method: String,
    pub values: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn value(&self, key: &str) -> Option<f64> {
        self.values.get(key).and_then(|v| v.parse().ok())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReportOutput {
    pub runs: Vec<RunRecord>,
    pub relative_errors: PathBuf,
    pub tables: Vec<PathBuf>,
    pub figures: Vec<PathBuf>,
}

fn run_name(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let s: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    if s.is_empty() {
        "root".into()
    } else {
        s.join("_")
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    out.push(dir.to_path_buf());
    let mut children: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "report"))
        .collect();
    children.sort();
    for c in children {
        walk(&c, out)?;
    }
    Ok(())
}

/// Finds every run directory under `root` holding `metrics.txt` or `laplace.txt`.
pub fn collect_runs(root: &Path) -> Result<Vec<RunRecord>> {
    let mut dirs = Vec::new();
    walk(root, &mut dirs)?;
    let mut runs = Vec::new();
    for dir in dirs {
        let name = run_name(root, &dir);
        let metrics = dir.join("metrics.txt");
        if metrics.exists() {
            let (config, values) = read_kv(&metrics)?;
            runs.push(RunRecord {
                name: name.clone(),
                dir: dir.clone(),
                method: config.pto_mode.to_string(),
                config,
                values,
            });
        }
        let lap = dir.join("laplace.txt");
        if lap.exists() {
            let (config, values) = read_kv(&lap)?;
            runs.push(RunRecord {
                name,
                dir,
                config,
                method: "laplace".into(),
                values,
            });
        }
    }
    Ok(runs)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |x| format!("{x:.6}"))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
}

fn posterior_rows(path: &Path) -> Result<Vec<[f64; 5]>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("node") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("{}: {e}", path.display()),
            })?;
        if f.len() != 5 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("{}: expected 6 columns", path.display()),
            });
        }
        rows.push([f[0], f[1], f[2], f[3], f[4]]);
    }
    Ok(rows)
}

/// Cross-section through the node row nearest `y = 0.5` with `k`-std bands.
fn cross_section(
    rows: &[[f64; 5]],
    k: f64,
    title: &str,
    csv_path: &Path,
    svg_path: &Path,
) -> Result<()> {
    let target = rows
        .iter()
        .map(|r| r[1])
        .min_by(|a, b| (a - 0.5).abs().total_cmp(&(b - 0.5).abs()))
        .unwrap_or(0.5);
    let mut line: Vec<&[f64; 5]> = rows.iter().filter(|r| (r[1] - target).abs() < 1e-9).collect();
    line.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let mut csv = format!("# row y={target}\nx,u_true,mu,lower,upper\n");
    for r in &line {
        writeln!(csv, "{},{},{},{},{}", r[0], r[2], r[3], r[3] - k * r[4], r[3] + k * r[4]).unwrap();
    }
    std::fs::write(csv_path, csv)?;
    let truth: Vec<(f64, f64)> = line.iter().map(|r| (r[0], r[2])).collect();
    let mean: Vec<(f64, f64)> = line.iter().map(|r| (r[0], r[3])).collect();
    let lo: Vec<(f64, f64)> = line.iter().map(|r| (r[0], r[3] - k * r[4])).collect();
    let hi: Vec<(f64, f64)> = line.iter().map(|r| (r[0], r[3] + k * r[4])).collect();
    let band = format!("mean ± {k} std");
    let svg = line_chart(
        title,
        "x",
        &[
            Series { label: "truth", color: "black", dashed: false, points: &truth },
            Series { label: "posterior mean", color: "#1f77b4", dashed: false, points: &mean },
            Series { label: &band, color: "#d62728", dashed: true, points: &lo },
            Series { label: "", color: "#d62728", dashed: true, points: &hi },
        ],
    );
    std::fs::write(svg_path, svg)?;
    Ok(())
}

/// Aggregates every run under `root` into `root/report/`.
pub fn cmd_report(root: &Path) -> Result<ReportOutput> {
    if !root.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", root.display())));
    }
    let out_dir = root.join("report");
    std::fs::create_dir_all(&out_dir)?;
    let runs = collect_runs(root)?;

    let mut csv = format!("{RELATIVE_ERRORS_HEADER}\n");
    for r in &runs {
        let c = &r.config;
        let (m, alpha) = if r.method == "laplace" {
            ("-".to_string(), "-".to_string())
        } else {
            (c.m_train.to_string(), c.alpha.to_string())
        };
        writeln!(
            csv,
            "{},{},{},{m},{alpha},{},{},{},{}",
            r.name,
            r.method,
            c.delta,
            fmt_opt(r.value("relative_error_param")),
            fmt_opt(r.value("relative_error_obs")),
            fmt_opt(r.value("feasibility_percent")),
            fmt_opt(r.value("mean_posterior_std")),
        )
        .unwrap();
    }
    let relative_errors = out_dir.join("relative_errors.csv");
    std::fs::write(&relative_errors, csv)?;

    let mut groups: BTreeSet<(String, usize)> = BTreeSet::new();
    for r in runs.iter().filter(|r| r.method != "laplace") {
        groups.insert((r.config.delta.to_string(), r.config.m_train));
    }
    let mut tables = Vec::new();
    for (delta, m) in groups {
        let in_group = |r: &&RunRecord| r.config.delta.to_string() == delta && r.config.m_train == m;
        let members: Vec<&RunRecord> = runs.iter().filter(|r| r.method != "laplace").filter(in_group).collect();
        let map_err = runs
            .iter()
            .find(|r| r.method == "laplace" && r.config.delta.to_string() == delta)
            .and_then(|r| r.value("relative_error_param"));
        let mut alphas: Vec<f64> = TABLE_ALPHAS.to_vec();
        for r in &members {
            if !alphas.iter().any(|a| close(*a, r.config.alpha)) {
                alphas.push(r.config.alpha);
            }
        }
        alphas.sort_by(f64::total_cmp);
        let pick = |alpha: f64, mode: PtoModeName, key: &str| {
            members
                .iter()
                .find(|r| r.config.pto_mode == mode && close(r.config.alpha, alpha))
                .and_then(|r| r.value(key))
        };
        let mut t = format!("# delta={delta} m_train={m}\n# map_param_error_percent={}\n", fmt_opt(map_err));
        t.push_str("alpha,modelled_param_error_percent,learned_param_error_percent,learned_obs_error_percent\n");
        for a in alphas {
            writeln!(
                t,
                "{a},{},{},{}",
                fmt_opt(pick(a, PtoModeName::Modelled, "relative_error_param")),
                fmt_opt(pick(a, PtoModeName::Learned, "relative_error_param")),
                fmt_opt(pick(a, PtoModeName::Learned, "relative_error_obs")),
            )
            .unwrap();
        }
        let p = out_dir.join(format!("table_delta{delta}_M{m}.csv"));
        std::fs::write(&p, t)?;
        tables.push(p);
    }

    let mut figures = Vec::new();
    let mut seen = BTreeSet::new();
    for r in &runs {
        let file = if r.method == "laplace" { "laplace_posterior.csv" } else { "posterior_sample.csv" };
        let path = r.dir.join(file);
        if !path.exists() || !seen.insert(path.clone()) {
            continue;
        }
        let rows = posterior_rows(&path)?;
        let tag = format!("{}_{}", r.name, r.method);
        let svg = out_dir.join(format!("cross_section_{tag}.svg"));
        cross_section(
            &rows,
            r.config.k_std,
            &format!("{} ({}), delta={}", r.name, r.method, r.config.delta),
            &out_dir.join(format!("cross_section_{tag}.csv")),
            &svg,
        )?;
        figures.push(svg);
        let pts: Vec<(f64, f64, f64)> = rows.iter().map(|v| (v[0], v[1], v[4] * v[4])).collect();
        let side = (rows.len() as f64).sqrt().round().max(2.0) as usize - 1;
        let var = out_dir.join(format!("variance_{tag}.svg"));
        std::fs::write(&var, node_map(&format!("posterior variance, {} ({})", r.name, r.method), &pts, side))?;
        figures.push(var);
    }
    Ok(ReportOutput {
        runs,
        relative_errors,
        tables,
        figures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_root_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_report(dir.path()).unwrap();
        let text = std::fs::read_to_string(out.relative_errors).unwrap();
        assert_eq!(text.trim(), RELATIVE_ERRORS_HEADER);
        assert!(out.tables.is_empty());
    }

    #[test]
    fn missing_root_is_an_error() {
        assert!(cmd_report(Path::new("/nonexistent/uqvae/report/root")).is_err());
    }

    #[test]
    fn run_names_flatten_paths() {
        let root = Path::new("/a");
        assert_eq!(run_name(root, Path::new("/a")), "root");
        assert_eq!(run_name(root, Path::new("/a/b/c")), "b_c");
    }

    #[test]
    fn cross_section_picks_middle_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for j in 0..=4 {
            for i in 0..=4 {
                rows.push([i as f64 / 4.0, j as f64 / 4.0, 1.0, 1.5, 0.1]);
            }
        }
        let csv = dir.path().join("c.csv");
        cross_section(&rows, 3.0, "t", &csv, &dir.path().join("c.svg")).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("# row y=0.5"));
        assert_eq!(text.lines().count(), 2 + 5);
        let first: Vec<f64> = text.lines().nth(2).unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert!((first[3] - 1.2).abs() < 1e-12 && (first[4] - 1.8).abs() < 1e-12);
    }
}
