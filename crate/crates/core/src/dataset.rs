//! Paired parameter/observation datasets: generation from a prior through
//! the forward map with per-sample noise, a text container, and splitting.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::ForwardMap;
use crate::gaussian::GaussianDensity;
use crate::scalar::{standard_normal, Real};
use crate::uqvae_loss::CONDUCTIVITY_FLOOR;

const MAGIC: &str = "# uqvae-dataset v1";
/// Redraws allowed per sample before generation gives up.
pub const MAX_REDRAWS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DatasetSeeds {
    pub prior: u64,
    pub noise: u64,
    pub sensor: u64,
}

/// Rows are samples: `u` is `M × d`, `y` is `M × q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real> {
    pub u: DMatrix<T>,
    pub y: DMatrix<T>,
    pub noise_level: T,
    pub per_sample_sigma: DVector<T>,
    pub seeds: DatasetSeeds,
    pub mesh_n: usize,
    pub sensor_nodes: Vec<usize>,
    /// Draws discarded for dipping below the conductivity floor.
    pub rejected_draws: usize,
    /// Row positions in the dataset this one was split from.
    pub source_index: Vec<usize>,
    /// Free-form provenance carried through save and load.
    pub metadata: Vec<(String, String)>,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.y.ncols()
    }

    /// Parameters as columns, `d × M`.
    pub fn u_columns(&self) -> DMatrix<T> {
        self.u.transpose()
    }

    pub fn y_columns(&self) -> DMatrix<T> {
        self.y.transpose()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |m: &DMatrix<T>| DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)]);
        Self {
            u: pick(&self.u),
            y: pick(&self.y),
            per_sample_sigma: DVector::from_fn(rows.len(), |i, _| self.per_sample_sigma[rows[i]]),
            source_index: rows.iter().map(|&r| self.source_index[r]).collect(),
            ..self.clone()
        }
    }
}

/// Field, noisy observation, noise std and rejected draws for one sample.
type Sample<T> = (DVector<T>, DVector<T>, T, usize);

fn stream_rng(seed: u64, sample: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((attempt) << 40) | sample as u64);
    rng
}

/// Draws `m` fields from `gen_prior` conditioned on every entry reaching
/// [`CONDUCTIVITY_FLOOR`] (by redrawing), maps them through `op`, and adds
/// `N(0, σ_i² I)` noise with `σ_i = delta · max_j |F(u_i)_j|`.
///
/// Each sample owns its random streams, so results do not depend on thread
/// scheduling.
pub fn generate_dataset<T: Real>(
    op: &dyn ForwardMap<T>,
    gen_prior: &GaussianDensity<T>,
    m: usize,
    delta: T,
    seeds: DatasetSeeds,
    mesh_n: usize,
    sensor_nodes: Vec<usize>,
) -> Result<Dataset<T>> {
    if m == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    if !(delta >= T::zero()) || !delta.finite() {
        return Err(Error::InvalidArgument(format!("noise level {delta} must be non-negative")));
    }
    let d = gen_prior.dim();
    let q = op.output_dim();
    if op.input_dim() != d {
        return Err(Error::DimensionMismatch {
            what: "generating prior dimension",
            expected: op.input_dim(),
            got: d,
        });
    }
    let floor = T::lit(CONDUCTIVITY_FLOOR);
    let samples: Vec<Result<Sample<T>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..MAX_REDRAWS {
                let u = gen_prior.sample_one(&mut stream_rng(seeds.prior, i, attempt));
                if u.iter().any(|v| !(*v >= floor)) {
                    continue;
                }
                let clean = match op.apply(&u) {
                    Ok(y) if y.iter().all(|v| v.finite()) => y,
                    Ok(_) | Err(Error::SingularSystem(_)) => continue,
                    Err(e) => return Err(e),
                };
                let sigma = delta * clean.amax();
                let eta = standard_normal(&mut stream_rng(seeds.noise, i, 0), q);
                return Ok((u, clean + eta * sigma, sigma, attempt as usize));
            }
            Err(Error::Construction(format!(
                "sample {i}: no usable draw after {MAX_REDRAWS} attempts"
            )))
        })
        .collect();
    let mut u = DMatrix::zeros(m, d);
    let mut y = DMatrix::zeros(m, q);
    let mut sigma = DVector::zeros(m);
    let mut rejected_draws = 0;
    for (i, s) in samples.into_iter().enumerate() {
        let (ui, yi, si, f) = s?;
        u.set_row(i, &ui.transpose());
        y.set_row(i, &yi.transpose());
        sigma[i] = si;
        rejected_draws += f;
    }
    Ok(Dataset {
        u,
        y,
        noise_level: delta,
        per_sample_sigma: sigma,
        seeds,
        mesh_n,
        sensor_nodes,
        rejected_draws,
        source_index: (0..m).collect(),
        metadata: Vec::new(),
    })
}

fn join<I: IntoIterator<Item = usize>>(it: I) -> String {
    it.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

pub fn save_dataset<T: Real>(ds: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let (m, d, q) = (ds.len(), ds.param_dim(), ds.obs_dim());
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "# M={m}").unwrap();
    writeln!(out, "# d={d}").unwrap();
    writeln!(out, "# q={q}").unwrap();
    writeln!(out, "# delta={:.16e}", ds.noise_level).unwrap();
    writeln!(out, "# prior_seed={}", ds.seeds.prior).unwrap();
    writeln!(out, "# noise_seed={}", ds.seeds.noise).unwrap();
    writeln!(out, "# sensor_seed={}", ds.seeds.sensor).unwrap();
    writeln!(out, "# mesh_n={}", ds.mesh_n).unwrap();
    writeln!(out, "# sensors={}", join(ds.sensor_nodes.iter().copied())).unwrap();
    writeln!(out, "# rejected_draws={}", ds.rejected_draws).unwrap();
    if ds.source_index.iter().enumerate().any(|(i, &s)| i != s) {
        writeln!(out, "# source_index={}", join(ds.source_index.iter().copied())).unwrap();
    }
    for (k, v) in &ds.metadata {
        writeln!(out, "# meta.{k}={v}").unwrap();
    }
    let mut cols: Vec<String> = (0..d).map(|j| format!("u{j}")).collect();
    cols.extend((0..q).map(|j| format!("y{j}")));
    cols.push("sigma".into());
    writeln!(out, "{}", cols.join(",")).unwrap();
    for i in 0..m {
        let mut row: Vec<String> = ds.u.row(i).iter().map(|x| format!("{x:.16e}")).collect();
        row.extend(ds.y.row(i).iter().map(|x| format!("{x:.16e}")));
        row.push(format!("{:.16e}", ds.per_sample_sigma[i]));
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_at<V: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad value {v:?} for {key}"),
    })
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(';').map(|s| parse_at(line, key, s)).collect()
}

pub fn load_dataset<T: Real>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing dataset header".into(),
            })
        }
    }
    let mut header = std::collections::BTreeMap::new();
    let mut metadata = Vec::new();
    let mut last_line = 1;
    let mut columns = None;
    for (no, line) in lines.by_ref() {
        last_line = no;
        let Some(h) = line.strip_prefix("# ") else {
            columns = Some((no, line));
            break;
        };
        let (k, v) = h.split_once('=').ok_or_else(|| Error::Parse {
            line: no,
            msg: format!("malformed header line {line:?}"),
        })?;
        if let Some(meta) = k.strip_prefix("meta.") {
            metadata.push((meta.to_string(), v.to_string()));
        } else {
            header.insert(k.to_string(), (no, v.to_string()));
        }
    }
    let header_end = last_line;
    let get = |k: &str| {
        header.get(k).ok_or_else(|| Error::Parse {
            line: header_end,
            msg: format!("header is missing {k}"),
        })
    };
    let num = |k: &str| -> Result<usize> {
        let (no, v) = get(k)?;
        parse_at(*no, k, v)
    };
    let (m, d, q) = (num("M")?, num("d")?, num("q")?);
    let seeds = DatasetSeeds {
        prior: num("prior_seed")? as u64,
        noise: num("noise_seed")? as u64,
        sensor: num("sensor_seed")? as u64,
    };
    let (dl, dv) = get("delta")?;
    let delta: T = parse_at(*dl, "delta", dv)?;
    let (sl, sv) = get("sensors")?;
    let sensor_nodes = parse_list(*sl, "sensors", sv)?;
    let source_index = match header.get("source_index") {
        Some((no, v)) => parse_list(*no, "source_index", v)?,
        None => (0..m).collect(),
    };
    let (cno, cols) = columns.ok_or_else(|| Error::Parse {
        line: last_line + 1,
        msg: "missing column header".into(),
    })?;
    let width = d + q + 1;
    if cols.split(',').count() != width {
        return Err(Error::Schema(format!(
            "line {cno}: header declares d={d}, q={q} ({width} columns) but column header has {}",
            cols.split(',').count()
        )));
    }
    let mut u = DMatrix::zeros(m, d);
    let mut y = DMatrix::zeros(m, q);
    let mut sigma = DVector::zeros(m);
    let mut rows = 0;
    for (no, line) in lines {
        last_line = no;
        if line.is_empty() {
            continue;
        }
        if rows == m {
            return Err(Error::Parse {
                line: no,
                msg: format!("more than the declared {m} rows"),
            });
        }
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != width {
            return Err(Error::Schema(format!(
                "line {no}: expected {width} values for d={d}, q={q}, found {}",
                vals.len()
            )));
        }
        for (j, v) in vals.iter().enumerate() {
            let x: T = parse_at(no, "value", v)?;
            if j < d {
                u[(rows, j)] = x;
            } else if j < d + q {
                y[(rows, j - d)] = x;
            } else {
                sigma[rows] = x;
            }
        }
        rows += 1;
    }
    if rows != m {
        return Err(Error::Parse {
            line: last_line + 1,
            msg: format!("file ends after {rows} of {m} declared rows"),
        });
    }
    if source_index.len() != m {
        return Err(Error::Schema(format!("source_index has {} entries for {m} rows", source_index.len())));
    }
    Ok(Dataset {
        u,
        y,
        noise_level: delta,
        per_sample_sigma: sigma,
        seeds,
        mesh_n: num("mesh_n")?,
        sensor_nodes,
        rejected_draws: num("rejected_draws")?,
        source_index,
        metadata,
    })
}

/// Seeded random partition into `(train, test)` with
/// `round(train_fraction · M)` training rows.
pub fn split<T: Real>(ds: &Dataset<T>, train_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let m = ds.len();
    let n_train = (train_fraction * m as f64).round() as usize;
    if n_train == 0 || n_train == m {
        return Err(Error::InvalidArgument(format!(
            "fraction {train_fraction} of {m} samples leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(n_train);
    let mut train = ds.select(a);
    let mut test = ds.select(b);
    for part in [&mut train, &mut test] {
        part.metadata.push(("split_seed".into(), seed.to_string()));
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::{build_unit_square_mesh, PtoOperator};
    use crate::prior::{build_autocorr_cov, AutocorrSpec};

    fn setup(n: usize) -> (PtoOperator<f64>, GaussianDensity<f64>) {
        let mesh = build_unit_square_mesh::<f64>(n).unwrap();
        let pts: Vec<[f64; 2]> = mesh.nodes().to_vec();
        let prior = build_autocorr_cov(&pts, &AutocorrSpec::default()).unwrap();
        (PtoOperator::with_random_sensors(mesh, 0.5, 10, 7).unwrap(), prior)
    }

    fn gen(n: usize, m: usize, delta: f64) -> (PtoOperator<f64>, Dataset<f64>) {
        let (op, prior) = setup(n);
        let seeds = DatasetSeeds { prior: 1, noise: 2, sensor: 7 };
        let sensors = op.sensor_nodes().to_vec();
        let ds = generate_dataset(&op, &prior, m, delta, seeds, n, sensors).unwrap();
        (op, ds)
    }

    #[test]
    fn noiseless_is_exact() {
        let (op, ds) = gen(6, 5, 0.0);
        for i in 0..5 {
            let y = op.apply(&ds.u.row(i).transpose()).unwrap();
            assert_eq!(y.transpose(), ds.y.row(i).into_owned());
        }
        assert!(ds.per_sample_sigma.iter().all(|s| *s == 0.0));
        assert!(ds.u.iter().all(|v| *v >= CONDUCTIVITY_FLOOR));
    }

    #[test]
    fn noise_is_standardized() {
        let (op, ds) = gen(4, 1000, 0.05);
        let mut ss = 0.0;
        let mut n = 0;
        for i in 0..ds.len() {
            let clean = op.apply(&ds.u.row(i).transpose()).unwrap();
            let s = ds.per_sample_sigma[i];
            assert!((s - 0.05 * clean.amax()).abs() <= 1e-15 * s);
            assert!(s > 0.0);
            for j in 0..ds.obs_dim() {
                let z = (ds.y[(i, j)] - clean[j]) / s;
                ss += z * z;
                n += 1;
            }
        }
        let sd = (ss / n as f64).sqrt();
        assert!((sd - 1.0).abs() < 0.05, "{sd}");
    }

    #[test]
    fn sub_floor_draws_are_redrawn() {
        let (_, ds) = gen(6, 200, 0.0);
        assert!(ds.u.iter().all(|v| *v >= CONDUCTIVITY_FLOOR));
        // about a third of squared-exponential draws dip below the floor
        assert!(ds.rejected_draws > 20, "{}", ds.rejected_draws);
        let (_, first) = gen(6, 50, 0.0);
        assert_eq!(first.u, ds.u.rows(0, 50).into_owned());
    }

    #[test]
    fn regeneration_is_bit_exact() {
        let (_, a) = gen(5, 20, 0.01);
        let (_, b) = gen(5, 20, 0.01);
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip() {
        let (_, mut ds) = gen(4, 6, 0.1);
        ds.metadata.push(("alpha".into(), "0.001".into()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset::<f64>(&path).unwrap();
        assert_eq!(back, ds);
        let (tr, _) = split(&ds, 0.5, 3).unwrap();
        save_dataset(&tr, &path).unwrap();
        assert_eq!(load_dataset::<f64>(&path).unwrap(), tr);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let (_, ds) = gen(3, 4, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().collect();
        std::fs::write(&path, cut[..cut.len() - 1].join("\n")).unwrap();
        match load_dataset::<f64>(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, cut.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn width_mismatch_is_schema_error() {
        let (_, ds) = gen(3, 2, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("# d=16", "# d=15");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset::<f64>(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn split_partitions() {
        let (_, ds) = gen(3, 10, 0.0);
        assert!(split(&ds, 0.01, 1).is_err());
        assert!(split(&ds, 0.99, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
        let (a, b) = split(&ds, 0.7, 5).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        let mut all: Vec<usize> = a.source_index.iter().chain(&b.source_index).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for (part, rows) in [(&a, &a.source_index), (&b, &b.source_index)] {
            for (k, &r) in rows.iter().enumerate() {
                assert_eq!(part.u.row(k), ds.u.row(r));
            }
        }
        assert_eq!(split(&ds, 0.7, 5).unwrap(), (a, b));
    }

    #[test]
    fn invalid_generation_arguments() {
        let (op, prior) = setup(3);
        let s = DatasetSeeds::default();
        assert!(generate_dataset(&op, &prior, 0, 0.0, s, 3, vec![]).is_err());
        assert!(generate_dataset(&op, &prior, 1, -0.1, s, 3, vec![]).is_err());
    }
}
