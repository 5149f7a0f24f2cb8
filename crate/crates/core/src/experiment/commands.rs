use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, PtoModeName};
use super::metrics::{feasibility_rate, relative_error_obs, relative_error_param, Feasibility, RelativeError};
use crate::dataset::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetSeeds};
use crate::encoder_net::{init_encoder, EncoderParams, HeadInit, Mlp};
use crate::error::{Error, Result};
use crate::forward::{ForwardMap, LinearMap};
use crate::gauss_div::{
    evidence_bound_gap, kl_gaussians, simpson, jsd_identity_residual, write_verification_csv, VerificationRow,
};
use crate::gaussian::GaussianDensity;
use crate::laplace_baseline::{laplace_covariance, map_estimate, pointwise_std, MapResult};
use crate::linear_oracle::{
    closed_form_posterior, expected_loss_and_grad, train_to_recover, vec_kron_identity_check, write_recovery_csv,
    LinearGaussianProblem, LinearNetworks, OracleCache, RecoveryRow,
};
use crate::mesh_fem::{build_unit_square_mesh, Mesh, PtoOperator};
use crate::prior::{build_autocorr_cov, build_operator_prior, AutocorrSpec, OperatorPriorSpec};
use crate::scalar::Real;
use crate::training::{train, ForwardChoice, TrainData, TrainSettings, TrainState, NOISE_FLOOR_REL};
use crate::uqvae_loss::{write_training_log, PriorTerm};

/// Mesh, forward operator and inference prior implied by a configuration.
pub struct Setup<T: Real> {
    pub op: PtoOperator<T>,
    pub prior: GaussianDensity<T>,
}

impl<T: Real> Setup<T> {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = build_unit_square_mesh::<T>(cfg.mesh_n)?;
        let prior = build_operator_prior(&mesh, &OperatorPriorSpec::default())?;
        let op = PtoOperator::with_random_sensors(mesh, T::lit(cfg.biot), cfg.sensors, cfg.sensor_seed)?;
        Ok(Self { op, prior })
    }

    pub fn mesh(&self) -> &Mesh<T> {
        self.op.mesh()
    }

    /// Squared-exponential prior the ground-truth fields are drawn from.
    pub fn generating_prior(&self) -> Result<GaussianDensity<T>> {
        build_autocorr_cov(self.mesh().nodes(), &AutocorrSpec::default())
    }

    fn check_dataset(&self, ds: &Dataset<T>, path: &Path) -> Result<()> {
        if ds.param_dim() != self.op.input_dim() || ds.obs_dim() != self.op.output_dim() {
            return Err(Error::Schema(format!(
                "{}: dataset has d={}, q={} but the configuration implies d={}, q={}",
                path.display(),
                ds.param_dim(),
                ds.obs_dim(),
                self.op.input_dim(),
                self.op.output_dim()
            )));
        }
        if ds.sensor_nodes != self.op.sensor_nodes() {
            return Err(Error::Schema(format!(
                "{}: sensor locations differ from the configured sensor seed",
                path.display()
            )));
        }
        Ok(())
    }
}

/// Configuration as recorded in outputs: the noise level and training-set
/// size are taken from the data actually used.
fn synced<T: Real>(cfg: &ExperimentConfig, ds: &Dataset<T>, is_train: bool) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.delta = ds.noise_level.to_f64_lossy();
    if is_train {
        c.m_train = ds.len();
    }
    c
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(cfg.output_dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

/// Noise density used for sample `i` during training and MAP estimation.
pub fn modelled_noise<T: Real>(y: &DVector<T>, sigma: T) -> Result<GaussianDensity<T>> {
    let s = sigma.max(T::lit(NOISE_FLOOR_REL) * y.amax());
    GaussianDensity::isotropic(DVector::zeros(y.len()), s * s)
}

#[derive(Debug, Clone)]
pub struct GenDataOutput {
    pub train_path: PathBuf,
    pub test_path: Option<PathBuf>,
    pub rejected_draws: usize,
    pub full_scale: bool,
}

pub fn cmd_gen_data<T: Real>(cfg: &ExperimentConfig) -> Result<GenDataOutput> {
    let setup = Setup::<T>::new(cfg)?;
    create_dir(&cfg.output_dir)?;
    write_config(cfg)?;
    let gen_prior = setup.generating_prior()?;
    let sensors = setup.op.sensor_nodes().to_vec();
    let make = |m: usize, prior_seed: u64, noise_seed: u64| {
        let seeds = DatasetSeeds {
            prior: prior_seed,
            noise: noise_seed,
            sensor: cfg.sensor_seed,
        };
        let mut ds = generate_dataset(&setup.op, &gen_prior, m, T::lit(cfg.delta), seeds, cfg.mesh_n, sensors.clone())?;
        ds.metadata = cfg.to_pairs();
        Ok::<_, Error>(ds)
    };
    let train = make(cfg.m_train, cfg.prior_seed, cfg.noise_seed)?;
    let train_path = cfg.train_path();
    save_dataset(&train, &train_path)?;
    let mut rejected_draws = train.rejected_draws;
    let test_path = if cfg.m_test > 0 {
        let test = make(cfg.m_test, cfg.test_prior_seed, cfg.test_noise_seed)?;
        rejected_draws += test.rejected_draws;
        let p = cfg.test_path();
        save_dataset(&test, &p)?;
        Some(p)
    } else {
        None
    };
    Ok(GenDataOutput {
        train_path,
        test_path,
        rejected_draws,
        full_scale: cfg.is_full_scale(),
    })
}

/// Encoder outputs and metrics on a held-out set.
#[derive(Debug, Clone)]
pub struct Evaluation<T: Real> {
    pub param_error: RelativeError,
    pub obs_error: Option<RelativeError>,
    pub feasibility: Feasibility,
    pub mean_std: f64,
    /// Rows are samples.
    pub mu: DMatrix<T>,
    pub sigma: DMatrix<T>,
}

pub fn evaluate<T: Real>(
    test: &Dataset<T>,
    encoder: &EncoderParams<T>,
    decoder: Option<&Mlp<T>>,
    k_std: f64,
) -> Result<Evaluation<T>> {
    let enc = encoder.encode_batch(&test.y_columns())?;
    let mu = enc.mu.transpose();
    let sigma = enc.log_sigma.transpose().map(|v| v.exp());
    let obs_error = match decoder {
        Some(dec) => Some(relative_error_obs(&test.y, &dec.forward(&enc.mu)?.output.transpose())),
        None => None,
    };
    let mean_std = sigma.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / sigma.len().max(1) as f64;
    Ok(Evaluation {
        param_error: relative_error_param(&test.u, &mu),
        obs_error,
        feasibility: feasibility_rate(&test.u, &mu, &sigma, T::lit(k_std)),
        mean_std,
        mu,
        sigma,
    })
}

fn write_posterior_csv<T: Real>(
    path: &Path,
    cfg: &ExperimentConfig,
    mesh: &Mesh<T>,
    u_true: &DVector<T>,
    mu: &DVector<T>,
    std: &DVector<T>,
) -> Result<()> {
    let mut out = cfg.to_comment_block();
    out.push_str("node,x,y,u_true,mu,std\n");
    for (i, p) in mesh.nodes().iter().enumerate() {
        writeln!(out, "{i},{},{},{:.16e},{:.16e},{:.16e}", p[0], p[1], u_true[i], mu[i], std[i]).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_kv(path: &Path, cfg: &ExperimentConfig, values: &[(&str, String)]) -> Result<()> {
    let mut out = cfg.to_comment_block();
    for (k, v) in values {
        writeln!(out, "{k}={v}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads `key=value` lines of a metrics file, and the configuration
/// embedded in its comment block.
pub fn read_kv(path: &Path) -> Result<(ExperimentConfig, BTreeMap<String, String>)> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg_text = String::new();
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(c) = line.strip_prefix("# ") {
            cfg_text.push_str(c);
            cfg_text.push('\n');
        } else if let Some((k, v)) = line.split_once('=') {
            map.insert(k.to_string(), v.to_string());
        } else if !line.trim().is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("{}: expected key=value", path.display()),
            });
        }
    }
    Ok((ExperimentConfig::from_text(&cfg_text)?, map))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub decoder_checkpoint: Option<PathBuf>,
    pub log_path: PathBuf,
    pub initial_total: f64,
    pub final_total: f64,
    pub floor_events: usize,
    pub clamp_events: usize,
    pub evaluation: Option<Evaluation<f64>>,
}

fn head_init<T: Real>(prior: &GaussianDensity<T>) -> HeadInit<T> {
    let d = T::lit(prior.dim() as f64);
    HeadInit {
        mean: prior.mean().sum() / d,
        log_std: prior.variances().map(|v| v.ln()).sum() / d * T::lit(0.5),
    }
}

pub fn cmd_train<T: Real>(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    let setup = Setup::<T>::new(cfg)?;
    create_dir(&cfg.output_dir)?;
    write_config(cfg)?;
    let train_path = cfg.train_path();
    let ds = load_dataset::<T>(&train_path)?;
    setup.check_dataset(&ds, &train_path)?;
    let cfg = &synced(cfg, &ds, true);
    let (d, q) = (ds.param_dim(), ds.obs_dim());
    let encoder = init_encoder(q, d, &cfg.encoder_hidden, head_init(&setup.prior), cfg.init_seed)?;
    let decoder = match cfg.pto_mode {
        PtoModeName::Modelled => None,
        PtoModeName::Learned => {
            let mut widths = vec![d];
            widths.extend_from_slice(&cfg.decoder_hidden);
            widths.push(q);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed ^ 0xdec0_de00);
            Some(Mlp::init(&widths, &mut rng)?)
        }
    };
    let data = TrainData::new(&ds.u, &ds.y, &ds.per_sample_sigma)?;
    let prior = PriorTerm::new(setup.prior.clone());
    let settings = TrainSettings {
        epochs: cfg.epochs,
        batch_size: cfg.effective_batch(ds.len()),
        learning_rate: T::lit(cfg.learning_rate),
        alpha: T::lit(cfg.alpha),
        shuffle_seed: cfg.shuffle_seed,
    };
    let forward = match cfg.pto_mode {
        PtoModeName::Modelled => ForwardChoice::Modelled(&setup.op),
        PtoModeName::Learned => ForwardChoice::Learned,
    };
    let mut state = TrainState::new(encoder, decoder, settings.learning_rate);
    let mut logs = Vec::new();
    let result = train(&mut state, &data, forward, &prior, &settings, |r| logs.push(r.clone()));

    let extras: Vec<(String, String)> = cfg.to_pairs().into_iter().map(|(k, v)| (format!("config.{k}"), v)).collect();
    let checkpoint = cfg.output_dir.join("encoder.ckpt");
    state.encoder.save(&checkpoint, &extras)?;
    let decoder_checkpoint = match &state.decoder {
        Some(dec) => {
            let p = cfg.output_dir.join("decoder.ckpt");
            let f = std::io::BufWriter::new(std::fs::File::create(&p)?);
            crate::encoder_net::write_checkpoint(f, dec, &extras)?;
            Some(p)
        }
        None => None,
    };
    let log_path = cfg.output_dir.join("training_log.csv");
    let mut buf = cfg.to_comment_block().into_bytes();
    write_training_log(&mut buf, &logs)?;
    std::fs::write(&log_path, buf)?;
    result?;

    let test_path = cfg.test_path();
    let evaluation = if test_path.exists() {
        let test = load_dataset::<T>(&test_path)?;
        setup.check_dataset(&test, &test_path)?;
        let ev = evaluate(&test, &state.encoder, state.decoder.as_ref(), cfg.k_std)?;
        let idx = cfg.test_index.min(test.len() - 1);
        write_posterior_csv(
            &cfg.output_dir.join("posterior_sample.csv"),
            cfg,
            setup.mesh(),
            &test.u.row(idx).transpose(),
            &ev.mu.row(idx).transpose(),
            &ev.sigma.row(idx).transpose(),
        )?;
        let mut values = vec![
            ("relative_error_param", ev.param_error.percent.to_string()),
            ("excluded_samples", ev.param_error.excluded.to_string()),
            ("feasibility_percent", ev.feasibility.percent.to_string()),
            (
                "feasible_samples",
                ev.feasibility.per_sample.iter().filter(|f| **f).count().to_string(),
            ),
            ("mean_posterior_std", ev.mean_std.to_string()),
            ("test_samples", test.len().to_string()),
        ];
        if let Some(o) = ev.obs_error {
            values.push(("relative_error_obs", o.percent.to_string()));
        }
        write_kv(&cfg.output_dir.join("metrics.txt"), cfg, &values)?;
        Some(Evaluation {
            param_error: ev.param_error,
            obs_error: ev.obs_error,
            feasibility: ev.feasibility,
            mean_std: ev.mean_std,
            mu: ev.mu.map(|v| v.to_f64_lossy()),
            sigma: ev.sigma.map(|v| v.to_f64_lossy()),
        })
    } else {
        None
    };
    Ok(TrainOutput {
        checkpoint,
        decoder_checkpoint,
        log_path,
        initial_total: logs.first().map_or(f64::NAN, |r| r.total),
        final_total: logs.last().map_or(f64::NAN, |r| r.total),
        floor_events: logs.iter().map(|r| r.floor_events).sum(),
        clamp_events: logs.iter().map(|r| r.clamp_events).sum(),
        evaluation,
    })
}

/// MAP estimate followed by the Laplace covariance.
pub fn laplace_pipeline<T: Real>(
    op: &dyn ForwardMap<T>,
    y: &DVector<T>,
    prior: &GaussianDensity<T>,
    noise: &GaussianDensity<T>,
    tol: T,
    max_iter: usize,
) -> Result<(MapResult<T>, GaussianDensity<T>)> {
    let map = map_estimate(op, y, prior, noise, tol, max_iter)?;
    let post = laplace_covariance(op, &map.u_map, prior, noise)?;
    Ok((map, post))
}

#[derive(Debug, Clone)]
pub struct LaplaceOutput {
    pub relative_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_seconds: f64,
    pub mean_std: f64,
    pub result_path: PathBuf,
}

fn test_datum<T: Real>(
    cfg: &ExperimentConfig,
    setup: &Setup<T>,
) -> Result<(DVector<T>, DVector<T>, T, ExperimentConfig)> {
    let path = cfg.test_path();
    if path.exists() {
        let test = load_dataset::<T>(&path)?;
        setup.check_dataset(&test, &path)?;
        if cfg.test_index >= test.len() {
            return Err(Error::InvalidArgument(format!(
                "test_index {} out of range for {} test samples",
                cfg.test_index,
                test.len()
            )));
        }
        let i = cfg.test_index;
        return Ok((
            test.u.row(i).transpose(),
            test.y.row(i).transpose(),
            test.per_sample_sigma[i],
            synced(cfg, &test, false),
        ));
    }
    let seeds = DatasetSeeds {
        prior: cfg.test_prior_seed,
        noise: cfg.test_noise_seed,
        sensor: cfg.sensor_seed,
    };
    let gen = setup.generating_prior()?;
    let ds = generate_dataset(&setup.op, &gen, 1, T::lit(cfg.delta), seeds, cfg.mesh_n, Vec::new())?;
    Ok((ds.u.row(0).transpose(), ds.y.row(0).transpose(), ds.per_sample_sigma[0], cfg.clone()))
}

pub fn cmd_laplace<T: Real>(cfg: &ExperimentConfig) -> Result<LaplaceOutput> {
    let setup = Setup::<T>::new(cfg)?;
    create_dir(&cfg.output_dir)?;
    let (u, y, sigma, cfg) = test_datum(cfg, &setup)?;
    let cfg = &cfg;
    let noise = modelled_noise(&y, sigma)?;
    let start = Instant::now();
    let (map, post) = laplace_pipeline(&setup.op, &y, &setup.prior, &noise, T::lit(cfg.laplace_tol), cfg.laplace_max_iter)?;
    let std = pointwise_std(&post);
    let wall = start.elapsed().as_secs_f64();
    let rel = relative_error_param(&DMatrix::from_row_slice(1, u.len(), u.as_slice()), &DMatrix::from_row_slice(1, u.len(), map.u_map.as_slice()));
    let mean_std = std.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / std.len() as f64;
    write_posterior_csv(&cfg.output_dir.join("laplace_posterior.csv"), cfg, setup.mesh(), &u, &map.u_map, &std)?;
    let result_path = cfg.output_dir.join("laplace.txt");
    write_kv(
        &result_path,
        cfg,
        &[
            ("relative_error_param", rel.percent.to_string()),
            ("iterations", map.iterations.to_string()),
            ("converged", map.converged.to_string()),
            ("objective", map.objective.to_string()),
            ("grad_norm", map.grad_norm.to_string()),
            ("initial_grad_norm", map.initial_grad_norm.to_string()),
            ("wall_seconds", wall.to_string()),
            ("mean_posterior_std", mean_std.to_string()),
        ],
    )?;
    Ok(LaplaceOutput {
        relative_error: rel.percent,
        iterations: map.iterations,
        converged: map.converged,
        wall_seconds: wall,
        mean_std,
        result_path,
    })
}

#[derive(Debug, Clone)]
pub struct VerifyOutput {
    pub rows: Vec<VerificationRow>,
    pub recovery: Vec<RecoveryRow>,
}

impl VerifyOutput {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass) && self.recovery.iter().all(|r| r.pass)
    }
}

/// Random density with mean in `[-1, 1]^d` and covariance `B Bᵀ + 0.3 I`.
pub fn random_density<R: Rng + ?Sized>(rng: &mut R, d: usize) -> GaussianDensity<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    GaussianDensity::full(mean, &b * b.transpose() + DMatrix::identity(d, d) * 0.3).expect("SPD by construction")
}

fn row(check: String, value: f64, std_error: f64, pass: bool) -> VerificationRow {
    VerificationRow {
        check,
        value,
        std_error,
        pass,
    }
}

/// Runs the divergence identities, the linear-Gaussian recovery suite and
/// the linear Laplace exactness checks, writing `verification.csv` and
/// `linear_recovery.csv`.
pub fn cmd_verify(cfg: &ExperimentConfig, mc_samples: usize) -> Result<VerifyOutput> {
    create_dir(&cfg.output_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.prior_seed);
    let mut rows = Vec::new();
    for alpha in [0.1, 0.5, 0.9] {
        let q = random_density(&mut rng, 2);
        let p = random_density(&mut rng, 2);
        let r = jsd_identity_residual(&q, &p, alpha, mc_samples, &mut rng)?;
        rows.push(row(format!("jsd_identity alpha={alpha}"), r.value, r.std_error, r.within(3.0)));
    }
    for alpha in [0.1, 0.5] {
        for k in 0..20 {
            let d = rng.random_range(1..=3);
            let qd = rng.random_range(1..=3);
            let prob = LinearGaussianProblem::random(&mut rng, d, qd);
            let q = random_density(&mut rng, d);
            let g = evidence_bound_gap(&prob, &q, alpha, mc_samples.min(100_000), &mut rng)?;
            rows.push(row(
                format!("jsd_bound alpha={alpha} instance={k}"),
                g.value,
                g.std_error,
                g.value >= -3.0 * g.std_error,
            ));
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (mq, sq): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(0.2..3.0));
        let (mp, sp): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(0.2..3.0));
        let q = GaussianDensity::diagonal(DVector::from_element(1, mq), DVector::from_element(1, sq))?;
        let p = GaussianDensity::diagonal(DVector::from_element(1, mp), DVector::from_element(1, sp))?;
        let pdf = |m: f64, v: f64, x: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let s = sq.sqrt();
        let quad = simpson(
            |x| {
                let a = pdf(mq, sq, x);
                if a == 0.0 { 0.0 } else { a * (a / pdf(mp, sp, x)).ln() }
            },
            mq - 10.0 * s,
            mq + 10.0 * s,
            10_000,
        );
        worst = worst.max((kl_gaussians(&q, &p)? - quad).abs());
    }
    rows.push(row("kl_vs_quadrature max_abs_diff".into(), worst, 0.0, worst < 1e-4));

    let mut kron: f64 = 0.0;
    for (r1, c1, c2, c3, c4) in [(3, 3, 3, 3, 3), (2, 4, 3, 2, 5)] {
        let mut m = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let (a, b, c, d) = (m(r1, c1), m(c1, c2), m(c2, c3), m(c3, c4));
        kron = kron.max(vec_kron_identity_check(&a, &b, &c, &d));
    }
    rows.push(row("vec_kronecker max_residual".into(), kron, 0.0, kron < 1e-12));

    let mut recovery = Vec::new();
    for seed in 0..3u64 {
        let p = LinearGaussianProblem::<f64>::random(&mut ChaCha8Rng::seed_from_u64(cfg.prior_seed + seed), 5, 3);
        let cache = OracleCache::new(&p)?;
        let opt = LinearNetworks::from_density(&cache.posterior, 3);
        let (_, g) = expected_loss_and_grad(&p, &cache, &opt, 0.5)?;
        rows.push(row(format!("stationarity seed={seed}"), g.norm(), 0.0, g.norm() < 1e-8));
        let (_, rep) = train_to_recover(&p, 0.5, 20_000, 1e-2, None)?;
        recovery.push(RecoveryRow {
            seed: cfg.prior_seed + seed,
            mean_error: rep.mean_error,
            cov_error: rep.cov_error,
            steps: rep.steps,
            pass: rep.mean_error < 1e-3 && rep.cov_error < 1e-2,
        });
    }

    let mut lap: f64 = 0.0;
    for _ in 0..10 {
        let p = LinearGaussianProblem::<f64>::random(&mut rng, 5, 3);
        let truth = closed_form_posterior(&p)?;
        let (map, post) = laplace_pipeline(&LinearMap::new(p.a.clone()), &p.y, &p.prior, &p.noise, 1e-12, 25)?;
        lap = lap
            .max((&map.u_map - truth.mean()).amax())
            .max((post.covariance() - truth.covariance()).amax());
    }
    rows.push(row("laplace_linear max_abs_diff".into(), lap, 0.0, lap < 1e-8));

    let f = std::fs::File::create(cfg.output_dir.join("verification.csv"))?;
    write_verification_csv(std::io::BufWriter::new(f), &rows)?;
    let f = std::fs::File::create(cfg.output_dir.join("linear_recovery.csv"))?;
    write_recovery_csv(std::io::BufWriter::new(f), &recovery)?;
    Ok(VerifyOutput { rows, recovery })
}

#[derive(Debug, Clone)]
pub struct TimingOutput {
    pub encoder_seconds: f64,
    pub laplace_seconds: f64,
    pub ratio: f64,
    pub evaluations: usize,
    pub hardware: String,
    pub trained_encoder: bool,
}

pub fn hardware_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{} {} / {cpu} / {threads} threads", std::env::consts::OS, std::env::consts::ARCH)
}

/// Mean wall time of one encoder evaluation against one full Laplace
/// pipeline (MAP, covariance, pointwise std) on the same datum.
pub fn cmd_timing<T: Real>(cfg: &ExperimentConfig) -> Result<TimingOutput> {
    let setup = Setup::<T>::new(cfg)?;
    create_dir(&cfg.output_dir)?;
    let evals = cfg.timing_evals.max(1);
    let ckpt = cfg.output_dir.join("encoder.ckpt");
    let (encoder, trained) = if ckpt.exists() {
        (EncoderParams::<T>::load(&ckpt)?.0, true)
    } else {
        let (q, d) = (setup.op.output_dim(), setup.op.input_dim());
        (init_encoder(q, d, &cfg.encoder_hidden, head_init(&setup.prior), cfg.init_seed)?, false)
    };
    let (_, y, sigma, cfg) = test_datum(cfg, &setup)?;
    let cfg = &cfg;
    let noise = modelled_noise(&y, sigma)?;
    let mut sink = T::zero();
    let start = Instant::now();
    for _ in 0..evals {
        let (mu, ls) = encoder.encode(&y)?;
        sink += mu[0] + ls[0];
    }
    let encoder_seconds = start.elapsed().as_secs_f64() / evals as f64;
    let start = Instant::now();
    for _ in 0..evals {
        let (map, post) = laplace_pipeline(&setup.op, &y, &setup.prior, &noise, T::lit(cfg.laplace_tol), cfg.laplace_max_iter)?;
        sink += map.objective + pointwise_std(&post)[0];
    }
    let laplace_seconds = start.elapsed().as_secs_f64() / evals as f64;
    std::hint::black_box(sink);
    let out = TimingOutput {
        encoder_seconds,
        laplace_seconds,
        ratio: laplace_seconds / encoder_seconds,
        evaluations: evals,
        hardware: hardware_descriptor(),
        trained_encoder: trained,
    };
    write_kv(
        &cfg.output_dir.join("timing.txt"),
        cfg,
        &[
            ("encoder_mean_seconds", out.encoder_seconds.to_string()),
            ("laplace_mean_seconds", out.laplace_seconds.to_string()),
            ("speedup", out.ratio.to_string()),
            ("evaluations", out.evaluations.to_string()),
            ("trained_encoder", out.trained_encoder.to_string()),
            ("hardware", out.hardware.clone()),
        ],
    )?;
    Ok(out)
}
