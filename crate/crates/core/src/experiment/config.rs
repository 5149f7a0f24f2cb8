use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtoModeName {
    Modelled,
    Learned,
}

impl fmt::Display for PtoModeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PtoModeName::Modelled => "modelled",
            PtoModeName::Learned => "learned",
        })
    }
}

impl FromStr for PtoModeName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "modelled" => Ok(PtoModeName::Modelled),
            "learned" => Ok(PtoModeName::Learned),
            other => Err(format!("unknown forward mode {other:?} (expected modelled or learned)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

/// Every knob of an experiment. Serialized as `key=value` lines into each
/// output so results can be traced back to the settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mesh_n: usize,
    pub m_train: usize,
    pub m_test: usize,
    pub delta: f64,
    pub alpha: f64,
    pub pto_mode: PtoModeName,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub sensors: usize,
    pub biot: f64,
    pub prior_seed: u64,
    pub noise_seed: u64,
    pub sensor_seed: u64,
    pub test_prior_seed: u64,
    pub test_noise_seed: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub test_index: usize,
    pub k_std: f64,
    pub laplace_tol: f64,
    pub laplace_max_iter: usize,
    pub timing_evals: usize,
    pub precision: Precision,
    pub output_dir: PathBuf,
    /// Defaults to `dataset_train.csv` inside `output_dir`.
    pub train_data: Option<PathBuf>,
    /// Defaults to `dataset_test.csv` inside `output_dir`.
    pub test_data: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mesh_n: 20,
            m_train: 500,
            m_test: 20,
            delta: 0.0,
            alpha: 0.001,
            pto_mode: PtoModeName::Modelled,
            epochs: 100,
            batch_size: 100,
            learning_rate: 1e-3,
            encoder_hidden: vec![500; 5],
            decoder_hidden: vec![500; 2],
            sensors: 10,
            biot: 0.5,
            prior_seed: 1,
            noise_seed: 2,
            sensor_seed: 3,
            test_prior_seed: 101,
            test_noise_seed: 102,
            init_seed: 4,
            shuffle_seed: 5,
            test_index: 0,
            k_std: 3.0,
            laplace_tol: 1e-6,
            laplace_max_iter: 25,
            timing_evals: 20,
            precision: Precision::F64,
            output_dir: PathBuf::from("run"),
            train_data: None,
            test_data: None,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "mesh_n",
    "m_train",
    "m_test",
    "delta",
    "alpha",
    "pto_mode",
    "epochs",
    "batch_size",
    "learning_rate",
    "encoder_hidden",
    "decoder_hidden",
    "sensors",
    "biot",
    "prior_seed",
    "noise_seed",
    "sensor_seed",
    "test_prior_seed",
    "test_noise_seed",
    "init_seed",
    "shuffle_seed",
    "test_index",
    "k_std",
    "laplace_tol",
    "laplace_max_iter",
    "timing_evals",
    "precision",
    "output_dir",
    "train_data",
    "test_data",
];

fn parse<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String>
where
    V::Err: fmt::Display,
{
    value.trim().parse().map_err(|e| format!("{key}: {e}"))
}

fn parse_widths(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s)).collect()
}

fn widths(w: &[usize]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let opt_path = |v: &str| if v.trim().is_empty() { None } else { Some(PathBuf::from(v.trim())) };
        match key {
            "mesh_n" => self.mesh_n = parse(key, value)?,
            "m_train" => self.m_train = parse(key, value)?,
            "m_test" => self.m_test = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "pto_mode" => self.pto_mode = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse_widths(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse_widths(key, value)?,
            "sensors" => self.sensors = parse(key, value)?,
            "biot" => self.biot = parse(key, value)?,
            "prior_seed" => self.prior_seed = parse(key, value)?,
            "noise_seed" => self.noise_seed = parse(key, value)?,
            "sensor_seed" => self.sensor_seed = parse(key, value)?,
            "test_prior_seed" => self.test_prior_seed = parse(key, value)?,
            "test_noise_seed" => self.test_noise_seed = parse(key, value)?,
            "init_seed" => self.init_seed = parse(key, value)?,
            "shuffle_seed" => self.shuffle_seed = parse(key, value)?,
            "test_index" => self.test_index = parse(key, value)?,
            "k_std" => self.k_std = parse(key, value)?,
            "laplace_tol" => self.laplace_tol = parse(key, value)?,
            "laplace_max_iter" => self.laplace_max_iter = parse(key, value)?,
            "timing_evals" => self.timing_evals = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            "train_data" => self.train_data = opt_path(value),
            "test_data" => self.test_data = opt_path(value),
            other => return Err(format!("unknown configuration key {other:?}")),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let v: Vec<(&str, String)> = vec![
            ("mesh_n", self.mesh_n.to_string()),
            ("m_train", self.m_train.to_string()),
            ("m_test", self.m_test.to_string()),
            ("delta", self.delta.to_string()),
            ("alpha", self.alpha.to_string()),
            ("pto_mode", self.pto_mode.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("encoder_hidden", widths(&self.encoder_hidden)),
            ("decoder_hidden", widths(&self.decoder_hidden)),
            ("sensors", self.sensors.to_string()),
            ("biot", self.biot.to_string()),
            ("prior_seed", self.prior_seed.to_string()),
            ("noise_seed", self.noise_seed.to_string()),
            ("sensor_seed", self.sensor_seed.to_string()),
            ("test_prior_seed", self.test_prior_seed.to_string()),
            ("test_noise_seed", self.test_noise_seed.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("shuffle_seed", self.shuffle_seed.to_string()),
            ("test_index", self.test_index.to_string()),
            ("k_std", self.k_std.to_string()),
            ("laplace_tol", self.laplace_tol.to_string()),
            ("laplace_max_iter", self.laplace_max_iter.to_string()),
            ("timing_evals", self.timing_evals.to_string()),
            ("precision", self.precision.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("train_data", path(&self.train_data)),
            ("test_data", path(&self.test_data)),
        ];
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Same lines prefixed with `# `, for embedding in CSV outputs.
    pub fn to_comment_block(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
    }

    /// Applies `key=value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, found {raw:?}"),
            })?;
            self.set(k.trim(), v).map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha={} must lie in (0, 1)", self.alpha));
        }
        if self.mesh_n == 0 {
            return bad("mesh_n must be positive".into());
        }
        if self.m_train == 0 || self.batch_size == 0 {
            return bad("m_train and batch_size must be positive".into());
        }
        if !(self.delta >= 0.0) {
            return bad(format!("delta={} must be non-negative", self.delta));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if self.sensors == 0 || self.sensors > (self.mesh_n + 1) * (self.mesh_n + 1) {
            return bad(format!("sensors={} must lie in 1..=nodes", self.sensors));
        }
        Ok(())
    }

    /// Training batch size, capped at the training-set size.
    pub fn effective_batch(&self, m: usize) -> usize {
        self.batch_size.min(m)
    }

    pub fn train_path(&self) -> PathBuf {
        self.train_data.clone().unwrap_or_else(|| self.output_dir.join("dataset_train.csv"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.test_data.clone().unwrap_or_else(|| self.output_dir.join("dataset_test.csv"))
    }

    /// Slow configurations are accepted but worth a notice.
    pub fn is_full_scale(&self) -> bool {
        self.mesh_n >= 50
    }
}
