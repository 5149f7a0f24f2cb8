//! Dense rectifier networks with hand-written reverse mode, the Gaussian
//! posterior encoder built on them, Adam, and binary checkpoints.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::scalar::Real;

pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;

/// Hidden widths used by the full-size encoder.
pub const DEFAULT_ENCODER_HIDDEN: [usize; 5] = [500; 5];
pub const DEFAULT_DECODER_HIDDEN: [usize; 2] = [500; 2];

/// Affine layer `W x + b`, `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Real> {
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
}

/// Affine layers with rectifiers between them and an identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real> {
    pub layers: Vec<Dense<T>>,
}

/// Layer inputs recorded during a batched forward pass; column `j` belongs to
/// batch member `j`.
#[derive(Debug, Clone)]
pub struct MlpTape<T: Real> {
    inputs: Vec<DMatrix<T>>,
    pub output: DMatrix<T>,
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer widths {widths:?} must have at least input and output and no zeros"
        )));
    }
    Ok(())
}

impl<T: Real> Mlp<T> {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Self {
            layers: widths
                .windows(2)
                .map(|w| Dense {
                    weight: DMatrix::zeros(w[1], w[0]),
                    bias: DVector::zeros(w[1]),
                })
                .collect(),
        })
    }

    /// Weights and biases uniform on `±1/√fan_in`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.weight.ncols() as f64).sqrt();
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter blocks in layer order, weights then bias.
    pub fn blocks(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks().iter().map(|b| b.len()).collect()
    }

    pub fn axpy(&mut self, a: T, other: &Self) {
        for (x, y) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (xi, yi) in x.iter_mut().zip(y) {
                *xi += a * *yi;
            }
        }
    }

    pub fn scale(&mut self, a: T) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= a);
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .fold(T::zero(), |acc, (a, b)| acc + *a * *b)
    }

    pub fn max_abs(&self) -> T {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn forward(&self, x: &DMatrix<T>) -> Result<MlpTape<T>> {
        check_len("network input", self.input_dim(), x.nrows())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &h;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if i < last {
                z.apply(|v| {
                    if !(*v > T::zero()) {
                        *v = T::zero()
                    }
                });
            }
            inputs.push(h);
            h = z;
        }
        Ok(MlpTape { inputs, output: h })
    }

    pub fn output(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let tape = self.forward(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(tape.output.column(0).into_owned())
    }

    /// Parameter gradients summed over the batch, and the gradient with
    /// respect to the network input.
    pub fn backward(&self, tape: &MlpTape<T>, grad_out: &DMatrix<T>) -> Result<(Self, DMatrix<T>)> {
        check_len("output gradient rows", self.output_dim(), grad_out.nrows())?;
        check_len("output gradient columns", tape.output.ncols(), grad_out.ncols())?;
        let mut grads = self.zeros_like();
        let mut delta = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let input = &tape.inputs[i];
            grads.layers[i].weight = &delta * input.transpose();
            grads.layers[i].bias = delta.column_sum();
            let mut back = self.layers[i].weight.tr_mul(&delta);
            if i > 0 {
                // rectifier mask; subgradient at zero is zero
                back.zip_apply(input, |g, a| {
                    if !(a > T::zero()) {
                        *g = T::zero()
                    }
                });
            }
            delta = back;
        }
        Ok((grads, delta))
    }
}

/// Encoder from observations to `(posterior mean, log posterior std)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T: Real> {
    pub net: Mlp<T>,
    pub seed: u64,
    pub clamp: (T, T),
}

/// Batched encoder outputs with the tape needed for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodedBatch<T: Real> {
    pub mu: DMatrix<T>,
    pub log_sigma: DMatrix<T>,
    /// Pre-clamp log-std head values.
    pub raw_log_sigma: DMatrix<T>,
    pub tape: MlpTape<T>,
}

impl<T: Real> EncodedBatch<T> {
    pub fn clamp_events(&self) -> usize {
        self.raw_log_sigma
            .iter()
            .zip(self.log_sigma.iter())
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Output-bias initialization for the encoder heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadInit<T> {
    pub mean: T,
    pub log_std: T,
}

/// Builds an encoder `q → hidden… → 2d` with fan-in uniform weights and the
/// output biases set to `head`.
pub fn init_encoder<T: Real>(
    q: usize,
    d: usize,
    hidden: &[usize],
    head: HeadInit<T>,
    seed: u64,
) -> Result<EncoderParams<T>> {
    if q == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "encoder needs positive input and output widths (q={q}, d={d})"
        )));
    }
    let mut widths = vec![q];
    widths.extend_from_slice(hidden);
    widths.push(2 * d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::init(&widths, &mut rng)?;
    let bias = &mut net.layers.last_mut().unwrap().bias;
    for i in 0..d {
        bias[i] = head.mean;
        bias[d + i] = head.log_std;
    }
    Ok(EncoderParams {
        net,
        seed,
        clamp: (T::lit(LOG_SIGMA_MIN), T::lit(LOG_SIGMA_MAX)),
    })
}

impl<T: Real> EncoderParams<T> {
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn param_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    /// Columns of `ys` are observation vectors.
    pub fn encode_batch(&self, ys: &DMatrix<T>) -> Result<EncodedBatch<T>> {
        let tape = self.net.forward(ys)?;
        let d = self.param_dim();
        let b = ys.ncols();
        let mu = tape.output.rows(0, d).into_owned();
        let raw = tape.output.rows(d, d).into_owned();
        let (lo, hi) = self.clamp;
        let log_sigma = raw.map(|v| v.max(lo).min(hi));
        debug_assert_eq!(mu.ncols(), b);
        Ok(EncodedBatch {
            mu,
            log_sigma,
            raw_log_sigma: raw,
            tape,
        })
    }

    pub fn encode(&self, y: &DVector<T>) -> Result<(DVector<T>, DVector<T>)> {
        let out = self.encode_batch(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()))?;
        Ok((out.mu.column(0).into_owned(), out.log_sigma.column(0).into_owned()))
    }

    /// Parameter gradients summed over the batch for upstream gradients with
    /// respect to the clamped outputs.
    pub fn backward_batch(
        &self,
        batch: &EncodedBatch<T>,
        grad_mu: &DMatrix<T>,
        grad_log_sigma: &DMatrix<T>,
    ) -> Result<Mlp<T>> {
        let d = self.param_dim();
        check_len("mean gradient rows", d, grad_mu.nrows())?;
        check_len("log-std gradient rows", d, grad_log_sigma.nrows())?;
        let (lo, hi) = self.clamp;
        let mut g = DMatrix::zeros(2 * d, grad_mu.ncols());
        g.rows_mut(0, d).copy_from(grad_mu);
        let mut gs = grad_log_sigma.clone();
        gs.zip_apply(&batch.raw_log_sigma, |g, raw| {
            if raw < lo || raw > hi {
                *g = T::zero()
            }
        });
        g.rows_mut(d, d).copy_from(&gs);
        Ok(self.net.backward(&batch.tape, &g)?.0)
    }
}

/// Exact gradients of a scalar loss through the encoder for one observation.
pub fn encoder_backward<T: Real>(
    params: &EncoderParams<T>,
    y: &DVector<T>,
    grad_mu: &DVector<T>,
    grad_log_sigma: &DVector<T>,
) -> Result<Mlp<T>> {
    let d = params.param_dim();
    check_len("mean gradient", d, grad_mu.len())?;
    check_len("log-std gradient", d, grad_log_sigma.len())?;
    let batch = params.encode_batch(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()))?;
    params.backward_batch(
        &batch,
        &DMatrix::from_column_slice(d, 1, grad_mu.as_slice()),
        &DMatrix::from_column_slice(d, 1, grad_log_sigma.as_slice()),
    )
}

/// Bias-corrected Adam over an ordered list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(block_sizes: &[usize], learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
            step: 0,
            first: block_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: block_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_net(net: &Mlp<T>, learning_rate: T) -> Self {
        Self::new(&net.block_sizes(), learning_rate)
    }

    pub fn update(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), self.first.len(), "parameter block count");
        assert_eq!(grads.len(), self.first.len(), "gradient block count");
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            assert_eq!(p.len(), m.len(), "block {k} size");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

/// One Adam update of a network.
pub fn adam_step<T: Real>(state: &mut AdamState<T>, params: &mut Mlp<T>, grads: &Mlp<T>) {
    state.update(params.blocks_mut(), grads.blocks());
}

const CHECKPOINT_MAGIC: &str = "uqvae-network-checkpoint v1";

/// Writes a text header followed by the parameters as little-endian `f64`,
/// layer by layer, weights row-major then bias.
pub fn write_checkpoint<T: Real, W: Write>(
    mut w: W,
    net: &Mlp<T>,
    header: &[(String, String)],
) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    let widths: Vec<String> = net.widths().iter().map(|x| x.to_string()).collect();
    writeln!(w, "widths {}", widths.join(" "))?;
    for (k, v) in header {
        writeln!(w, "{k} {v}")?;
    }
    writeln!(w, "payload f64-le {}", net.param_count())?;
    writeln!(w, "end-header")?;
    for layer in &net.layers {
        for r in 0..layer.weight.nrows() {
            for c in 0..layer.weight.ncols() {
                w.write_all(&layer.weight[(r, c)].to_f64_lossy().to_le_bytes())?;
            }
        }
        for b in layer.bias.iter() {
            w.write_all(&b.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<T: Real, R: BufRead>(mut r: R) -> Result<(Mlp<T>, BTreeMap<String, String>)> {
    let mut header = BTreeMap::new();
    let mut widths = None;
    let mut count = None;
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        lineno += 1;
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Parse {
                line: lineno,
                msg: "checkpoint header not terminated".into(),
            });
        }
        let l = line.trim_end();
        if lineno == 1 {
            if l != CHECKPOINT_MAGIC {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("unexpected magic {l:?}"),
                });
            }
            continue;
        }
        if l == "end-header" {
            break;
        }
        let (k, v) = l.split_once(' ').unwrap_or((l, ""));
        match k {
            "widths" => {
                let ws = v
                    .split_whitespace()
                    .map(|x| x.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse {
                        line: lineno,
                        msg: e.to_string(),
                    })?;
                widths = Some(ws);
            }
            "payload" => {
                let n = v.strip_prefix("f64-le ").and_then(|x| x.parse::<usize>().ok());
                count = Some(n.ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("bad payload descriptor {v:?}"),
                })?);
            }
            _ => {
                header.insert(k.to_string(), v.to_string());
            }
        }
    }
    let widths = widths.ok_or_else(|| Error::Schema("checkpoint lacks widths".into()))?;
    let mut net = Mlp::zeros(&widths)?;
    let count = count.ok_or_else(|| Error::Schema("checkpoint lacks payload size".into()))?;
    if count != net.param_count() {
        return Err(Error::Schema(format!(
            "payload holds {count} values but widths imply {}",
            net.param_count()
        )));
    }
    let mut buf = [0u8; 8];
    let mut next = |r: &mut R| -> Result<T> {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Schema("checkpoint payload truncated".into()))?;
        Ok(T::lit(f64::from_le_bytes(buf)))
    };
    for layer in &mut net.layers {
        for row in 0..layer.weight.nrows() {
            for c in 0..layer.weight.ncols() {
                layer.weight[(row, c)] = next(&mut r)?;
            }
        }
        for i in 0..layer.bias.len() {
            layer.bias[i] = next(&mut r)?;
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Schema(format!("{} trailing bytes after payload", rest.len())));
    }
    Ok((net, header))
}

impl<T: Real> EncoderParams<T> {
    pub fn save(&self, path: impl AsRef<Path>, extra: &[(String, String)]) -> Result<()> {
        let mut header = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("clamp".to_string(), format!("{} {}", self.clamp.0, self.clamp.1)),
        ];
        header.extend_from_slice(extra);
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(f, &self.net, &header)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, String>)> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (net, header) = read_checkpoint::<T, _>(f)?;
        let seed = header
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Schema("encoder checkpoint lacks seed".into()))?;
        let clamp = header
            .get("clamp")
            .and_then(|s| {
                let mut it = s.split_whitespace().map(|x| x.parse::<f64>());
                match (it.next(), it.next()) {
                    (Some(Ok(a)), Some(Ok(b))) => Some((T::lit(a), T::lit(b))),
                    _ => None,
                }
            })
            .ok_or_else(|| Error::Schema("encoder checkpoint lacks clamp range".into()))?;
        if net.output_dim() % 2 != 0 {
            return Err(Error::Schema("encoder output width must be even".into()));
        }
        Ok((EncoderParams { net, seed, clamp }, header))
    }
}
