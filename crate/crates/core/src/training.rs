//! Mini-batch Adam training of the encoder (and decoder, when the forward
//! map is learned) on a dataset of training pairs.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder_net::{adam_step, AdamState, EncoderParams, Mlp};
use crate::error::{Error, Result};
use crate::forward::ForwardMap;
use crate::gaussian::GaussianDensity;
use crate::scalar::Real;
use crate::uqvae_loss::{total_loss_and_grads, EpochLog, LossBatch, PtoMode, PriorTerm};

/// Relative noise floor: the training noise standard deviation is at least
/// this fraction of the sample's largest observation magnitude.
pub const NOISE_FLOOR_REL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings<T> {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: T,
    pub alpha: T,
    pub shuffle_seed: u64,
}

/// Training pairs as columns with the per-sample noise model.
#[derive(Debug, Clone)]
pub struct TrainData<T: Real> {
    pub u: DMatrix<T>,
    pub y: DMatrix<T>,
    pub noise: Vec<GaussianDensity<T>>,
}

impl<T: Real> TrainData<T> {
    /// Columns from row-major samples, with `N(0, s_i² I)` noise where
    /// `s_i = max(σ_i, NOISE_FLOOR_REL · max_j |y_ij|)`.
    pub fn new(u_rows: &DMatrix<T>, y_rows: &DMatrix<T>, sigma: &DVector<T>) -> Result<Self> {
        let q = y_rows.ncols();
        let noise = (0..y_rows.nrows())
            .map(|i| {
                let floor = T::lit(NOISE_FLOOR_REL) * y_rows.row(i).amax();
                let s = sigma[i].max(floor);
                if !(s > T::zero()) {
                    return Err(Error::InvalidArgument(format!(
                        "sample {i} has zero observations and zero noise"
                    )));
                }
                GaussianDensity::isotropic(DVector::zeros(q), s * s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            u: u_rows.transpose(),
            y: y_rows.transpose(),
            noise,
        })
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn columns(&self, idx: &[usize]) -> (DMatrix<T>, DMatrix<T>, Vec<GaussianDensity<T>>) {
        let pick = |m: &DMatrix<T>| DMatrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])]);
        (pick(&self.u), pick(&self.y), idx.iter().map(|&i| self.noise[i].clone()).collect())
    }
}

/// Forward model choice for training.
#[derive(Clone, Copy)]
pub enum ForwardChoice<'a, T: Real> {
    Modelled(&'a dyn ForwardMap<T>),
    Learned,
}

/// Parameters and optimizer state, updated in place.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real> {
    pub encoder: EncoderParams<T>,
    pub decoder: Option<Mlp<T>>,
    adam_encoder: AdamState<T>,
    adam_decoder: Option<AdamState<T>>,
}

impl<T: Real> TrainState<T> {
    pub fn new(encoder: EncoderParams<T>, decoder: Option<Mlp<T>>, learning_rate: T) -> Self {
        Self {
            adam_encoder: AdamState::for_net(&encoder.net, learning_rate),
            adam_decoder: decoder.as_ref().map(|d| AdamState::for_net(d, learning_rate)),
            encoder,
            decoder,
        }
    }
}

/// Runs `settings.epochs` epochs. Row 0 of the log evaluates the initial
/// parameters on the whole set; row `e` averages the batch losses of epoch
/// `e`. On a non-finite loss `state` keeps the last good parameters.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    data: &TrainData<T>,
    forward: ForwardChoice<'_, T>,
    prior: &PriorTerm<T>,
    settings: &TrainSettings<T>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if settings.batch_size == 0 || settings.batch_size > data.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} must lie in 1..={}",
            settings.batch_size,
            data.len()
        )));
    }
    if matches!(forward, ForwardChoice::Learned) && state.decoder.is_none() {
        return Err(Error::InvalidArgument("learned forward map needs a decoder".into()));
    }
    state.adam_encoder.learning_rate = settings.learning_rate;
    if let Some(a) = state.adam_decoder.as_mut() {
        a.learning_rate = settings.learning_rate;
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.shuffle_seed);
    let mut logs = Vec::with_capacity(settings.epochs + 1);
    let all: Vec<usize> = (0..data.len()).collect();
    let eval = |state: &TrainState<T>, idx: &[usize], rng: &mut ChaCha8Rng| {
        let (u, y, noise) = data.columns(idx);
        let batch = LossBatch { u: &u, y: &y, noise: &noise };
        let mode = match (forward, state.decoder.as_ref()) {
            (ForwardChoice::Modelled(op), _) => PtoMode::Modelled(op),
            (ForwardChoice::Learned, Some(dec)) => PtoMode::Learned(dec),
            (ForwardChoice::Learned, None) => unreachable!(),
        };
        total_loss_and_grads(batch, &state.encoder, mode, prior, settings.alpha, rng)
    };
    let init = eval(state, &all, &mut ChaCha8Rng::seed_from_u64(settings.shuffle_seed ^ 0x5eed))?;
    let row = |epoch: usize, sums: [f64; 4], n: f64, floor: usize, clamp: usize| EpochLog {
        epoch,
        total: sums[0] / n,
        posterior_term: sums[1] / n,
        likelihood_term: sums[2] / n,
        prior_term: sums[3] / n,
        floor_events: floor,
        clamp_events: clamp,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let b = init.breakdown;
    let first = row(
        0,
        [b.total, b.posterior_term, b.likelihood_term, b.prior_term].map(|v| v.to_f64_lossy()),
        1.0,
        init.floor_events,
        init.clamp_events,
    );
    on_epoch(&first);
    logs.push(first);
    let mut order = all.clone();
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let (mut floor, mut clamp) = (0, 0);
        for chunk in order.chunks(settings.batch_size) {
            let out = eval(state, chunk, &mut rng)?;
            let w = chunk.len() as f64;
            let b = out.breakdown;
            for (s, v) in sums.iter_mut().zip([b.total, b.posterior_term, b.likelihood_term, b.prior_term]) {
                *s += w * v.to_f64_lossy();
            }
            floor += out.floor_events;
            clamp += out.clamp_events;
            adam_step(&mut state.adam_encoder, &mut state.encoder.net, &out.encoder_grads);
            if let (Some(dec), Some(g), Some(adam)) =
                (state.decoder.as_mut(), out.decoder_grads.as_ref(), state.adam_decoder.as_mut())
            {
                adam_step(adam, dec, g);
            }
        }
        let r = row(epoch, sums, data.len() as f64, floor, clamp);
        on_epoch(&r);
        logs.push(r);
    }
    Ok(logs)
}
