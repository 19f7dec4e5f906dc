//! Training loops and latent fitting.
//!
//! Two strategies share one driver and are looked up by name: `vae`
//! (encoder + decoder with the KLD term) and `autodecoder` (decoder plus a
//! free latent code per training image, regularized by a Gaussian prior).
//! All randomness derives from the seed and the global step, so a run can
//! be checkpointed and resumed bit-exactly.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape};
use crate::config::{ModelConfig, Stage, TrainConfig};
use crate::encoder::{reparameterize_var, standard_noise, LatentCode};
use crate::envmap::EnvironmentMap;
use crate::error::{Error, Result};
use crate::losses::{combined_loss, combined_loss_weighted, kld_loss, latent_prior, LossBreakdown, LossVars};
use crate::model::{Model, DECODER_PREFIX, ENCODER_PREFIX};
use crate::optim::{Adam, AdamState, LatentTable};
use crate::params::Bound;

/// Maps at the model resolution with cached log radiance.
#[derive(Clone, Debug)]
pub struct Dataset {
    maps: Vec<EnvironmentMap>,
    logs: Vec<Array3<f64>>,
}

impl Dataset {
    pub fn new(maps: Vec<EnvironmentMap>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (h, w) = (maps[0].height(), maps[0].width());
        if let Some(m) = maps.iter().find(|m| (m.height(), m.width()) != (h, w)) {
            return Err(Error::Resolution {
                got_h: m.height(),
                got_w: m.width(),
                want_h: h,
                want_w: w,
            });
        }
        let logs = maps.iter().map(|m| m.log_data().mapv(|v| v as f64)).collect();
        Ok(Self { maps, logs })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn map(&self, i: usize) -> &EnvironmentMap {
        &self.maps[i]
    }

    pub fn log(&self, i: usize) -> &Array3<f64> {
        &self.logs[i]
    }

    pub fn maps(&self) -> &[EnvironmentMap] {
        &self.maps
    }
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the combined words.
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_EPOCH: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_LATENT_INIT: u64 = 3;

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Dataset indices for global step `step`: consecutive slices of per-epoch
/// seeded permutations.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let start = step as usize * batch;
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for pos in start..start + batch {
        let (epoch, offset) = (pos / n, pos % n);
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_for(seed, STREAM_EPOCH, epoch as u64));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[offset]);
    }
    out
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub adam: AdamState<f32>,
    pub latents: Option<LatentTable<f32>>,
    pub step: u64,
    pub log: Vec<LossBreakdown>,
}

/// A way of training the decoder, selected by name.
pub trait TrainingStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn init(&self, model: &ModelConfig, config: &TrainConfig) -> Result<TrainState>;

    /// Called before the steps of each curriculum stage.
    fn begin_stage(&self, state: &mut TrainState, data: &Dataset, stage: usize) -> Result<()>;

    /// Loss and gradients for one example, with its parameter gradients
    /// added into `grads` scaled by `weight`.
    fn example(
        &self,
        state: &mut TrainState,
        data: &Dataset,
        index: usize,
        slot: usize,
        weight: f32,
        grads: &mut [Option<ArrayD<f32>>],
    ) -> Result<LossBreakdown>;
}

pub fn training_registry() -> Vec<Box<dyn TrainingStrategy>> {
    vec![Box::new(VaeStrategy), Box::new(AutodecoderStrategy)]
}

pub fn training_strategy(name: &str) -> Result<Box<dyn TrainingStrategy>> {
    let all = training_registry();
    let known = all.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ");
    all.into_iter()
        .find(|s| s.name() == name)
        .ok_or(Error::UnknownStrategy {
            kind: "training strategy",
            name: name.to_string(),
            known,
        })
}

fn accumulate(grads: &mut [Option<ArrayD<f32>>], new: Vec<Option<ArrayD<f32>>>, weight: f32) {
    for (acc, g) in grads.iter_mut().zip(new) {
        if let Some(g) = g {
            match acc {
                Some(a) => a.scaled_add(weight, &g),
                None => *acc = Some(g * weight),
            }
        }
    }
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let f = |g: fn(&LossBreakdown) -> f64| parts.iter().map(g).sum::<f64>() / n;
    LossBreakdown {
        mage: f(|b| b.mage),
        scale_inv: f(|b| b.scale_inv),
        cosine: f(|b| b.cosine),
        kld: f(|b| b.kld),
        combined: f(|b| b.combined),
    }
}

/// Encode, reparameterize with `noise`, decode, and score against `gt_log`.
pub fn vae_loss<R: Real>(
    model: &Model<R>,
    tape: &Tape<R>,
    p: &Bound,
    input: &Array3<f32>,
    gt_log: &Array3<f64>,
    noise: &Array2<f64>,
) -> Result<LossVars> {
    let cfg = model.config();
    let (mu, lv) = model.encode_var(tape, p, input)?;
    let z = reparameterize_var(tape, mu, lv, noise)?;
    let pred = model.decoder().render_var(tape, p, z, cfg.height, cfg.width)?;
    let kld = kld_loss(tape, mu, lv)?;
    Ok(combined_loss(tape, pred, gt_log, kld)?)
}

pub struct VaeStrategy;

impl TrainingStrategy for VaeStrategy {
    fn name(&self) -> &'static str {
        "vae"
    }

    fn init(&self, model: &ModelConfig, config: &TrainConfig) -> Result<TrainState> {
        let model = Model::vae(model, config.seed)?;
        Ok(TrainState {
            adam: AdamState::for_store(&model.params),
            model,
            config: config.clone(),
            latents: None,
            step: 0,
            log: Vec::new(),
        })
    }

    fn begin_stage(&self, _: &mut TrainState, _: &Dataset, _: usize) -> Result<()> {
        Ok(())
    }

    fn example(
        &self,
        state: &mut TrainState,
        data: &Dataset,
        index: usize,
        slot: usize,
        weight: f32,
        grads: &mut [Option<ArrayD<f32>>],
    ) -> Result<LossBreakdown> {
        let model = &state.model;
        let cfg = model.config();
        let input = model.encoder_input(data.map(index))?;
        let tape = Tape::<f32>::new();
        let p = model.params.bind(&tape, &[ENCODER_PREFIX, DECODER_PREFIX]);
        let mut rng = rng_for(state.config.seed, STREAM_NOISE, state.step * 1024 + slot as u64);
        let noise = standard_noise(cfg.latent_dim, &mut rng);
        let loss = vae_loss(model, &tape, &p, &input, data.log(index), &noise)?;
        let breakdown = loss.breakdown(&tape);
        if !breakdown.combined.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step as usize,
            });
        }
        let mut g = tape.backward(loss.combined)?;
        accumulate(grads, model.params.collect_grads(&p, &mut g), weight);
        Ok(breakdown)
    }
}

pub struct AutodecoderStrategy;

impl AutodecoderStrategy {
    /// One `N(0, I)` code per example, drawn independently per index.
    pub fn initial_latents(seed: u64, n: usize, latent_dim: usize) -> LatentTable<f32> {
        let mut codes = ArrayD::zeros(IxDyn(&[n, latent_dim, 3]));
        for i in 0..n {
            let z = standard_noise(latent_dim, &mut rng_for(seed, STREAM_LATENT_INIT, i as u64));
            codes
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&z.mapv(|v| v as f32).into_dyn());
        }
        LatentTable::new(codes)
    }
}

impl TrainingStrategy for AutodecoderStrategy {
    fn name(&self) -> &'static str {
        "autodecoder"
    }

    fn init(&self, model: &ModelConfig, config: &TrainConfig) -> Result<TrainState> {
        let model = Model::decoder_only(model, config.seed)?;
        Ok(TrainState {
            adam: AdamState::for_store(&model.params),
            model,
            config: config.clone(),
            latents: None,
            step: 0,
            log: Vec::new(),
        })
    }

    fn begin_stage(&self, state: &mut TrainState, data: &Dataset, stage: usize) -> Result<()> {
        let fresh = match &state.latents {
            None => true,
            Some(t) => stage > 0 || t.len() != data.len(),
        };
        if fresh {
            let seed = derive_seed(state.config.seed, STREAM_LATENT_INIT, stage as u64);
            state.latents = Some(Self::initial_latents(seed, data.len(), state.model.config().latent_dim));
        }
        Ok(())
    }

    fn example(
        &self,
        state: &mut TrainState,
        data: &Dataset,
        index: usize,
        _slot: usize,
        weight: f32,
        grads: &mut [Option<ArrayD<f32>>],
    ) -> Result<LossBreakdown> {
        let model = &state.model;
        let cfg = model.config();
        let table = state
            .latents
            .as_mut()
            .ok_or_else(|| Error::Invalid("latent table not initialized".into()))?;
        let tape = Tape::<f32>::new();
        let p = model.params.bind(&tape, &[DECODER_PREFIX]);
        let z = tape.leaf(table.row(index));
        let pred = model.decoder().render_var(&tape, &p, z, cfg.height, cfg.width)?;
        let prior = latent_prior(&tape, z)?;
        let loss = combined_loss_weighted(&tape, pred, data.log(index), prior, state.config.prior_weight)?;
        let breakdown = loss.breakdown(&tape);
        if !breakdown.combined.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step as usize,
            });
        }
        let mut g = tape.backward(loss.combined)?;
        if let Some(gz) = g.take(z) {
            table.update_row(&Adam::new(state.config.learning_rate), index, &gz);
        }
        accumulate(grads, model.params.collect_grads(&p, &mut g), weight);
        Ok(breakdown)
    }
}

/// Runs `steps` optimizer steps of `strategy` on `data`.
pub fn train_steps(
    strategy: &dyn TrainingStrategy,
    state: &mut TrainState,
    data: &Dataset,
    steps: usize,
    mut observe: impl FnMut(u64, &LossBreakdown),
) -> Result<()> {
    let (h, w) = (state.model.config().height, state.model.config().width);
    if (data.map(0).height(), data.map(0).width()) != (h, w) {
        return Err(Error::Resolution {
            got_h: data.map(0).height(),
            got_w: data.map(0).width(),
            want_h: h,
            want_w: w,
        });
    }
    let adam = Adam::new(state.config.learning_rate);
    let batch = state.config.batch_size;
    for _ in 0..steps {
        let indices = batch_indices(state.config.seed, state.step, batch, data.len());
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; state.model.params.len()];
        let weight = 1.0 / batch as f32;
        let mut parts = Vec::with_capacity(batch);
        for (slot, &i) in indices.iter().enumerate() {
            parts.push(strategy.example(state, data, i, slot, weight, &mut grads)?);
        }
        state.adam.apply(&adam, &mut state.model.params, &grads);
        let b = mean_breakdown(&parts);
        state.step += 1;
        observe(state.step, &b);
        state.log.push(b);
    }
    Ok(())
}

/// Processes curriculum stages in order.
pub fn train_stages(
    strategy: &dyn TrainingStrategy,
    state: &mut TrainState,
    stages: &[(Dataset, usize)],
    mut observe: impl FnMut(u64, &LossBreakdown),
) -> Result<()> {
    for (k, (data, steps)) in stages.iter().enumerate() {
        strategy.begin_stage(state, data, k)?;
        train_steps(strategy, state, data, *steps, &mut observe)?;
    }
    Ok(())
}

pub fn train_vae(data: &Dataset, model: &ModelConfig, config: &TrainConfig) -> Result<TrainState> {
    let mut state = VaeStrategy.init(model, config)?;
    train_stages(&VaeStrategy, &mut state, &[(data.clone(), config.steps)], |_, _| {})?;
    Ok(state)
}

pub fn train_autodecoder(data: &Dataset, model: &ModelConfig, config: &TrainConfig) -> Result<TrainState> {
    let mut state = AutodecoderStrategy.init(model, config)?;
    train_stages(
        &AutodecoderStrategy,
        &mut state,
        &[(data.clone(), config.steps)],
        |_, _| {},
    )?;
    Ok(state)
}

/// Stage list with datasets loaded by `load`.
pub fn load_stages(stages: &[Stage], mut load: impl FnMut(&Stage) -> Result<Dataset>) -> Result<Vec<(Dataset, usize)>> {
    stages.iter().map(|s| Ok((load(s)?, s.steps))).collect()
}

#[derive(Clone, Debug)]
pub struct LatentFit {
    pub code: LatentCode,
    pub loss: f64,
    /// Best-so-far loss after each iteration.
    pub best_curve: Vec<f64>,
}

/// Optimizes a single latent code against `map` with the decoder frozen,
/// starting from `N(0, I)` drawn from `seed`. Returns the best code seen.
pub fn fit_latent(model: &Model<f32>, map: &EnvironmentMap, config: &TrainConfig, seed: u64) -> Result<LatentFit> {
    let d = model.config().latent_dim;
    let gt = map.log_data().mapv(|v| v as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = LatentTable::new(
        standard_noise(d, &mut rng)
            .mapv(|v| v as f32)
            .insert_axis(ndarray::Axis(0))
            .into_dyn(),
    );
    let adam = Adam::new(config.fit_learning_rate);
    let mut best = (f64::INFINITY, table.row(0));
    let mut curve = Vec::with_capacity(config.fit_iterations);
    for _ in 0..config.fit_iterations {
        let tape = Tape::<f32>::new();
        let p = model.params.bind(&tape, &[]);
        let z = tape.leaf(table.row(0));
        let pred = model.decoder().render_var(&tape, &p, z, map.height(), map.width())?;
        let prior = latent_prior(&tape, z)?;
        let loss = combined_loss_weighted(&tape, pred, &gt, prior, config.prior_weight)?;
        let value = tape.item(loss.combined) as f64;
        if value < best.0 {
            best = (value, table.row(0));
        }
        curve.push(best.0);
        let mut g = tape.backward(loss.combined)?;
        let gz = g.take(z).expect("latent is a leaf");
        table.update_row(&adam, 0, &gz);
    }
    let code = best.1.mapv(|v| v as f64).into_dimensionality().expect("[D, 3] code");
    Ok(LatentFit {
        code: LatentCode(code),
        loss: best.0,
        best_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, 2, n)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, 4, n), batch_indices(3, 7, 4, n));
        assert_ne!(batch_indices(3, 0, 10, n), batch_indices(4, 0, 10, n));
    }

    #[test]
    fn duplicated_examples_get_independent_latents() {
        let t = AutodecoderStrategy::initial_latents(5, 2, 27);
        assert_ne!(t.row(0), t.row(1));
    }

    #[test]
    fn unknown_strategy_is_reported() {
        assert!(training_strategy("vae").is_ok());
        let e = training_strategy("gan").err().unwrap();
        assert!(e.to_string().contains("autodecoder"));
    }
}
