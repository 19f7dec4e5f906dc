//! Encoder and decoder parameters under one store.

use std::fmt;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::encoder::{build_encoder, patchify, EncoderArch, LatentCode, LatentDistribution};
use crate::envmap::EnvironmentMap;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamStore};

pub const ENCODER_PREFIX: &str = "enc.";
pub const DECODER_PREFIX: &str = "dec.";

pub struct Model<R: Real> {
    config: ModelConfig,
    pub params: ParamStore<R>,
    encoder: Option<Box<dyn EncoderArch<R>>>,
    decoder: Decoder,
}

impl<R: Real> fmt::Debug for Model<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("encoder", &self.encoder.as_ref().map(|e| e.mode()))
            .field("parameters", &self.params.count(""))
            .finish()
    }
}

impl<R: Real> Clone for Model<R> {
    fn clone(&self) -> Self {
        self.cast::<R>()
    }
}

impl<R: Real> Model<R> {
    /// Encoder plus decoder, initialized from `seed`.
    pub fn vae(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, true, seed)
    }

    /// Decoder only, for the autodecoder baseline.
    pub fn decoder_only(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, false, seed)
    }

    fn build(config: &ModelConfig, with_encoder: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let decoder = Decoder::new(&mut b.scope("dec"), &config.decoder_config());
        let encoder = if with_encoder {
            Some(build_encoder(
                &config.encoder,
                &mut b.scope("enc"),
                &config.encoder_config(),
            )?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            decoder,
        })
    }

    /// Same model in another precision.
    pub fn cast<S: Real>(&self) -> Model<S> {
        let mut m = Model::<S>::build(&self.config, self.encoder.is_some(), 0).expect("config already validated");
        m.params = self.params.cast();
        m
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn has_encoder(&self) -> bool {
        self.encoder.is_some()
    }

    pub fn encoder(&self) -> Option<&dyn EncoderArch<R>> {
        self.encoder.as_deref()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    fn require_encoder(&self) -> Result<&dyn EncoderArch<R>> {
        self.encoder
            .as_deref()
            .ok_or_else(|| Error::Invalid("model has no encoder".into()))
    }

    /// Exposure-normalized patch tokens for `map` at the model resolution.
    pub fn encoder_input(&self, map: &EnvironmentMap) -> Result<Array3<f32>> {
        let c = &self.config;
        if (map.height(), map.width()) != (c.height, c.width) {
            return Err(Error::Resolution {
                got_h: map.height(),
                got_w: map.width(),
                want_h: c.height,
                want_w: c.width,
            });
        }
        let (patches, _) = patchify(map, c.patches, c.height)?.exposure_normalized();
        Ok(patches.tokens().clone())
    }

    /// `(mu, log_var)` on `tape` for prepared encoder input.
    pub fn encode_var(&self, tape: &Tape<R>, p: &Bound, input: &Array3<f32>) -> Result<(Var, Var)> {
        let enc = self.require_encoder()?;
        let x = tape.constant(input.mapv(|v| R::lit(v as f64)).into_dyn());
        Ok(enc.forward(tape, p, x)?)
    }

    pub fn encode(&self, map: &EnvironmentMap) -> Result<LatentDistribution> {
        let input = self.encoder_input(map)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, &[]);
        let (mu, lv) = self.encode_var(&tape, &p, &input)?;
        let mu = tape
            .value(mu)
            .mapv(|v| v.as_f64())
            .into_dimensionality()
            .expect("2-D mean");
        let log_var = tape
            .value(lv)
            .mapv(|v| v.as_f64())
            .into_dimensionality()
            .expect("1-D log-variance");
        Ok(LatentDistribution { mu, log_var })
    }

    /// Log-radiance rendering.
    pub fn render(&self, z: &LatentCode, height: usize, width: usize) -> Result<Array3<f32>> {
        self.check_latent(z)?;
        Ok(self.decoder.render(&self.params, z, height, width)?)
    }

    pub fn render_envmap(&self, z: &LatentCode, height: usize, width: usize) -> Result<EnvironmentMap> {
        Ok(EnvironmentMap::from_log(&self.render(z, height, width)?)?)
    }

    pub fn decode(&self, z: &LatentCode, dirs: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_latent(z)?;
        Ok(self.decoder.decode(&self.params, z, dirs)?)
    }

    fn check_latent(&self, z: &LatentCode) -> Result<()> {
        if z.0.dim() != (self.config.latent_dim, 3) {
            return Err(Error::Invalid(format!(
                "latent code is {:?}, model expects [{}, 3]",
                z.0.dim(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }
}
