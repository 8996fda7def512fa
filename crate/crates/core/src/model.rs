//! The full network: encoder, fusion and decoder over a shared parameter
//! store.

use std::io::{Read, Write};

use cooptraj_tensor::{checkpoint, KernelError, ParamStore, Tape, Var};
use serde::Serialize;

use crate::config::ModelConfig;
use crate::decoder::{decoder_loss, Decoder, DecoderOutput, LossBreakdown};
use crate::encoder::{Encoder, MapFeatureCache};
use crate::fusion::Fusion;
use crate::geometry::to_global;
use crate::prepare::PreparedScene;
use crate::scene::TrackId;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub ego: Option<Var>,
    pub other: Option<Var>,
    pub fused: Option<Var>,
    pub decoder: Option<DecoderOutput>,
}

/// K hypotheses for one target, in global coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TargetPrediction {
    pub target: TrackId,
    /// `modes[k][t] = [x, y]`.
    pub modes: Vec<Vec<[f64; 2]>>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let encoder = Encoder::new(&mut store, &cfg.encoder, &cfg.ablation)?;
        let fusion = Fusion::new(&mut store, &cfg.encoder, &cfg.fusion)?;
        let decoder = Decoder::new(&mut store, &cfg.encoder, &cfg.decoder)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            fusion,
            decoder,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn new_cache(&self) -> MapFeatureCache {
        MapFeatureCache::new(self.cfg.encoder.map_cache)
    }

    /// Encoder and fusion only.
    pub fn encode(&self, tape: &mut Tape, scene: &PreparedScene, cache: &mut MapFeatureCache) -> Result<ForwardOutput> {
        let s = &self.store;
        let ego = self.encoder.encode_view(tape, s, &scene.ego, &scene.map, cache)?;
        let other = self.encoder.encode_view(tape, s, &scene.other, &scene.map, cache)?;
        let fused = match ego {
            Some(e) => Some(self.fusion.forward(tape, s, e, other, &scene.fusion, &scene.ego, &scene.other)?),
            None => None,
        };
        Ok(ForwardOutput {
            ego,
            other,
            fused,
            decoder: None,
        })
    }

    pub fn forward(&self, tape: &mut Tape, scene: &PreparedScene, cache: &mut MapFeatureCache) -> Result<ForwardOutput> {
        let mut out = self.encode(tape, scene, cache)?;
        if let Some(fused) = out.fused {
            out.decoder = self.decoder.forward(
                tape,
                &self.store,
                fused,
                &scene.decoder,
                &scene.map,
                &self.encoder.map,
                cache,
            )?;
        }
        Ok(out)
    }

    /// Forward plus loss; `None` when the scene has nothing to supervise.
    pub fn loss(
        &self,
        tape: &mut Tape,
        scene: &PreparedScene,
        cache: &mut MapFeatureCache,
    ) -> Result<Option<(Var, LossBreakdown)>> {
        let out = self.forward(tape, scene, cache)?;
        let Some(dec) = out.decoder else {
            return Ok(None);
        };
        Ok(decoder_loss(tape, &dec, &scene.decoder, &self.cfg.decoder)?)
    }

    /// Global-frame hypotheses (refined stage) for every target.
    pub fn predict(&self, scene: &PreparedScene) -> Result<Vec<TargetPrediction>> {
        let mut tape = Tape::new();
        let mut cache = self.new_cache();
        let out = self.forward(&mut tape, scene, &mut cache)?;
        let Some(dec) = out.decoder else {
            return Ok(Vec::new());
        };
        Ok(extract_predictions(&tape, &dec, scene, self.cfg.decoder.modes))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        Ok(checkpoint::save_store(w, &self.store)?)
    }

    pub fn load<R: Read>(cfg: &ModelConfig, r: R) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        checkpoint::load_store(r, &mut m.store)?;
        Ok(m)
    }
}

pub fn extract_predictions(tape: &Tape, dec: &DecoderOutput, scene: &PreparedScene, k: usize) -> Vec<TargetPrediction> {
    let f = tape.shape(dec.refined.x).1;
    let xs = tape.value(dec.refined.x);
    let ys = tape.value(dec.refined.y);
    let logits = tape.value(dec.logits);
    scene
        .decoder
        .targets
        .iter()
        .enumerate()
        .map(|(n, t)| {
            let modes = (0..k)
                .map(|m| {
                    let r = (n * k + m) * f;
                    (0..f).map(|s| to_global(&t.origin, [xs[r + s], ys[r + s]])).collect()
                })
                .collect();
            let row = &logits[n * k..(n + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            TargetPrediction {
                target: t.id.clone(),
                modes,
                probabilities: e.iter().map(|v| v / z).collect(),
            }
        })
        .collect()
}
