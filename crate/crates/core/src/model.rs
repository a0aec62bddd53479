//! The full detector: embedding, hybrid pyramid and heads.

use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::head::{Heads, LevelOutput, RawDetectorOutput, RawLevel};
use crate::rng::seeded;
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::{Matrix, Real};

/// Everything needed to rebuild a detector's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub spec: ModelSpec,
    pub encoder: Encoder,
    pub heads: Heads,
}

impl Detector {
    /// Builds the layer layout and freshly initialised parameters.
    pub fn new<S: Real>(spec: &ModelSpec, seed: u64) -> Result<(Self, ParamStore<S>)> {
        if spec.input_dim == 0 || spec.num_classes == 0 {
            return Err(Error::Config("input_dim and num_classes must be positive".into()));
        }
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, spec.input_dim, &spec.encoder, &mut rng)?;
        let heads = Heads::new(&mut store, spec.encoder.dim, spec.num_classes, &mut rng);
        Ok((Self { spec: spec.clone(), encoder, heads }, store))
    }

    /// Records the forward pass; `valid` rows of `features` are real, the rest padding.
    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        features: Var,
        valid: usize,
        dropout: Option<Vec<S>>,
    ) -> Result<Vec<LevelOutput>> {
        let x0 = self.encoder.embed(tape, features, dropout)?;
        let levels = self.encoder.pyramid(tape, x0, valid)?;
        levels.iter().map(|l| self.heads.forward(tape, l)).collect()
    }

    /// Evaluation-mode raw outputs for one video.
    pub fn infer<S: Real>(&self, store: &ParamStore<S>, seq: &FeatureSequence) -> Result<RawDetectorOutput> {
        let mut tape = Tape::new(store);
        let x = tape.constant(seq.features.cast::<S>());
        let outputs = self.forward(&mut tape, x, seq.len(), None)?;
        let levels = outputs
            .iter()
            .map(|o| RawLevel {
                stride: o.stride,
                logits: to_f32(tape.value(o.logits)),
                distances: to_f32(tape.value(o.distances)),
            })
            .collect();
        Ok(RawDetectorOutput {
            video_id: seq.video_id.clone(),
            duration_s: seq.duration_s,
            feature_fps: seq.feature_fps,
            num_classes: self.spec.num_classes,
            levels,
        })
    }
}

fn to_f32<S: Real>(m: &Matrix<S>) -> Matrix<f32> {
    m.cast()
}
