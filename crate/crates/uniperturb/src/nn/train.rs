//! Toy-scale victim training: mini-batch SGD with momentum on the mean CTC
//! loss. Features are extracted once per utterance and cached; per-item
//! gradients within a batch are computed in parallel and reduced in item
//! order, so training is bit-deterministic for a fixed seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Corpus};
use crate::ctc::{ctc_loss, Transcript};
use crate::dsp::{FeatureMatrix, Mfcc, MfccConfig};
use crate::error::{Error, Result};
use crate::nn::{AcousticModel, Arch, Param};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-4,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Train a fresh model of the given architecture on a corpus, minimizing the
/// mean CTC loss between its logits and the manifest transcripts.
pub fn train_model(corpus: &Corpus, arch: Arch, tc: &TrainConfig) -> Result<AcousticModel> {
    tc.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let alphabet = corpus.alphabet().clone();
    let feature_config = MfccConfig::default();
    let mut model = AcousticModel::init(arch, alphabet, feature_config, tc.seed)?;

    // one-time featurization
    let mfcc = Mfcc::new(feature_config)?;
    let prepared: Vec<(FeatureMatrix, Transcript)> =
        par::map_slice(corpus.items(), |item| -> Result<_> {
            let w = read_wav(&item.audio_path)?;
            let (feats, _) = mfcc.forward(w.samples())?;
            Ok((feats, Transcript::new(item.transcript.clone())))
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let mut velocity = model.zero_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size) {
            let results = par::map_slice(batch, |&idx| -> Result<(f64, Vec<Param>)> {
                let (feats, target) = &prepared[idx];
                let (logits, tape) = model.forward(feats)?;
                let (loss, grad_logits) = ctc_loss(&logits, target, model.alphabet())?;
                let (_, grad_params) = model.backward(&tape, &grad_logits)?;
                Ok((loss, grad_params))
            });

            // ordered reduction keeps the update bit-deterministic
            let mut batch_grads = model.zero_grads();
            let mut batch_loss = 0.0;
            for res in results {
                let (loss, grads) = res?;
                batch_loss += loss;
                for (acc, g) in batch_grads.iter_mut().zip(&grads) {
                    for (a, b) in acc.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::DivergedTraining { epoch });
            }
            let scale = 1.0 / batch.len() as f64;

            for ((p, v), g) in model
                .params_mut()
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(&batch_grads)
            {
                for ((pw, vw), gw) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
                    *vw = tc.momentum * *vw - tc.learning_rate * gw * scale;
                    *pw += *vw;
                    if !pw.is_finite() {
                        return Err(Error::DivergedTraining { epoch });
                    }
                }
            }
        }
    }
    Ok(model)
}
