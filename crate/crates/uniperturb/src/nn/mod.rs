//! Victim acoustic models over MFCC features with hand-written
//! reverse-mode gradients.
//!
//! Two architectures share the feature front-end but have disjoint
//! parameter shapes: a context-window MLP with clipped-ReLU activations
//! (`DsLite`) and a dilated 1-D convolution stack with tanh activations and
//! residual connections (`WnLite`).

mod ds_lite;
mod train;
mod wn_lite;

pub use train::{train_model, TrainConfig};

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet::Alphabet;
use crate::audio::Waveform;
use crate::ctc::{greedy_decode, Transcript};
use crate::dsp::{FeatureMatrix, Mfcc, MfccConfig};
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Architecture tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "ds_lite")]
    DsLite,
    #[serde(rename = "wn_lite")]
    WnLite,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::DsLite => "ds_lite",
            Arch::WnLite => "wn_lite",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ds_lite" => Ok(Arch::DsLite),
            "wn_lite" => Ok(Arch::WnLite),
            other => Err(Error::InvalidConfig(format!("unknown arch {other:?}"))),
        }
    }
}

/// A named parameter tensor. Shapes are row-major; `data.len()` equals the
/// product of `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub(crate) fn zeros_like(&self) -> Param {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }
}

/// Per-frame unnormalized scores over alphabet plus blank (last column).
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    values: Mat,
}

impl Logits {
    pub fn new(values: Mat) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }
}

/// Activations recorded by a forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub enum ModelTape {
    DsLite(ds_lite::Tape),
    WnLite(wn_lite::Tape),
}

/// A victim model: architecture tag, parameters, alphabet, and the feature
/// configuration its inputs were extracted with.
#[derive(Clone, Debug)]
pub struct AcousticModel {
    arch: Arch,
    alphabet: Alphabet,
    feature_config: MfccConfig,
    params: Vec<Param>,
}

/// Draw parameters uniformly from [-s, s] with s = 1/sqrt(fan_in).
fn init_param(
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: Vec<usize>,
    fan_in: usize,
) -> Param {
    let s = 1.0 / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-s..=s)).collect();
    Param {
        name: name.to_string(),
        shape,
        data,
    }
}

impl AcousticModel {
    /// Context-window MLP with the given hidden sizes.
    pub fn init_ds_lite(
        alphabet: Alphabet,
        feature_config: MfccConfig,
        hidden: [usize; 2],
        seed: u64,
    ) -> Result<Self> {
        feature_config.validate()?;
        if hidden[0] == 0 || hidden[1] == 0 {
            return Err(Error::InvalidConfig("hidden sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = ds_lite::WINDOW_FRAMES * feature_config.n_coeffs;
        let classes = alphabet.num_classes();
        let params = vec![
            init_param(&mut rng, "w1", vec![in_dim, hidden[0]], in_dim),
            init_param(&mut rng, "b1", vec![hidden[0]], in_dim),
            init_param(&mut rng, "w2", vec![hidden[0], hidden[1]], hidden[0]),
            init_param(&mut rng, "b2", vec![hidden[1]], hidden[0]),
            init_param(&mut rng, "w3", vec![hidden[1], classes], hidden[1]),
            init_param(&mut rng, "b3", vec![classes], hidden[1]),
        ];
        Ok(Self {
            arch: Arch::DsLite,
            alphabet,
            feature_config,
            params,
        })
    }

    /// Dilated convolution stack with the given channel width.
    pub fn init_wn_lite(
        alphabet: Alphabet,
        feature_config: MfccConfig,
        channels: usize,
        seed: u64,
    ) -> Result<Self> {
        feature_config.validate()?;
        if channels == 0 {
            return Err(Error::InvalidConfig("channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_coeffs = feature_config.n_coeffs;
        let classes = alphabet.num_classes();
        let mut params = vec![
            init_param(&mut rng, "proj_w", vec![n_coeffs, channels], n_coeffs),
            init_param(&mut rng, "proj_b", vec![channels], n_coeffs),
        ];
        for (i, _dilation) in wn_lite::DILATIONS.iter().enumerate() {
            let fan_in = channels * wn_lite::KERNEL;
            params.push(init_param(
                &mut rng,
                &format!("conv{}_w", i + 1),
                vec![channels, channels, wn_lite::KERNEL],
                fan_in,
            ));
            params.push(init_param(
                &mut rng,
                &format!("conv{}_b", i + 1),
                vec![channels],
                fan_in,
            ));
        }
        params.push(init_param(&mut rng, "out_w", vec![channels, classes], channels));
        params.push(init_param(&mut rng, "out_b", vec![classes], channels));
        Ok(Self {
            arch: Arch::WnLite,
            alphabet,
            feature_config,
            params,
        })
    }

    /// Default-size model for an architecture (hidden 256/256, channels 64).
    pub fn init(arch: Arch, alphabet: Alphabet, feature_config: MfccConfig, seed: u64) -> Result<Self> {
        match arch {
            Arch::DsLite => Self::init_ds_lite(alphabet, feature_config, [256, 256], seed),
            Arch::WnLite => Self::init_wn_lite(alphabet, feature_config, 64, seed),
        }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    /// Identifier used to tag evaluations and perturbation provenance.
    pub fn model_id(&self) -> &'static str {
        self.arch.as_str()
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn feature_config(&self) -> &MfccConfig {
        &self.feature_config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.alphabet.num_classes()
    }

    /// Zero-valued gradient/velocity buffers matching the parameter list.
    pub fn zero_grads(&self) -> Vec<Param> {
        self.params.iter().map(Param::zeros_like).collect()
    }

    /// Run the network over a feature matrix, returning logits and the tape
    /// for the backward pass.
    pub fn forward(&self, feats: &FeatureMatrix) -> Result<(Logits, ModelTape)> {
        if feats.config() != &self.feature_config {
            return Err(Error::ShapeMismatch(
                "features were extracted with a different front-end config".into(),
            ));
        }
        match self.arch {
            Arch::DsLite => {
                let (logits, tape) = ds_lite::forward(&self.params, feats.values(), self.num_classes())?;
                Ok((logits, ModelTape::DsLite(tape)))
            }
            Arch::WnLite => {
                let (logits, tape) = wn_lite::forward(&self.params, feats.values(), self.num_classes())?;
                Ok((logits, ModelTape::WnLite(tape)))
            }
        }
    }

    /// Exact reverse-mode gradients with respect to the input features (for
    /// the attack) and the parameters (for training).
    pub fn backward(&self, tape: &ModelTape, grad_logits: &Mat) -> Result<(Mat, Vec<Param>)> {
        match (self.arch, tape) {
            (Arch::DsLite, ModelTape::DsLite(t)) => ds_lite::backward(&self.params, t, grad_logits),
            (Arch::WnLite, ModelTape::WnLite(t)) => wn_lite::backward(&self.params, t, grad_logits),
            _ => Err(Error::ShapeMismatch(
                "tape does not match the model architecture".into(),
            )),
        }
    }

    /// Greedy transcription of a waveform: features, forward pass, best-path
    /// decode. No language model, no beam search.
    pub fn transcribe(&self, w: &Waveform) -> Result<Transcript> {
        let mfcc = Mfcc::new(self.feature_config)?;
        self.transcribe_with(&mfcc, w)
    }

    /// Transcription reusing a prebuilt front-end (hot loops).
    pub fn transcribe_with(&self, mfcc: &Mfcc, w: &Waveform) -> Result<Transcript> {
        let (feats, _) = mfcc.forward(w.samples())?;
        let (logits, _) = self.forward(&feats)?;
        Ok(greedy_decode(&logits, &self.alphabet))
    }

    /// Serialize: one-line JSON header (arch, alphabet, feature config,
    /// parameter names and shapes) followed by raw little-endian f32 blocks
    /// in header order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ModelHeader {
            arch: self.arch,
            alphabet: self.alphabet.clone(),
            feature_config: self.feature_config,
            params: self
                .params
                .iter()
                .map(|p| ParamHeader {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for p in &self.params {
            for &v in &p.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CorruptFile("model file has no header line".into()))?;
        let header: ModelHeader = serde_json::from_slice(&bytes[..nl])?;
        let mut at = nl + 1;
        let mut params = Vec::with_capacity(header.params.len());
        for ph in &header.params {
            let len: usize = ph.shape.iter().product();
            let end = at + 4 * len;
            if end > bytes.len() {
                return Err(Error::CorruptFile(format!(
                    "parameter block {} is truncated",
                    ph.name
                )));
            }
            let data = bytes[at..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.push(Param {
                name: ph.name.clone(),
                shape: ph.shape.clone(),
                data,
            });
            at = end;
        }
        if at != bytes.len() {
            return Err(Error::CorruptFile("trailing bytes after parameters".into()));
        }
        Ok(Self {
            arch: header.arch,
            alphabet: header.alphabet,
            feature_config: header.feature_config,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    arch: Arch,
    alphabet: Alphabet,
    feature_config: MfccConfig,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}
