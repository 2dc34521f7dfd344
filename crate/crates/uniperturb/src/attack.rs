//! Universal adversarial perturbation search.
//!
//! The inner attack maximizes the CTC loss of a single perturbed utterance
//! against its own clean transcription (no reference labels anywhere) with
//! an l2 penalty on the added perturbation, solved by the iterative gradient
//! sign method with a projection keeping the combined perturbation inside
//! the l-infinity budget. The outer loop walks the training set, attacking
//! every utterance the current universal perturbation does not yet break,
//! and accumulates the per-utterance deltas into the universal vector with
//! a clip back into the budget after every update.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{fit_perturbation, Corpus, Waveform};
use crate::ctc::{ctc_loss, greedy_decode, Transcript};
use crate::dsp::Mfcc;
use crate::error::{Error, Result};
use crate::metrics::{cer, evaluate_prepared, PreparedCorpus};
use crate::nn::AcousticModel;

/// Every scalar hyperparameter of the attack. `epsilon` and `alpha` are in
/// raw int16 sample units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-infinity budget of the universal perturbation.
    pub epsilon: f64,
    /// Desired validation success rate; the outer loop stops once reached.
    pub delta: f64,
    /// CER success threshold t.
    pub threshold: f64,
    /// Sign-step size.
    pub alpha: f64,
    /// Weight of the l2 penalty on the per-utterance perturbation.
    pub reg_c: f64,
    /// Cap on inner sign-method iterations per utterance.
    pub inner_max_iters: usize,
    /// Cap on passes over the training set.
    pub max_epochs: usize,
    /// Fixed length of the universal perturbation in samples.
    pub perturbation_len: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 200.0,
            delta: 1.0,
            threshold: 0.5,
            alpha: 5.0,
            reg_c: 0.5,
            inner_max_iters: 50,
            max_epochs: 20,
            perturbation_len: 150_000,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!(
                "delta {} must be in [0, 1]",
                self.delta
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} must be positive",
                self.alpha
            )));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} must be non-negative",
                self.threshold
            )));
        }
        if self.perturbation_len == 0 {
            return Err(Error::InvalidConfig("perturbation_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// A trained universal perturbation with its provenance.
#[derive(Clone, Debug)]
pub struct UniversalPerturbation {
    samples: Vec<f64>,
    epsilon: f64,
    model_id: String,
    config: AttackConfig,
    /// Validation success rate measured after each outer epoch.
    history: Vec<f64>,
}

impl UniversalPerturbation {
    /// The all-zero perturbation of the configured length.
    pub fn zeros(cfg: &AttackConfig, model_id: impl Into<String>) -> Self {
        Self {
            samples: vec![0.0; cfg.perturbation_len],
            epsilon: cfg.epsilon,
            model_id: model_id.into(),
            config: *cfg,
            history: Vec::new(),
        }
    }

    /// Wrap an existing sample vector (random baselines, file loads). The
    /// samples are clipped into the stated budget so the invariant holds by
    /// construction.
    pub fn from_samples(
        samples: Vec<f64>,
        cfg: &AttackConfig,
        model_id: impl Into<String>,
        history: Vec<f64>,
    ) -> Self {
        let mut samples = samples;
        clip_inf_in_place(&mut samples, cfg.epsilon);
        Self {
            samples,
            epsilon: cfg.epsilon,
            model_id: model_id.into(),
            config: *cfg,
            history,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn config(&self) -> &AttackConfig {
        &self.config
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn inf_norm(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// Number of outer epochs that ran.
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    /// Write the raw little-endian f32 samples to `path` and a JSON sidecar
    /// describing them to `path + ".json"`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut raw = Vec::with_capacity(self.samples.len() * 4);
        for &s in &self.samples {
            raw.extend_from_slice(&(s as f32).to_le_bytes());
        }
        fs::write(path, raw)?;
        let sidecar = PerturbationSidecar {
            epsilon: self.epsilon,
            alpha: self.config.alpha,
            reg_c: self.config.reg_c,
            threshold: self.config.threshold,
            model_id: self.model_id.clone(),
            seed: self.config.seed,
            epochs_run: self.history.len(),
            val_success_history: self.history.clone(),
            config: self.config,
        };
        let mut json = serde_json::to_vec_pretty(&sidecar)?;
        json.push(b'\n');
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let mut raw = Vec::new();
        fs::File::open(path)?.read_to_end(&mut raw)?;
        if raw.len() % 4 != 0 {
            return Err(Error::CorruptFile(
                "perturbation file length is not a multiple of 4".into(),
            ));
        }
        let samples: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let sidecar_file = sidecar_path(path);
        if !sidecar_file.exists() {
            return Err(Error::NotFound(sidecar_file));
        }
        let sidecar: PerturbationSidecar = serde_json::from_slice(&fs::read(&sidecar_file)?)?;
        if samples.len() != sidecar.config.perturbation_len {
            return Err(Error::CorruptFile(format!(
                "perturbation has {} samples, sidecar says {}",
                samples.len(),
                sidecar.config.perturbation_len
            )));
        }
        Ok(Self {
            samples,
            epsilon: sidecar.epsilon,
            model_id: sidecar.model_id,
            config: sidecar.config,
            history: sidecar.val_success_history,
        })
    }

    /// Export as a listening sample (quantized to PCM16).
    pub fn to_waveform(&self) -> Result<Waveform> {
        Waveform::from_samples(self.samples.clone())
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

#[derive(Serialize, Deserialize)]
struct PerturbationSidecar {
    epsilon: f64,
    alpha: f64,
    reg_c: f64,
    threshold: f64,
    model_id: String,
    seed: u64,
    epochs_run: usize,
    val_success_history: Vec<f64>,
    config: AttackConfig,
}

/// Elementwise clamp to [-epsilon, +epsilon].
pub fn clip_inf(u: &[f64], epsilon: f64) -> Vec<f64> {
    u.iter().map(|&x| x.clamp(-epsilon, epsilon)).collect()
}

pub(crate) fn clip_inf_in_place(u: &mut [f64], epsilon: f64) {
    for x in u {
        *x = x.clamp(-epsilon, epsilon);
    }
}

/// One iteration of the sign method: step against the objective gradient,
/// then project so that the combined perturbation v + r stays inside the
/// epsilon ball (r <- clamp(v + r, -eps, eps) - v).
pub(crate) fn sign_step_and_clip(
    r: &mut [f64],
    grad_objective: &[f64],
    v: &[f64],
    alpha: f64,
    epsilon: f64,
) {
    for ((ri, &g), &vi) in r.iter_mut().zip(grad_objective).zip(v) {
        let stepped = *ri - alpha * sign(g);
        *ri = (vi + stepped).clamp(-epsilon, epsilon) - vi;
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Outcome of the per-utterance attack.
#[derive(Clone, Debug)]
pub struct InnerAttackResult {
    /// Additional perturbation over the utterance (length = utterance).
    pub r: Vec<f64>,
    /// CER of the final transcription against the clean target.
    pub achieved_cer: f64,
    /// Gradient-sign iterations actually taken.
    pub iterations_used: usize,
}

/// Seek a small additional perturbation `r` that pushes the transcription of
/// `x + v + r` at least `threshold` CER away from `target` (the model's own
/// clean transcription of `x`). `v_current` must already be fitted to the
/// utterance length. Returns the final `r` even when the threshold was not
/// reached within the iteration cap.
pub fn inner_attack(
    model: &AcousticModel,
    x: &Waveform,
    v_current: &[f64],
    target: &Transcript,
    cfg: &AttackConfig,
) -> Result<InnerAttackResult> {
    let mfcc = Mfcc::new(*model.feature_config())?;
    inner_attack_with(&mfcc, model, x, v_current, target, cfg)
}

/// `inner_attack` reusing a prebuilt front-end.
pub fn inner_attack_with(
    mfcc: &Mfcc,
    model: &AcousticModel,
    x: &Waveform,
    v_current: &[f64],
    target: &Transcript,
    cfg: &AttackConfig,
) -> Result<InnerAttackResult> {
    cfg.validate()?;
    if v_current.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "v_current has {} samples, utterance has {}",
            v_current.len(),
            x.len()
        )));
    }
    let base = x.add(v_current)?;
    let mut r = vec![0.0; x.len()];
    let mut iterations_used = 0;

    loop {
        let perturbed = base.add(&r)?;
        let (feats, feat_tape) = mfcc.forward(perturbed.samples())?;
        let (logits, model_tape) = model.forward(&feats)?;
        let transcript = greedy_decode(&logits, model.alphabet());
        let achieved_cer = cer(target, &transcript)?;
        if achieved_cer > cfg.threshold || iterations_used >= cfg.inner_max_iters {
            return Ok(InnerAttackResult {
                r,
                achieved_cer,
                iterations_used,
            });
        }

        // d(ctc loss)/d(samples) through the net and the feature front-end
        let (loss, grad_logits) = ctc_loss(&logits, target, model.alphabet())?;
        if !loss.is_finite() {
            return Err(Error::GradientNonFinite);
        }
        let (grad_feats, _) = model.backward(&model_tape, &grad_logits)?;
        let grad_samples = mfcc.backward(&feat_tape, &grad_feats)?;
        if grad_samples.iter().any(|g| !g.is_finite()) {
            return Err(Error::GradientNonFinite);
        }

        // J(r) = c ||r||^2 - ctc_loss, so dJ/dr = 2 c r - d(ctc_loss)/dr
        let grad_objective: Vec<f64> = r
            .iter()
            .zip(&grad_samples)
            .map(|(&ri, &g)| 2.0 * cfg.reg_c * ri - g)
            .collect();
        sign_step_and_clip(&mut r, &grad_objective, v_current, cfg.alpha, cfg.epsilon);
        iterations_used += 1;
    }
}

/// Train a universal perturbation against `model` (Algorithm 1 shape):
/// iterate over the training set in a seeded shuffled order, attack every
/// utterance whose current perturbed transcription is still within the CER
/// threshold of its clean transcription, fold each delta into `v` with a
/// clip, and stop once the validation success rate reaches `delta` or the
/// epoch cap is hit.
pub fn universal_train(
    model: &AcousticModel,
    train: &Corpus,
    val: &Corpus,
    cfg: &AttackConfig,
) -> Result<UniversalPerturbation> {
    universal_train_traced(model, train, val, cfg, |_| {})
}

/// `universal_train` with an observer invoked after every update of `v`
/// (budget-invariant tracing).
pub fn universal_train_traced(
    model: &AcousticModel,
    train: &Corpus,
    val: &Corpus,
    cfg: &AttackConfig,
    on_update: impl FnMut(&[f64]),
) -> Result<UniversalPerturbation> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // the stopping predicate starts true for delta = 0 (success rate of the
    // zero perturbation is 0), so the loop body never runs
    if cfg.delta <= 0.0 {
        return Ok(UniversalPerturbation::zeros(cfg, model.model_id()));
    }

    let mfcc = Mfcc::new(*model.feature_config())?;
    let train_prepared = PreparedCorpus::load(model, &mfcc, train)?;
    let val_prepared = PreparedCorpus::load(model, &mfcc, val)?;
    universal_train_prepared(model, &mfcc, &train_prepared, &val_prepared, cfg, on_update)
}

/// Core of the outer loop, working on corpora that are already loaded and
/// clean-transcribed (sweep drivers reuse them across budget cells).
pub fn universal_train_prepared(
    model: &AcousticModel,
    mfcc: &Mfcc,
    train: &PreparedCorpus,
    val: &PreparedCorpus,
    cfg: &AttackConfig,
    mut on_update: impl FnMut(&[f64]),
) -> Result<UniversalPerturbation> {
    cfg.validate()?;
    if cfg.delta <= 0.0 {
        return Ok(UniversalPerturbation::zeros(cfg, model.model_id()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::AllTranscriptsEmpty);
    }

    let mut v = vec![0.0; cfg.perturbation_len];
    let mut history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.items.len()).collect();

    for _epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let item = &train.items[idx];
            let fitted = fit_perturbation(&v, item.waveform.len());
            // skip utterances the current v already mis-transcribes
            let current = model.transcribe_with(mfcc, &item.waveform.add(&fitted)?)?;
            if cer(&item.clean, &current)? >= cfg.threshold {
                continue;
            }
            let result = inner_attack_with(mfcc, model, &item.waveform, &fitted, &item.clean, cfg)?;
            // fold the delta into v over the overlapping prefix; gradient
            // beyond v's support is discarded, shorter utterances update
            // only the prefix
            let overlap = result.r.len().min(v.len());
            for i in 0..overlap {
                v[i] += result.r[i];
            }
            clip_inf_in_place(&mut v, cfg.epsilon);
            on_update(&v);
        }
        let summary = evaluate_prepared(model, mfcc, val, &v, cfg.threshold)?;
        history.push(summary.success_rate);
        if summary.success_rate >= cfg.delta {
            break;
        }
    }

    Ok(UniversalPerturbation {
        samples: v,
        epsilon: cfg.epsilon,
        model_id: model.model_id().to_string(),
        config: *cfg,
        history,
    })
}

/// Uniform noise on [-epsilon, +epsilon], the baseline with the same
/// l-infinity magnitude as a trained perturbation.
pub fn random_perturbation(epsilon: f64, length: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-epsilon, epsilon).expect("valid range");
    (0..length).map(|_| dist.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_clamps_both_sides() {
        assert_eq!(clip_inf(&[150.0], 100.0), vec![100.0]);
        assert_eq!(clip_inf(&[-300.0], 200.0), vec![-200.0]);
        let u = vec![10.0, -50.0, 0.0];
        assert_eq!(clip_inf(&u, 100.0), u);
    }

    #[test]
    fn sign_step_moves_by_alpha_against_positive_gradient() {
        // all-positive gradient, v = 0, budget wider than the step: every
        // entry of r1 is exactly -alpha
        let mut r = vec![0.0; 6];
        let grad = vec![3.0, 0.5, 12.0, 7.0, 0.1, 99.0];
        let v = vec![0.0; 6];
        sign_step_and_clip(&mut r, &grad, &v, 5.0, 200.0);
        assert!(r.iter().all(|&x| x == -5.0), "r = {r:?}");
    }

    #[test]
    fn sign_step_projection_respects_combined_budget() {
        // v close to the boundary: after the step, |v + r| <= eps holds
        let mut r = vec![0.0; 3];
        let grad = vec![-1.0, -1.0, -1.0]; // step pushes r up by alpha
        let v = vec![98.0, -98.0, 0.0];
        sign_step_and_clip(&mut r, &grad, &v, 5.0, 100.0);
        for (ri, vi) in r.iter().zip(&v) {
            assert!((vi + ri).abs() <= 100.0 + 1e-12);
        }
        assert_eq!(r[0], 2.0); // clamped from 5
        assert_eq!(r[1], 5.0);
        assert_eq!(r[2], 5.0);
    }

    #[test]
    fn random_perturbation_is_bounded_and_deterministic() {
        let a = random_perturbation(200.0, 150_000, 9);
        let b = random_perturbation(200.0, 150_000, 9);
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x.abs() <= 200.0));
        let c = random_perturbation(200.0, 1000, 10);
        assert_ne!(a[..1000], c[..]);

        // standard-error bound on the sample mean: 3 sigma/sqrt(n)
        let mean: f64 = a.iter().sum::<f64>() / a.len() as f64;
        let bound = 3.0 * (200.0 / 3.0f64.sqrt()) / (a.len() as f64).sqrt();
        assert!(mean.abs() <= bound, "mean {mean} outside {bound}");
    }

    #[test]
    fn perturbation_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.f32");
        let cfg = AttackConfig {
            perturbation_len: 512,
            ..AttackConfig::default()
        };
        let samples: Vec<f64> = (0..512).map(|i| ((i as f64) * 0.25).sin() * 150.0).collect();
        let v = UniversalPerturbation::from_samples(samples, &cfg, "ds_lite", vec![0.25, 0.75]);
        v.save(&path).unwrap();
        assert!(dir.path().join("v.f32.json").exists());
        let back = UniversalPerturbation::load(&path).unwrap();
        assert_eq!(back.model_id(), "ds_lite");
        assert_eq!(back.history(), v.history());
        assert_eq!(back.epsilon(), v.epsilon());
        for (a, b) in v.samples().iter().zip(back.samples()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_and_bounded(
            u in proptest::collection::vec(-1000.0f64..1000.0, 1..50),
            eps in 1.0f64..500.0,
        ) {
            let once = clip_inf(&u, eps);
            prop_assert!(once.iter().all(|&x| x.abs() <= eps));
            let twice = clip_inf(&once, eps);
            prop_assert_eq!(&once, &twice);
            // entries already inside the ball are untouched
            for (orig, clipped) in u.iter().zip(&once) {
                if orig.abs() <= eps {
                    prop_assert_eq!(orig, clipped);
                }
            }
        }
    }
}
