//! Edit distance, character error rate, dB distortion metrics, and
//! corpus-level attack evaluation.

use crate::attack::UniversalPerturbation;
use crate::audio::{fit_perturbation, read_wav, Corpus, Waveform};
use crate::ctc::Transcript;
use crate::dsp::Mfcc;
use crate::error::{Error, Result};
use crate::nn::AcousticModel;
use crate::par;

/// Levenshtein distance with unit-cost insertion, deletion, substitution.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            curr[j + 1] = (prev[j + 1] + 1).min(curr[j] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Character error rate: edit distance normalized by the length of the
/// original transcript. Directional; may exceed 1.
pub fn cer(original: &Transcript, adversarial: &Transcript) -> Result<f64> {
    let len = original.len();
    if len == 0 {
        return Err(Error::EmptyOriginal);
    }
    Ok(edit_distance(original.as_str(), adversarial.as_str()) as f64 / len as f64)
}

/// Peak level in dB: 20 log10(max |v_i|). The paper's formula is read with
/// an absolute value since sample signs carry no loudness.
pub fn db(v: &[f64]) -> Result<f64> {
    let peak = v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if peak == 0.0 {
        return Err(Error::SilentSignal);
    }
    Ok(20.0 * peak.log10())
}

/// Relative loudness of a perturbation against a signal: dB(v) - dB(x).
/// Negative values mean the perturbation is quieter than the signal.
pub fn db_relative(x: &Waveform, v: &[f64]) -> Result<f64> {
    Ok(db(v)? - db(x.samples())?)
}

/// Per-utterance evaluation outcome.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub item_id: String,
    pub clean_transcript: Transcript,
    pub adv_transcript: Transcript,
    pub cer: f64,
    pub success: bool,
    /// None when either the fitted perturbation or the signal is all zeros.
    pub db_rel: Option<f64>,
}

/// Aggregates over the evaluated corpus. Items whose clean transcription is
/// empty are excluded from every aggregate (CER normalizes by the clean
/// length) and counted in `n_excluded_empty`.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub mean_cer: f64,
    pub mean_db_rel: Option<f64>,
    pub records: Vec<EvalRecord>,
    pub n_items: usize,
    pub n_excluded_empty: usize,
}

/// A corpus loaded into memory with cached clean transcriptions, so repeated
/// evaluations (epoch loops, sweeps) skip the I/O and the clean forward pass.
pub struct PreparedCorpus {
    pub(crate) items: Vec<PreparedItem>,
    pub(crate) n_excluded_empty: usize,
}

#[derive(Clone)]
pub(crate) struct PreparedItem {
    pub(crate) id: String,
    pub(crate) waveform: Waveform,
    pub(crate) clean: Transcript,
}

impl PreparedCorpus {
    /// Load every utterance and transcribe it once with the clean model.
    /// Items with empty clean transcriptions are dropped (and counted).
    pub fn load(model: &AcousticModel, mfcc: &Mfcc, corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let loaded: Vec<(String, Waveform, Transcript)> =
            par::map_slice(corpus.items(), |item| -> Result<_> {
                let w = read_wav(&item.audio_path)?;
                let clean = model.transcribe_with(mfcc, &w)?;
                Ok((item.audio_path.display().to_string(), w, clean))
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let total = loaded.len();
        let items: Vec<PreparedItem> = loaded
            .into_iter()
            .filter(|(_, _, clean)| !clean.is_empty())
            .map(|(id, waveform, clean)| PreparedItem {
                id,
                waveform,
                clean,
            })
            .collect();
        let n_excluded_empty = total - items.len();
        Ok(Self {
            items,
            n_excluded_empty,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Evaluate a perturbation over a prepared corpus: per item, transcribe
/// x + fit(v) and compare against the cached clean transcription with the
/// success test CER > t.
pub fn evaluate_prepared(
    model: &AcousticModel,
    mfcc: &Mfcc,
    prepared: &PreparedCorpus,
    v: &[f64],
    threshold: f64,
) -> Result<EvalSummary> {
    if prepared.is_empty() {
        return Err(Error::AllTranscriptsEmpty);
    }
    let records: Vec<EvalRecord> = par::map_slice(&prepared.items, |item| -> Result<EvalRecord> {
        let fitted = fit_perturbation(v, item.waveform.len());
        let adv_wave = item.waveform.add(&fitted)?;
        let adv = model.transcribe_with(mfcc, &adv_wave)?;
        let item_cer = cer(&item.clean, &adv)?;
        let db_rel = match db_relative(&item.waveform, &fitted) {
            Ok(d) => Some(d),
            Err(Error::SilentSignal) => None,
            Err(e) => return Err(e),
        };
        Ok(EvalRecord {
            item_id: item.id.clone(),
            clean_transcript: item.clean.clone(),
            adv_transcript: adv,
            cer: item_cer,
            success: item_cer > threshold,
            db_rel,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let n = records.len();
    let success_rate = records.iter().filter(|r| r.success).count() as f64 / n as f64;
    let mean_cer = records.iter().map(|r| r.cer).sum::<f64>() / n as f64;
    let with_db: Vec<f64> = records.iter().filter_map(|r| r.db_rel).collect();
    let mean_db_rel = if with_db.is_empty() {
        None
    } else {
        Some(with_db.iter().sum::<f64>() / with_db.len() as f64)
    };
    Ok(EvalSummary {
        success_rate,
        mean_cer,
        mean_db_rel,
        records,
        n_items: n,
        n_excluded_empty: prepared.n_excluded_empty,
    })
}

/// Evaluate a universal perturbation against a model over a corpus on disk.
pub fn evaluate_universal(
    model: &AcousticModel,
    corpus: &Corpus,
    v: &UniversalPerturbation,
    threshold: f64,
) -> Result<EvalSummary> {
    let mfcc = Mfcc::new(*model.feature_config())?;
    let prepared = PreparedCorpus::load(model, &mfcc, corpus)?;
    evaluate_prepared(model, &mfcc, &prepared, v.samples(), threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // exponential-recursion reference for short strings
    fn edit_distance_slow(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ca, ra)), Some((cb, rb))) => {
                let cost = usize::from(ca != cb);
                let sub = edit_distance_slow(ra, rb) + cost;
                let del = edit_distance_slow(ra, b) + 1;
                let ins = edit_distance_slow(a, rb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn kitten_sitting_is_three() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        assert_eq!(edit_distance_slow(&a, &b), 3);
    }

    #[test]
    fn identity_and_insertion_cases() {
        assert_eq!(edit_distance("abcabc", "abcabc"), 0);
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("abc", ""), 3);
    }

    #[test]
    fn cer_of_paper_example() {
        let orig = Transcript::new("test sentence");
        let adv = Transcript::new("test sentense");
        let c = cer(&orig, &adv).unwrap();
        assert!((c - 1.0 / 13.0).abs() < 1e-12, "cer {c}");
    }

    #[test]
    fn cer_identity_and_above_one() {
        let x = Transcript::new("hello");
        assert_eq!(cer(&x, &x).unwrap(), 0.0);
        // CER can exceed 1
        let c = cer(&Transcript::new("ab"), &Transcript::new("wxyz")).unwrap();
        assert_eq!(c, 2.0);
        assert!(matches!(
            cer(&Transcript::new(""), &x),
            Err(Error::EmptyOriginal)
        ));
    }

    #[test]
    fn db_of_peak_100_is_40() {
        let v = vec![3.0, -100.0, 7.5];
        assert_eq!(db(&v).unwrap(), 40.0);
    }

    #[test]
    fn db_scaling_law() {
        let v = vec![3.0, -55.0, 7.5];
        let scaled: Vec<f64> = v.iter().map(|x| 10.0 * x).collect();
        let diff = db(&scaled).unwrap() - db(&v).unwrap();
        assert!((diff - 20.0).abs() < 1e-12);
    }

    #[test]
    fn db_rejects_silence() {
        assert!(matches!(db(&[0.0, 0.0]), Err(Error::SilentSignal)));
    }

    #[test]
    fn db_relative_examples() {
        let x = Waveform::from_samples(vec![32_000.0, -10.0]).unwrap();
        let v = vec![100.0, -50.0];
        let got = db_relative(&x, &v).unwrap();
        let expect = 40.0 - 20.0 * 32_000.0f64.log10();
        assert!((got - expect).abs() < 1e-12);
        assert!((got + 50.10299956639812).abs() < 1e-9);

        // v = x gives exactly 0
        let same = db_relative(&x, x.samples()).unwrap();
        assert_eq!(same, 0.0);

        // 0 dB vs 40 dB
        let x2 = Waveform::from_samples(vec![100.0, 0.0]).unwrap();
        assert_eq!(db_relative(&x2, &[1.0, 0.0]).unwrap(), -40.0);
    }

    proptest! {
        #[test]
        fn edit_distance_matches_slow_oracle(
            a in "[abc]{0,8}",
            b in "[abc]{0,8}",
        ) {
            let ca: Vec<char> = a.chars().collect();
            let cb: Vec<char> = b.chars().collect();
            prop_assert_eq!(edit_distance(&a, &b), edit_distance_slow(&ca, &cb));
        }

        #[test]
        fn edit_distance_metric_axioms(
            a in "[abc]{0,8}",
            b in "[abc]{0,8}",
            c in "[abc]{0,8}",
        ) {
            let dab = edit_distance(&a, &b);
            let dba = edit_distance(&b, &a);
            prop_assert_eq!(dab, dba); // symmetry
            prop_assert_eq!(edit_distance(&a, &a), 0); // identity
            prop_assert!((dab == 0) == (a == b));
            let dac = edit_distance(&a, &c);
            let dcb = edit_distance(&c, &b);
            prop_assert!(dab <= dac + dcb); // triangle
        }
    }
}
