//! CTC loss with analytic logit gradients, greedy decoding, and a
//! brute-force path-enumeration oracle for testing.
//!
//! The loss is -log P(target | softmax(logits)) computed with the standard
//! alpha/beta recursion over the blank-interleaved extended sequence, fully
//! in log space. The gradient is softmax(logits) minus the per-frame symbol
//! posterior.

use crate::alphabet::Alphabet;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::Logits;

/// A decoding or reference string over an alphabet (never contains the
/// blank symbol; may be empty).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Transcript(String);

impl Transcript {
    pub fn new(text: impl Into<String>) -> Self {
        Transcript(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Length in characters.
    pub fn len(&self) -> usize {
        self.0.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// log(sum(exp(xs))) that stays finite-safe: all -inf inputs give -inf.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax of raw scores.
fn log_softmax_rows(values: &Mat) -> Mat {
    Mat::from_rows(values.rows(), values.cols(), |t, out| {
        let row = values.row(t);
        let norm = log_sum_exp(row);
        for (o, &z) in out.iter_mut().zip(row) {
            *o = z - norm;
        }
    })
}

/// Blank-interleaved extended label sequence: for labels `l1..lL` this is
/// `b, l1, b, l2, ..., lL, b` of length 2L + 1 (blank is `None`).
fn extended_sequence(labels: &[usize]) -> Vec<Option<usize>> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(None);
    for &l in labels {
        ext.push(Some(l));
        ext.push(None);
    }
    ext
}

fn min_frames_needed(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// CTC loss and its gradient with respect to the raw logits.
///
/// Returns `InfeasibleTarget` when the target cannot be emitted in the
/// available frames (its probability is exactly zero).
pub fn ctc_loss(logits: &Logits, target: &Transcript, alphabet: &Alphabet) -> Result<(f64, Mat)> {
    let labels = alphabet.labels_of(target.as_str())?;
    let frames = logits.frames();
    let classes = logits.values().cols();
    if classes != alphabet.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "logits have {classes} classes, alphabet needs {}",
            alphabet.num_classes()
        )));
    }
    let needed = min_frames_needed(&labels);
    if frames < needed {
        return Err(Error::InfeasibleTarget { frames, needed });
    }

    let blank = alphabet.blank();
    let ext = extended_sequence(&labels);
    let s_len = ext.len();
    let class_of = |s: usize| ext[s].unwrap_or(blank);

    let logp = log_softmax_rows(logits.values());

    // alpha[t][s]: log-prob of prefixes ending at extended position s at
    // frame t (includes the frame-t emission)
    let mut alpha = Mat::from_vec(frames, s_len, vec![f64::NEG_INFINITY; frames * s_len])?;
    alpha.set(0, 0, logp.get(0, blank));
    if s_len > 1 {
        alpha.set(0, 1, logp.get(0, class_of(1)));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha.get(t - 1, s);
            if s >= 1 {
                acc = log_sum_exp(&[acc, alpha.get(t - 1, s - 1)]);
            }
            // the skip transition is allowed between distinct non-blank labels
            if s >= 2 && ext[s].is_some() && ext[s] != ext[s - 2] {
                acc = log_sum_exp(&[acc, alpha.get(t - 1, s - 2)]);
            }
            alpha.set(t, s, acc + logp.get(t, class_of(s)));
        }
    }

    let mut tail = vec![alpha.get(frames - 1, s_len - 1)];
    if s_len > 1 {
        tail.push(alpha.get(frames - 1, s_len - 2));
    }
    let log_p_target = log_sum_exp(&tail);
    if log_p_target == f64::NEG_INFINITY {
        // feasible by the frame count but numerically impossible can only
        // happen with -inf logits; treat as infeasible
        return Err(Error::InfeasibleTarget { frames, needed });
    }

    // beta mirrors alpha from the end (also includes the frame-t emission)
    let mut beta = Mat::from_vec(frames, s_len, vec![f64::NEG_INFINITY; frames * s_len])?;
    beta.set(frames - 1, s_len - 1, logp.get(frames - 1, blank));
    if s_len > 1 {
        beta.set(
            frames - 1,
            s_len - 2,
            logp.get(frames - 1, class_of(s_len - 2)),
        );
    }
    for t in (0..frames - 1).rev() {
        for s in (0..s_len).rev() {
            let mut acc = beta.get(t + 1, s);
            if s + 1 < s_len {
                acc = log_sum_exp(&[acc, beta.get(t + 1, s + 1)]);
            }
            if s + 2 < s_len && ext[s + 2].is_some() && ext[s + 2] != ext[s] {
                acc = log_sum_exp(&[acc, beta.get(t + 1, s + 2)]);
            }
            beta.set(t, s, acc + logp.get(t, class_of(s)));
        }
    }

    // gradient: softmax - posterior, where the posterior gathers
    // alpha * beta / p over extended positions sharing a class
    let mut grad = Mat::zeros(frames, classes);
    for t in 0..frames {
        let mut class_acc = vec![f64::NEG_INFINITY; classes];
        for s in 0..s_len {
            let k = class_of(s);
            let through = alpha.get(t, s) + beta.get(t, s) - logp.get(t, k);
            class_acc[k] = log_sum_exp(&[class_acc[k], through]);
        }
        let row = grad.row_mut(t);
        for (k, g) in row.iter_mut().enumerate() {
            let posterior = (class_acc[k] - log_p_target).exp();
            *g = logp.get(t, k).exp() - posterior;
        }
    }

    Ok((-log_p_target, grad))
}

/// Best-path decoding: per-frame argmax (ties break toward the lowest
/// index), collapse consecutive repeats, drop blanks.
pub fn greedy_decode(logits: &Logits, alphabet: &Alphabet) -> Transcript {
    let blank = alphabet.blank();
    let mut out = String::new();
    let mut prev = usize::MAX;
    for t in 0..logits.frames() {
        let row = logits.values().row(t);
        let mut best = 0;
        for (k, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = k;
            }
        }
        if best != prev && best != blank {
            out.push(alphabet.char_at(best).expect("class within alphabet"));
        }
        prev = best;
    }
    Transcript::new(out)
}

/// Exponential-time oracle: enumerate every frame-label path, sum the
/// probabilities of paths whose collapse equals `target`, return -log of
/// the sum (infinity when no path collapses to the target).
pub fn ctc_loss_bruteforce(
    logits: &Logits,
    target: &Transcript,
    alphabet: &Alphabet,
) -> Result<f64> {
    let frames = logits.frames();
    if frames > 8 || alphabet.len() > 3 {
        return Err(Error::TooLargeForOracle);
    }
    let labels = alphabet.labels_of(target.as_str())?;
    let classes = alphabet.num_classes();
    let blank = alphabet.blank();
    let logp = log_softmax_rows(logits.values());

    let mut total = 0.0f64;
    let n_paths = classes.pow(frames as u32);
    for code in 0..n_paths {
        let mut c = code;
        let mut prob = 1.0;
        let mut collapsed: Vec<usize> = Vec::new();
        let mut prev = usize::MAX;
        for t in 0..frames {
            let k = c % classes;
            c /= classes;
            prob *= logp.get(t, k).exp();
            if k != prev && k != blank {
                collapsed.push(k);
            }
            prev = k;
        }
        if collapsed == labels {
            total += prob;
        }
    }
    Ok(-total.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn logits_from(frames: usize, classes: usize, values: Vec<f64>) -> Logits {
        Logits::new(Mat::from_vec(frames, classes, values).unwrap())
    }

    fn uniform_logits(frames: usize, classes: usize) -> Logits {
        logits_from(frames, classes, vec![0.0; frames * classes])
    }

    #[test]
    fn single_frame_uniform_gives_ln2() {
        let alphabet = Alphabet::parse("a").unwrap();
        let logits = uniform_logits(1, 2);
        let (loss, _) = ctc_loss(&logits, &Transcript::new("a"), &alphabet).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12, "loss {loss}");
        let oracle = ctc_loss_bruteforce(&logits, &Transcript::new("a"), &alphabet).unwrap();
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn two_frame_uniform_gives_three_quarters() {
        // paths a.a, a.blank, blank.a of probability 1/4 each
        let alphabet = Alphabet::parse("a").unwrap();
        let logits = uniform_logits(2, 2);
        let (loss, _) = ctc_loss(&logits, &Transcript::new("a"), &alphabet).unwrap();
        assert!((loss + 0.75f64.ln()).abs() < 1e-12, "loss {loss}");
        let oracle = ctc_loss_bruteforce(&logits, &Transcript::new("a"), &alphabet).unwrap();
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_three_frames() {
        let alphabet = Alphabet::parse("a").unwrap();
        let logits = uniform_logits(1, 2);
        assert!(matches!(
            ctc_loss(&logits, &Transcript::new("aa"), &alphabet),
            Err(Error::InfeasibleTarget { frames: 1, needed: 3 })
        ));
        let logits3 = uniform_logits(3, 2);
        assert!(ctc_loss(&logits3, &Transcript::new("aa"), &alphabet).is_ok());
    }

    #[test]
    fn empty_target_is_all_blanks() {
        let alphabet = Alphabet::parse("ab").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logits = logits_from(4, 3, values);
        let (loss, _) = ctc_loss(&logits, &Transcript::new(""), &alphabet).unwrap();
        let oracle = ctc_loss_bruteforce(&logits, &Transcript::new(""), &alphabet).unwrap();
        assert!((loss - oracle).abs() < 1e-10);
        assert!(loss > 0.0);
    }

    #[test]
    fn agrees_with_bruteforce_on_200_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tested = 0;
        while tested < 200 {
            let a_len = rng.random_range(1..=3usize);
            let alphabet =
                Alphabet::new("abc".chars().take(a_len)).unwrap();
            let frames = rng.random_range(1..=6usize);
            let classes = alphabet.num_classes();
            let values: Vec<f64> = (0..frames * classes)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            let logits = logits_from(frames, classes, values);
            let target_len = rng.random_range(0..=frames.min(4));
            let target: String = (0..target_len)
                .map(|_| alphabet.chars()[rng.random_range(0..a_len)])
                .collect();
            let target = Transcript::new(target);

            let oracle = ctc_loss_bruteforce(&logits, &target, &alphabet).unwrap();
            match ctc_loss(&logits, &target, &alphabet) {
                Ok((loss, _)) => {
                    assert!(
                        (loss - oracle).abs() < 1e-4,
                        "loss {loss} vs oracle {oracle} (T={frames}, target {target})"
                    );
                }
                Err(Error::InfeasibleTarget { .. }) => {
                    assert!(oracle.is_infinite(), "oracle found paths for {target}");
                }
                Err(e) => panic!("unexpected error {e}"),
            }
            tested += 1;
        }
    }

    #[test]
    fn total_probability_over_targets_is_one() {
        // T=2, alphabet {a}: the only collapsible labelings are "", "a", "aa"
        let alphabet = Alphabet::parse("a").unwrap();
        for seed in [0u64, 1, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let logits = logits_from(2, 2, values);
            let mut total = 0.0;
            for target in ["", "a", "aa"] {
                let loss =
                    ctc_loss_bruteforce(&logits, &Transcript::new(target), &alphabet).unwrap();
                total += (-loss).exp();
            }
            assert!((total - 1.0).abs() < 1e-6, "total {total}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let alphabet = Alphabet::parse("abc").unwrap();
            let frames = 5;
            let classes = alphabet.num_classes();
            let values: Vec<f64> = (0..frames * classes)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let target_len = rng.random_range(1..=3usize);
            let target: String = (0..target_len)
                .map(|_| alphabet.chars()[rng.random_range(0..3)])
                .collect();
            let target = Transcript::new(target);

            let logits = logits_from(frames, classes, values.clone());
            let (_, grad) = ctc_loss(&logits, &target, &alphabet).unwrap();

            let h = 1e-6;
            for idx in 0..values.len() {
                let mut plus = values.clone();
                plus[idx] += h;
                let mut minus = values.clone();
                minus[idx] -= h;
                let (lp, _) =
                    ctc_loss(&logits_from(frames, classes, plus), &target, &alphabet).unwrap();
                let (lm, _) =
                    ctc_loss(&logits_from(frames, classes, minus), &target, &alphabet).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grad.data()[idx];
                let rel =
                    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    rel < 1e-3,
                    "grad[{idx}]: numeric {numeric}, analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn greedy_decode_collapses_and_drops_blanks() {
        let alphabet = Alphabet::parse("ab").unwrap();
        // argmax path: blank, a, a, blank, b
        let rows = [
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
        ];
        let logits = logits_from(5, 3, rows.concat().to_vec());
        assert_eq!(greedy_decode(&logits, &alphabet).as_str(), "ab");

        // blank separates repeats: a, blank, a -> "aa"
        let rows = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let logits = logits_from(3, 3, rows.concat().to_vec());
        assert_eq!(greedy_decode(&logits, &alphabet).as_str(), "aa");

        // all blanks -> empty
        let rows = [[0.0, 0.0, 5.0], [0.0, 0.0, 5.0]];
        let logits = logits_from(2, 3, rows.concat().to_vec());
        assert_eq!(greedy_decode(&logits, &alphabet).as_str(), "");

        // tie breaks toward the lowest index: a vs b equal -> a
        let rows = [[2.0, 2.0, 0.0]];
        let logits = logits_from(1, 3, rows.concat().to_vec());
        assert_eq!(greedy_decode(&logits, &alphabet).as_str(), "a");
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let alphabet = Alphabet::parse("abc").unwrap();
        let logits = uniform_logits(9, 4);
        assert!(matches!(
            ctc_loss_bruteforce(&logits, &Transcript::new("a"), &alphabet),
            Err(Error::TooLargeForOracle)
        ));
    }

    proptest! {
        #[test]
        fn probability_in_unit_interval(
            seed in 0u64..500,
            frames in 2usize..7,
            target_len in 0usize..3,
        ) {
            let alphabet = Alphabet::parse("ab").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let classes = alphabet.num_classes();
            let values: Vec<f64> = (0..frames * classes)
                .map(|_| rng.random_range(-4.0..4.0))
                .collect();
            let logits = logits_from(frames, classes, values);
            let target: String = (0..target_len)
                .map(|_| alphabet.chars()[rng.random_range(0..2)])
                .collect();
            if let Ok((loss, _)) = ctc_loss(&logits, &Transcript::new(target), &alphabet) {
                let p = (-loss).exp();
                prop_assert!(p > 0.0 && p <= 1.0 + 1e-12, "p = {}", p);
            }
        }

        #[test]
        fn greedy_output_never_contains_blank_or_uncollapsed_runs(
            seed in 0u64..500,
            frames in 1usize..20,
        ) {
            let alphabet = Alphabet::parse("ab").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let classes = alphabet.num_classes();
            let values: Vec<f64> = (0..frames * classes)
                .map(|_| rng.random_range(-4.0..4.0))
                .collect();
            let logits = logits_from(frames, classes, values);
            let decoded = greedy_decode(&logits, &alphabet);

            // reference collapse of the raw argmax path
            let mut reference = String::new();
            let mut prev = usize::MAX;
            for t in 0..frames {
                let row = logits.values().row(t);
                let mut best = 0;
                for (k, &z) in row.iter().enumerate() {
                    if z > row[best] {
                        best = k;
                    }
                }
                if best != prev && best != alphabet.blank() {
                    reference.push(alphabet.char_at(best).unwrap());
                }
                prev = best;
            }
            prop_assert_eq!(decoded.as_str(), reference.as_str());
        }
    }
}
