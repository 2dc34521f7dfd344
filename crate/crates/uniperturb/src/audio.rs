//! Waveform I/O (PCM16 mono 16 kHz WAV), corpus manifests, and length
//! adaptation of a fixed-length perturbation to individual signals.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::alphabet::Alphabet;
use crate::error::{Error, Result};

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio in signed-16-bit amplitude scale. Samples are kept as `f64`
/// but stay in raw int16 units ([-32768, 32767] for on-disk data); the
/// attack's epsilon and the dB math are defined in those units.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Wrap raw samples. Rejects empty or non-finite input.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::TooShort { got: 0, need: 1 });
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::CorruptFile("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Return a new waveform with `addend` mixed in sample by sample.
    /// `addend` must already be fitted to this waveform's length.
    pub fn add(&self, addend: &[f64]) -> Result<Waveform> {
        if addend.len() != self.samples.len() {
            return Err(Error::ShapeMismatch(format!(
                "addend length {} vs waveform length {}",
                addend.len(),
                self.samples.len()
            )));
        }
        let samples = self
            .samples
            .iter()
            .zip(addend)
            .map(|(x, v)| x + v)
            .collect();
        Ok(Waveform {
            samples,
            sample_rate: self.sample_rate,
        })
    }
}

/// One manifest row: an audio file plus its reference transcript. The
/// transcript is only ever used to train the victim model; the attack itself
/// never reads it.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub audio_path: PathBuf,
    pub transcript: String,
}

/// An ordered collection of utterances sharing one alphabet. Order is the
/// manifest order and is part of the determinism contract.
#[derive(Clone, Debug)]
pub struct Corpus {
    items: Vec<CorpusItem>,
    alphabet: Alphabet,
}

impl Corpus {
    pub fn new(items: Vec<CorpusItem>, alphabet: Alphabet) -> Result<Self> {
        for (i, item) in items.iter().enumerate() {
            if items[..i].iter().any(|p| p.audio_path == item.audio_path) {
                return Err(Error::MalformedManifest(format!(
                    "duplicate audio path {}",
                    item.audio_path.display()
                )));
            }
        }
        Ok(Self { items, alphabet })
    }

    pub fn items(&self) -> &[CorpusItem] {
        &self.items
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// A new corpus containing only the given items (same alphabet).
    pub fn subset(&self, indices: &[usize]) -> Result<Corpus> {
        let items = indices.iter().map(|&i| self.items[i].clone()).collect();
        Corpus::new(items, self.alphabet.clone())
    }
}

fn read_u32_le(b: &[u8], at: usize) -> Option<u32> {
    Some(u32::from_le_bytes(b.get(at..at + 4)?.try_into().ok()?))
}

fn read_u16_le(b: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_le_bytes(b.get(at..at + 2)?.try_into().ok()?))
}

/// Read a RIFF/WAVE file. Only PCM16, mono, 16 kHz is accepted; sample
/// values are preserved exactly as integers in `f64`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::CorruptFile("missing RIFF/WAVE header".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32_le(&bytes, pos + 4)
            .ok_or_else(|| Error::CorruptFile("truncated chunk header".into()))?
            as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(Error::CorruptFile(format!(
                "chunk {:?} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::CorruptFile("fmt chunk too small".into()));
                }
                let format = read_u16_le(&bytes, body_start).unwrap();
                let channels = read_u16_le(&bytes, body_start + 2).unwrap();
                let rate = read_u32_le(&bytes, body_start + 4).unwrap();
                let bits = read_u16_le(&bytes, body_start + 14).unwrap();
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {} // skip unknown chunks
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::CorruptFile("no fmt chunk".into()))?;
    if format != 1 || bits != 16 || channels != 1 || rate != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat(format!(
            "need PCM16 mono {SAMPLE_RATE} Hz, got format={format} bits={bits} \
             channels={channels} rate={rate}"
        )));
    }
    let data = data.ok_or_else(|| Error::CorruptFile("no data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(Error::CorruptFile("odd data chunk length".into()));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
        .collect();
    Waveform::from_samples(samples)
}

/// Quantize one sample: round half away from zero, then clamp to int16.
pub fn quantize_sample(s: f64) -> i16 {
    s.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Write a PCM16 mono 16 kHz WAV file. Samples are rounded half away from
/// zero and clamped to the int16 range, so integer-valued in-range waveforms
/// round-trip bit-exactly through `read_wav`.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let pcm: Vec<i16> = w.samples.iter().map(|&s| quantize_sample(s)).collect();
    let data_len = (pcm.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + pcm.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &pcm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load a `path,transcript` CSV manifest. Paths are resolved relative to the
/// manifest's directory; every referenced file must exist and every
/// transcript character must belong to `alphabet`.
pub fn load_manifest(path: impl AsRef<Path>, alphabet: &Alphabet) -> Result<Corpus> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::MalformedManifest(e.to_string()))?;
        if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "transcript" {
            return Err(Error::MalformedManifest(format!(
                "expected header `path,transcript`, got {headers:?}"
            )));
        }
    }
    let mut items = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedManifest(e.to_string()))?;
        if record.len() != 2 {
            return Err(Error::MalformedManifest(format!(
                "row has {} fields, expected 2",
                record.len()
            )));
        }
        let audio_path = base.join(&record[0]);
        if !audio_path.exists() {
            return Err(Error::MissingAudio(audio_path));
        }
        let transcript = record[1].to_string();
        for c in transcript.chars() {
            if !alphabet.contains(c) {
                return Err(Error::InvalidTranscript(c));
            }
        }
        items.push(CorpusItem {
            audio_path,
            transcript,
        });
    }
    Corpus::new(items, alphabet.clone())
}

/// Write a `path,transcript` manifest; `rows` hold paths relative to the
/// manifest's directory.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[(String, String)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer
        .write_record(["path", "transcript"])
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    for (p, t) in rows {
        writer
            .write_record([p.as_str(), t.as_str()])
            .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Adapt a fixed-length perturbation to a signal of `n` samples: crop when
/// the perturbation is longer, zero-pad at the end when it is shorter.
pub fn fit_perturbation(v: &[f64], n: usize) -> Vec<f64> {
    assert!(!v.is_empty(), "perturbation must be non-empty");
    assert!(n >= 1, "target length must be at least 1");
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&v[..n.min(v.len())]);
    out.resize(n, 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn wav_round_trip_is_identity_on_integer_samples() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..1600).map(|i| ((i * 37) % 65536) as f64 - 32768.0).collect();
        let w = Waveform::from_samples(samples.clone()).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples(), &samples[..]);
        assert_eq!(back.sample_rate(), SAMPLE_RATE);
        assert_eq!(back.len(), 1600);
    }

    #[test]
    fn write_clamps_out_of_range_samples() {
        assert_eq!(quantize_sample(32767.6), 32767);
        assert_eq!(quantize_sample(-40000.0), -32768);
        assert_eq!(quantize_sample(0.5), 1); // half away from zero
        assert_eq!(quantize_sample(-0.5), -1);

        let dir = tempdir().unwrap();
        let path = dir.path().join("clamp.wav");
        let w = Waveform::from_samples(vec![32767.6, -40000.0, 0.0]).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples(), &[32767.0, -32768.0, 0.0]);
    }

    #[test]
    fn all_zero_waveform_writes_zero_frames() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_wav(&path, &Waveform::from_samples(vec![0.0; 100]).unwrap()).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), 100);
        assert!(back.samples().iter().all(|&s| s == 0.0));
    }

    fn write_raw_wav(path: &Path, channels: u16, rate: u32, bits: u16, frames: &[i16]) {
        let data_len = (frames.len() * 2) as u32;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for s in frames {
            out.extend_from_slice(&s.to_le_bytes());
        }
        fs::write(path, out).unwrap();
    }

    #[test]
    fn rejects_stereo_and_wrong_rate() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        write_raw_wav(&path, 2, 44_100, 16, &[0, 0, 0, 0]);
        assert!(matches!(read_wav(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.wav");
        fs::write(&path, b"RIFF\x10\x00\x00\x00WAVEfmt ").unwrap();
        assert!(matches!(read_wav(&path), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(
            read_wav("/definitely/not/here.wav"),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn manifest_loads_in_row_order() {
        let dir = tempdir().unwrap();
        let w = Waveform::from_samples(vec![1.0; 32]).unwrap();
        write_wav(dir.path().join("a.wav"), &w).unwrap();
        write_wav(dir.path().join("b.wav"), &w).unwrap();
        let manifest = dir.path().join("m.csv");
        write_manifest(
            &manifest,
            &[
                ("a.wav".into(), "abc".into()),
                ("b.wav".into(), "ba".into()),
            ],
        )
        .unwrap();
        let alphabet = Alphabet::parse("abcdefghij").unwrap();
        let corpus = load_manifest(&manifest, &alphabet).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.items()[0].transcript, "abc");
        assert_eq!(corpus.items()[1].transcript, "ba");

        // determinism: same file, same ordering
        let again = load_manifest(&manifest, &alphabet).unwrap();
        let paths: Vec<_> = corpus.items().iter().map(|i| &i.audio_path).collect();
        let paths2: Vec<_> = again.items().iter().map(|i| &i.audio_path).collect();
        assert_eq!(paths, paths2);
    }

    #[test]
    fn manifest_rejects_foreign_characters() {
        let dir = tempdir().unwrap();
        let w = Waveform::from_samples(vec![1.0; 32]).unwrap();
        write_wav(dir.path().join("a.wav"), &w).unwrap();
        let manifest = dir.path().join("m.csv");
        write_manifest(&manifest, &[("a.wav".into(), "a#c".into())]).unwrap();
        let alphabet = Alphabet::parse("abcdefghij ").unwrap();
        assert!(matches!(
            load_manifest(&manifest, &alphabet),
            Err(Error::InvalidTranscript('#'))
        ));
    }

    #[test]
    fn manifest_rejects_missing_audio() {
        let dir = tempdir().unwrap();
        let manifest = dir.path().join("m.csv");
        write_manifest(&manifest, &[("ghost.wav".into(), "abc".into())]).unwrap();
        let alphabet = Alphabet::parse("abcdefghij").unwrap();
        assert!(matches!(
            load_manifest(&manifest, &alphabet),
            Err(Error::MissingAudio(_))
        ));
    }

    #[test]
    fn fit_crops_and_pads() {
        let v: Vec<f64> = (0..150_000).map(|i| i as f64).collect();
        let cropped = fit_perturbation(&v, 100_000);
        assert_eq!(cropped.len(), 100_000);
        assert_eq!(cropped[..], v[..100_000]);

        let padded = fit_perturbation(&v, 200_000);
        assert_eq!(padded.len(), 200_000);
        assert_eq!(padded[..150_000], v[..]);
        assert!(padded[150_000..].iter().all(|&s| s == 0.0));

        assert_eq!(fit_perturbation(&v, v.len()), v);
    }

    proptest! {
        #[test]
        fn fit_has_exact_length_and_prefix(
            v in proptest::collection::vec(-1000.0f64..1000.0, 1..60),
            n in 1usize..120,
        ) {
            let out = fit_perturbation(&v, n);
            prop_assert_eq!(out.len(), n);
            let k = n.min(v.len());
            prop_assert_eq!(&out[..k], &v[..k]);
            for &s in &out[k..] {
                prop_assert_eq!(s, 0.0);
            }
        }
    }
}
