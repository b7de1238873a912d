//! Waveform → log-mel filterbank features, with sliding mean normalization,
//! energy VAD and random-length chunking.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono waveform with samples in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty waveform".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }
}

/// Reads a 16-bit PCM mono WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit PCM mono, got {} channel(s), {} bits, {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a 16-bit PCM mono WAV file, clipping to [−1, 1].
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// The `frontend` section of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbankConfig {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub n_mels: usize,
    pub low_freq: f64,
    /// Upper mel edge in Hz; `None` means Nyquist.
    pub high_freq: Option<f64>,
    pub preemphasis: f64,
    pub cmn_window_s: f64,
    pub vad_offset: f64,
    pub chunk_min: usize,
    pub chunk_max: usize,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            n_mels: 64,
            low_freq: 20.0,
            high_freq: None,
            preemphasis: 0.97,
            cmn_window_s: 3.0,
            vad_offset: 0.0,
            chunk_min: 200,
            chunk_max: 400,
        }
    }
}

impl FbankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels != 64 {
            return Err(Error::Config(format!("n_mels must be 64, got {}", self.n_mels)));
        }
        if !(self.frame_shift_ms > 0.0 && self.frame_len_ms > self.frame_shift_ms) {
            return Err(Error::Config(format!(
                "need 0 < frame_shift ({}) < frame_len ({})",
                self.frame_shift_ms, self.frame_len_ms
            )));
        }
        if self.cmn_window_s.is_nan() || self.cmn_window_s <= 0.0 || self.low_freq < 0.0 {
            return Err(Error::Config("cmn_window_s must be > 0 and low_freq >= 0".into()));
        }
        if self.chunk_min == 0 || self.chunk_min > self.chunk_max {
            return Err(Error::Config(format!(
                "bad chunk range [{}, {}]",
                self.chunk_min, self.chunk_max
            )));
        }
        Ok(())
    }

    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.frame_len_ms / 1000.0).round() as usize
    }

    pub fn frame_shift(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self, sample_rate: u32) -> usize {
        self.frame_len(sample_rate).next_power_of_two()
    }

    /// CMN window length in frames.
    pub fn cmn_window_frames(&self) -> usize {
        ((self.cmn_window_s * 1000.0 / self.frame_shift_ms).round() as usize).max(1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on an HTK mel scale, evaluated at the FFT bin frequencies.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels + 2` edge frequencies in Hz; filter `k` peaks at `edges[k + 1]`.
    pub edges: Vec<f64>,
    /// Per filter: first FFT bin and its weights.
    pub filters: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32, low: f64, high: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(low < high && high <= nyquist) {
            return Err(Error::Config(format!(
                "mel edges must satisfy low < high <= {nyquist}, got {low}..{high}"
            )));
        }
        let (ml, mh) = (hz_to_mel(low), hz_to_mel(high));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(ml + (mh - ml) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let n_bins = fft_size / 2 + 1;
        let mut filters = Vec::with_capacity(n_mels);
        for k in 0..n_mels {
            let (lo, mid, hi) = (edges[k], edges[k + 1], edges[k + 2]);
            let mut first = None;
            let mut weights = Vec::new();
            for b in 0..n_bins {
                let f = b as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(b);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        Ok(MelFilterbank { edges, filters })
    }

    /// Center frequency of filter `k`.
    pub fn center(&self, k: usize) -> f64 {
        self.edges[k + 1]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for ((first, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Full complex spectrum of a real signal.
pub fn fft_spectrum(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf
}

/// Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Reusable FFT plan, window and filterbank for one sample rate.
pub struct FbankExtractor {
    cfg: FbankConfig,
    sample_rate: u32,
    frame_len: usize,
    shift: usize,
    fft_size: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    pub mel: MelFilterbank,
}

impl FbankExtractor {
    pub fn new(cfg: &FbankConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let frame_len = cfg.frame_len(sample_rate);
        let shift = cfg.frame_shift(sample_rate);
        if shift == 0 || frame_len < 2 {
            return Err(Error::Config(format!(
                "sample rate {sample_rate} too low for the configured frames"
            )));
        }
        let fft_size = cfg.fft_size(sample_rate);
        let high = cfg.high_freq.unwrap_or(sample_rate as f64 / 2.0);
        Ok(FbankExtractor {
            cfg: cfg.clone(),
            sample_rate,
            frame_len,
            shift,
            fft_size,
            window: hamming(frame_len),
            fft: FftPlanner::new().plan_fft_forward(fft_size),
            mel: MelFilterbank::new(cfg.n_mels, fft_size, sample_rate, cfg.low_freq, high)?,
        })
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_len {
            0
        } else {
            1 + (n_samples - self.frame_len) / self.shift
        }
    }

    /// Log-mel energies as a (1, 1, T, n_mels) tensor.
    pub fn compute(&self, w: &Waveform) -> Result<Tensor<f64>> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "extractor built for {} Hz, waveform is {} Hz",
                self.sample_rate, w.sample_rate
            )));
        }
        let frames = self.frame_count(w.samples.len());
        if frames == 0 {
            return Err(Error::TooShort {
                samples: w.samples.len(),
                needed: self.frame_len,
            });
        }
        let n_mels = self.cfg.n_mels;
        let mut out = Vec::with_capacity(frames * n_mels);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        let mut power = vec![0.0; self.fft_size / 2 + 1];
        let mut mel = vec![0.0; n_mels];
        let pe = self.cfg.preemphasis;
        for t in 0..frames {
            let frame = &w.samples[t * self.shift..t * self.shift + self.frame_len];
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            // pre-emphasis within the frame; the first sample uses itself as predecessor
            for i in 0..self.frame_len {
                let prev = frame[i.saturating_sub(1)] as f64;
                let v = frame[i] as f64 - pe * prev;
                buf[i].re = v * self.window[i];
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.mel.apply(&power, &mut mel);
            out.extend(mel.iter().map(|&e| e.max(LOG_FLOOR).ln()));
        }
        Tensor::from_vec(Shape::new(1, 1, frames, n_mels), out)
    }
}

/// Log-mel filterbank features of a waveform.
pub fn compute_fbank(w: &Waveform, cfg: &FbankConfig) -> Result<Tensor<f64>> {
    FbankExtractor::new(cfg, w.sample_rate)?.compute(w)
}

/// Window `[lo, hi)` used for frame `t`: `window` frames centered on `t`,
/// shifted inward at the edges and truncated to the utterance.
pub fn cmn_window_bounds(t: usize, frames: usize, window: usize) -> (usize, usize) {
    let w = window.min(frames);
    let lo = t.saturating_sub(w / 2).min(frames - w);
    (lo, lo + w)
}

/// Subtracts from every frame the per-dimension mean of its CMN window.
pub fn sliding_cmn(f: &Tensor<f64>, window: usize) -> Tensor<f64> {
    let s = f.shape();
    let (frames, dim) = (s.t(), s.f());
    let mut out = f.clone();
    if frames == 0 || window == 0 {
        return out;
    }
    let d = f.data();
    let mut mean = vec![0.0; dim];
    for t in 0..frames {
        let (lo, hi) = cmn_window_bounds(t, frames, window);
        mean.iter_mut().for_each(|m| *m = 0.0);
        for r in lo..hi {
            for (m, v) in mean.iter_mut().zip(&d[r * dim..(r + 1) * dim]) {
                *m += v;
            }
        }
        let n = (hi - lo) as f64;
        for (o, m) in out.data_mut()[t * dim..(t + 1) * dim].iter_mut().zip(&mean) {
            *o -= m / n;
        }
    }
    out
}

/// Per-frame mean log-energy over the mel bins.
pub fn frame_energies(f: &Tensor<f64>) -> Vec<f64> {
    let dim = f.shape().f();
    f.data().chunks(dim).map(|r| r.iter().sum::<f64>() / dim as f64).collect()
}

/// Keep-mask: frames whose energy exceeds the utterance mean plus `offset`.
pub fn energy_vad(f: &Tensor<f64>, offset: f64) -> Vec<bool> {
    let e = frame_energies(f);
    if e.is_empty() {
        return Vec::new();
    }
    // the clamp only undoes rounding: equal energies must give mean == energy
    let (lo, hi) = e.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mean = (e.iter().sum::<f64>() / e.len() as f64).clamp(lo, hi);
    e.iter().map(|&v| v > mean + offset).collect()
}

/// Deletes the frames whose mask entry is false.
pub fn apply_mask(f: &Tensor<f64>, mask: &[bool]) -> Result<Tensor<f64>> {
    let s = f.shape();
    if mask.len() != s.t() {
        return Err(Error::shape(format!("mask of {} for {s}", mask.len())));
    }
    let dim = s.f();
    let mut data = Vec::with_capacity(f.len());
    for (row, &keep) in f.data().chunks(dim).zip(mask) {
        if keep {
            data.extend_from_slice(row);
        }
    }
    if data.is_empty() {
        return Err(Error::EmptyAfterVad);
    }
    let kept = data.len() / dim;
    Tensor::from_vec(Shape::new(1, s.c(), kept, dim), data)
}

/// `(start, len)` of non-overlapping chunks with lengths uniform in `[min, max]`.
///
/// A draw longer than the remaining frames takes the remainder, which keeps
/// `T = min` as a single chunk; a remainder shorter than `min` is dropped.
pub fn chunk_bounds<R: Rng>(frames: usize, min: usize, max: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if min == 0 || min > max {
        return Err(Error::Config(format!("bad chunk range [{min}, {max}]")));
    }
    if frames < min {
        return Err(Error::ChunkSkipped { frames, min });
    }
    let mut out = Vec::new();
    let mut pos = 0;
    while frames - pos >= min {
        let len = rng.random_range(min..=max).min(frames - pos);
        out.push((pos, len));
        pos += len;
    }
    Ok(out)
}

pub fn chunk<R: Rng>(f: &Tensor<f64>, min: usize, max: usize, rng: &mut R) -> Result<Vec<Tensor<f64>>> {
    chunk_bounds(f.shape().t(), min, max, rng)?
        .into_iter()
        .map(|(s, l)| f.slice_time(s, s + l))
        .collect()
}

/// FBank → VAD → sliding CMN.
pub fn extract_features(w: &Waveform, cfg: &FbankConfig) -> Result<Tensor<f64>> {
    let fb = compute_fbank(w, cfg)?;
    let voiced = apply_mask(&fb, &energy_vad(&fb, cfg.vad_offset))?;
    Ok(sliding_cmn(&voiced, cfg.cmn_window_frames()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> Waveform {
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    #[test]
    fn silence_hits_log_floor() {
        let w = Waveform::new(vec![0.0; 1600], 16000).unwrap();
        let f = compute_fbank(&w, &FbankConfig::default()).unwrap();
        assert_eq!(f.shape(), Shape::new(1, 1, 8, 64));
        assert!(f.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn too_short_is_an_error() {
        let w = Waveform::new(vec![0.1; 399], 16000).unwrap();
        assert!(matches!(
            compute_fbank(&w, &FbankConfig::default()),
            Err(Error::TooShort { samples: 399, needed: 400 })
        ));
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = fft_spectrum(&x);
        for (k, got) in fast.iter().enumerate() {
            let mut want = Complex64::new(0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / 64.0;
                want += Complex64::new(v * ang.cos(), v * ang.sin());
            }
            assert!((got - want).norm() < 1e-6, "bin {k}");
        }
    }

    #[test]
    fn sine_peaks_in_its_mel_bin() {
        let cfg = FbankConfig::default();
        let ex = FbankExtractor::new(&cfg, 16000).unwrap();
        for k in [12, 20, 33, 47, 60] {
            let w = sine(ex.mel.center(k), 16000, 8000, 0.5);
            let f = ex.compute(&w).unwrap();
            let t = f.shape().t();
            let means: Vec<f64> = (0..64)
                .map(|b| (0..t).map(|r| f.at(0, 0, r, b)).sum::<f64>() / t as f64)
                .collect();
            let arg = (0..64).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
            assert_eq!(arg, k);
        }
    }

    #[test]
    fn cmn_window_edges() {
        assert_eq!(cmn_window_bounds(0, 1000, 300), (0, 300));
        assert_eq!(cmn_window_bounds(500, 1000, 300), (350, 650));
        assert_eq!(cmn_window_bounds(999, 1000, 300), (700, 1000));
        assert_eq!(cmn_window_bounds(3, 50, 300), (0, 50));
    }

    #[test]
    fn vad_keeps_loud_frames() {
        let f = Tensor::from_fn(Shape::new(1, 1, 6, 4), |[_, _, t, _]| if t % 2 == 0 { 1.0 } else { -3.0 });
        assert_eq!(energy_vad(&f, 0.0), vec![true, false, true, false, true, false]);
        assert!(energy_vad(&f, f64::NEG_INFINITY).iter().all(|&k| k));
        let flat = Tensor::full(Shape::new(1, 1, 5, 4), LOG_FLOOR.ln());
        assert!(matches!(
            apply_mask(&flat, &energy_vad(&flat, 0.0)),
            Err(Error::EmptyAfterVad)
        ));
    }

    #[test]
    fn chunk_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(chunk_bounds(200, 200, 400, &mut rng).unwrap(), vec![(0, 200)]);
        assert!(matches!(
            chunk_bounds(199, 200, 400, &mut rng),
            Err(Error::ChunkSkipped { frames: 199, min: 200 })
        ));
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = sine(440.0, 8000, 800, 0.3);
        write_wav(&p, &w).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.sample_rate, 8000);
        for (a, b) in r.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
