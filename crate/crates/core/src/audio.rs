//! PCM ingestion, waveform preprocessing and crop planning.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEFAULT_PRE_EMPHASIS: Real = 0.97;
pub const DEFAULT_LAYER_NORM_EPSILON: Real = 1e-8;
/// Overlap between consecutive test-time crops.
pub const TTA_OVERLAP: Real = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<Real>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<Real>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[Real] {
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

    pub fn into_samples(self) -> Vec<Real> {
        self.samples
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct FmtChunk {
    audio_format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Decode a RIFF/WAVE byte buffer holding mono 16-bit PCM.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let pcm = parse_pcm16(bytes)?;
    let samples = pcm.samples.iter().map(|&s| s as Real / 32768.0).collect();
    Waveform::new(samples, pcm.sample_rate)
}

/// Raw mono 16-bit samples as stored in a WAVE file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pcm16 {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
}

pub fn parse_pcm16(bytes: &[u8]) -> Result<Pcm16> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE header".into()));
    }
    let mut fmt: Option<FmtChunk> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "chunk {:?} overruns the file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some(FmtChunk {
                    audio_format: u16_at(bytes, body),
                    channels: u16_at(bytes, body + 2),
                    sample_rate: u32_at(bytes, body + 4),
                    bits_per_sample: u16_at(bytes, body + 14),
                });
            }
            b"data" => {
                let fmt = fmt.ok_or_else(|| Error::Format("data chunk before fmt chunk".into()))?;
                if fmt.audio_format != 1 {
                    return Err(Error::UnsupportedFormat(format!(
                        "audio format tag {} (only integer PCM is supported)",
                        fmt.audio_format
                    )));
                }
                if fmt.channels != 1 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{} channels (only mono is supported)",
                        fmt.channels
                    )));
                }
                if fmt.bits_per_sample != 16 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}-bit samples (only 16-bit is supported)",
                        fmt.bits_per_sample
                    )));
                }
                if fmt.sample_rate == 0 {
                    return Err(Error::Format("sample rate of zero".into()));
                }
                if !size.is_multiple_of(2) {
                    return Err(Error::Format("odd-sized 16-bit data chunk".into()));
                }
                if size == 0 {
                    return Err(Error::Format("empty data chunk".into()));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect();
                return Ok(Pcm16 {
                    samples,
                    sample_rate: fmt.sample_rate,
                });
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = end + (size & 1);
    }
    Err(Error::Format("no data chunk".into()))
}

/// Canonical 44-byte-header mono 16-bit WAVE encoding.
pub fn encode_pcm16(pcm: &Pcm16) -> Vec<u8> {
    let data_len = (pcm.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&pcm.sample_rate.to_le_bytes());
    out.extend_from_slice(&(pcm.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &pcm.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Quantize to 16-bit PCM (round to nearest, saturating).
pub fn to_pcm16(w: &Waveform) -> Pcm16 {
    let samples = w
        .samples
        .iter()
        .map(|&x| (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect();
    Pcm16 {
        samples,
        sample_rate: w.sample_rate,
    }
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), &encode_pcm16(&to_pcm16(w)))
}

/// `out[t] = w[t] - alpha * w[t-1]`, first sample passed through.
pub fn pre_emphasis(w: &Waveform, alpha: Real) -> Result<Waveform> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Contract(format!(
            "pre-emphasis coefficient {alpha} outside [0, 1)"
        )));
    }
    let s = &w.samples;
    let mut out = Vec::with_capacity(s.len());
    out.push(s[0]);
    out.extend(s.windows(2).map(|p| p[1] - alpha * p[0]));
    Waveform::new(out, w.sample_rate)
}

/// Normalize to zero mean and unit (population) variance.
pub fn layer_norm_waveform(w: &Waveform, epsilon: Real) -> Result<Waveform> {
    let s = &w.samples;
    if s.len() < 2 {
        return Err(Error::Contract(
            "layer norm needs at least two samples".into(),
        ));
    }
    let n = s.len() as Real;
    let mean = s.iter().sum::<Real>() / n;
    let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / n;
    let denom = (var + epsilon).sqrt();
    if denom == 0.0 {
        return Err(Error::Domain(
            "layer norm of a constant waveform with zero epsilon".into(),
        ));
    }
    let out = s.iter().map(|x| (x - mean) / denom).collect();
    Waveform::new(out, w.sample_rate)
}

/// Repeat `samples` end to end until it is `len` long.
pub fn cyclic_extend(samples: &[Real], len: usize) -> Vec<Real> {
    samples.iter().copied().cycle().take(len).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropPlan {
    pub crop_len: usize,
    /// Strictly increasing offsets into the (possibly extended) signal.
    pub starts: Vec<usize>,
    /// Length of the signal the starts index into: the original length, or
    /// `crop_len` when the input was cyclically extended.
    pub source_len: usize,
}

impl CropPlan {
    pub fn is_extended(&self, original_len: usize) -> bool {
        self.source_len != original_len
    }

    /// Materialize every planned crop from `samples`.
    pub fn crops(&self, samples: &[Real]) -> Vec<Vec<Real>> {
        let source: std::borrow::Cow<'_, [Real]> = if samples.len() < self.crop_len {
            cyclic_extend(samples, self.crop_len).into()
        } else {
            samples.into()
        };
        self.starts
            .iter()
            .map(|&s| source[s..s + self.crop_len].to_vec())
            .collect()
    }
}

pub fn plan_crops(length: usize, crop_len: usize, overlap_fraction: Real) -> Result<CropPlan> {
    if crop_len == 0 {
        return Err(Error::Contract("crop length must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::Contract(format!(
            "overlap fraction {overlap_fraction} outside [0, 1)"
        )));
    }
    if length <= crop_len {
        return Ok(CropPlan {
            crop_len,
            starts: vec![0],
            source_len: crop_len,
        });
    }
    let hop = ((crop_len as Real * (1.0 - overlap_fraction)).floor() as usize).max(1);
    let last = length - crop_len;
    let mut starts: Vec<usize> = (0..).map(|i| i * hop).take_while(|&s| s <= last).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(CropPlan {
        crop_len,
        starts,
        source_len: length,
    })
}

/// One training crop at a uniformly random offset.
pub fn random_crop(samples: &[Real], crop_len: usize, rng: &mut impl Rng) -> Vec<Real> {
    if samples.len() <= crop_len {
        return cyclic_extend(samples, crop_len);
    }
    let start = rng.random_range(0..=samples.len() - crop_len);
    samples[start..start + crop_len].to_vec()
}
