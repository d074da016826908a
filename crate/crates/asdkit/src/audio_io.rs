//! Reading and writing single-channel PCM waveforms.
//!
//! The reader accepts RIFF/WAVE files with 16-bit integer PCM or 32-bit IEEE
//! float samples; the writer always produces 16-bit PCM mono. Input must
//! already be at the pipeline rate of 16 kHz — a mismatching rate is an
//! error, never silently resampled, so dataset problems surface early.
//!
//! Integer scaling is asymmetric by one LSB: sample `-32768` maps to `-1.0`
//! while `+32767` maps to `32767/32768`. On write, `+1.0` saturates to
//! `+32767`. A write→read round trip is therefore exact to within one
//! quantization step (`1/32768`) per sample.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

/// Sample rate every pipeline input must have, in Hz.
pub const PIPELINE_SAMPLE_RATE: u32 = 16_000;

const PCM_FULL_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: malformed '{chunk}' chunk: {detail}")]
    MalformedChunk {
        path: String,
        chunk: &'static str,
        detail: String,
    },
    #[error("{path}: unsupported encoding: {detail}")]
    UnsupportedFormat { path: String, detail: String },
    #[error("{path}: sample rate is {found} Hz, pipeline requires {expected} Hz (no resampling)")]
    RateMismatch {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: channel {requested} requested but file has {available} channel(s)")]
    ChannelOutOfRange {
        path: String,
        requested: u16,
        available: u16,
    },
    #[error("sample {value} at index {index} is outside [-1, 1]")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("sample at index {index} is not finite")]
    NonFinite { index: usize },
    #[error("clip has no samples")]
    Empty,
    #[error("sample rate must be positive")]
    ZeroSampleRate,
}

impl AudioError {
    fn io(path: &Path, source: io::Error) -> Self {
        AudioError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    source_name: String,
}

impl AudioClip {
    /// Validates the clip invariants: non-empty, finite samples in `[-1, 1]`,
    /// positive sample rate.
    pub fn new(
        samples: Vec<f64>,
        sample_rate: u32,
        source_name: impl Into<String>,
    ) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        for (index, &value) in samples.iter().enumerate() {
            if !value.is_finite() {
                return Err(AudioError::NonFinite { index });
            }
            if !(-1.0..=1.0).contains(&value) {
                return Err(AudioError::SampleOutOfRange { index, value });
            }
        }
        Ok(AudioClip {
            samples,
            sample_rate,
            source_name: source_name.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SampleEncoding {
    Pcm16,
    Float32,
}

struct FmtChunk {
    encoding: SampleEncoding,
    channels: u16,
    sample_rate: u32,
    block_align: u16,
}

/// Reads a WAV file, taking channel 0 of multichannel recordings.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    read_wav_channel(path, 0)
}

/// Reads a WAV file, selecting one channel of a multichannel recording.
pub fn read_wav_channel(path: impl AsRef<Path>, channel: u16) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| AudioError::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut riff = [0u8; 4];
    reader
        .read_exact(&mut riff)
        .map_err(|e| malformed(path, "RIFF", format!("cannot read tag: {e}")))?;
    if &riff != b"RIFF" {
        return Err(malformed(
            path,
            "RIFF",
            format!("expected 'RIFF' tag, found {:?}", String::from_utf8_lossy(&riff)),
        ));
    }
    let _riff_size = reader
        .read_u32::<LittleEndian>()
        .map_err(|e| malformed(path, "RIFF", format!("cannot read size: {e}")))?;
    let mut wave = [0u8; 4];
    reader
        .read_exact(&mut wave)
        .map_err(|e| malformed(path, "WAVE", format!("cannot read tag: {e}")))?;
    if &wave != b"WAVE" {
        return Err(malformed(
            path,
            "WAVE",
            format!("expected 'WAVE' tag, found {:?}", String::from_utf8_lossy(&wave)),
        ));
    }

    let mut fmt: Option<FmtChunk> = None;
    loop {
        let mut chunk_id = [0u8; 4];
        match reader.read_exact(&mut chunk_id) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                return Err(malformed(path, "data", "chunk missing".to_string()));
            }
            Err(e) => return Err(AudioError::io(path, e)),
        }
        let chunk_size = reader
            .read_u32::<LittleEndian>()
            .map_err(|e| malformed(path, "data", format!("cannot read chunk size: {e}")))?;

        match &chunk_id {
            b"fmt " => fmt = Some(parse_fmt(path, &mut reader, chunk_size)?),
            b"data" => {
                let fmt = fmt.ok_or_else(|| {
                    malformed(path, "data", "found before 'fmt ' chunk".to_string())
                })?;
                return decode_data(path, &mut reader, &fmt, chunk_size, channel);
            }
            _ => {
                // Unknown chunk: skip payload plus the pad byte of odd sizes.
                let skip = chunk_size as u64 + (chunk_size as u64 & 1);
                io::copy(&mut reader.by_ref().take(skip), &mut io::sink())
                    .map_err(|e| AudioError::io(path, e))?;
            }
        }
    }
}

fn malformed(path: &Path, chunk: &'static str, detail: String) -> AudioError {
    AudioError::MalformedChunk {
        path: path.display().to_string(),
        chunk,
        detail,
    }
}

fn parse_fmt(
    path: &Path,
    reader: &mut impl Read,
    chunk_size: u32,
) -> Result<FmtChunk, AudioError> {
    if chunk_size < 16 {
        return Err(malformed(
            path,
            "fmt ",
            format!("chunk size {chunk_size} is smaller than 16"),
        ));
    }
    let mut body = vec![0u8; chunk_size as usize];
    reader
        .read_exact(&mut body)
        .map_err(|e| malformed(path, "fmt ", format!("truncated: {e}")))?;
    if chunk_size % 2 == 1 {
        let mut pad = [0u8; 1];
        reader
            .read_exact(&mut pad)
            .map_err(|e| malformed(path, "fmt ", format!("missing pad byte: {e}")))?;
    }
    let mut cur = &body[..];
    let format_tag = cur.read_u16::<LittleEndian>().unwrap();
    let channels = cur.read_u16::<LittleEndian>().unwrap();
    let sample_rate = cur.read_u32::<LittleEndian>().unwrap();
    let _byte_rate = cur.read_u32::<LittleEndian>().unwrap();
    let block_align = cur.read_u16::<LittleEndian>().unwrap();
    let bits_per_sample = cur.read_u16::<LittleEndian>().unwrap();

    let encoding = match (format_tag, bits_per_sample) {
        (1, 16) => SampleEncoding::Pcm16,
        (3, 32) => SampleEncoding::Float32,
        _ => {
            return Err(AudioError::UnsupportedFormat {
                path: path.display().to_string(),
                detail: format!(
                    "format tag {format_tag} with {bits_per_sample} bits per sample \
                     (supported: PCM 16-bit, IEEE float 32-bit)"
                ),
            })
        }
    };
    if channels == 0 {
        return Err(malformed(path, "fmt ", "zero channels".to_string()));
    }
    let expected_align = channels * (bits_per_sample / 8);
    if block_align != expected_align {
        return Err(malformed(
            path,
            "fmt ",
            format!("block align {block_align}, expected {expected_align}"),
        ));
    }
    Ok(FmtChunk {
        encoding,
        channels,
        sample_rate,
        block_align,
    })
}

fn decode_data(
    path: &Path,
    reader: &mut impl Read,
    fmt: &FmtChunk,
    chunk_size: u32,
    channel: u16,
) -> Result<AudioClip, AudioError> {
    if fmt.sample_rate != PIPELINE_SAMPLE_RATE {
        return Err(AudioError::RateMismatch {
            path: path.display().to_string(),
            found: fmt.sample_rate,
            expected: PIPELINE_SAMPLE_RATE,
        });
    }
    if channel >= fmt.channels {
        return Err(AudioError::ChannelOutOfRange {
            path: path.display().to_string(),
            requested: channel,
            available: fmt.channels,
        });
    }
    if !(chunk_size as usize).is_multiple_of(fmt.block_align as usize) {
        return Err(malformed(
            path,
            "data",
            format!(
                "size {chunk_size} is not a multiple of the {}-byte frame",
                fmt.block_align
            ),
        ));
    }
    let n_frames = chunk_size as usize / fmt.block_align as usize;
    let mut samples = Vec::with_capacity(n_frames);
    for frame in 0..n_frames {
        for ch in 0..fmt.channels {
            let value = match fmt.encoding {
                SampleEncoding::Pcm16 => {
                    let raw = reader.read_i16::<LittleEndian>().map_err(|e| {
                        malformed(path, "data", format!("truncated at frame {frame}: {e}"))
                    })?;
                    raw as f64 / PCM_FULL_SCALE
                }
                SampleEncoding::Float32 => {
                    let raw = reader.read_f32::<LittleEndian>().map_err(|e| {
                        malformed(path, "data", format!("truncated at frame {frame}: {e}"))
                    })? as f64;
                    if !raw.is_finite() {
                        return Err(AudioError::NonFinite {
                            index: frame * fmt.channels as usize + ch as usize,
                        });
                    }
                    raw.clamp(-1.0, 1.0)
                }
            };
            if ch == channel {
                samples.push(value);
            }
        }
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    AudioClip::new(samples, fmt.sample_rate, name)
}

/// Writes a clip as 16-bit PCM mono. `+1.0` saturates to `+32767`.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| AudioError::io(path, e))?;
    let mut w = BufWriter::new(file);

    let data_bytes = (clip.len() * 2) as u32;
    let write = |w: &mut BufWriter<File>| -> io::Result<()> {
        w.write_all(b"RIFF")?;
        w.write_u32::<LittleEndian>(36 + data_bytes)?;
        w.write_all(b"WAVE")?;
        w.write_all(b"fmt ")?;
        w.write_u32::<LittleEndian>(16)?;
        w.write_u16::<LittleEndian>(1)?; // PCM
        w.write_u16::<LittleEndian>(1)?; // mono
        w.write_u32::<LittleEndian>(clip.sample_rate())?;
        w.write_u32::<LittleEndian>(clip.sample_rate() * 2)?;
        w.write_u16::<LittleEndian>(2)?;
        w.write_u16::<LittleEndian>(16)?;
        w.write_all(b"data")?;
        w.write_u32::<LittleEndian>(data_bytes)?;
        for &s in clip.samples() {
            w.write_i16::<LittleEndian>(quantize_i16(s))?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| AudioError::io(path, e))
}

fn quantize_i16(sample: f64) -> i16 {
    (sample * PCM_FULL_SCALE).round().clamp(-32768.0, 32767.0) as i16
}
