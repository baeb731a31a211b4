//! Binary tensor files and mono PCM-16 WAV input.
//!
//! Tensor file layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "KFTENSR\0"
//! version  u32      1
//! rank     u32      1..=4
//! dims     rank x u64
//! payload  product(dims) x f64, row-major
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const TENSOR_MAGIC: &[u8; 8] = b"KFTENSR\0";
pub const TENSOR_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if !t.all_finite() {
        return Err(Error::invalid("refusing to write non-finite tensor values"));
    }
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize, field: &'static str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format {
            field,
            detail: format!("truncated: need {n} bytes, have {}", buf.len()),
        });
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn u64_le(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut buf = bytes;
    let magic = take(&mut buf, 8, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!("expected {TENSOR_MAGIC:?}, found {magic:?}"),
        });
    }
    let version = u32_le(take(&mut buf, 4, "version")?);
    if version != TENSOR_VERSION {
        return Err(Error::Format {
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let rank = u32_le(take(&mut buf, 4, "rank")?) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format {
            field: "rank",
            detail: format!("rank {rank} outside 1..={MAX_RANK}"),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64_le(take(&mut buf, 8, "dims")?);
        if d == 0 {
            return Err(Error::Format {
                field: "dims",
                detail: "zero extent".into(),
            });
        }
        dims.push(d as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format {
            field: "dims",
            detail: "element count overflows".into(),
        })?;
    if buf.len() != n {
        return Err(Error::Format {
            field: "payload length",
            detail: format!("expected {n} bytes, found {}", buf.len()),
        });
    }
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Mono PCM-16 samples scaled to [-1, 1) by 1/32768, plus the sample rate.
pub fn read_wav_mono(path: impl AsRef<Path>) -> Result<(Tensor, u32)> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(map_wav_err)?;
    let fmt = reader.spec();
    if fmt.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels, expected mono",
            fmt.channels
        )));
    }
    if fmt.sample_format != hound::SampleFormat::Int || fmt.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{:?} {}-bit samples, expected 16-bit PCM",
            fmt.sample_format, fmt.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(map_wav_err)?;
    if samples.is_empty() {
        return Err(Error::UnsupportedFormat("empty data chunk".into()));
    }
    let n = samples.len();
    Ok((Tensor::new(vec![n], samples)?, fmt.sample_rate))
}

/// Writes samples in [-1, 1] as mono PCM-16 (scaled by 32767, clamped).
pub fn write_wav_mono(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let fmt = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), fmt)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

fn map_wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::Unsupported => {
            Error::UnsupportedFormat("non-PCM or unsupported WAV encoding".into())
        }
        hound::Error::IoError(io) => Error::Io {
            path: "<wav>".into(),
            source: io,
        },
        other => Error::Wav(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Tensor {
        Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap()
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tensor");
        let t = sample();
        write_tensor(&p, &t).unwrap();
        assert!(read_tensor(&p).unwrap().bit_eq(&t));
    }

    #[test]
    fn bad_magic_named() {
        let mut b = encode_tensor(&sample()).unwrap();
        b[..8].copy_from_slice(b"XXXXXXX\0");
        match decode_tensor(&b) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_payload_named() {
        let b = encode_tensor(&sample()).unwrap();
        match decode_tensor(&b[..b.len() - 1]) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "payload length"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_version_and_truncated_header() {
        let mut b = encode_tensor(&sample()).unwrap();
        b[8] = 9;
        assert!(matches!(
            decode_tensor(&b),
            Err(Error::Format {
                field: "version",
                ..
            })
        ));
        let b = encode_tensor(&sample()).unwrap();
        assert!(matches!(
            decode_tensor(&b[..20]),
            Err(Error::Format { field: "dims", .. })
        ));
    }

    #[test]
    fn non_finite_write_rejected() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(encode_tensor(&t).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            dims in prop::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let n: usize = dims.iter().product();
            let mut rng = crate::rng::Seed(seed).rng();
            let data: Vec<f64> = (0..n)
                .map(|_| f64::from_bits(rng.random::<u64>()))
                .map(|x| if x.is_finite() { x } else { 0.5 })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }

    fn write_raw_wav(path: &Path, fmt: hound::WavSpec, samples: &[i16]) {
        let mut w = hound::WavWriter::create(path, fmt).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    fn mono16(sr: u32) -> hound::WavSpec {
        hound::WavSpec {
            channels: 1,
            sample_rate: sr,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        }
    }

    #[test]
    fn wav_silence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw_wav(&p, mono16(16_000), &vec![0; 16_000]);
        let (t, sr) = read_wav_mono(&p).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(t.len(), 16_000);
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wav_full_scale_square() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.wav");
        let s: Vec<i16> = (0..100)
            .map(|i| if (i / 10) % 2 == 0 { 32767 } else { -32767 })
            .collect();
        write_raw_wav(&p, mono16(8_000), &s);
        let (t, _) = read_wav_mono(&p).unwrap();
        for (&x, &raw) in t.data().iter().zip(&s) {
            assert_eq!(x, f64::from(raw) / 32768.0);
        }
        assert_eq!(t.data()[0], 32767.0 / 32768.0);
    }

    #[test]
    fn wav_stereo_and_other_depths_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let mut fmt = mono16(8_000);
        fmt.channels = 2;
        write_raw_wav(&p, fmt, &[0; 64]);
        assert!(matches!(
            read_wav_mono(&p),
            Err(Error::UnsupportedFormat(_))
        ));

        let p = dir.path().join("f.wav");
        let fmt = hound::WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, fmt).unwrap();
        for _ in 0..16 {
            w.write_sample(0.0f32).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(
            read_wav_mono(&p),
            Err(Error::UnsupportedFormat(_))
        ));
    }
}
