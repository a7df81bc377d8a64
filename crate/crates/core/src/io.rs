//! File formats: PGM for viewing, raw little-endian `f32` with a JSON sidecar
//! for exact round-trips, model checkpoints and loss traces.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::BinaryMask;
use crate::evaluator::{EvaluatorModel, TrainingMeta};
use crate::image::{DeformationField, ImageGrid};
use crate::nn::evaluator_net::EvaluatorArch;
use crate::nn::unet::UNetArch;
use crate::registration::RegistrationNetwork;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IMSECKPT";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text.as_bytes())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Parsed binary PGM: dimensions, maximum value and samples.
struct Pgm {
    height: usize,
    width: usize,
    maxval: u16,
    samples: Vec<u16>,
}

fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<Pgm> {
    let bad = |reason: &str| Error::format(path, reason);
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut number = |what: &str| -> Result<usize> { token()?.parse().map_err(|_| bad(&format!("bad {what}"))) };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    let data = bytes.get(pos + 1..).unwrap_or_default();
    let n = height * width;
    let samples: Vec<u16> = if maxval < 256 {
        if data.len() < n {
            return Err(bad("truncated pixel data"));
        }
        data[..n].iter().map(|&b| b as u16).collect()
    } else {
        if data.len() < 2 * n {
            return Err(bad("truncated pixel data"));
        }
        data[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(Pgm {
        height,
        width,
        maxval: maxval as u16,
        samples,
    })
}

fn encode_pgm(height: usize, width: usize, maxval: u16, samples: impl Iterator<Item = u16>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    for s in samples {
        if maxval < 256 {
            out.push(s as u8);
        } else {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

/// Writes an image quantized to 8 or 16 bits, mapping [-1, 1] to [0, max].
pub fn write_pgm<T: Scalar>(path: &Path, image: &ImageGrid<T>, sixteen_bit: bool) -> Result<()> {
    let maxval: u16 = if sixteen_bit { 65535 } else { 255 };
    let m = maxval as f64;
    let samples = image
        .values()
        .iter()
        .map(move |v| ((v.as_f64() + 1.0) / 2.0 * m).round().clamp(0.0, m) as u16);
    write(path, &encode_pgm(image.height(), image.width(), maxval, samples))
}

pub fn read_pgm<T: Scalar>(path: &Path) -> Result<ImageGrid<T>> {
    let pgm = parse_pgm(path, &read(path)?)?;
    let m = pgm.maxval as f64;
    let values = pgm.samples.iter().map(|&s| T::lit(2.0 * s as f64 / m - 1.0)).collect();
    ImageGrid::from_clamped(pgm.height, pgm.width, values)
}

pub fn write_mask_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.shape();
    write(path, &encode_pgm(h, w, 255, mask.values().iter().map(|&b| if b { 255 } else { 0 })))
}

pub fn read_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let pgm = parse_pgm(path, &read(path)?)?;
    let half = pgm.maxval / 2;
    BinaryMask::new(pgm.height, pgm.width, pgm.samples.iter().map(|&s| s > half).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawHeader {
    pub height: usize,
    pub width: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

/// Sidecar path: `moving.raw` -> `moving.json`.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn write_raw<T: Scalar>(path: &Path, header: RawHeader, values: &[T]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    write(path, &bytes)?;
    write_json(&sidecar_path(path), &header)
}

fn read_raw<T: Scalar>(path: &Path) -> Result<(RawHeader, Vec<T>)> {
    let header: RawHeader = read_json(&sidecar_path(path))?;
    let bytes = read(path)?;
    let expected = header.height * header.width * header.channels * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {header:?}, found {}", bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok((header, values))
}

pub fn write_image_raw<T: Scalar>(path: &Path, image: &ImageGrid<T>) -> Result<()> {
    let header = RawHeader {
        height: image.height(),
        width: image.width(),
        channels: 1,
    };
    write_raw(path, header, image.values())
}

pub fn read_image_raw<T: Scalar>(path: &Path) -> Result<ImageGrid<T>> {
    let (h, values) = read_raw(path)?;
    if h.channels != 1 {
        return Err(Error::format(path, "image sidecar must have one channel"));
    }
    ImageGrid::new(h.height, h.width, values)
}

/// Fields are stored interleaved `(dy, dx)` with `channels: 2`.
pub fn write_field_raw<T: Scalar>(path: &Path, field: &DeformationField<T>) -> Result<()> {
    let (height, width) = field.shape();
    write_raw(
        path,
        RawHeader {
            height,
            width,
            channels: 2,
        },
        field.as_slice(),
    )
}

pub fn read_field_raw<T: Scalar>(path: &Path) -> Result<DeformationField<T>> {
    let (h, values) = read_raw(path)?;
    if h.channels != 2 {
        return Err(Error::format(path, "field sidecar must have two channels"));
    }
    DeformationField::from_interleaved(h.height, h.width, values)
}

/// Reads an image by extension: `.raw` (with sidecar) or `.pgm`.
pub fn read_image<T: Scalar>(path: &Path) -> Result<ImageGrid<T>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("raw") => read_image_raw(path),
        Some("pgm") => read_pgm(path),
        _ => Err(Error::format(path, "expected a .raw or .pgm image")),
    }
}

pub fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    write(path, s.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CheckpointHeader {
    Evaluator {
        arch: EvaluatorArch,
        meta: TrainingMeta,
        param_count: usize,
    },
    RegistrationNetwork {
        arch: UNetArch,
        steps: usize,
        param_count: usize,
    },
}

fn write_checkpoint<T: Scalar>(path: &Path, header: &CheckpointHeader, params: &[T]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + 4 * params.len());
    bytes.write_all(CHECKPOINT_MAGIC).expect("vec write");
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in params {
        bytes.extend_from_slice(&p.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    write(path, &bytes)
}

fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, Vec<T>)> {
    let bytes = read(path)?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + len {
        return Err(Error::format(path, "truncated checkpoint header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..12 + len]).map_err(|e| Error::format(path, e.to_string()))?;
    let count = match &header {
        CheckpointHeader::Evaluator { param_count, .. } | CheckpointHeader::RegistrationNetwork { param_count, .. } => {
            *param_count
        }
    };
    let body = &bytes[12 + len..];
    if body.len() != 4 * count {
        return Err(Error::format(path, "weight count does not match header"));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok((header, params))
}

pub fn save_evaluator<T: Scalar>(path: &Path, model: &EvaluatorModel<T>) -> Result<()> {
    let header = CheckpointHeader::Evaluator {
        arch: model.arch(),
        meta: model.meta.clone(),
        param_count: model.params().len(),
    };
    write_checkpoint(path, &header, model.params())
}

pub fn load_evaluator<T: Scalar>(path: &Path) -> Result<EvaluatorModel<T>> {
    match read_checkpoint(path)? {
        (CheckpointHeader::Evaluator { arch, meta, .. }, params) => EvaluatorModel::from_parts(arch, params, meta),
        _ => Err(Error::format(path, "checkpoint does not hold an evaluator")),
    }
}

pub fn save_registration_network<T: Scalar>(path: &Path, network: &RegistrationNetwork<T>) -> Result<()> {
    let header = CheckpointHeader::RegistrationNetwork {
        arch: network.arch(),
        steps: network.steps,
        param_count: network.params().len(),
    };
    write_checkpoint(path, &header, network.params())
}

pub fn load_registration_network<T: Scalar>(path: &Path) -> Result<RegistrationNetwork<T>> {
    match read_checkpoint(path)? {
        (CheckpointHeader::RegistrationNetwork { arch, steps, .. }, params) => {
            RegistrationNetwork::from_parts(arch, params, steps)
        }
        _ => Err(Error::format(path, "checkpoint does not hold a registration network")),
    }
}
