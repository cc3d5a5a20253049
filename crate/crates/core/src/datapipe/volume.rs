//! `U2VOL1` volume files.
//!
//! Layout, all little-endian: the 8-byte magic `U2VOL1\0\0`, `u32` kind
//! (0 image, 1 label), `u32` C, D, H, W, three `f64` spacings (depth,
//! height, width), then the C×D×H×W payload as `f32` for images or `u16`
//! for labels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netarch::write_atomic;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 8] = b"U2VOL1\0\0";
const HEADER_LEN: usize = 8 + 5 * 4 + 3 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Label,
}

/// A C×D×H×W volume with physical voxel spacing in millimetres.
///
/// Label volumes have one channel holding integer class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Tensor<f32>,
    pub spacing: [f64; 3],
    pub kind: VolumeKind,
}

impl Volume {
    pub fn image(data: Tensor<f32>, spacing: [f64; 3]) -> Result<Self> {
        Self::with_kind(data, spacing, VolumeKind::Image)
    }

    pub fn label(data: Tensor<f32>, spacing: [f64; 3]) -> Result<Self> {
        Self::with_kind(data, spacing, VolumeKind::Label)
    }

    fn with_kind(data: Tensor<f32>, spacing: [f64; 3], kind: VolumeKind) -> Result<Self> {
        crate::tensor::expect_volume("volume", &data)?;
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let v = Volume { data, spacing, kind };
        if kind == VolumeKind::Label {
            if v.channels() != 1 {
                return Err(Error::shape("volume", "channels", "label volumes have one channel"));
            }
            check_label_values(v.data.data())?;
        }
        Ok(v)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn extent(&self) -> [usize; 3] {
        self.data.spatial()
    }

    /// Class index per voxel. Only meaningful for label volumes.
    pub fn labels(&self) -> Vec<usize> {
        self.data.data().iter().map(|&v| v as usize).collect()
    }

    /// Largest label value plus one (0 for an empty set).
    pub fn label_bound(&self) -> usize {
        self.data.data().iter().fold(0usize, |m, &v| m.max(v as usize + 1))
    }
}

fn check_label_values(values: &[f32]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if !(v >= 0.0 && v <= f32::from(u16::MAX) && v.fract() == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "label voxel {i} holds non-integer value {v}"
            )));
        }
    }
    Ok(())
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let [c, d, h, w] = [v.channels(), v.extent()[0], v.extent()[1], v.extent()[2]];
    let width = if v.kind == VolumeKind::Image { 4 } else { 2 };
    let mut out = Vec::with_capacity(HEADER_LEN + v.data.len() * width);
    out.extend_from_slice(VOLUME_MAGIC);
    let kind: u32 = match v.kind {
        VolumeKind::Image => 0,
        VolumeKind::Label => 1,
    };
    for x in [kind, c as u32, d as u32, h as u32, w as u32] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    match v.kind {
        VolumeKind::Image => v
            .data
            .data()
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VolumeKind::Label => v
            .data
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as u16).to_le_bytes())),
    }
    out
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::format(path, "not a U2VOL1 volume"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let f64_at = |i: usize| f64::from_le_bytes(bytes[28 + 8 * i..36 + 8 * i].try_into().expect("8 bytes"));
    let kind = match u32_at(0) {
        0 => VolumeKind::Image,
        1 => VolumeKind::Label,
        k => return Err(Error::format(path, format!("unknown volume kind {k}"))),
    };
    let shape = [u32_at(1), u32_at(2), u32_at(3), u32_at(4)];
    let spacing = [f64_at(0), f64_at(1), f64_at(2)];
    let n: usize = shape.iter().product();
    let width = if kind == VolumeKind::Image { 4 } else { 2 };
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * width {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} bytes, shape {shape:?} needs {}",
                payload.len(),
                n * width
            ),
        ));
    }
    let data: Vec<f32> = match kind {
        VolumeKind::Image => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect(),
        VolumeKind::Label => payload
            .chunks_exact(2)
            .map(|b| f32::from(u16::from_le_bytes(b.try_into().expect("2 bytes"))))
            .collect(),
    };
    let tensor = Tensor::new(&shape, data).map_err(|e| Error::format(path, e.to_string()))?;
    Volume::with_kind(tensor, spacing, kind).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(path, &bytes)
}

/// Reads a label map. Files stored with the image payload are accepted
/// when every value is a nonnegative integer.
pub fn read_label(path: &Path) -> Result<Volume> {
    let v = read_volume(path)?;
    match v.kind {
        VolumeKind::Label => Ok(v),
        VolumeKind::Image => {
            Volume::label(v.data, v.spacing).map_err(|e| Error::format(path, format!("not a label map: {e}")))
        }
    }
}
