//! Crop, resample and intensity normalization, applied in that order.

use std::path::{Path, PathBuf};

use super::manifest::{Case, CropBox, DatasetManifest, Split};
use super::pool::par_map;
use super::volume::{read_label, read_volume, write_volume, Volume, VolumeKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Crops image and label to the tight box around voxels where any image
/// channel is nonzero. An all-zero image is returned unchanged with the
/// full box.
pub fn crop_nonzero(image: &Volume, label: Option<&Volume>) -> Result<(Volume, Option<Volume>, CropBox)> {
    let [c, d, h, w] = crate::tensor::expect_volume("crop_nonzero", &image.data)?;
    if let Some(l) = label {
        if l.extent() != [d, h, w] {
            return Err(Error::shape(
                "crop_nonzero",
                "spatial",
                format!("image {:?} vs label {:?}", [d, h, w], l.extent()),
            ));
        }
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let x = image.data.data();
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    if x[((ch * d + z) * h + y) * w + xx] != 0.0 {
                        for (a, v) in [z, y, xx].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v + 1);
                        }
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Ok((image.clone(), label.cloned(), CropBox::full([d, h, w])));
    }
    let bbox = CropBox {
        start: lo,
        end: hi,
        original: [d, h, w],
    };
    let image = Volume {
        data: crop(&image.data, &bbox),
        ..image.clone()
    };
    let label = label.map(|l| Volume {
        data: crop(&l.data, &bbox),
        ..l.clone()
    });
    Ok((image, label, bbox))
}

pub(crate) fn crop(t: &Tensor<f32>, b: &CropBox) -> Tensor<f32> {
    let [c, _, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let [od, oh, ow] = b.extent();
    let src = t.data();
    let mut out = Vec::with_capacity(c * od * oh * ow);
    for ch in 0..c {
        for z in b.start[0]..b.end[0] {
            for y in b.start[1]..b.end[1] {
                let row = ((ch * t.shape()[1] + z) * h + y) * w;
                out.extend_from_slice(&src[row + b.start[2]..row + b.end[2]]);
            }
        }
    }
    Tensor::new(&[c, od, oh, ow], out).expect("crop extents are positive")
}

/// Per-axis median of training-case spacings; even counts take the lower median.
pub fn median_spacing(manifest: &DatasetManifest) -> Result<[f64; 3]> {
    let train: Vec<&Case> = manifest.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Config(format!(
            "domain `{}` has no training cases",
            manifest.domain.id
        )));
    }
    Ok([0, 1, 2].map(|a| {
        let mut v: Vec<f64> = train.iter().map(|c| c.spacing[a]).collect();
        v.sort_by(f64::total_cmp);
        v[(v.len() - 1) / 2]
    }))
}

/// Extent after resampling one axis: `round(n · old / new)`, at least 1.
pub fn resampled_extent(n: usize, old: f64, new: f64) -> usize {
    ((n as f64 * old / new).round() as usize).max(1)
}

/// Resamples to `target` spacing: trilinear for images, nearest for labels.
pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target:?}"
        )));
    }
    let e = v.extent();
    let out = [0, 1, 2].map(|a| resampled_extent(e[a], v.spacing[a], target[a]));
    Ok(Volume {
        data: resize(&v.data, out, v.kind),
        spacing: target,
        kind: v.kind,
    })
}

/// Resizes the spatial axes of a C×D×H×W tensor to `out`, sampling at voxel
/// centres. Equal extents return the data unchanged.
pub fn resize(t: &Tensor<f32>, out: [usize; 3], kind: VolumeKind) -> Tensor<f32> {
    let mut cur = t.clone();
    for axis in 0..3 {
        if cur.shape()[axis + 1] != out[axis] {
            cur = resize_axis(&cur, axis + 1, out[axis], kind);
        }
    }
    cur
}

fn source_coord(j: usize, n_in: usize, n_out: usize) -> f64 {
    let x = (j as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    x.clamp(0.0, (n_in - 1) as f64)
}

fn resize_axis(t: &Tensor<f32>, axis: usize, n_out: usize, kind: VolumeKind) -> Tensor<f32> {
    let shape = t.shape();
    let n_in = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let src = t.data();
    let mut data = vec![0f32; outer * n_out * inner];
    for j in 0..n_out {
        let x = source_coord(j, n_in, n_out);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = (x - i0 as f64) as f32;
        for o in 0..outer {
            let dst = &mut data[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            let a = &src[(o * n_in + i0) * inner..(o * n_in + i0 + 1) * inner];
            match kind {
                VolumeKind::Label => {
                    let pick = if frac >= 0.5 { i1 } else { i0 };
                    dst.copy_from_slice(&src[(o * n_in + pick) * inner..(o * n_in + pick + 1) * inner]);
                }
                VolumeKind::Image => {
                    let b = &src[(o * n_in + i1) * inner..(o * n_in + i1 + 1) * inner];
                    for k in 0..inner {
                        let v = (1.0 - frac) * a[k] + frac * b[k];
                        dst[k] = v.clamp(a[k].min(b[k]), a[k].max(b[k]));
                    }
                }
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = n_out;
    Tensor::new(&new_shape, data).expect("positive extents")
}

/// Percentile `p` (0..=100) of sorted data, interpolating linearly between
/// order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Per channel: clip to the 2nd/98th percentiles, then z-score with the
/// clipped statistics. Constant channels become zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let c = v.channels();
    let n = v.data.len() / c;
    let mut data = v.data.data().to_vec();
    for ch in data.chunks_mut(n) {
        let mut sorted: Vec<f64> = ch.iter().map(|&x| f64::from(x)).collect();
        sorted.sort_by(f64::total_cmp);
        let lo = percentile(&sorted, 2.0);
        let hi = percentile(&sorted, 98.0);
        let clipped: Vec<f64> = ch.iter().map(|&x| f64::from(x).clamp(lo, hi)).collect();
        let mean = clipped.iter().sum::<f64>() / n as f64;
        let var = clipped.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for (dst, x) in ch.iter_mut().zip(&clipped) {
            *dst = if std > 0.0 { ((x - mean) / std) as f32 } else { 0.0 };
        }
    }
    Volume {
        data: Tensor::new(v.data.shape(), data).expect("same shape"),
        spacing: v.spacing,
        kind: v.kind,
    }
}

/// Result of preprocessing one case.
#[derive(Clone, Debug)]
pub struct Processed {
    pub image: Volume,
    pub label: Option<Volume>,
    pub crop: CropBox,
}

/// Full pipeline for one case. Cases already normalized only get resampled,
/// which is the identity when the spacing already matches.
pub fn preprocess_case(
    image: &Volume,
    label: Option<&Volume>,
    target: [f64; 3],
    already: Option<CropBox>,
) -> Result<Processed> {
    let (image, label, crop) = match already {
        Some(b) => (image.clone(), label.cloned(), b),
        None => crop_nonzero(image, label)?,
    };
    let image = resample(&image, target)?;
    let label = label.map(|l| resample(&l, target)).transpose()?;
    let image = if already.is_some() {
        image
    } else {
        normalize_intensity(&image)
    };
    Ok(Processed { image, label, crop })
}

/// One line of the preprocessing log.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CaseReport {
    pub case: String,
    pub crop: CropBox,
    pub extent: [usize; 3],
    pub skipped_normalization: bool,
}

/// Preprocesses every case of `manifest` into `out_dir`, writing volumes
/// and `out_dir/manifest.json`.
pub fn preprocess_dataset(
    manifest: &DatasetManifest,
    out_dir: &Path,
    workers: usize,
) -> Result<(DatasetManifest, Vec<CaseReport>)> {
    let target = median_spacing(manifest)?;
    let classes = manifest.domain.classes;
    let jobs: Vec<&Case> = manifest.cases.iter().collect();
    let results = par_map(workers, jobs, |_, case| -> Result<(Case, CaseReport)> {
        let image = read_volume(&manifest.resolve(&case.image))?;
        if image.kind != VolumeKind::Image {
            return Err(Error::format(manifest.resolve(&case.image), "expected an image volume"));
        }
        let label = match &case.label {
            Some(p) => {
                let path = manifest.resolve(p);
                let l = read_label(&path)?;
                if l.label_bound() > classes {
                    return Err(Error::format(
                        path,
                        format!("label {} out of range for {classes} classes", l.label_bound() - 1),
                    ));
                }
                Some(l)
            }
            None => None,
        };
        let already = if case.normalized {
            Some(case.crop.unwrap_or_else(|| CropBox::full(image.extent())))
        } else {
            None
        };
        let out = preprocess_case(&image, label.as_ref(), target, already)?;
        let image_rel = PathBuf::from("images").join(format!("{}.u2vol", case.id));
        write_volume(&out_dir.join(&image_rel), &out.image)?;
        let label_rel = match &out.label {
            Some(l) => {
                let rel = PathBuf::from("labels").join(format!("{}.u2vol", case.id));
                write_volume(&out_dir.join(&rel), l)?;
                Some(rel)
            }
            None => None,
        };
        let report = CaseReport {
            case: case.id.clone(),
            crop: out.crop,
            extent: out.image.extent(),
            skipped_normalization: already.is_some(),
        };
        let case = Case {
            image: image_rel,
            label: label_rel,
            spacing: out.image.spacing,
            crop: Some(out.crop),
            normalized: true,
            ..case.clone()
        };
        Ok((case, report))
    });
    let mut cases = Vec::new();
    let mut reports = Vec::new();
    for r in results {
        let (c, rep) = r?;
        cases.push(c);
        reports.push(rep);
    }
    let mut domain = manifest.domain.clone();
    domain.median_spacing = target;
    let mut out = DatasetManifest::new(domain, cases);
    out.train_fraction = manifest.train_fraction;
    out.target_spacing = Some(target);
    out.save(&out_dir.join("manifest.json"))?;
    Ok((out, reports))
}

/// Patch size and level count for a domain trained on its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchPlan {
    pub levels: usize,
    pub patch: [usize; 3],
}

/// Voxel budget for a planned patch (one 128³ patch).
pub const PATCH_VOXEL_BUDGET: usize = 128 * 128 * 128;

/// Halves each axis until its deepest feature map reaches about 8 voxels:
/// per-axis `floor(log2(extent / 8))` clamped to 2..=6, and the network
/// uses the smallest. Patch extents are the median extents rounded down to
/// a multiple of `2^levels`, then shrunk along the longest axis until the
/// voxel budget holds.
pub fn plan_patch(median_extent: [usize; 3]) -> PatchPlan {
    let levels = median_extent
        .iter()
        .map(|&e| ((e as f64 / 8.0).log2().floor().max(0.0) as usize).clamp(2, 6))
        .min()
        .expect("three axes");
    let unit = 1usize << levels;
    let mut patch = median_extent.map(|e| (e / unit * unit).max(unit));
    while patch.iter().product::<usize>() > PATCH_VOXEL_BUDGET {
        let (a, _) = patch
            .iter()
            .enumerate()
            .max_by_key(|&(i, &e)| (e, std::cmp::Reverse(i)))
            .expect("three axes");
        if patch[a] <= unit {
            break;
        }
        patch[a] -= unit;
    }
    PatchPlan { levels, patch }
}

/// Per-axis median extent of the training cases' volumes.
pub fn median_extent(extents: &[[usize; 3]]) -> [usize; 3] {
    [0, 1, 2].map(|a| {
        let mut v: Vec<usize> = extents.iter().map(|e| e[a]).collect();
        v.sort_unstable();
        v.get(v.len().saturating_sub(1) / 2).copied().unwrap_or(1)
    })
}
