//! Synthetic multi-domain datasets.
//!
//! Each domain renders one family of structures (spheres, boxes or tubes)
//! inside an ellipsoidal body with zeros outside. Class 1 is the structure,
//! class 2 a nested core, and higher classes small separate blobs. Every
//! modality is an affine re-rendering of the same class map with its own
//! noise. Output depends only on the style seed, the domain id and the
//! case index.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Case, DatasetManifest, Split};
use super::volume::{write_volume, Volume};
use crate::error::{Error, Result};
use crate::netarch::DomainSpec;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
    Tube,
}

impl Shape {
    const ALL: [Shape; 3] = [Shape::Sphere, Shape::Box, Shape::Tube];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub cases: usize,
    /// Inclusive range of per-axis extents.
    pub extent_range: [usize; 2],
    /// Relative spread of per-case spacing around the domain spacing.
    pub spacing_jitter: f64,
    /// Structure family; derived from the domain id when absent.
    pub shape: Option<Shape>,
    /// Noise standard deviation relative to the class contrast.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            cases: 10,
            extent_range: [32, 48],
            spacing_jitter: 0.2,
            shape: None,
            noise: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.extent_range;
        if self.cases == 0 {
            return Err(Error::Config("synthetic dataset needs at least one case".into()));
        }
        if lo < 16 || hi < lo {
            return Err(Error::Config(format!(
                "extent range [{lo}, {hi}] must satisfy 16 <= lo <= hi"
            )));
        }
        if !(0.0..0.9).contains(&self.spacing_jitter) || !(self.noise >= 0.0) {
            return Err(Error::Config(
                "spacing_jitter must be in [0, 0.9) and noise >= 0".into(),
            ));
        }
        Ok(())
    }
}

struct Style {
    shape: Shape,
    /// Per-modality (gain, offset, class means).
    modalities: Vec<(f64, f64, Vec<f64>)>,
    noise: f64,
}

fn style(spec: &DomainSpec, cfg: &SynthConfig, style_seed: u64) -> Style {
    let key = seed::derive(style_seed, &spec.id);
    let mut rng = seed::rng(seed::derive(key, "style"));
    let shape = cfg.shape.unwrap_or(Shape::ALL[(key % 3) as usize]);
    // class 0 = body tissue; foreground classes step away from it
    let mut means = vec![1.0];
    for _ in 1..spec.classes {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let prev = *means.last().expect("nonempty");
        means.push(prev + sign * rng.random_range(1.0..2.0));
    }
    let lowest = means.iter().cloned().fold(f64::INFINITY, f64::min);
    for m in &mut means {
        *m += 1.5 - lowest;
    }
    let modalities = (0..spec.modalities)
        .map(|_| {
            let gain = rng.random_range(40.0..120.0);
            let offset = rng.random_range(-20.0..20.0);
            let jittered = means.iter().map(|m| m * rng.random_range(0.85..1.15)).collect();
            (gain, offset, jittered)
        })
        .collect();
    Style {
        shape,
        modalities,
        noise: cfg.noise,
    }
}

fn inside(shape: Shape, p: [f64; 3], c: [f64; 3], size: [f64; 3], axis: usize, scale: f64) -> bool {
    let d = [0, 1, 2].map(|a| p[a] - c[a]);
    match shape {
        Shape::Sphere => (0..3).map(|a| (d[a] / (size[a] * scale)).powi(2)).sum::<f64>() <= 1.0,
        Shape::Box => (0..3).all(|a| d[a].abs() <= size[a] * scale),
        Shape::Tube => {
            let r2: f64 = (0..3).filter(|&a| a != axis).map(|a| d[a] * d[a]).sum();
            let r = size[(axis + 1) % 3] * scale;
            r2 <= r * r && d[axis].abs() <= size[axis]
        }
    }
}

fn render(spec: &DomainSpec, st: &Style, extent: [usize; 3], rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>) {
    let e = extent.map(|n| n as f64);
    let centre = e.map(|n| (n - 1.0) / 2.0);
    let body = e.map(|n| n * 0.47);
    let axis = rng.random_range(0..3);
    let size: [f64; 3] = match st.shape {
        Shape::Sphere => {
            let r = rng.random_range(5.5..8.5);
            [r * rng.random_range(0.85..1.15), r, r * rng.random_range(0.85..1.15)]
        }
        Shape::Box => [0, 1, 2].map(|_| rng.random_range(4.0..7.5)),
        Shape::Tube => {
            let mut s = [rng.random_range(3.5..5.0); 3];
            s[axis] = e[axis] * rng.random_range(0.25..0.35);
            s
        }
    };
    let margin = [0, 1, 2].map(|a| size[a] + 2.0);
    let c = [0, 1, 2].map(|a| {
        let room = (body[a] * 0.55 - margin[a]).max(0.0);
        centre[a] + rng.random_range(-room..=room)
    });
    let blobs: Vec<([f64; 3], f64)> = (3..spec.classes)
        .map(|_| {
            let p = [0, 1, 2].map(|a| centre[a] + rng.random_range(-0.5..0.5) * body[a]);
            (p, rng.random_range(2.5..3.5))
        })
        .collect();
    let [d, h, w] = extent;
    let mut label = vec![0f32; d * h * w];
    let mut in_body = vec![false; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let i = (z * h + y) * w + x;
                in_body[i] = (0..3).map(|a| ((p[a] - centre[a]) / body[a]).powi(2)).sum::<f64>() <= 1.0;
                let mut class = 0;
                if inside(st.shape, p, c, size, axis, 1.0) {
                    class = 1;
                    if spec.classes > 2 && inside(st.shape, p, c, size, axis, 0.5) {
                        class = 2;
                    }
                }
                for (k, (bc, r)) in blobs.iter().enumerate() {
                    if (0..3).map(|a| (p[a] - bc[a]).powi(2)).sum::<f64>() <= r * r {
                        class = k + 3;
                    }
                }
                label[i] = class as f32;
            }
        }
    }
    let n = d * h * w;
    let mut image = vec![0f32; spec.modalities * n];
    for (m, (gain, offset, means)) in st.modalities.iter().enumerate() {
        let noise = Normal::new(0.0, st.noise).expect("finite noise");
        for i in 0..n {
            let v = means[label[i] as usize] + noise.sample(rng);
            if in_body[i] || label[i] > 0.0 {
                image[m * n + i] = (gain * v + offset) as f32;
            }
        }
    }
    (
        Tensor::new(&[spec.modalities, d, h, w], image).expect("positive extents"),
        Tensor::new(&[1, d, h, w], label).expect("positive extents"),
    )
}

/// Renders one case in memory.
pub fn synth_case(spec: &DomainSpec, cfg: &SynthConfig, style_seed: u64, index: usize) -> Result<(Volume, Volume)> {
    cfg.validate()?;
    spec.validate()?;
    let st = style(spec, cfg, style_seed);
    let mut rng = seed::rng(seed::derive_ints(seed::derive(style_seed, &spec.id), &[index as u64]));
    let [lo, hi] = cfg.extent_range;
    let extent = [0, 1, 2].map(|_| rng.random_range(lo..=hi));
    let spacing = spec
        .median_spacing
        .map(|s| s * (1.0 + cfg.spacing_jitter * rng.random_range(-1.0..=1.0)));
    let (image, label) = render(spec, &st, extent, &mut rng);
    Ok((Volume::image(image, spacing)?, Volume::label(label, spacing)?))
}

/// Writes `cfg.cases` cases under `out_dir` (`images/`, `labels/`,
/// `manifest.json`) with a seeded 80/20 train/test split.
pub fn synth_generate(
    spec: &DomainSpec,
    cfg: &SynthConfig,
    style_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..cfg.cases).collect();
    order.shuffle(&mut seed::rng(seed::derive(
        seed::derive(style_seed, &spec.id),
        "split",
    )));
    let n_train = ((cfg.cases as f64) * 0.8).round() as usize;
    let mut split = vec![Split::Test; cfg.cases];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    let mut cases = Vec::with_capacity(cfg.cases);
    for (i, &s) in split.iter().enumerate() {
        let (image, label) = synth_case(spec, cfg, style_seed, i)?;
        let id = format!("case_{i:03}");
        let image_rel = PathBuf::from("images").join(format!("{id}.u2vol"));
        let label_rel = PathBuf::from("labels").join(format!("{id}.u2vol"));
        write_volume(&out_dir.join(&image_rel), &image)?;
        write_volume(&out_dir.join(&label_rel), &label)?;
        cases.push(Case {
            id,
            image: image_rel,
            label: Some(label_rel),
            spacing: image.spacing,
            split: s,
            crop: None,
            normalized: false,
        });
    }
    let mut m = DatasetManifest::new(spec.clone(), cases);
    m.save(&out_dir.join("manifest.json"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DomainSpec {
        DomainSpec {
            id: "liver".into(),
            modalities: 2,
            classes: 4,
            median_spacing: [1.0; 3],
            patch_shape: [32; 3],
            levels: 3,
            class_names: vec![],
        }
    }

    #[test]
    fn labels_in_range_and_outside_is_zero() {
        let (img, lab) = synth_case(&spec(), &SynthConfig::default(), 5, 0).unwrap();
        assert!(lab.label_bound() <= 4);
        assert!(lab.data.data().contains(&1.0));
        assert_eq!(img.data.at(&[0, 0, 0, 0]), 0.0);
        assert_eq!(img.channels(), 2);
    }

    #[test]
    fn split_is_eighty_twenty() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            cases: 10,
            extent_range: [16, 16],
            ..Default::default()
        };
        let m = synth_generate(&spec(), &cfg, 1, dir.path()).unwrap();
        assert_eq!(m.split(Split::Train).count(), 8);
        assert_eq!(m.split(Split::Test).count(), 2);
    }
}
