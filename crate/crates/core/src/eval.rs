//! Sliding-window inference, Dice scores and evaluation reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{extract, pad_to, read_label, read_volume, write_volume, DatasetManifest, Split, Volume};
use crate::error::{Error, Result};
use crate::netarch::ModelState;
use crate::ops::softmax_channels;
use crate::real::Real;
use crate::tensor::Tensor;

/// Window origins along one axis: multiples of `patch / 2` plus a final
/// window flush with the end. Assumes `n >= patch`.
pub fn window_starts(n: usize, patch: usize) -> Vec<usize> {
    let step = (patch / 2).max(1);
    let mut out = Vec::new();
    let mut c = 0;
    while c + patch < n {
        out.push(c);
        c += step;
    }
    out.push(n - patch);
    out
}

/// Class probabilities averaged over half-overlapping windows, K×D×H×W at
/// the image's extent.
pub fn sliding_window_probs<T: Real>(
    model: &ModelState<T>,
    domain: &str,
    image: &Tensor<f32>,
    patch: [usize; 3],
) -> Result<Tensor<f32>> {
    let spec = model.domain(domain)?;
    let extent = crate::tensor::expect_volume("sliding_window_infer", image)?;
    let original = [extent[1], extent[2], extent[3]];
    let (padded, before) = pad_to(image, patch);
    let s = padded.spatial();
    let k = spec.classes;
    let vox: usize = s.iter().product();
    let mut acc = vec![0f64; k * vox];
    let mut count = vec![0u32; vox];
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(s[a], patch[a])).collect();
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let window = extract(&padded, [z0, y0, x0], patch);
                let probs = softmax_channels(&model.predict(domain, &window.cast::<T>())?)?;
                let p = probs.data();
                let pv: usize = patch.iter().product();
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        for x in 0..patch[2] {
                            let local = (z * patch[1] + y) * patch[2] + x;
                            let global = ((z0 + z) * s[1] + y0 + y) * s[2] + x0 + x;
                            count[global] += 1;
                            for c in 0..k {
                                acc[c * vox + global] += p[c * pv + local].to_f64().unwrap_or(f64::NAN);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(k * original.iter().product::<usize>());
    for c in 0..k {
        for z in 0..original[0] {
            for y in 0..original[1] {
                for x in 0..original[2] {
                    let g = ((z + before[0]) * s[1] + y + before[1]) * s[2] + x + before[2];
                    out.push((acc[c * vox + g] / f64::from(count[g])) as f32);
                }
            }
        }
    }
    Tensor::new(&[k, original[0], original[1], original[2]], out)
}

/// Index of the largest entry along the class axis; ties go to the lower class.
pub fn argmax_channels(probs: &Tensor<f32>) -> Tensor<f32> {
    let k = probs.shape()[0];
    let n = probs.len() / k;
    let p = probs.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if p[c * n + i] > p[best * n + i] {
                    best = c;
                }
            }
            best as f32
        })
        .collect();
    let mut shape = probs.shape().to_vec();
    shape[0] = 1;
    Tensor::new(&shape, labels).expect("same voxel count")
}

/// Label map predicted by sliding-window inference.
pub fn sliding_window_infer<T: Real>(
    model: &ModelState<T>,
    domain: &str,
    image: &Volume,
    patch: [usize; 3],
) -> Result<Volume> {
    let probs = sliding_window_probs(model, domain, &image.data, patch)?;
    Volume::label(argmax_channels(&probs), image.spacing)
}

/// `2|P∩G| / (|P| + |G|)` for class `c`; 1 when both sets are empty.
pub fn dice(pred: &[f32], gt: &[f32], c: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "dice",
            "voxels",
            format!("{} vs {}", pred.len(), gt.len()),
        ));
    }
    let c = c as f32;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == c, b == c);
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case: String,
    /// Dice per foreground class `1..K`.
    pub dice: Vec<f64>,
}

/// Per-domain evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub classes: Vec<String>,
    pub cases: Vec<CaseScore>,
    /// Per-class Dice averaged over cases.
    pub class_mean: Vec<f64>,
    /// Mean of `class_mean`.
    pub mean: f64,
}

/// Runs inference on every test case of `manifest`. Predictions are
/// written as `U2VOL1` files under `predictions` when given.
pub fn evaluate_dataset<T: Real>(
    model: &ModelState<T>,
    manifest: &DatasetManifest,
    predictions: Option<&Path>,
) -> Result<DomainReport> {
    let spec = model.domain(&manifest.domain.id)?.clone();
    let patch = spec.patch_shape;
    let tests: Vec<_> = manifest.split(Split::Test).collect();
    if tests.is_empty() {
        return Err(Error::Config(format!("domain `{}` has no test cases", spec.id)));
    }
    let mut cases = Vec::new();
    for case in tests {
        let label_path = case
            .label
            .as_ref()
            .ok_or_else(|| Error::Config(format!("test case `{}` has no label", case.id)))?;
        let image = read_volume(&manifest.resolve(&case.image))?;
        let gt = read_label(&manifest.resolve(label_path))?;
        let pred = sliding_window_infer(model, &spec.id, &image, patch)?;
        if let Some(dir) = predictions {
            write_volume(&dir.join(&spec.id).join(format!("{}.u2vol", case.id)), &pred)?;
        }
        let dice = (1..spec.classes)
            .map(|c| dice(pred.data.data(), gt.data.data(), c))
            .collect::<Result<Vec<_>>>()?;
        cases.push(CaseScore {
            case: case.id.clone(),
            dice,
        });
    }
    let n = cases.len() as f64;
    let class_mean: Vec<f64> = (0..spec.classes - 1)
        .map(|c| cases.iter().map(|s| s.dice[c]).sum::<f64>() / n)
        .collect();
    let mean = class_mean.iter().sum::<f64>() / class_mean.len() as f64;
    Ok(DomainReport {
        domain: spec.id.clone(),
        classes: (1..spec.classes).map(|c| spec.class_name(c)).collect(),
        cases,
        class_mean,
        mean,
    })
}

/// Evaluation of one model over several domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub domains: Vec<DomainReport>,
    /// Mean over every structure column.
    pub mean: f64,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, domains: Vec<DomainReport>) -> Self {
        let cols: Vec<f64> = domains.iter().flat_map(|d| d.class_mean.iter().copied()).collect();
        let mean = cols.iter().sum::<f64>() / cols.len().max(1) as f64;
        EvalReport {
            model: model.into(),
            domains,
            mean,
        }
    }

    /// Aligned text table: one column per structure (Dice in percent) and
    /// a final Mean column.
    pub fn table(&self) -> String {
        let mut headers = vec!["Model".to_string()];
        let mut values = vec![self.model.clone()];
        for d in &self.domains {
            for (name, v) in d.classes.iter().zip(&d.class_mean) {
                headers.push(format!("{}/{}", d.domain, name));
                values.push(format!("{:.2}", v * 100.0));
            }
        }
        headers.push("Mean".into());
        values.push(format!("{:.2}", self.mean * 100.0));
        let widths: Vec<usize> = headers.iter().zip(&values).map(|(h, v)| h.len().max(v.len())).collect();
        let mut out = String::new();
        for row in [&headers, &values] {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
        }
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let json = dir.join("report.json");
        let txt = dir.join("report.txt");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        crate::netarch::write_atomic(&json, text.as_bytes())?;
        crate::netarch::write_atomic(&txt, self.table().as_bytes())?;
        Ok((json, txt))
    }
}
