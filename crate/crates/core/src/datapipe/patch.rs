//! Patch extraction and domain scheduling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Zero-pads the spatial axes of `t` symmetrically up to at least `min`.
/// Returns the padded tensor and the leading pad per axis. Odd remainders
/// go to the trailing side.
pub fn pad_to(t: &Tensor<f32>, min: [usize; 3]) -> (Tensor<f32>, [usize; 3]) {
    let s = t.spatial();
    if (0..3).all(|a| s[a] >= min[a]) {
        return (t.clone(), [0; 3]);
    }
    let out = [0, 1, 2].map(|a| s[a].max(min[a]));
    let before = [0, 1, 2].map(|a| (out[a] - s[a]) / 2);
    let c = t.shape()[0];
    let mut data = vec![0f32; c * out.iter().product::<usize>()];
    let src = t.data();
    for ch in 0..c {
        for z in 0..s[0] {
            for y in 0..s[1] {
                let from = ((ch * s[0] + z) * s[1] + y) * s[2];
                let to = ((ch * out[0] + z + before[0]) * out[1] + y + before[1]) * out[2] + before[2];
                data[to..to + s[2]].copy_from_slice(&src[from..from + s[2]]);
            }
        }
    }
    (
        Tensor::new(&[c, out[0], out[1], out[2]], data).expect("positive extents"),
        before,
    )
}

/// Copies the window starting at `corner` with extent `size`.
pub fn extract(t: &Tensor<f32>, corner: [usize; 3], size: [usize; 3]) -> Tensor<f32> {
    let s = t.spatial();
    let c = t.shape()[0];
    let src = t.data();
    let mut data = Vec::with_capacity(c * size.iter().product::<usize>());
    for ch in 0..c {
        for z in corner[0]..corner[0] + size[0] {
            for y in corner[1]..corner[1] + size[1] {
                let row = ((ch * s[0] + z) * s[1] + y) * s[2] + corner[2];
                data.extend_from_slice(&src[row..row + size[2]]);
            }
        }
    }
    Tensor::new(&[c, size[0], size[1], size[2]], data).expect("positive extents")
}

/// Draws a random patch. With probability `fg_prob` the window is forced
/// to contain a foreground voxel chosen uniformly, when one exists.
/// Volumes smaller than the patch are zero-padded first.
pub fn sample_patch(
    image: &Tensor<f32>,
    label: &Tensor<f32>,
    patch: [usize; 3],
    fg_prob: f64,
    seed_value: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if image.spatial() != label.spatial() {
        return Err(Error::shape(
            "sample_patch",
            "spatial",
            format!("image {:?} vs label {:?}", image.spatial(), label.spatial()),
        ));
    }
    if patch.contains(&0) {
        return Err(Error::InvalidArgument("patch extents must be positive".into()));
    }
    let (image, _) = pad_to(image, patch);
    let (label, _) = pad_to(label, patch);
    let s = image.spatial();
    let mut rng = seed::rng(seed_value);
    let biased = rng.random::<f64>() < fg_prob;
    let fg: Vec<usize> = if biased {
        label
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect()
    } else {
        Vec::new()
    };
    let corner = if fg.is_empty() {
        [0, 1, 2].map(|a| rng.random_range(0..=s[a] - patch[a]))
    } else {
        let v = fg[rng.random_range(0..fg.len())];
        let p = [v / (s[1] * s[2]), v / s[2] % s[1], v % s[2]];
        [0, 1, 2].map(|a| {
            let lo = (p[a] + 1).saturating_sub(patch[a]);
            let hi = p[a].min(s[a] - patch[a]);
            rng.random_range(lo..=hi)
        })
    };
    Ok((extract(&image, corner, patch), extract(&label, corner, patch)))
}

/// Domain trained at `iteration`: `domains[iteration mod T]`.
pub fn round_robin<S: AsRef<str>>(domains: &[S], iteration: usize) -> &str {
    domains[iteration % domains.len()].as_ref()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_is_symmetric() {
        let t = Tensor::full(&[1, 8, 8, 8], 1.0f32);
        let (p, before) = pad_to(&t, [16, 16, 16]);
        assert_eq!(p.spatial(), [16, 16, 16]);
        assert_eq!(before, [4, 4, 4]);
        assert_eq!(p.sum(), 512.0);
        assert_eq!(p.at(&[0, 3, 4, 4]), 0.0);
        assert_eq!(p.at(&[0, 4, 4, 4]), 1.0);
    }

    #[test]
    fn whole_image_patch() {
        let img = Tensor::from_fn(&[1, 4, 4, 4], |i| i as f32);
        let lab = Tensor::zeros(&[1, 4, 4, 4]);
        let (p, l) = sample_patch(&img, &lab, [4, 4, 4], 0.5, 3).unwrap();
        assert_eq!(p, img);
        assert_eq!(l, lab);
    }

    #[test]
    fn foreground_bias_hits_foreground() {
        let img = Tensor::zeros(&[1, 20, 20, 20]);
        let lab = Tensor::from_fn(&[1, 20, 20, 20], |i| if i == 20 * 20 * 20 - 1 { 1.0 } else { 0.0 });
        for s in 0..20 {
            let (_, l) = sample_patch(&img, &lab, [4, 4, 4], 1.0, s).unwrap();
            assert_eq!(l.sum(), 1.0);
        }
    }

    #[test]
    fn round_robin_cycles() {
        let d = ["a", "b", "c"];
        let got: Vec<&str> = (0..6).map(|i| round_robin(&d, i)).collect();
        assert_eq!(got, ["a", "b", "c", "a", "b", "c"]);
    }
}
