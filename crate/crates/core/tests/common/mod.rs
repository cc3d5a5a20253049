//! Helpers shared by the integration suites: naive reference kernels, a
//! finite-difference gradient checker and small fixtures.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u2net::losses::{self, LossConfig};
use u2net::ops::{Padding, Stride};
use u2net::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Uniform values in `±[gap, 1]`, kept away from the leaky-ReLU kink.
pub fn off_zero(shape: &[usize], gap: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(gap..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn idx(shape: &[usize], c: usize, z: usize, y: usize, x: usize) -> usize {
    ((c * shape[1] + z) * shape[2] + y) * shape[3] + x
}

/// Direct nested-loop 3³ cross-correlation.
pub fn naive_conv(input: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let s = input.shape();
    let (cin, co) = (s[0], w.shape()[0]);
    let out_n = |n: usize| (n + 2 * pad - 3) / stride + 1;
    let (od, oh, ow) = (out_n(s[1]), out_n(s[2]), out_n(s[3]));
    let mut out = Tensor::zeros(&[co, od, oh, ow]);
    let wd = w.data();
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for a in 0..3 {
                            for b in 0..3 {
                                for e in 0..3 {
                                    let iz = (z * stride + a) as isize - pad as isize;
                                    let iy = (y * stride + b) as isize - pad as isize;
                                    let ix = (x * stride + e) as isize - pad as isize;
                                    if iz < 0 || iy < 0 || ix < 0 {
                                        continue;
                                    }
                                    let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                    if iz >= s[1] || iy >= s[2] || ix >= s[3] {
                                        continue;
                                    }
                                    let wv = wd[(((o * cin + c) * 3 + a) * 3 + b) * 3 + e];
                                    acc += wv * input.data()[idx(s, c, iz, iy, ix)];
                                }
                            }
                        }
                    }
                    out.data_mut()[((o * od + z) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    out
}

/// Per-channel 3³ filtering with zero padding.
pub fn naive_channelwise(input: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let s = input.shape().to_vec();
    let mut out = Tensor::zeros(&s);
    for c in 0..s[0] {
        let single = Tensor::new(
            &[1, s[1], s[2], s[3]],
            input.data()[idx(&s, c, 0, 0, 0)..idx(&s, c + 1, 0, 0, 0)].to_vec(),
        )
        .unwrap();
        let filt = Tensor::new(&[1, 1, 3, 3, 3], w.data()[c * 27..(c + 1) * 27].to_vec()).unwrap();
        let r = naive_conv(&single, &filt, 1, 1);
        let n = r.len();
        out.data_mut()[c * n..(c + 1) * n].copy_from_slice(r.data());
    }
    out
}

pub fn naive_pointwise(input: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let s = input.shape();
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    let n = s[1] * s[2] * s[3];
    let mut out = Tensor::zeros(&[co, s[1], s[2], s[3]]);
    for o in 0..co {
        for c in 0..ci {
            let wv = w.data()[o * ci + c];
            for i in 0..n {
                out.data_mut()[o * n + i] += wv * input.data()[c * n + i];
            }
        }
    }
    out
}

/// Stride-2 transposed convolution with weights laid out C×C′×2×2×2.
pub fn naive_transposed(input: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let s = input.shape();
    let (ci, co) = (w.shape()[0], w.shape()[1]);
    let os = [co, 2 * s[1], 2 * s[2], 2 * s[3]];
    let mut out = Tensor::zeros(&os);
    for c in 0..ci {
        for o in 0..co {
            for z in 0..s[1] {
                for y in 0..s[2] {
                    for x in 0..s[3] {
                        let v = input.data()[idx(s, c, z, y, x)];
                        for a in 0..2 {
                            for b in 0..2 {
                                for e in 0..2 {
                                    let wv = w.data()[(((c * co + o) * 2 + a) * 2 + b) * 2 + e];
                                    out.data_mut()[idx(&os, o, 2 * z + a, 2 * y + b, 2 * x + e)] += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    max_abs_diff(a, b) / scale
}

/// Step of the five-point central difference.
const FD_STEP: f64 = 1e-3;
/// Guard in the denominator of the relative error.
const FD_GUARD: f64 = 1e-8;
/// Entries probed per input tensor; smaller tensors are checked exhaustively.
const FD_PROBES: usize = 1024;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

fn evaluate(build: &Build<'_>, inputs: &[Tensor<f64>], projection: &Option<Tensor<f64>>) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = match projection {
        Some(r) => {
            let r = tape.input(r.clone());
            let prod = tape.mul(out, r).unwrap();
            tape.sum(prod)
        }
        None => out,
    };
    (tape, vars, loss)
}

/// Worst `|analytic − numeric| / (|numeric| + 1e-8)` over the probed entries.
///
/// Non-scalar outputs are reduced with a fixed random projection so every
/// output entry contributes.
pub fn grad_check(seed: u64, inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    grad_check_step(seed, FD_STEP, inputs, build)
}

/// [`grad_check`] with an explicit step. Deep piecewise-linear graphs need a
/// small step so the stencil does not straddle activation kinks.
pub fn grad_check_step(seed: u64, h: f64, inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let projection = (probe.iter().product::<usize>() != 1).then(|| uniform(&probe, -1.0, 1.0, seed ^ 0x5eed));
    let (mut tape, vars, loss) = evaluate(build, inputs, &projection);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let f = |inputs: &[Tensor<f64>]| {
        let (tape, _, loss) = evaluate(build, inputs, &projection);
        tape.value(loss).item()
    };
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for (t, grads) in analytic.iter().enumerate() {
        let n = inputs[t].len();
        let picks: Vec<usize> = if n <= FD_PROBES {
            (0..n).collect()
        } else {
            (0..FD_PROBES).map(|_| r.random_range(0..n)).collect()
        };
        for i in picks {
            let at = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[t].data_mut()[i] += delta;
                f(&shifted)
            };
            let numeric = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            let a = grads[i];
            let rel = (a - numeric).abs() / (numeric.abs() + FD_GUARD);
            if std::env::var("FD_DEBUG").is_ok() && rel > 1e-4 {
                eprintln!("input {t} entry {i}: analytic {a:e} numeric {numeric:e}");
            }
            worst = worst.max(rel);
        }
    }
    worst
}

/// Finite-difference check of every differentiable primitive and both losses
/// on shapes up to 2×8³. Returns `(name, worst relative error)`.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let s = |k: u64| seed.wrapping_mul(31).wrapping_add(k);

    let x = uniform(&[2, 7, 6, 5], -1.0, 1.0, s(1));
    let w = uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, s(2));
    for (name, stride, padding) in [
        ("conv3d stride 1 same", Stride::One, Padding::Same),
        ("conv3d stride 2 same", Stride::Two, Padding::Same),
        ("conv3d stride 1 valid", Stride::One, Padding::Valid),
        ("conv3d stride 2 valid", Stride::Two, Padding::Valid),
    ] {
        let e = grad_check(s(3), &[x.clone(), w.clone()], &|t, v| {
            t.conv3d(v[0], v[1], stride, padding).unwrap()
        });
        out.push((name, e));
    }

    let x8 = uniform(&[2, 8, 8, 8], -1.0, 1.0, s(4));
    let cw = uniform(&[2, 3, 3, 3], -0.5, 0.5, s(5));
    out.push((
        "channelwise conv3d",
        grad_check(s(6), &[x8.clone(), cw], &|t, v| {
            t.channelwise_conv3d(v[0], v[1]).unwrap()
        }),
    ));
    let pw = uniform(&[3, 2], -1.0, 1.0, s(7));
    out.push((
        "pointwise conv3d",
        grad_check(s(8), &[x8.clone(), pw], &|t, v| t.pointwise_conv3d(v[0], v[1]).unwrap()),
    ));
    let xs = uniform(&[2, 3, 4, 2], -1.0, 1.0, s(9));
    let tw = uniform(&[2, 3, 2, 2, 2], -0.5, 0.5, s(10));
    out.push((
        "transposed conv3d",
        grad_check(s(11), &[xs.clone(), tw], &|t, v| {
            t.transposed_conv3d(v[0], v[1]).unwrap()
        }),
    ));
    let gain = uniform(&[2], 0.5, 1.5, s(12));
    let bias = uniform(&[2], -0.5, 0.5, s(13));
    out.push((
        "instance norm",
        grad_check(
            s(14),
            &[uniform(&[2, 5, 4, 6], -2.0, 2.0, s(15)), gain, bias],
            &|t, v| t.instance_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        ),
    ));
    out.push((
        "leaky relu",
        grad_check(s(16), &[off_zero(&[2, 4, 4, 4], 0.01, s(17))], &|t, v| {
            t.leaky_relu(v[0], 0.01)
        }),
    ));
    out.push((
        "softmax",
        grad_check(s(18), &[uniform(&[3, 4, 3, 2], -2.0, 2.0, s(19))], &|t, v| {
            t.softmax_channels(v[0]).unwrap()
        }),
    ));
    out.push((
        "upsample2",
        grad_check(s(20), std::slice::from_ref(&xs), &|t, v| t.upsample2(v[0]).unwrap()),
    ));
    let other = uniform(&[1, 3, 4, 2], -1.0, 1.0, s(21));
    out.push((
        "concat",
        grad_check(s(22), &[xs.clone(), other], &|t, v| t.concat(&[v[0], v[1]], 0).unwrap()),
    ));
    let ys = uniform(&[2, 3, 4, 2], -1.0, 1.0, s(23));
    out.push((
        "add, mul, scale, reshape",
        grad_check(s(24), &[xs.clone(), ys], &|t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let m = t.mul(a, v[1]).unwrap();
            let k = t.scale(m, -1.7);
            t.reshape(k, &[6, 8]).unwrap()
        }),
    ));

    let (logits, probs, labels) = separated_problem(3, 12, s(25));
    let lab = labels.clone();
    out.push((
        "lovasz-softmax",
        grad_check(s(27), std::slice::from_ref(&probs), &|t, v| {
            let (val, g) = losses::lovasz_softmax(t.value(v[0]), &lab).unwrap();
            t.scalar_fn(v[0], val, g).unwrap()
        }),
    ));
    let lab = labels.clone();
    let cfg = LossConfig {
        focal_gamma: 2.0,
        focal_alpha: vec![0.5, 1.0, 2.0],
    };
    out.push((
        "focal",
        grad_check(s(28), &[probs], &|t, v| {
            let (val, g) = losses::focal_loss(t.value(v[0]), &lab, &cfg).unwrap();
            t.scalar_fn(v[0], val, g).unwrap()
        }),
    ));
    let lab = labels;
    out.push((
        "hybrid loss from logits",
        grad_check(s(29), &[logits], &|t, v| {
            losses::hybrid_loss(t, v[0], &lab, &LossConfig::default()).unwrap()
        }),
    ));
    out
}

/// Tolerance for the finite-difference suite.
pub const GRAD_TOL: f64 = 1e-4;

/// Minimum spacing between the per-class errors of a Lovász fixture.
const ERROR_GAP: f64 = 1e-2;

/// Logits, their softmax and labels for a K×N problem whose per-class error
/// orderings are stable under finite-difference steps.
pub fn separated_problem(k: usize, n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Vec<usize>) {
    for attempt in 0.. {
        let mut r = rng(seed.wrapping_add(attempt * 7919));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let logits = Tensor::from_fn(&[k, n], |_| r.random_range(-2.0..2.0));
        let probs = u2net::ops::softmax_channels(&logits).unwrap();
        let separated = (0..k).all(|c| {
            let mut e: Vec<f64> = (0..n)
                .map(|i| {
                    let p = probs.data()[c * n + i];
                    if labels[i] == c {
                        1.0 - p
                    } else {
                        p
                    }
                })
                .collect();
            e.sort_by(f64::total_cmp);
            e.windows(2).all(|w| w[1] - w[0] > ERROR_GAP)
        });
        if separated {
            return (logits, probs, labels);
        }
    }
    unreachable!()
}

pub fn domain(id: &str, modalities: usize, classes: usize, patch: usize, levels: usize) -> u2net::netarch::DomainSpec {
    u2net::netarch::DomainSpec {
        id: id.into(),
        modalities,
        classes,
        median_spacing: [1.0; 3],
        patch_shape: [patch; 3],
        levels,
        class_names: Vec::new(),
    }
}

/// Generates a synthetic dataset under `root/<id>-raw` and preprocesses it
/// into `root/<id>`.
pub fn prepared_domain(
    root: &std::path::Path,
    spec: &u2net::netarch::DomainSpec,
    synth: &u2net::datapipe::SynthConfig,
    style: u64,
) -> u2net::datapipe::DatasetManifest {
    use u2net::datapipe::{preprocess_dataset, synth_generate};
    let raw = synth_generate(spec, synth, style, &root.join(format!("{}-raw", spec.id))).unwrap();
    preprocess_dataset(&raw, &root.join(&spec.id), 1).unwrap().0
}

pub fn tiny_synth() -> u2net::datapipe::SynthConfig {
    u2net::datapipe::SynthConfig {
        cases: 5,
        extent_range: [16, 16],
        spacing_jitter: 0.0,
        ..Default::default()
    }
}

/// A standard filter bank whose kernels factor as `P[o, c] · D[c, tap]`
/// equals channel-wise filtering by `D` followed by pointwise mixing by `P`.
pub fn factorization_error(seed: u64) -> f64 {
    let c = 1 + (seed % 4) as usize;
    let co = 1 + (seed % 3) as usize;
    let shape = [c, 4 + (seed % 5) as usize, 5, 3 + (seed % 3) as usize];
    let x = uniform(&shape, -1.0, 1.0, seed);
    let d = uniform(&[c, 3, 3, 3], -1.0, 1.0, seed + 1);
    let p = uniform(&[co, c], -1.0, 1.0, seed + 2);
    let mut w = u2net::Tensor::zeros(&[co, c, 3, 3, 3]);
    for o in 0..co {
        for i in 0..c {
            for t in 0..27 {
                w.data_mut()[(o * c + i) * 27 + t] = p.data()[o * c + i] * d.data()[i * 27 + t];
            }
        }
    }
    let standard = u2net::ops::conv3d(&x, &w, Stride::One, Padding::Same).unwrap();
    let adapter = u2net::ops::pointwise_conv3d(&u2net::ops::channelwise_conv3d(&x, &d).unwrap(), &p).unwrap();
    max_rel_diff(adapter.data(), standard.data())
}

/// Jaccard loss of class `c` when the voxels in `wrong` are mispredicted.
pub fn jaccard_loss(gt: &[bool], wrong: &[bool]) -> f64 {
    let inter = gt.iter().zip(wrong).filter(|(&g, &w)| g && !w).count();
    let union = gt.iter().zip(wrong).filter(|(&g, &w)| g || w).count();
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Lovász extension as the integral of the set function over level sets.
pub fn lovasz_oracle(probs: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    let mut total = 0.0;
    for &c in &present {
        let gt: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let err: Vec<f64> = (0..n)
            .map(|i| {
                if gt[i] {
                    1.0 - probs[c * n + i]
                } else {
                    probs[c * n + i]
                }
            })
            .collect();
        let mut levels = err.clone();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        levels.push(0.0);
        for j in 0..levels.len() - 1 {
            let wrong: Vec<bool> = err.iter().map(|&e| e >= levels[j]).collect();
            total += (levels[j] - levels[j + 1]) * jaccard_loss(&gt, &wrong);
        }
    }
    if present.is_empty() {
        0.0
    } else {
        total / present.len() as f64
    }
}

pub fn one_hot(pred: &[usize], k: usize) -> Tensor<f64> {
    let n = pred.len();
    Tensor::from_fn(&[k, n], |i| if pred[i % n] == i / n { 1.0 } else { 0.0 })
}

pub fn digits(mut v: usize, base: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let d = v % base;
            v /= base;
            d
        })
        .collect()
}

pub fn mean_iou_loss(pred: &[usize], labels: &[usize], k: usize) -> f64 {
    let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    let sum: f64 = present
        .iter()
        .map(|&c| {
            let inter = pred.iter().zip(labels).filter(|(&p, &l)| p == c && l == c).count();
            let union = pred.iter().zip(labels).filter(|(&p, &l)| p == c || l == c).count();
            1.0 - inter as f64 / union as f64
        })
        .sum();
    sum / present.len() as f64
}

/// Worst deviation of the Lovász-Softmax value at one-hot predictions from
/// the mean IoU loss, over every labelling and prediction of up to `max_n`
/// voxels with `k` classes.
pub fn lovasz_hard_error(k: usize, max_n: usize) -> f64 {
    let mut worst = 0.0f64;
    for n in 1..=max_n {
        for l in 0..k.pow(n as u32) {
            let labels = digits(l, k, n);
            for p in 0..k.pow(n as u32) {
                let pred = digits(p, k, n);
                let (loss, _) = losses::lovasz_softmax(&one_hot(&pred, k), &labels).unwrap();
                worst = worst.max((loss - mean_iou_loss(&pred, &labels, k)).abs());
            }
        }
    }
    worst
}

/// Worst deviation of `lovasz_grad` from first differences of the Jaccard
/// loss along prefix sets, over every nonempty ground truth of up to
/// `max_n` sorted voxels.
pub fn lovasz_grad_error(max_n: usize) -> f64 {
    let mut worst = 0.0f64;
    for n in 1..=max_n {
        for bits in 1..1usize << n {
            let gt: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
            let g = losses::lovasz_grad::<f64>(&gt);
            let mut prev = 0.0;
            for (j, gj) in g.iter().enumerate() {
                let wrong: Vec<bool> = (0..n).map(|i| i <= j).collect();
                let cur = jaccard_loss(&gt, &wrong);
                worst = worst.max((gj - (cur - prev)).abs());
                prev = cur;
            }
        }
    }
    worst
}

/// Worst deviation of Lovász-Softmax at random soft predictions (up to
/// `max_n` voxels, some quantized to force ties) from the level-set integral.
pub fn lovasz_soft_error(trials: usize, max_n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let k = 2 + trial % 3;
        let n = 1 + trial % max_n;
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let mut probs = uniform(&[k, n], 0.0, 1.0, seed ^ trial as u64);
        if trial % 2 == 0 {
            probs = probs.map(|v| (v * 4.0).round() / 4.0);
        }
        let (loss, _) = losses::lovasz_softmax(&probs, &labels).unwrap();
        worst = worst.max((loss - lovasz_oracle(probs.data(), &labels, k)).abs());
    }
    worst
}

fn scopes(domains: &[u2net::netarch::DomainSpec]) -> Vec<u2net::netarch::Scope> {
    use u2net::netarch::Scope;
    let mut s = vec![Scope::Comparable, Scope::Total];
    s.extend(domains.iter().map(|d| Scope::DomainAdded(d.id.clone())));
    s
}

/// Largest total a fuzzed model may allocate.
pub const FUZZ_BUDGET: u64 = 40_000_000;

/// Builds `configs` random models and compares every enumerated parameter
/// count with the closed form. Returns the first mismatch.
pub fn accounting_fuzz(seed: u64, configs: usize) -> Result<(), String> {
    use u2net::netarch::{closed_form_count, DomainSpec, Mode, ModelState, NetworkConfig, Scope};
    const MODES: [Mode; 3] = [Mode::Independent, Mode::Shared, Mode::Universal];
    let mut r = rng(seed);
    let mut checked = 0;
    while checked < configs {
        let base = r.random_range(4..=32);
        let levels = r.random_range(2..=5);
        let t = r.random_range(1..=6);
        let mode = MODES[r.random_range(0..3)];
        let domains: Vec<DomainSpec> = (0..t)
            .map(|i| {
                let dl = if mode == Mode::Independent {
                    r.random_range(2..=5)
                } else {
                    levels
                };
                domain(&format!("d{i}"), r.random_range(1..=4), r.random_range(2..=5), 32, dl)
            })
            .collect();
        let mut config = NetworkConfig::new(mode, base, levels);
        config.deep_supervision_levels = r.random_range(1..=4);
        if closed_form_count(&config, &domains, &Scope::Total).map_err(|e| e.to_string())? > FUZZ_BUDGET {
            continue;
        }
        let model = ModelState::<f32>::build(config.clone(), &domains).map_err(|e| e.to_string())?;
        for scope in scopes(&domains) {
            let enumerated = model.count_parameters(&scope).map_err(|e| e.to_string())?;
            let closed = closed_form_count(&config, &domains, &scope).map_err(|e| e.to_string())?;
            if enumerated != closed {
                return Err(format!(
                    "{mode} base {base} levels {levels} T {t} {scope}: {enumerated} != {closed}"
                ));
            }
        }
        let total: u64 = model.named_params().map(|(_, p)| p.len() as u64).sum();
        if total != model.count_parameters(&Scope::Total).map_err(|e| e.to_string())? {
            return Err(format!(
                "{mode} base {base} levels {levels} T {t}: tensor total {total}"
            ));
        }
        checked += 1;
    }
    Ok(())
}

/// Comparable-scope counts `(independent, shared, universal)` for the
/// default network over five domains with five levels.
pub fn default_comparable_counts() -> (u64, u64, u64) {
    use u2net::netarch::{closed_form_count, DomainSpec, Mode, NetworkConfig, Scope};
    let domains: Vec<DomainSpec> = (0..5)
        .map(|i| domain(&format!("d{i}"), 1 + i % 2, 2 + i % 3, 64, 5))
        .collect();
    let count =
        |mode| closed_form_count(&NetworkConfig::default().with_mode(mode), &domains, &Scope::Comparable).unwrap();
    (count(Mode::Independent), count(Mode::Shared), count(Mode::Universal))
}
