//! Functional tensor operations and their vector-Jacobian products.
//!
//! Every forward op here validates shapes and returns a fresh tensor. The
//! `*_backward` companions take the upstream gradient and return gradients for
//! each differentiable input. [`crate::autograd::Tape`] wires the two together.
//!
//! Convolutions over 3³ neighborhoods are lowered to im2col + GEMM; the
//! channel-wise variant uses direct shifted accumulation since it has no
//! cross-channel reduction to batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tensor::{expect_volume, Tensor};

/// Taps in a 3×3×3 kernel.
pub const TAPS: usize = 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stride {
    One,
    Two,
}

impl Stride {
    pub fn get(self) -> usize {
        match self {
            Stride::One => 1,
            Stride::Two => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

const AXES: [&str; 3] = ["depth", "height", "width"];

/// Output geometry of a 3³ convolution along one axis.
fn conv_extent(op: &'static str, axis: usize, n: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        // pad one voxel on each side; stride 2 gives ceil(n / 2)
        Padding::Same => Ok(((n - 1) / stride + 1, 1)),
        Padding::Valid => {
            if n < 3 {
                return Err(Error::shape(
                    op,
                    AXES[axis],
                    format!("extent {n} < kernel 3 with valid padding"),
                ));
            }
            Ok(((n - 3) / stride + 1, 0))
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    out: [usize; 3],
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn n_in(&self) -> usize {
        self.inp.iter().product()
    }

    fn n_out(&self) -> usize {
        self.out.iter().product()
    }
}

fn conv_geom<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, stride: Stride, padding: Padding) -> Result<ConvGeom> {
    const OP: &str = "conv3d";
    let [c, d, h, w] = expect_volume(OP, input)?;
    let (co, ci) = match weights.shape() {
        &[co, ci, 3, 3, 3] => (co, ci),
        s => {
            return Err(Error::shape(
                OP,
                "kernel",
                format!("expected C′×C×3×3×3 weights, got {s:?}"),
            ))
        }
    };
    if ci != c {
        return Err(Error::shape(
            OP,
            "channels",
            format!("input has {c} channels, weights expect {ci}"),
        ));
    }
    let s = stride.get();
    let mut out = [0; 3];
    let mut pad = 0;
    for (axis, &n) in [d, h, w].iter().enumerate() {
        let (o, p) = conv_extent(OP, axis, n, s, padding)?;
        out[axis] = o;
        pad = p;
    }
    Ok(ConvGeom {
        cin: c,
        cout: co,
        inp: [d, h, w],
        out,
        stride: s,
        pad,
    })
}

/// Output depth slices unfolded at once; keeps the column block near cache size.
fn slab_depth(g: &ConvGeom) -> usize {
    const TARGET_COLUMNS: usize = 2048;
    let per_slice = g.out[1] * g.out[2];
    (TARGET_COLUMNS / per_slice.max(1)).clamp(1, g.out[0])
}

/// Unfolds the 3³ neighborhoods of output slices `z0..z1` into a
/// (C·27)×N_slab matrix.
fn im2col<T: Real>(g: &ConvGeom, input: &[T], z0: usize, z1: usize, col: &mut Vec<T>) {
    let [d, h, w] = g.inp;
    let [_, oh, ow] = g.out;
    let n_slab = (z1 - z0) * oh * ow;
    col.clear();
    col.resize(g.cin * TAPS * n_slab, T::zero());
    for ci in 0..g.cin {
        let plane = &input[ci * d * h * w..(ci + 1) * d * h * w];
        for k in 0..TAPS {
            let (kd, kh, kw) = (k / 9, (k / 3) % 3, k % 3);
            let row = &mut col[(ci * TAPS + k) * n_slab..(ci * TAPS + k + 1) * n_slab];
            for z in z0..z1 {
                let iz = (z * g.stride + kd) as isize - g.pad as isize;
                if iz < 0 || iz >= d as isize {
                    continue;
                }
                for y in 0..oh {
                    let iy = (y * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[(iz as usize * h + iy as usize) * w..][..w];
                    let dst = &mut row[((z - z0) * oh + y) * ow..][..ow];
                    if g.stride == 1 {
                        // ix = x + kw - pad
                        let shift = kw as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (x, v) in dst.iter_mut().enumerate() {
                            let ix = (x * g.stride + kw) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds the column block of output slices `z0..z1` back onto the input grid.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], z0: usize, z1: usize, out: &mut [T]) {
    let [d, h, w] = g.inp;
    let [_, oh, ow] = g.out;
    let n_slab = (z1 - z0) * oh * ow;
    for ci in 0..g.cin {
        let plane = &mut out[ci * d * h * w..(ci + 1) * d * h * w];
        for k in 0..TAPS {
            let (kd, kh, kw) = (k / 9, (k / 3) % 3, k % 3);
            let row = &col[(ci * TAPS + k) * n_slab..(ci * TAPS + k + 1) * n_slab];
            for z in z0..z1 {
                let iz = (z * g.stride + kd) as isize - g.pad as isize;
                if iz < 0 || iz >= d as isize {
                    continue;
                }
                for y in 0..oh {
                    let iy = (y * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[(iz as usize * h + iy as usize) * w..][..w];
                    let src = &row[((z - z0) * oh + y) * ow..][..ow];
                    if g.stride == 1 {
                        let shift = kw as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let d0 = (lo as isize + shift) as usize;
                            for (o, &v) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *o += v;
                            }
                        }
                        continue;
                    }
                    for (x, &v) in src.iter().enumerate() {
                        let ix = (x * g.stride + kw) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Standard 3³ cross-correlation summing over all input channels.
///
/// `weights` is C′×C×3×3×3. No bias term.
pub fn conv3d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, stride: Stride, padding: Padding) -> Result<Tensor<T>> {
    let g = conv_geom(input, weights, stride, padding)?;
    let n = g.n_out();
    let k = g.cin * TAPS;
    let slice = g.out[1] * g.out[2];
    let step = slab_depth(&g);
    let mut out = vec![T::zero(); g.cout * n];
    let mut col = Vec::new();
    for z0 in (0..g.out[0]).step_by(step) {
        let z1 = (z0 + step).min(g.out[0]);
        let ns = (z1 - z0) * slice;
        im2col(&g, input.data(), z0, z1, &mut col);
        T::gemm(
            g.cout,
            k,
            ns,
            T::one(),
            weights.data(),
            k as isize,
            1,
            &col,
            ns as isize,
            1,
            T::zero(),
            &mut out[z0 * slice..],
            n as isize,
            1,
        );
    }
    Ok(Tensor::from_parts(vec![g.cout, g.out[0], g.out[1], g.out[2]], out))
}

/// Gradients of [`conv3d`] with respect to input and weights.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: Stride,
    padding: Padding,
    grad_out: &[T],
    need_input: bool,
) -> Result<(Option<Vec<T>>, Vec<T>)> {
    let g = conv_geom(input, weights, stride, padding)?;
    let n = g.n_out();
    let k = g.cin * TAPS;
    let slice = g.out[1] * g.out[2];
    let step = slab_depth(&g);
    let mut gw = vec![T::zero(); g.cout * k];
    let mut gi = need_input.then(|| vec![T::zero(); g.cin * g.n_in()]);
    let mut col = Vec::new();
    let mut gcol = Vec::new();
    for z0 in (0..g.out[0]).step_by(step) {
        let z1 = (z0 + step).min(g.out[0]);
        let ns = (z1 - z0) * slice;
        let go = &grad_out[z0 * slice..];
        im2col(&g, input.data(), z0, z1, &mut col);
        // dW += dOut · colᵀ
        T::gemm(
            g.cout,
            ns,
            k,
            T::one(),
            go,
            n as isize,
            1,
            &col,
            1,
            ns as isize,
            T::one(),
            &mut gw,
            k as isize,
            1,
        );
        if let Some(gi) = gi.as_mut() {
            gcol.clear();
            gcol.resize(k * ns, T::zero());
            // dcol = Wᵀ · dOut
            T::gemm(
                k,
                g.cout,
                ns,
                T::one(),
                weights.data(),
                1,
                k as isize,
                go,
                n as isize,
                1,
                T::zero(),
                &mut gcol,
                ns as isize,
                1,
            );
            col2im(&g, &gcol, z0, z1, gi);
        }
    }
    Ok((gi, gw))
}

fn channelwise_dims<T: Real>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<[usize; 4]> {
    const OP: &str = "channelwise_conv3d";
    let dims = expect_volume(OP, input)?;
    match weights.shape() {
        &[c, 3, 3, 3] if c == dims[0] => Ok(dims),
        &[c, 3, 3, 3] => Err(Error::shape(
            OP,
            "channels",
            format!("{c} channel-wise filters for {} input channels", dims[0]),
        )),
        s => Err(Error::shape(
            OP,
            "kernel",
            format!("expected C×3×3×3 weights, got {s:?}"),
        )),
    }
}

/// `out += corr(input, kernel)` over one zero-padded plane, stride 1.
fn corr_plane<T: Real>(input: &[T], [d, h, w]: [usize; 3], kernel: &[T], out: &mut [T]) {
    for kd in 0..3 {
        let dz = kd as isize - 1;
        for kh in 0..3 {
            let dy = kh as isize - 1;
            let k = &kernel[kd * 9 + kh * 3..kd * 9 + kh * 3 + 3];
            let (k0, k1, k2) = (k[0], k[1], k[2]);
            let z_lo = (-dz).max(0) as usize;
            let z_hi = (d as isize - dz).min(d as isize) as usize;
            let y_lo = (-dy).max(0) as usize;
            let y_hi = (h as isize - dy).min(h as isize) as usize;
            for z in z_lo..z_hi {
                let iz = (z as isize + dz) as usize;
                for y in y_lo..y_hi {
                    let iy = (y as isize + dy) as usize;
                    let src = &input[(iz * h + iy) * w..][..w];
                    let dst = &mut out[(z * h + y) * w..][..w];
                    dst[0] += k1 * src[0] + if w > 1 { k2 * src[1] } else { T::zero() };
                    for x in 1..w.saturating_sub(1) {
                        dst[x] += k0 * src[x - 1] + k1 * src[x] + k2 * src[x + 1];
                    }
                    if w > 1 {
                        dst[w - 1] += k0 * src[w - 2] + k1 * src[w - 1];
                    }
                }
            }
        }
    }
}

/// Kernel gradient of [`corr_plane`]: `gk[t] = Σ_p gout[p] · input[p + offset(t)]`.
fn corr_plane_kernel_grad<T: Real>(input: &[T], [d, h, w]: [usize; 3], grad_out: &[T], gk: &mut [T]) {
    for (t, slot) in gk.iter_mut().enumerate().take(TAPS) {
        let (dz, dy, dx) = ((t / 9) as isize - 1, ((t / 3) % 3) as isize - 1, (t % 3) as isize - 1);
        let z_lo = (-dz).max(0) as usize;
        let z_hi = (d as isize - dz).min(d as isize) as usize;
        let y_lo = (-dy).max(0) as usize;
        let y_hi = (h as isize - dy).min(h as isize) as usize;
        let x_lo = (-dx).max(0) as usize;
        let x_hi = (w as isize - dx).min(w as isize) as usize;
        let mut acc = T::zero();
        for z in z_lo..z_hi {
            let iz = (z as isize + dz) as usize;
            for y in y_lo..y_hi {
                let iy = (y as isize + dy) as usize;
                let src = &input[(iz * h + iy) * w..][..w];
                let go = &grad_out[(z * h + y) * w..][..w];
                let mut row = T::zero();
                for x in x_lo..x_hi {
                    row += go[x] * src[(x as isize + dx) as usize];
                }
                acc += row;
            }
        }
        *slot += acc;
    }
}

/// One 3³ filter per channel, stride 1, zero "same" padding.
pub fn channelwise_conv3d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, d, h, w] = channelwise_dims(input, weights)?;
    let n = d * h * w;
    let mut out = vec![T::zero(); c * n];
    for ch in 0..c {
        corr_plane(
            &input.data()[ch * n..(ch + 1) * n],
            [d, h, w],
            &weights.data()[ch * TAPS..(ch + 1) * TAPS],
            &mut out[ch * n..(ch + 1) * n],
        );
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub fn channelwise_conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &[T],
    need_input: bool,
) -> Result<(Option<Vec<T>>, Vec<T>)> {
    let [c, d, h, w] = channelwise_dims(input, weights)?;
    let n = d * h * w;
    let mut gw = vec![T::zero(); c * TAPS];
    let mut gi = need_input.then(|| vec![T::zero(); c * n]);
    for ch in 0..c {
        let go = &grad_out[ch * n..(ch + 1) * n];
        corr_plane_kernel_grad(
            &input.data()[ch * n..(ch + 1) * n],
            [d, h, w],
            go,
            &mut gw[ch * TAPS..(ch + 1) * TAPS],
        );
        if let Some(gi) = gi.as_mut() {
            // adjoint of correlation is correlation with the point-reflected kernel
            let k = &weights.data()[ch * TAPS..(ch + 1) * TAPS];
            let flipped: Vec<T> = k.iter().rev().copied().collect();
            corr_plane(go, [d, h, w], &flipped, &mut gi[ch * n..(ch + 1) * n]);
        }
    }
    Ok((gi, gw))
}

fn pointwise_dims<T: Real>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    const OP: &str = "pointwise_conv3d";
    let [c, d, h, w] = expect_volume(OP, input)?;
    match weights.shape() {
        &[co, ci] if ci == c => Ok((co, c, d * h * w)),
        &[_, ci] => Err(Error::shape(
            OP,
            "channels",
            format!("input has {c} channels, weights expect {ci}"),
        )),
        s => Err(Error::shape(OP, "kernel", format!("expected C′×C weights, got {s:?}"))),
    }
}

/// 1×1×1 convolution: per-voxel linear map across channels.
pub fn pointwise_conv3d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (co, ci, n) = pointwise_dims(input, weights)?;
    let mut out = vec![T::zero(); co * n];
    T::gemm(
        co,
        ci,
        n,
        T::one(),
        weights.data(),
        ci as isize,
        1,
        input.data(),
        n as isize,
        1,
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    let s = input.spatial();
    Ok(Tensor::from_parts(vec![co, s[0], s[1], s[2]], out))
}

pub fn pointwise_conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &[T],
    need_input: bool,
) -> Result<(Option<Vec<T>>, Vec<T>)> {
    let (co, ci, n) = pointwise_dims(input, weights)?;
    let mut gw = vec![T::zero(); co * ci];
    T::gemm(
        co,
        n,
        ci,
        T::one(),
        grad_out,
        n as isize,
        1,
        input.data(),
        1,
        n as isize,
        T::zero(),
        &mut gw,
        ci as isize,
        1,
    );
    let gi = need_input.then(|| {
        let mut gi = vec![T::zero(); ci * n];
        T::gemm(
            ci,
            co,
            n,
            T::one(),
            weights.data(),
            1,
            ci as isize,
            grad_out,
            n as isize,
            1,
            T::zero(),
            &mut gi,
            n as isize,
            1,
        );
        gi
    });
    Ok((gi, gw))
}

fn transposed_dims<T: Real>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<([usize; 4], usize)> {
    const OP: &str = "transposed_conv3d";
    let dims = expect_volume(OP, input)?;
    match weights.shape() {
        &[ci, co, 2, 2, 2] if ci == dims[0] => Ok((dims, co)),
        &[ci, _, 2, 2, 2] => Err(Error::shape(
            OP,
            "channels",
            format!("input has {} channels, weights expect {ci}", dims[0]),
        )),
        s => Err(Error::shape(
            OP,
            "kernel",
            format!("expected C×C′×2×2×2 weights, got {s:?}"),
        )),
    }
}

/// Stride-2 transposed convolution with a non-overlapping 2³ kernel.
///
/// Every input voxel scatters into one 2³ output block, so spatial extents
/// double exactly.
pub fn transposed_conv3d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let ([ci, d, h, w], co) = transposed_dims(input, weights)?;
    let n = d * h * w;
    let m = co * 8;
    // y[(c′,a,b,e), n] = Σ_c W[c, (c′,a,b,e)] · x[c, n]
    let mut y = vec![T::zero(); m * n];
    T::gemm(
        m,
        ci,
        n,
        T::one(),
        weights.data(),
        1,
        m as isize,
        input.data(),
        n as isize,
        1,
        T::zero(),
        &mut y,
        n as isize,
        1,
    );
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![T::zero(); co * od * oh * ow];
    for c in 0..co {
        for tap in 0..8 {
            let (a, b, e) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let src = &y[(c * 8 + tap) * n..][..n];
            for z in 0..d {
                for yy in 0..h {
                    let row = &src[(z * h + yy) * w..][..w];
                    let base = ((c * od + 2 * z + a) * oh + 2 * yy + b) * ow + e;
                    for (x, &v) in row.iter().enumerate() {
                        out[base + 2 * x] = v;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![co, od, oh, ow], out))
}

pub fn transposed_conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &[T],
    need_input: bool,
) -> Result<(Option<Vec<T>>, Vec<T>)> {
    let ([ci, d, h, w], co) = transposed_dims(input, weights)?;
    let n = d * h * w;
    let m = co * 8;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut gy = vec![T::zero(); m * n];
    for c in 0..co {
        for tap in 0..8 {
            let (a, b, e) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let dst = &mut gy[(c * 8 + tap) * n..][..n];
            for z in 0..d {
                for yy in 0..h {
                    let row = &mut dst[(z * h + yy) * w..][..w];
                    let base = ((c * od + 2 * z + a) * oh + 2 * yy + b) * ow + e;
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = grad_out[base + 2 * x];
                    }
                }
            }
        }
    }
    // dW[c, j] = Σ_n x[c, n] · gy[j, n]
    let mut gw = vec![T::zero(); ci * m];
    T::gemm(
        ci,
        n,
        m,
        T::one(),
        input.data(),
        n as isize,
        1,
        &gy,
        1,
        n as isize,
        T::zero(),
        &mut gw,
        m as isize,
        1,
    );
    let gi = need_input.then(|| {
        let mut gi = vec![T::zero(); ci * n];
        T::gemm(
            ci,
            m,
            n,
            T::one(),
            weights.data(),
            m as isize,
            1,
            &gy,
            n as isize,
            1,
            T::zero(),
            &mut gi,
            n as isize,
            1,
        );
        gi
    });
    Ok((gi, gw))
}

/// Saved statistics of an instance-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel normalization over spatial positions, then affine gain/bias.
pub fn instance_norm<T: Real>(
    input: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    const OP: &str = "instance_norm";
    let [c, d, h, w] = expect_volume(OP, input)?;
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape(
            OP,
            "channels",
            format!("{c} channels, gain {} and bias {}", gain.len(), bias.len()),
        ));
    }
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("instance_norm: eps must be positive".into()));
    }
    let n = d * h * w;
    let nf: T = lit(n as f64);
    let mut out = vec![T::zero(); c * n];
    let mut stats = NormStats {
        mean: Vec::with_capacity(c),
        inv_std: Vec::with_capacity(c),
    };
    for ch in 0..c {
        let x = &input.data()[ch * n..(ch + 1) * n];
        let mean = x.iter().copied().sum::<T>() / nf;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let inv = T::one() / (var + eps).sqrt();
        let (g, b) = (gain.data()[ch], bias.data()[ch]);
        for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(x) {
            *o = g * ((v - mean) * inv) + b;
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv);
    }
    Ok((Tensor::from_parts(input.shape().to_vec(), out), stats))
}

/// Returns (d input, d gain, d bias).
pub fn instance_norm_backward<T: Real>(
    input: &Tensor<T>,
    gain: &Tensor<T>,
    stats: &NormStats<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = input.shape()[0];
    let n = input.len() / c;
    let nf: T = lit(n as f64);
    let mut gi = vec![T::zero(); input.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let x = &input.data()[ch * n..(ch + 1) * n];
        let dy = &grad_out[ch * n..(ch + 1) * n];
        let (mean, inv) = (stats.mean[ch], stats.inv_std[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&v, &g) in x.iter().zip(dy) {
            sum_dy += g;
            sum_dy_xhat += g * (v - mean) * inv;
        }
        gg[ch] = sum_dy_xhat;
        gb[ch] = sum_dy;
        let scale = gain.data()[ch] * inv / nf;
        for ((o, &v), &g) in gi[ch * n..(ch + 1) * n].iter_mut().zip(x).zip(dy) {
            let xhat = (v - mean) * inv;
            *o = scale * (nf * g - sum_dy - xhat * sum_dy_xhat);
        }
    }
    (gi, gg, gb)
}

pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|v| if v >= T::zero() { v } else { slope * v })
}

/// Softmax across axis 0 (channels) at every remaining position, with
/// max-subtraction.
pub fn softmax_channels<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let k = input.shape()[0];
    if input.shape().len() < 2 {
        return Err(Error::shape(
            "softmax_channels",
            "rank",
            "need a channel axis and at least one position",
        ));
    }
    let n = input.len() / k;
    let x = input.data();
    let mut out = vec![T::zero(); input.len()];
    for p in 0..n {
        let mut mx = T::neg_infinity();
        for c in 0..k {
            mx = mx.max(x[c * n + p]);
        }
        let mut z = T::zero();
        for c in 0..k {
            let e = (x[c * n + p] - mx).exp();
            out[c * n + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * n + p] /= z;
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub fn softmax_channels_backward<T: Real>(probs: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    let k = probs.shape()[0];
    let n = probs.len() / k;
    let y = probs.data();
    let mut gi = vec![T::zero(); y.len()];
    for p in 0..n {
        let mut dot = T::zero();
        for c in 0..k {
            dot += grad_out[c * n + p] * y[c * n + p];
        }
        for c in 0..k {
            gi[c * n + p] = y[c * n + p] * (grad_out[c * n + p] - dot);
        }
    }
    gi
}

/// Nearest-neighbour ×2 upsampling of a C×D×H×W tensor.
pub fn upsample2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, d, h, w] = expect_volume("upsample2", input)?;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![T::zero(); c * od * oh * ow];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let src = &x[((ch * d + z / 2) * h + y / 2) * w..][..w];
                let dst = &mut out[((ch * od + z) * oh + y) * ow..][..ow];
                for (xx, v) in dst.iter_mut().enumerate() {
                    *v = src[xx / 2];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, od, oh, ow], out))
}

pub fn upsample2_backward<T: Real>(input_shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let (c, d, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut gi = vec![T::zero(); c * d * h * w];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let src = &grad_out[((ch * od + z) * oh + y) * ow..][..ow];
                let dst = &mut gi[((ch * d + z / 2) * h + y / 2) * w..][..w];
                for (xx, &v) in src.iter().enumerate() {
                    dst[xx / 2] += v;
                }
            }
        }
    }
    gi
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    const OP: &str = "concat";
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat: no inputs".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape(OP, format!("axis {axis}"), format!("rank is {rank}")));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        if p.shape().len() != rank {
            return Err(Error::shape(
                OP,
                "rank",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        for (i, (&a, &b)) in first.shape().iter().zip(p.shape()).enumerate() {
            if i != axis && a != b {
                return Err(Error::shape(OP, format!("axis {i}"), format!("{a} vs {b}")));
            }
        }
        shape[axis] += p.shape()[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block: usize = p.shape()[axis..].iter().product();
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Splits a concatenation gradient back into per-part gradients.
pub fn concat_backward<T: Real>(shapes: &[Vec<usize>], axis: usize, grad_out: &[T]) -> Vec<Vec<T>> {
    let outer: usize = shapes[0][..axis].iter().product();
    let blocks: Vec<usize> = shapes.iter().map(|s| s[axis..].iter().product()).collect();
    let mut grads: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (g, &b) in grads.iter_mut().zip(&blocks) {
            g.extend_from_slice(&grad_out[pos..pos + b]);
            pos += b;
        }
    }
    grads
}
