//! Minimal dense-tensor layer engine for the auto-decoder.
//!
//! There is no general computation graph: the decoder is a fixed
//! feed-forward chain, so each layer exposes an explicit forward and
//! backward function and callers chain them in reverse order. All math runs
//! in f64; storage at the tensor-archive boundary is f32.

use rayon::prelude::*;

use crate::error::Error;
use crate::quant::QuantSpec;
use crate::Result;

/// Dense (D,H,W,C) tensor, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_data(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "data length {} != dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize, c: usize) -> f64 {
        let [_, hh, ww, cc] = self.dims;
        self.data[((d * hh + h) * ww + w) * cc + c]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// 3D convolution, stride 1, zero "same" padding, odd kernel.
/// Weights are (k,k,k,Cin,Cout) row-major, bias is Cout.
pub fn conv3d(input: &Tensor4, weights: &[f64], bias: &[f64], k: usize, c_out: usize) -> Result<Tensor4> {
    let [d, h, w, c_in] = input.dims;
    if k % 2 == 0 {
        return Err(Error::Shape(format!("kernel size {k} must be odd")));
    }
    if weights.len() != k * k * k * c_in * c_out {
        return Err(Error::Shape(format!(
            "weight length {} != {}x{}x{}x{}x{}",
            weights.len(),
            k,
            k,
            k,
            c_in,
            c_out
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Shape("bias length mismatch".into()));
    }
    let pad = k / 2;
    let mut out = Tensor4::zeros([d, h, w, c_out]);

    out.data
        .par_chunks_mut(h * w * c_out)
        .enumerate()
        .for_each(|(od, slab)| {
            for oh in 0..h {
                for ow in 0..w {
                    let base = (oh * w + ow) * c_out;
                    for oc in 0..c_out {
                        slab[base + oc] = bias[oc];
                    }
                    for kd in 0..k {
                        let id = od + kd;
                        if id < pad || id - pad >= d {
                            continue;
                        }
                        let id = id - pad;
                        for kh in 0..k {
                            let ih = oh + kh;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let ih = ih - pad;
                            for kw in 0..k {
                                let iw = ow + kw;
                                if iw < pad || iw - pad >= w {
                                    continue;
                                }
                                let iw = iw - pad;
                                let in_base = ((id * h + ih) * w + iw) * c_in;
                                let w_base = ((kd * k + kh) * k + kw) * c_in * c_out;
                                for ic in 0..c_in {
                                    let x = input.data[in_base + ic];
                                    let wrow = w_base + ic * c_out;
                                    for oc in 0..c_out {
                                        slab[base + oc] += x * weights[wrow + oc];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Backward pass of [`conv3d`]: gradients for input, weights and bias.
pub fn conv3d_backward(
    input: &Tensor4,
    weights: &[f64],
    k: usize,
    c_out: usize,
    grad_out: &Tensor4,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let [d, h, w, c_in] = input.dims;
    debug_assert_eq!(grad_out.dims, [d, h, w, c_out]);
    let pad = k / 2;

    // grad wrt input: correlation of grad_out with the flipped kernel;
    // parallel over input depth slabs keeps writes disjoint and ordering
    // deterministic.
    let mut grad_in = Tensor4::zeros([d, h, w, c_in]);
    grad_in
        .data
        .par_chunks_mut(h * w * c_in)
        .enumerate()
        .for_each(|(id, slab)| {
            for ih in 0..h {
                for iw in 0..w {
                    let gbase = (ih * w + iw) * c_in;
                    for kd in 0..k {
                        // output voxel od with od + kd - pad == id
                        let od = id + pad;
                        if od < kd || od - kd >= d {
                            continue;
                        }
                        let od = od - kd;
                        for kh in 0..k {
                            let oh = ih + pad;
                            if oh < kh || oh - kh >= h {
                                continue;
                            }
                            let oh = oh - kh;
                            for kw in 0..k {
                                let ow = iw + pad;
                                if ow < kw || ow - kw >= w {
                                    continue;
                                }
                                let ow = ow - kw;
                                let go_base = ((od * h + oh) * w + ow) * c_out;
                                let w_base = ((kd * k + kh) * k + kw) * c_in * c_out;
                                for ic in 0..c_in {
                                    let wrow = w_base + ic * c_out;
                                    let mut acc = 0.0;
                                    for oc in 0..c_out {
                                        acc += grad_out.data[go_base + oc] * weights[wrow + oc];
                                    }
                                    slab[gbase + ic] += acc;
                                }
                            }
                        }
                    }
                }
            }
        });

    // grad wrt weights/bias: per-depth partials summed in slab order so the
    // reduction is bit-identical regardless of thread count.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..d)
        .into_par_iter()
        .map(|od| {
            let mut gw = vec![0.0f64; weights.len()];
            let mut gb = vec![0.0f64; c_out];
            for oh in 0..h {
                for ow in 0..w {
                    let go_base = ((od * h + oh) * w + ow) * c_out;
                    for oc in 0..c_out {
                        gb[oc] += grad_out.data[go_base + oc];
                    }
                    for kd in 0..k {
                        let id = od + kd;
                        if id < pad || id - pad >= d {
                            continue;
                        }
                        let id = id - pad;
                        for kh in 0..k {
                            let ih = oh + kh;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let ih = ih - pad;
                            for kw in 0..k {
                                let iw = ow + kw;
                                if iw < pad || iw - pad >= w {
                                    continue;
                                }
                                let iw = iw - pad;
                                let in_base = ((id * h + ih) * w + iw) * c_in;
                                let w_base = ((kd * k + kh) * k + kw) * c_in * c_out;
                                for ic in 0..c_in {
                                    let x = input.data[in_base + ic];
                                    let wrow = w_base + ic * c_out;
                                    for oc in 0..c_out {
                                        gw[wrow + oc] += x * grad_out.data[go_base + oc];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();
    let mut grad_w = vec![0.0f64; weights.len()];
    let mut grad_b = vec![0.0f64; c_out];
    for (gw, gb) in partials {
        for (a, b) in grad_w.iter_mut().zip(&gw) {
            *a += b;
        }
        for (a, b) in grad_b.iter_mut().zip(&gb) {
            *a += b;
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Channel-to-space rearrangement upscaling every spatial dim by `s`:
/// output(s*d+i, s*h+j, s*w+l, c) = input(d, h, w, c*s^3 + i*s^2 + j*s + l).
pub fn pixel_shuffle3d(input: &Tensor4, s: usize) -> Result<Tensor4> {
    let [d, h, w, c] = input.dims;
    let s3 = s * s * s;
    if c % s3 != 0 {
        return Err(Error::Shape(format!(
            "channel count {c} not divisible by s^3 = {s3}"
        )));
    }
    let c_out = c / s3;
    let mut out = Tensor4::zeros([d * s, h * s, w * s, c_out]);
    let [od_, oh_, ow_, _] = out.dims;
    for id in 0..d {
        for ih in 0..h {
            for iw in 0..w {
                let in_base = ((id * h + ih) * w + iw) * c;
                for oc in 0..c_out {
                    for i in 0..s {
                        for j in 0..s {
                            for l in 0..s {
                                let ic = oc * s3 + (i * s + j) * s + l;
                                let out_idx = (((id * s + i) * oh_ + (ih * s + j)) * ow_
                                    + (iw * s + l))
                                    * c_out
                                    + oc;
                                out.data[out_idx] = input.data[in_base + ic];
                            }
                        }
                    }
                }
            }
        }
    }
    let _ = od_;
    Ok(out)
}

/// Backward (and exact inverse) of the shuffle: scatters gradients back.
pub fn pixel_shuffle3d_backward(grad_out: &Tensor4, s: usize, input_dims: [usize; 4]) -> Tensor4 {
    let [d, h, w, c] = input_dims;
    let s3 = s * s * s;
    let c_out = c / s3;
    let [_, oh_, ow_, _] = grad_out.dims;
    let mut grad_in = Tensor4::zeros(input_dims);
    for id in 0..d {
        for ih in 0..h {
            for iw in 0..w {
                let in_base = ((id * h + ih) * w + iw) * c;
                for oc in 0..c_out {
                    for i in 0..s {
                        for j in 0..s {
                            for l in 0..s {
                                let ic = oc * s3 + (i * s + j) * s + l;
                                let out_idx = (((id * s + i) * oh_ + (ih * s + j)) * ow_
                                    + (iw * s + l))
                                    * c_out
                                    + oc;
                                grad_in.data[in_base + ic] = grad_out.data[out_idx];
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

/// Element-wise GELU (tanh approximation).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C1 * (x + GELU_C2 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C1 * (x + GELU_C2 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C1 * (1.0 + 3.0 * GELU_C2 * x * x)
}

pub fn activation(input: &Tensor4) -> Tensor4 {
    Tensor4 {
        dims: input.dims,
        data: input.data.iter().map(|&x| gelu(x)).collect(),
    }
}

pub fn activation_backward(input: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    Tensor4 {
        dims: input.dims,
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| g * gelu_grad(x))
            .collect(),
    }
}

/// Straight-through quantization: forward quantizes, backward passes the
/// upstream gradient inside [a,b] and zero outside.
pub fn ste_quantize(input: &Tensor4, spec: &QuantSpec) -> Tensor4 {
    Tensor4 {
        dims: input.dims,
        data: input.data.iter().map(|&x| spec.quantize(x)).collect(),
    }
}

pub fn ste_quantize_backward(input: &Tensor4, spec: &QuantSpec, grad_out: &Tensor4) -> Tensor4 {
    Tensor4 {
        dims: input.dims,
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if (spec.a..=spec.b).contains(&x) { g } else { 0.0 })
            .collect(),
    }
}

pub fn ste_quantize_slice(values: &mut [f64], spec: &QuantSpec) {
    for v in values.iter_mut() {
        *v = spec.quantize(*v);
    }
}

pub fn ste_mask_slice(grads: &mut [f64], raw: &[f64], spec: &QuantSpec) {
    for (g, &x) in grads.iter_mut().zip(raw) {
        if !(spec.a..=spec.b).contains(&x) {
            *g = 0.0;
        }
    }
}

/// Hard clamp to [lo,hi] with straight-through gradient.
pub fn clamp_ste(input: &Tensor4, lo: f64, hi: f64) -> Tensor4 {
    Tensor4 {
        dims: input.dims,
        data: input.data.iter().map(|&x| x.clamp(lo, hi)).collect(),
    }
}

pub fn clamp_ste_backward(input: &Tensor4, lo: f64, hi: f64, grad_out: &Tensor4) -> Tensor4 {
    Tensor4 {
        dims: input.dims,
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if (lo..=hi).contains(&x) { g } else { 0.0 })
            .collect(),
    }
}

/// ADAM optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected ADAM update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

/// Volumetric SSIM between two same-shape tensors: per-channel 3D SSIM with
/// a Gaussian window (7^3, sigma 1.5, shrunk to fit small volumes), dynamic
/// range R = 2, channels averaged. Returns the value and d(ssim)/d(x).
pub fn ssim3d(x: &Tensor4, y: &Tensor4) -> Result<(f64, Tensor4)> {
    if x.dims != y.dims {
        return Err(Error::Shape(format!(
            "ssim3d dims {:?} vs {:?}",
            x.dims, y.dims
        )));
    }
    let [d, h, w, channels] = x.dims;
    let min_spatial = d.min(h).min(w);
    let mut win = 7usize.min(min_spatial);
    if win % 2 == 0 {
        win -= 1;
    }
    if win == 0 {
        return Err(Error::Shape("ssim3d needs nonzero spatial dims".into()));
    }
    let kernel = gaussian_kernel(win, 1.5);

    const C1: f64 = 4.0e-4; // (0.01 * 2)^2
    const C2: f64 = 3.6e-3; // (0.03 * 2)^2

    let (vd, vh, vw) = (d - win + 1, h - win + 1, w - win + 1);
    let n_pos = vd * vh * vw;
    let mut total = 0.0f64;
    let mut grad = Tensor4::zeros(x.dims);

    for c in 0..channels {
        let xc = extract_channel(x, c);
        let yc = extract_channel(y, c);
        let xx: Vec<f64> = xc.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yc.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b).collect();

        let dims = [d, h, w];
        let mx = separable_valid(&xc, dims, &kernel);
        let my = separable_valid(&yc, dims, &kernel);
        let mxx = separable_valid(&xx, dims, &kernel);
        let myy = separable_valid(&yy, dims, &kernel);
        let mxy = separable_valid(&xy, dims, &kernel);

        // per-position quotient terms and the three scatter fields
        let mut alpha = vec![0.0f64; n_pos]; // constant term
        let mut beta = vec![0.0f64; n_pos]; // coefficient of x_i
        let mut gamma = vec![0.0f64; n_pos]; // coefficient of y_i
        let mut csum = 0.0f64;
        for p in 0..n_pos {
            let (ux, uy) = (mx[p], my[p]);
            let sx = mxx[p] - ux * ux;
            let sy = myy[p] - uy * uy;
            let sxy = mxy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = sx + sy + C2;
            let s = (a1 * a2) / (b1 * b2);
            csum += s;
            let ds_dmx = 2.0 * (uy * a2 * b1 - ux * a1 * a2) / (b1 * b1 * b2);
            let ds_dsx = -a1 * a2 / (b1 * b2 * b2);
            let ds_dsxy = 2.0 * a1 / (b1 * b2);
            // dS/dx_i = g * (ds_dmx + 2 (x_i - mx) ds_dsx + (y_i - my) ds_dsxy)
            alpha[p] = ds_dmx - 2.0 * ux * ds_dsx - uy * ds_dsxy;
            beta[p] = 2.0 * ds_dsx;
            gamma[p] = ds_dsxy;
        }
        total += csum / n_pos as f64;

        let ga = separable_transpose(&alpha, [vd, vh, vw], dims, &kernel);
        let gb = separable_transpose(&beta, [vd, vh, vw], dims, &kernel);
        let gc = separable_transpose(&gamma, [vd, vh, vw], dims, &kernel);
        let norm = 1.0 / (n_pos as f64 * channels as f64);
        for i in 0..xc.len() {
            let g = (ga[i] + xc[i] * gb[i] + yc[i] * gc[i]) * norm;
            let (dd, hh, ww) = (
                i / (h * w),
                (i / w) % h,
                i % w,
            );
            grad.data[((dd * h + hh) * w + ww) * channels + c] = g;
        }
    }

    Ok((total / channels as f64, grad))
}

fn gaussian_kernel(win: usize, sigma: f64) -> Vec<f64> {
    let half = (win / 2) as f64;
    let mut k: Vec<f64> = (0..win)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn extract_channel(t: &Tensor4, c: usize) -> Vec<f64> {
    let [d, h, w, cc] = t.dims;
    let mut out = Vec::with_capacity(d * h * w);
    for i in 0..d * h * w {
        out.push(t.data[i * cc + c]);
    }
    out
}

/// Valid-mode separable 3D filtering along each axis in turn.
fn separable_valid(vol: &[f64], dims: [usize; 3], kernel: &[f64]) -> Vec<f64> {
    let [d, h, w] = dims;
    let kw = kernel.len();
    // filter along w
    let w1 = w - kw + 1;
    let mut a = vec![0.0f64; d * h * w1];
    for dd in 0..d {
        for hh in 0..h {
            for ww in 0..w1 {
                let mut s = 0.0;
                for t in 0..kw {
                    s += vol[(dd * h + hh) * w + ww + t] * kernel[t];
                }
                a[(dd * h + hh) * w1 + ww] = s;
            }
        }
    }
    // along h
    let h1 = h - kw + 1;
    let mut b = vec![0.0f64; d * h1 * w1];
    for dd in 0..d {
        for hh in 0..h1 {
            for ww in 0..w1 {
                let mut s = 0.0;
                for t in 0..kw {
                    s += a[(dd * h + hh + t) * w1 + ww] * kernel[t];
                }
                b[(dd * h1 + hh) * w1 + ww] = s;
            }
        }
    }
    // along d
    let d1 = d - kw + 1;
    let mut out = vec![0.0f64; d1 * h1 * w1];
    for dd in 0..d1 {
        for hh in 0..h1 {
            for ww in 0..w1 {
                let mut s = 0.0;
                for t in 0..kw {
                    s += b[((dd + t) * h1 + hh) * w1 + ww] * kernel[t];
                }
                out[(dd * h1 + hh) * w1 + ww] = s;
            }
        }
    }
    out
}

/// Transpose of [`separable_valid`]: scatters window-position fields back to
/// input-sized volumes (zero-padded full correlation, kernel symmetric).
fn separable_transpose(
    field: &[f64],
    fdims: [usize; 3],
    out_dims: [usize; 3],
    kernel: &[f64],
) -> Vec<f64> {
    let [fd, fh, fw] = fdims;
    let [d, h, w] = out_dims;
    let kw = kernel.len();
    // expand along d
    let mut a = vec![0.0f64; d * fh * fw];
    for dd in 0..fd {
        for hh in 0..fh {
            for ww in 0..fw {
                let v = field[(dd * fh + hh) * fw + ww];
                for t in 0..kw {
                    a[((dd + t) * fh + hh) * fw + ww] += v * kernel[t];
                }
            }
        }
    }
    // expand along h
    let mut b = vec![0.0f64; d * h * fw];
    for dd in 0..d {
        for hh in 0..fh {
            for ww in 0..fw {
                let v = a[(dd * fh + hh) * fw + ww];
                for t in 0..kw {
                    b[(dd * h + hh + t) * fw + ww] += v * kernel[t];
                }
            }
        }
    }
    // expand along w
    let mut out = vec![0.0f64; d * h * w];
    for dd in 0..d {
        for hh in 0..h {
            for ww in 0..fw {
                let v = b[(dd * h + hh) * fw + ww];
                for t in 0..kw {
                    out[(dd * h + hh) * w + ww + t] += v * kernel[t];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
        let n = dims.iter().product();
        Tensor4 {
            dims,
            data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, [4, 5, 3, 2]);
        let k = 3;
        let c_out = 3;
        let weights: Vec<f64> = (0..k * k * k * 2 * c_out)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let bias: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = conv3d(&input, &weights, &bias, k, c_out).unwrap();
        // direct evaluation at a few voxels
        let [d, h, w, c_in] = input.dims;
        for &(od, oh, ow, oc) in &[(0usize, 0usize, 0usize, 0usize), (2, 3, 1, 2), (3, 4, 2, 1)] {
            let mut s = bias[oc];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let id = od as i64 + kd as i64 - 1;
                        let ih = oh as i64 + kh as i64 - 1;
                        let iw = ow as i64 + kw as i64 - 1;
                        if id < 0 || ih < 0 || iw < 0 {
                            continue;
                        }
                        let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                        if id >= d || ih >= h || iw >= w {
                            continue;
                        }
                        for ic in 0..c_in {
                            s += input.at(id, ih, iw, ic)
                                * weights[(((kd * k + kh) * k + kw) * c_in + ic) * c_out + oc];
                        }
                    }
                }
            }
            assert!((out.at(od, oh, ow, oc) - s).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(&mut rng, [3, 4, 3, 2]);
        let k = 3;
        let c_out = 2;
        let weights: Vec<f64> = (0..k * k * k * 2 * c_out)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let bias: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        // scalar objective: weighted sum of outputs
        let cw: Vec<f64> = (0..input.len() / 2 * c_out)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let objective = |inp: &Tensor4, ws: &[f64], bs: &[f64]| -> f64 {
            let o = conv3d(inp, ws, bs, k, c_out).unwrap();
            o.data.iter().zip(&cw).map(|(a, b)| a * b).sum()
        };
        let grad_out = Tensor4::from_data([3, 4, 3, c_out], cw.clone()).unwrap();
        let (gi, gw, gb) = conv3d_backward(&input, &weights, k, c_out, &grad_out);
        let eps = 1e-5;
        for idx in [0usize, 7, 20, 41, gi.len() - 1] {
            let mut p = input.clone();
            p.data[idx] += eps;
            let mut m = input.clone();
            m.data[idx] -= eps;
            let fd = (objective(&p, &weights, &bias) - objective(&m, &weights, &bias)) / (2.0 * eps);
            assert!(rel_err(fd, gi.data[idx]) < 1e-6, "input grad {idx}");
        }
        for idx in [0usize, 13, 55, weights.len() - 1] {
            let mut p = weights.clone();
            p[idx] += eps;
            let mut m = weights.clone();
            m[idx] -= eps;
            let fd = (objective(&input, &p, &bias) - objective(&input, &m, &bias)) / (2.0 * eps);
            assert!(rel_err(fd, gw[idx]) < 1e-6, "weight grad {idx}");
        }
        for idx in 0..c_out {
            let mut p = bias.clone();
            p[idx] += eps;
            let mut m = bias.clone();
            m[idx] -= eps;
            let fd = (objective(&input, &weights, &p) - objective(&input, &weights, &m)) / (2.0 * eps);
            assert!(rel_err(fd, gb[idx]) < 1e-6, "bias grad {idx}");
        }
    }

    #[test]
    fn pixel_shuffle_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, [2, 3, 2, 16]);
        let out = pixel_shuffle3d(&input, 2).unwrap();
        assert_eq!(out.dims, [4, 6, 4, 2]);
        // every input value appears exactly once
        let mut a = input.data.clone();
        let mut b = out.data.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        let back = pixel_shuffle3d_backward(&out, 2, input.dims);
        assert_eq!(back.data, input.data);
    }

    #[test]
    fn pixel_shuffle_index_formula() {
        // input value encodes its own flat index; check the mapping directly
        let dims = [2usize, 2, 2, 8];
        let data: Vec<f64> = (0..dims.iter().product::<usize>()).map(|i| i as f64).collect();
        let input = Tensor4::from_data(dims, data).unwrap();
        let out = pixel_shuffle3d(&input, 2).unwrap();
        let s = 2usize;
        for dd in 0..2 {
            for hh in 0..2 {
                for ww in 0..2 {
                    for i in 0..s {
                        for j in 0..s {
                            for l in 0..s {
                                let ic = (i * s + j) * s + l;
                                let expect = input.at(dd, hh, ww, ic);
                                let got = out.at(s * dd + i, s * hh + j, s * ww + l, 0);
                                assert_eq!(expect, got);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gelu_matches_reference_values() {
        // reference values from the tanh approximation formula
        assert!((gelu(0.0)).abs() < 1e-15);
        assert!((gelu(1.0) - 0.841192).abs() < 1e-6);
        assert!((gelu(-1.0) + 0.158808).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = 1e-6;
        for _ in 0..200 {
            let x: f64 = rng.random_range(-4.0..4.0);
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!(rel_err(fd, gelu_grad(x)) < 1e-6);
        }
    }

    #[test]
    fn ssim_identical_inputs_give_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, [9, 9, 9, 2]);
        let (v, _) = ssim3d(&x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "ssim(x,x) = {v}");
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, [8, 8, 8, 2]);
        let y = random_tensor(&mut rng, [8, 8, 8, 2]);
        let (_, g) = ssim3d(&x, &y).unwrap();
        let eps = 1e-5;
        for idx in [0usize, 33, 200, 511, 700, g.len() - 1] {
            let mut p = x.clone();
            p.data[idx] += eps;
            let mut m = x.clone();
            m.data[idx] -= eps;
            let fp = ssim3d(&p, &y).unwrap().0;
            let fm = ssim3d(&m, &y).unwrap().0;
            let fd = (fp - fm) / (2.0 * eps);
            assert!(rel_err(fd, g.data[idx]) < 1e-4, "idx {idx}: fd {fd} vs {}", g.data[idx]);
        }
    }

    #[test]
    fn ssim_window_shrinks_for_small_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, [4, 4, 4, 1]);
        let y = random_tensor(&mut rng, [4, 4, 4, 1]);
        let (v, _) = ssim3d(&x, &y).unwrap();
        assert!(v.is_finite() && v <= 1.0 + 1e-12);
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, [10, 10, 10, 1]);
        let mut y = x.clone();
        for v in &mut y.data {
            *v += rng.random_range(-0.3..0.3);
        }
        let (v, _) = ssim3d(&x, &y).unwrap();
        assert!(v < 0.999);
        assert!(v > -1.0);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (p - 3)^2 per coordinate
        let mut p = vec![0.0f64; 4];
        let mut st = AdamState::new(4, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|&x| 2.0 * (x - 3.0)).collect();
            st.step(&mut p, &g);
        }
        for &x in &p {
            assert!((x - 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn adam_first_step_size_is_lr() {
        // with bias correction the very first step has magnitude lr
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1, 0.01);
        st.step(&mut p, &[123.456]);
        assert!((p[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn ste_quantize_grad_masks_outside_range() {
        let spec = QuantSpec::symmetric(8);
        let x = Tensor4::from_data([1, 1, 1, 4], vec![0.3, -1.5, 0.999, 2.0]).unwrap();
        let g = Tensor4::from_data([1, 1, 1, 4], vec![1.0; 4]).unwrap();
        let q = ste_quantize(&x, &spec);
        for &v in &q.data {
            assert!(spec.to_level(v).is_ok());
        }
        let gi = ste_quantize_backward(&x, &spec, &g);
        assert_eq!(gi.data, vec![1.0, 0.0, 1.0, 0.0]);
    }
}
