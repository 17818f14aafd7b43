//! Shared auto-decoder: a small upsampling CNN that maps a low-resolution
//! embedded feature volume to a full-resolution 4-channel tensor.
//!
//! The network is a head 1x1x1 convolution, a cascade of upsampling modules
//! (convolution, channel-to-space shuffle, GELU), and a final 1x1x1
//! projection with a hard [-1,1] clamp. Features and all parameters pass
//! through straight-through quantization so training is aware of the
//! precision the bitstream will keep.

use crate::error::Error;
use crate::grid::{GridSpec, TsdfDefTensor};
use crate::nn::{self, Tensor4};
use crate::quant::QuantSpec;
use crate::Result;

/// One upsampling stage: convolution to `out_channels * scale^3` channels,
/// shuffle by `scale`, GELU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpsampleModule {
    pub kernel: usize,
    pub scale: usize,
    pub out_channels: usize,
}

/// Architecture descriptor. Output resolution is
/// `feature_res * product(scales)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderArch {
    pub feature_res: usize,
    pub feature_channels: usize,
    pub head_width: usize,
    pub modules: Vec<UpsampleModule>,
}

impl DecoderArch {
    pub fn new(
        feature_res: usize,
        feature_channels: usize,
        head_width: usize,
        modules: Vec<UpsampleModule>,
    ) -> Result<Self> {
        if feature_res == 0 || feature_channels == 0 || head_width == 0 {
            return Err(Error::InvalidArgument("arch dimensions must be positive".into()));
        }
        for m in &modules {
            if m.kernel % 2 == 0 || m.kernel == 0 {
                return Err(Error::InvalidArgument("module kernels must be odd".into()));
            }
            if m.scale < 2 || m.out_channels == 0 {
                return Err(Error::InvalidArgument(
                    "module scale must be >= 2 with nonzero channels".into(),
                ));
            }
        }
        Ok(DecoderArch {
            feature_res,
            feature_channels,
            head_width,
            modules,
        })
    }

    /// Stock arch: kernel-3 modules, scale 2 each, widths given outermost
    /// module first.
    pub fn standard(
        feature_res: usize,
        feature_channels: usize,
        head_width: usize,
        widths: &[usize],
    ) -> Result<Self> {
        DecoderArch::new(
            feature_res,
            feature_channels,
            head_width,
            widths
                .iter()
                .map(|&w| UpsampleModule {
                    kernel: 3,
                    scale: 2,
                    out_channels: w,
                })
                .collect(),
        )
    }

    pub fn output_resolution(&self) -> usize {
        self.modules
            .iter()
            .fold(self.feature_res, |r, m| r * m.scale)
    }

    pub fn feature_dims(&self) -> [usize; 4] {
        [
            self.feature_res,
            self.feature_res,
            self.feature_res,
            self.feature_channels,
        ]
    }

    pub fn feature_len(&self) -> usize {
        self.feature_dims().iter().product()
    }

    /// Conv layer shapes in execution order: (kernel, c_in, c_out).
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let mut out = vec![(1, self.feature_channels, self.head_width)];
        let mut c = self.head_width;
        for m in &self.modules {
            let s3 = m.scale * m.scale * m.scale;
            out.push((m.kernel, c, m.out_channels * s3));
            c = m.out_channels;
        }
        out.push((1, c, 4));
        out
    }

    /// Flat layout of the parameter vector: per layer, weight range then
    /// bias range.
    pub fn layer_ranges(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let mut at = 0usize;
        self.layers()
            .iter()
            .map(|&(k, ci, co)| {
                let wlen = k * k * k * ci * co;
                let w = at..at + wlen;
                let b = at + wlen..at + wlen + co;
                at = b.end;
                (w, b)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_ranges().last().map_or(0, |(_, b)| b.end)
    }

    /// Fan-in of each layer, for initialization.
    pub fn layer_fan_in(&self) -> Vec<usize> {
        self.layers().iter().map(|&(k, ci, _)| k * k * k * ci).collect()
    }
}

/// Per-layer activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    q_params: Vec<f64>,
    /// Input to each conv layer, in order.
    conv_inputs: Vec<Tensor4>,
    /// Output of each shuffle (input to the GELU), per module.
    shuffle_outputs: Vec<Tensor4>,
    /// Final conv output, pre-clamp.
    pre_clamp: Tensor4,
}

/// Gradients produced by [`decoder_backward`]; parameter and feature
/// gradients are already masked by the straight-through rule.
pub struct DecoderGrads {
    pub feature: Tensor4,
    pub params: Vec<f64>,
}

/// Decodes a feature volume. Quantizes the feature and parameters, runs the
/// network, clamps the output to [-1,1].
pub fn decoder_forward(
    feature: &Tensor4,
    params: &[f64],
    arch: &DecoderArch,
    feat_quant: &QuantSpec,
    param_quant: &QuantSpec,
) -> Result<(Tensor4, ForwardCache)> {
    if feature.dims != arch.feature_dims() {
        return Err(Error::Shape(format!(
            "feature dims {:?}, arch expects {:?}",
            feature.dims,
            arch.feature_dims()
        )));
    }
    if params.len() != arch.param_count() {
        return Err(Error::Shape(format!(
            "parameter vector length {} != {}",
            params.len(),
            arch.param_count()
        )));
    }
    let q_feature = nn::ste_quantize(feature, feat_quant);
    let mut q_params = params.to_vec();
    nn::ste_quantize_slice(&mut q_params, param_quant);

    let layers = arch.layers();
    let ranges = arch.layer_ranges();
    let mut conv_inputs = Vec::with_capacity(layers.len());
    let mut shuffle_outputs = Vec::with_capacity(arch.modules.len());

    let mut x = q_feature;
    for (li, &(k, _ci, co)) in layers.iter().enumerate() {
        let (wr, br) = &ranges[li];
        conv_inputs.push(x.clone());
        x = nn::conv3d(&x, &q_params[wr.clone()], &q_params[br.clone()], k, co)?;
        // layers 1..=L are upsampling modules
        if li >= 1 && li <= arch.modules.len() {
            let m = &arch.modules[li - 1];
            x = nn::pixel_shuffle3d(&x, m.scale)?;
            shuffle_outputs.push(x.clone());
            x = nn::activation(&x);
        }
    }
    let pre_clamp = x.clone();
    let out = nn::clamp_ste(&x, -1.0, 1.0);
    Ok((
        out,
        ForwardCache {
            q_params,
            conv_inputs,
            shuffle_outputs,
            pre_clamp,
        },
    ))
}

/// Backpropagates an output gradient to the raw feature and parameters.
pub fn decoder_backward(
    grad_out: &Tensor4,
    feature: &Tensor4,
    params: &[f64],
    arch: &DecoderArch,
    feat_quant: &QuantSpec,
    param_quant: &QuantSpec,
    cache: &ForwardCache,
) -> DecoderGrads {
    let layers = arch.layers();
    let ranges = arch.layer_ranges();
    let mut grad_params = vec![0.0f64; params.len()];

    let mut g = nn::clamp_ste_backward(&cache.pre_clamp, -1.0, 1.0, grad_out);
    for li in (0..layers.len()).rev() {
        if li >= 1 && li <= arch.modules.len() {
            let m = &arch.modules[li - 1];
            let shuffled = &cache.shuffle_outputs[li - 1];
            g = nn::activation_backward(shuffled, &g);
            let conv_out_dims = {
                let [d, h, w, c] = shuffled.dims;
                let s = m.scale;
                [d / s, h / s, w / s, c * s * s * s]
            };
            g = nn::pixel_shuffle3d_backward(&g, m.scale, conv_out_dims);
        }
        let (k, _ci, co) = layers[li];
        let (wr, br) = &ranges[li];
        let (gi, gw, gb) = nn::conv3d_backward(
            &cache.conv_inputs[li],
            &cache.q_params[wr.clone()],
            k,
            co,
            &g,
        );
        grad_params[wr.clone()].copy_from_slice(&gw);
        grad_params[br.clone()].copy_from_slice(&gb);
        g = gi;
    }
    nn::ste_mask_slice(&mut grad_params, params, param_quant);
    let grad_feature = nn::ste_quantize_backward(feature, feat_quant, &g);
    DecoderGrads {
        feature: grad_feature,
        params: grad_params,
    }
}

/// Regression objective between a decoded tensor and its target: plain mean
/// absolute error, a surface-weighted mean absolute error over grid points
/// whose target distance value is inside the mask band, and a structural
/// dissimilarity term. Returns the loss and its gradient w.r.t. `predicted`.
pub fn regression_loss(
    predicted: &Tensor4,
    target: &Tensor4,
    lambda1: f64,
    lambda2: f64,
    tau: f64,
) -> Result<(f64, Tensor4)> {
    if predicted.dims != target.dims {
        return Err(Error::Shape(format!(
            "loss dims {:?} vs {:?}",
            predicted.dims, target.dims
        )));
    }
    let n = predicted.len() as f64;
    let channels = predicted.dims[3];
    let mut grad = Tensor4::zeros(predicted.dims);

    // f64::signum maps +-0 to +-1; the L1 subgradient at 0 must be 0
    #[inline]
    fn sgn(d: f64) -> f64 {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    }

    let mut l1 = 0.0f64;
    for i in 0..predicted.len() {
        let d = predicted.data[i] - target.data[i];
        l1 += d.abs();
        grad.data[i] = sgn(d) / n;
    }
    l1 /= n;

    // mask: all channels of grid points near the target surface
    let n_points = predicted.len() / channels;
    let mut masked = 0usize;
    for p in 0..n_points {
        if target.data[p * channels].abs() < tau {
            masked += 1;
        }
    }
    let mut l_mask = 0.0f64;
    if masked > 0 && lambda1 != 0.0 {
        let mn = (masked * channels) as f64;
        for p in 0..n_points {
            if target.data[p * channels].abs() < tau {
                for c in 0..channels {
                    let i = p * channels + c;
                    let d = predicted.data[i] - target.data[i];
                    l_mask += d.abs();
                    grad.data[i] += lambda1 * sgn(d) / mn;
                }
            }
        }
        l_mask /= mn;
    }

    let mut ssim_term = 0.0;
    if lambda2 != 0.0 {
        let (s, sg) = nn::ssim3d(predicted, target)?;
        ssim_term = 1.0 - s;
        for (g, &d) in grad.data.iter_mut().zip(&sg.data) {
            *g -= lambda2 * d;
        }
    }
    Ok((l1 + lambda1 * l_mask + lambda2 * ssim_term, grad))
}

/// Converts a decoded output volume to a tensor on the grid implied by the
/// arch.
pub fn output_to_tensor(output: &Tensor4) -> Result<TsdfDefTensor> {
    let [d, h, w, c] = output.dims;
    if c != 4 || d != h || h != w {
        return Err(Error::Shape(format!("decoded dims {:?} not cubic x4", output.dims)));
    }
    let grid = GridSpec::new(d)?;
    TsdfDefTensor::from_data(grid, output.data.iter().map(|&x| x as f32).collect())
}

/// Loads a tensor into the engine layout (already identical ordering).
pub fn tensor_to_input(tensor: &TsdfDefTensor) -> Tensor4 {
    let k = tensor.grid.resolution;
    Tensor4 {
        dims: [k, k, k, 4],
        data: tensor.data.iter().map(|&x| x as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> DecoderArch {
        DecoderArch::standard(2, 3, 6, &[5, 4]).unwrap()
    }

    fn random_setup(seed: u64) -> (DecoderArch, Tensor4, Vec<f64>, QuantSpec, QuantSpec) {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature = Tensor4 {
            dims: arch.feature_dims(),
            data: (0..arch.feature_len())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect(),
        };
        let params: Vec<f64> = (0..arch.param_count())
            .map(|_| rng.random_range(-0.3..0.3))
            .collect();
        (arch, feature, params, QuantSpec::symmetric(12), QuantSpec::symmetric(12))
    }

    #[test]
    fn output_resolution_multiplies_scales() {
        let arch = DecoderArch::standard(4, 16, 32, &[16, 16, 8, 8, 4]).unwrap();
        assert_eq!(arch.output_resolution(), 128);
        assert_eq!(tiny_arch().output_resolution(), 8);
    }

    #[test]
    fn forward_output_dims_and_range() {
        let (arch, feature, params, fq, pq) = random_setup(1);
        let (out, _) = decoder_forward(&feature, &params, &arch, &fq, &pq).unwrap();
        let k = arch.output_resolution();
        assert_eq!(out.dims, [k, k, k, 4]);
        for &v in &out.data {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn zero_params_give_constant_bias_output() {
        let (arch, feature, _, fq, pq) = random_setup(2);
        let params = vec![0.0f64; arch.param_count()];
        let (out, _) = decoder_forward(&feature, &params, &arch, &fq, &pq).unwrap();
        for &v in &out.data {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn forward_idempotent_under_prequantized_params() {
        let (arch, feature, params, fq, pq) = random_setup(3);
        let mut pre = params.clone();
        nn::ste_quantize_slice(&mut pre, &pq);
        let a = decoder_forward(&feature, &params, &arch, &fq, &pq).unwrap().0;
        let b = decoder_forward(&feature, &pre, &arch, &fq, &pq).unwrap().0;
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn forward_rejects_mismatched_shapes() {
        let (arch, feature, params, fq, pq) = random_setup(4);
        let bad = Tensor4::zeros([3, 3, 3, 3]);
        assert!(decoder_forward(&bad, &params, &arch, &fq, &pq).is_err());
        assert!(decoder_forward(&feature, &params[1..], &arch, &fq, &pq).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        // coarse quantization would zero most STE gradients under FD, so
        // use a fine lattice and probe off-lattice-step directions
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feature = Tensor4 {
            dims: arch.feature_dims(),
            data: (0..arch.feature_len())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect(),
        };
        let params: Vec<f64> = (0..arch.param_count())
            .map(|_| rng.random_range(-0.3..0.3))
            .collect();
        // effectively continuous lattices keep Q(x + eps) - Q(x) = eps
        let fq = QuantSpec::new(-8.0, 8.0, 24).unwrap();
        let pq = QuantSpec::new(-8.0, 8.0, 24).unwrap();
        let k = arch.output_resolution();
        let cw: Vec<f64> = (0..k * k * k * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |f: &Tensor4, p: &[f64]| -> f64 {
            let (o, _) = decoder_forward(f, p, &arch, &fq, &pq).unwrap();
            o.data.iter().zip(&cw).map(|(a, b)| a * b).sum()
        };
        let grad_out = Tensor4::from_data([k, k, k, 4], cw.clone()).unwrap();
        let (_, cache) = decoder_forward(&feature, &params, &arch, &fq, &pq).unwrap();
        let grads = decoder_backward(&grad_out, &feature, &params, &arch, &fq, &pq, &cache);
        // a step that is an exact multiple of the lattice step commutes
        // with quantization, so the FD probe sees the smooth network only
        let eps = 16.0 * (16.0 / (1u64 << 24) as f64);
        let mut checked = 0;
        for idx in (0..arch.feature_len()).step_by(7) {
            let mut p = feature.clone();
            p.data[idx] += eps;
            let mut m = feature.clone();
            m.data[idx] -= eps;
            let fd = (objective(&p, &params) - objective(&m, &params)) / (2.0 * eps);
            let an = grads.feature.data[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-3,
                "feature {idx}: fd {fd} vs {an}"
            );
            checked += 1;
        }
        for idx in (0..params.len()).step_by(97) {
            let mut p = params.clone();
            p[idx] += eps;
            let mut m = params.clone();
            m[idx] -= eps;
            let fd = (objective(&feature, &p) - objective(&feature, &m)) / (2.0 * eps);
            let an = grads.params[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-3,
                "param {idx}: fd {fd} vs {an}"
            );
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn loss_zero_iff_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = Tensor4 {
            dims: [8, 8, 8, 4],
            data: (0..8 * 8 * 8 * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let (l, g) = regression_loss(&t, &t, 5.0, 10.0, 2.0 / 3.0).unwrap();
        assert!(l.abs() < 1e-12);
        // ssim gradient terms cancel analytically at identity; numerically
        // a small residue survives the large intermediate magnitudes
        assert!(g.data.iter().all(|&x| x.abs() < 1e-6));
        let mut other = t.clone();
        other.data[100] += 0.2;
        let (l2, _) = regression_loss(&other, &t, 5.0, 10.0, 2.0 / 3.0).unwrap();
        assert!(l2 > 0.0);
    }

    #[test]
    fn saturated_mask_doubles_the_l1_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mk = || Tensor4 {
            dims: [8, 8, 8, 4],
            data: (0..8 * 8 * 8 * 4).map(|_| rng.random_range(-0.9..0.9)).collect(),
        };
        let a = mk();
        let b = mk();
        let (plain, _) = regression_loss(&a, &b, 0.0, 0.0, 0.0).unwrap();
        let (masked, _) = regression_loss(&a, &b, 1.0, 0.0, 1.5).unwrap();
        assert!((masked - 2.0 * plain).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mk = |rng: &mut ChaCha8Rng| Tensor4 {
            dims: [8, 8, 8, 4],
            data: (0..8 * 8 * 8 * 4).map(|_| rng.random_range(-0.9..0.9)).collect(),
        };
        let x = mk(&mut rng);
        let y = mk(&mut rng);
        let (_, g) = regression_loss(&x, &y, 5.0, 10.0, 2.0 / 3.0).unwrap();
        let eps = 1e-6;
        for idx in [0usize, 123, 777, 1500, 2047] {
            let mut p = x.clone();
            p.data[idx] += eps;
            let mut m = x.clone();
            m.data[idx] -= eps;
            let fp = regression_loss(&p, &y, 5.0, 10.0, 2.0 / 3.0).unwrap().0;
            let fm = regression_loss(&m, &y, 5.0, 10.0, 2.0 / 3.0).unwrap().0;
            let fd = (fp - fm) / (2.0 * eps);
            let an = g.data[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-3,
                "idx {idx}: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn tensor_round_trip_through_engine_layout() {
        let grid = GridSpec::new(8).unwrap();
        let mut t = TsdfDefTensor::zeros(grid);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = ((i % 17) as f32 / 17.0) - 0.5;
        }
        let x = tensor_to_input(&t);
        let back = output_to_tensor(&x).unwrap();
        assert_eq!(back.data, t.data);
    }
}
