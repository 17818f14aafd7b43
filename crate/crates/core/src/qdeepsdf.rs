//! Coordinate-MLP baseline: an 8-layer quantization-aware network mapping
//! (position, shape feature vector) to the 4 tensor channels. Used as the
//! rate-distortion comparator; layer width steers its size.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::geom::Vec3;
use crate::grid::TsdfDefTensor;
use crate::nn::{self, AdamState};
use crate::quant::QuantSpec;
use crate::Result;

pub const QDS_LAYERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QDeepSdfArch {
    /// Per-shape feature vector length.
    pub feature_channels: usize,
    pub hidden: usize,
}

impl QDeepSdfArch {
    pub fn new(feature_channels: usize, hidden: usize) -> Result<Self> {
        if feature_channels == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("qdeepsdf dims must be positive".into()));
        }
        Ok(QDeepSdfArch {
            feature_channels,
            hidden,
        })
    }

    /// (in, out) widths of the 8 linear layers.
    pub fn layer_shapes(&self) -> [(usize, usize); QDS_LAYERS] {
        let h = self.hidden;
        let mut out = [(h, h); QDS_LAYERS];
        out[0] = (3 + self.feature_channels, h);
        out[QDS_LAYERS - 1] = (h, 4);
        out
    }

    pub fn layer_ranges(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let mut at = 0usize;
        self.layer_shapes()
            .iter()
            .map(|&(i, o)| {
                let w = at..at + i * o;
                let b = w.end..w.end + o;
                at = b.end;
                (w, b)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_ranges().last().map_or(0, |(_, b)| b.end)
    }
}

struct Cache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

fn forward_one(
    x0: &[f64],
    q_params: &[f64],
    arch: &QDeepSdfArch,
) -> (Vec<f64>, Cache) {
    let shapes = arch.layer_shapes();
    let ranges = arch.layer_ranges();
    let mut inputs = Vec::with_capacity(QDS_LAYERS);
    let mut pre = Vec::with_capacity(QDS_LAYERS);
    let mut x = x0.to_vec();
    for l in 0..QDS_LAYERS {
        let (ci, co) = shapes[l];
        let (wr, br) = &ranges[l];
        let w = &q_params[wr.clone()];
        let b = &q_params[br.clone()];
        inputs.push(x.clone());
        let mut y = b.to_vec();
        for i in 0..ci {
            let xi = x[i];
            let row = &w[i * co..(i + 1) * co];
            for o in 0..co {
                y[o] += xi * row[o];
            }
        }
        pre.push(y.clone());
        if l + 1 < QDS_LAYERS {
            for v in &mut y {
                *v = nn::gelu(*v);
            }
        }
        x = y;
    }
    (x, Cache { inputs, pre })
}

/// Gradient of a scalar objective w.r.t. quantized params and the input
/// vector, given d(objective)/d(output).
fn backward_one(
    grad_out: &[f64],
    q_params: &[f64],
    arch: &QDeepSdfArch,
    cache: &Cache,
    grad_params: &mut [f64],
) -> Vec<f64> {
    let shapes = arch.layer_shapes();
    let ranges = arch.layer_ranges();
    let mut g = grad_out.to_vec();
    for l in (0..QDS_LAYERS).rev() {
        let (ci, co) = shapes[l];
        let (wr, br) = &ranges[l];
        if l + 1 < QDS_LAYERS {
            for (gv, &p) in g.iter_mut().zip(&cache.pre[l]) {
                *gv *= nn::gelu_grad(p);
            }
        }
        let x = &cache.inputs[l];
        for o in 0..co {
            grad_params[br.start + o] += g[o];
        }
        let w = &q_params[wr.clone()];
        let mut gx = vec![0.0f64; ci];
        for i in 0..ci {
            let row = &w[i * co..(i + 1) * co];
            let wrow = &mut grad_params[wr.start + i * co..wr.start + (i + 1) * co];
            let xi = x[i];
            let mut acc = 0.0;
            for o in 0..co {
                acc += g[o] * row[o];
                wrow[o] += g[o] * xi;
            }
            gx[i] = acc;
        }
        g = gx;
    }
    g
}

/// Evaluates the MLP at a batch of positions with one shape feature.
/// Weights and the feature pass through the quantizer first.
pub fn qdeepsdf_forward(
    coords: &[Vec3],
    feature: &[f64],
    params: &[f64],
    arch: &QDeepSdfArch,
    quant: &QuantSpec,
) -> Result<Vec<[f64; 4]>> {
    if feature.len() != arch.feature_channels {
        return Err(Error::Shape(format!(
            "feature length {} != {}",
            feature.len(),
            arch.feature_channels
        )));
    }
    if params.len() != arch.param_count() {
        return Err(Error::Shape(format!(
            "param length {} != {}",
            params.len(),
            arch.param_count()
        )));
    }
    let mut q_params = params.to_vec();
    nn::ste_quantize_slice(&mut q_params, quant);
    let mut q_feature = feature.to_vec();
    nn::ste_quantize_slice(&mut q_feature, quant);

    let mut out = Vec::with_capacity(coords.len());
    for &p in coords {
        let mut x0 = Vec::with_capacity(3 + feature.len());
        x0.extend_from_slice(&p);
        x0.extend_from_slice(&q_feature);
        let (y, _) = forward_one(&x0, &q_params, arch);
        out.push([y[0], y[1], y[2], y[3]]);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct QTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub quant: QuantSpec,
    pub seed: u64,
}

impl Default for QTrainConfig {
    fn default() -> Self {
        QTrainConfig {
            epochs: 200,
            batch: 1024,
            lr: 1e-3,
            quant: QuantSpec::symmetric(8),
            seed: 0,
        }
    }
}

pub struct QModel {
    pub arch: QDeepSdfArch,
    pub features: Vec<Vec<f64>>,
    pub params: Vec<f64>,
}

/// Trains the baseline on minibatches of grid points (position plus the 4
/// stored channel values) with an L1 objective.
pub fn train_qdeepsdf(
    tensors: &[TsdfDefTensor],
    arch: &QDeepSdfArch,
    cfg: &QTrainConfig,
) -> Result<QModel> {
    if tensors.is_empty() {
        return Err(Error::InvalidArgument("no tensors to train on".into()));
    }
    let k = tensors[0].grid.resolution;
    for t in tensors {
        if t.grid.resolution != k {
            return Err(Error::Shape("inconsistent tensor resolutions".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut features: Vec<Vec<f64>> = (0..tensors.len())
        .map(|_| {
            (0..arch.feature_channels)
                .map(|_| rng.random_range(-0.01..0.01))
                .collect()
        })
        .collect();
    let shapes = arch.layer_shapes();
    let ranges = arch.layer_ranges();
    let mut params = vec![0.0f64; arch.param_count()];
    for (l, (wr, br)) in ranges.iter().enumerate() {
        let bound = 1.0 / (shapes[l].0 as f64).sqrt();
        for i in wr.clone().chain(br.clone()) {
            params[i] = rng.random_range(-bound..bound);
        }
    }
    let mut param_adam = AdamState::new(params.len(), cfg.lr);
    let mut feat_adam: Vec<AdamState> = (0..tensors.len())
        .map(|_| AdamState::new(arch.feature_channels, cfg.lr))
        .collect();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..tensors.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ));
        for &si in &order {
            let t = &tensors[si];
            let mut q_params = params.to_vec();
            nn::ste_quantize_slice(&mut q_params, &cfg.quant);
            let mut q_feature = features[si].clone();
            nn::ste_quantize_slice(&mut q_feature, &cfg.quant);

            let mut grad_params = vec![0.0f64; params.len()];
            let mut grad_feature = vec![0.0f64; arch.feature_channels];
            let inv = 1.0 / (cfg.batch * 4) as f64;
            for _ in 0..cfg.batch {
                let u = rng.random_range(0..k);
                let v = rng.random_range(0..k);
                let w = rng.random_range(0..k);
                let p = t.grid.position(u, v, w);
                let mut x0 = Vec::with_capacity(3 + arch.feature_channels);
                x0.extend_from_slice(&p);
                x0.extend_from_slice(&q_feature);
                let (y, cache) = forward_one(&x0, &q_params, arch);
                let mut go = [0.0f64; 4];
                for c in 0..4 {
                    let d = y[c] - t.get(u, v, w, c) as f64;
                    go[c] = if d > 0.0 {
                        inv
                    } else if d < 0.0 {
                        -inv
                    } else {
                        0.0
                    };
                }
                let gx = backward_one(&go, &q_params, arch, &cache, &mut grad_params);
                for c in 0..arch.feature_channels {
                    grad_feature[c] += gx[3 + c];
                }
            }
            nn::ste_mask_slice(&mut grad_params, &params, &cfg.quant);
            nn::ste_mask_slice(&mut grad_feature, &features[si], &cfg.quant);
            param_adam.step(&mut params, &grad_params);
            feat_adam[si].step(&mut features[si], &grad_feature);
            for v in params.iter_mut() {
                *v = v.clamp(cfg.quant.a, cfg.quant.b);
            }
            for v in features[si].iter_mut() {
                *v = v.clamp(cfg.quant.a, cfg.quant.b);
            }
        }
    }
    Ok(QModel {
        arch: *arch,
        features,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{fit_tensor, FitOptions};
    use crate::grid::GridSpec;
    use crate::shapes;

    #[test]
    fn forward_shape_contract() {
        let arch = QDeepSdfArch::new(4, 8).unwrap();
        let coords = vec![[0.0, 0.0, 0.0], [0.5, -0.5, 0.2]];
        let feature = vec![0.1; 4];
        let params = vec![0.05; arch.param_count()];
        let out = qdeepsdf_forward(&coords, &feature, &params, &arch, &QuantSpec::symmetric(8))
            .unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn zero_weights_give_constant_bias() {
        let arch = QDeepSdfArch::new(4, 8).unwrap();
        let params = vec![0.0f64; arch.param_count()];
        let out = qdeepsdf_forward(
            &[[0.3, 0.1, -0.9], [0.0, 0.0, 0.0]],
            &[0.2; 4],
            &params,
            &arch,
            &QuantSpec::symmetric(8),
        )
        .unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0], [0.0; 4]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = QDeepSdfArch::new(3, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: Vec<f64> = (0..arch.param_count())
            .map(|_| rng.random_range(-0.3..0.3))
            .collect();
        let x0: Vec<f64> = (0..3 + 3).map(|_| rng.random_range(-0.8..0.8)).collect();
        let cw = [0.7, -0.3, 0.5, -0.9];
        let objective = |p: &[f64], x: &[f64]| -> f64 {
            let (y, _) = forward_one(x, p, &arch);
            y.iter().zip(&cw).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = forward_one(&x0, &params, &arch);
        let mut gp = vec![0.0f64; params.len()];
        let gx = backward_one(&cw, &params, &arch, &cache, &mut gp);
        let eps = 1e-6;
        for idx in (0..params.len()).step_by(13) {
            let mut p = params.clone();
            p[idx] += eps;
            let mut m = params.clone();
            m[idx] -= eps;
            let fd = (objective(&p, &x0) - objective(&m, &x0)) / (2.0 * eps);
            assert!(
                (fd - gp[idx]).abs() / fd.abs().max(gp[idx].abs()).max(1e-6) < 1e-3,
                "param {idx}: {fd} vs {}",
                gp[idx]
            );
        }
        for idx in 0..x0.len() {
            let mut p = x0.clone();
            p[idx] += eps;
            let mut m = x0.clone();
            m[idx] -= eps;
            let fd = (objective(&params, &p) - objective(&params, &m)) / (2.0 * eps);
            assert!(
                (fd - gx[idx]).abs() / fd.abs().max(gx[idx].abs()).max(1e-6) < 1e-3,
                "input {idx}: {fd} vs {}",
                gx[idx]
            );
        }
    }

    #[test]
    fn overfits_one_shape() {
        let grid = GridSpec::new(12).unwrap();
        let tensor = fit_tensor(
            &shapes::sphere(0.5, 24, 48),
            grid,
            &FitOptions {
                max_iter: 5,
                ..FitOptions::default()
            },
        )
        .unwrap()
        .tensor;
        let arch = QDeepSdfArch::new(4, 24).unwrap();
        let cfg = QTrainConfig {
            epochs: 150,
            batch: 256,
            ..QTrainConfig::default()
        };
        let model = train_qdeepsdf(std::slice::from_ref(&tensor), &arch, &cfg).unwrap();
        // sampled-point MAE on the full grid
        let k = grid.resolution;
        let mut coords = Vec::new();
        let mut targets = Vec::new();
        for u in 0..k {
            for v in 0..k {
                for w in 0..k {
                    coords.push(grid.position(u, v, w));
                    targets.push([
                        tensor.get(u, v, w, 0) as f64,
                        tensor.get(u, v, w, 1) as f64,
                        tensor.get(u, v, w, 2) as f64,
                        tensor.get(u, v, w, 3) as f64,
                    ]);
                }
            }
        }
        let out = qdeepsdf_forward(&coords, &model.features[0], &model.params, &arch, &cfg.quant)
            .unwrap();
        let mut mae = 0.0f64;
        for (y, t) in out.iter().zip(&targets) {
            for c in 0..4 {
                mae += (y[c] - t[c]).abs();
            }
        }
        mae /= (coords.len() * 4) as f64;
        assert!(mae < 0.1, "mae = {mae}");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let grid = GridSpec::new(8).unwrap();
        let mut tensor = TsdfDefTensor::zeros(grid);
        for (i, v) in tensor.data.iter_mut().enumerate() {
            *v = (((i * 37) % 100) as f32 / 100.0) - 0.5;
        }
        let arch = QDeepSdfArch::new(2, 6).unwrap();
        let cfg = QTrainConfig {
            epochs: 3,
            batch: 64,
            ..QTrainConfig::default()
        };
        let a = train_qdeepsdf(std::slice::from_ref(&tensor), &arch, &cfg).unwrap();
        let b = train_qdeepsdf(std::slice::from_ref(&tensor), &arch, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn width_controls_parameter_count() {
        let small = QDeepSdfArch::new(4, 8).unwrap();
        let large = QDeepSdfArch::new(4, 16).unwrap();
        assert!(large.param_count() > small.param_count());
    }
}
