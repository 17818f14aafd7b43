//! Set-level training of the shared decoder and per-shape features, plus
//! dynamic fitting of a feature for a new shape against frozen parameters.
//!
//! One shape is one optimizer step. The visiting order is reshuffled every
//! epoch from a seed derived from (config seed, epoch index), so resuming
//! from a checkpoint replays the identical schedule and a split run is
//! bit-identical to an uninterrupted one.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{
    decoder_backward, decoder_forward, regression_loss, tensor_to_input, DecoderArch,
    UpsampleModule,
};
use crate::error::Error;
use crate::grid::TsdfDefTensor;
use crate::nn::{AdamState, Tensor4};
use crate::quant::QuantSpec;
use crate::Result;

const MODEL_MAGIC: &[u8; 4] = b"NCGM";
const MODEL_VERSION: u8 = 2;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Surface-mask half-width on the normalized distance channel.
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
    pub feat_quant: QuantSpec,
    pub param_quant: QuantSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 5.0,
            lambda2: 10.0,
            tau: 2.0 / 3.0,
            epochs: 400,
            lr: 1e-3,
            feat_quant: QuantSpec::symmetric(8),
            param_quant: QuantSpec::symmetric(8),
            seed: 0,
        }
    }
}

/// Full optimizer state: everything needed to continue training or to
/// compress. Features and parameters are raw (pre-quantization) values.
pub struct ModelState {
    pub arch: DecoderArch,
    pub features: Vec<Vec<f64>>,
    pub params: Vec<f64>,
    pub feat_adam: Vec<AdamState>,
    pub param_adam: AdamState,
    pub epochs_done: u64,
    pub loss_history: Vec<f64>,
    /// Lowest epoch loss seen so far and the features/parameters from that
    /// epoch. The optimizer keeps running from the latest state, but every
    /// consumer of a trained model (compression, decoding, single-feature
    /// fitting) reads this snapshot: per-epoch losses bounce under
    /// quantization-aware training, so the final epoch is not the best one.
    pub best_loss: f64,
    pub best_features: Vec<Vec<f64>>,
    pub best_params: Vec<f64>,
}

impl ModelState {
    /// The features and parameters to compress or decode: the best-epoch
    /// snapshot when one exists, the current state otherwise.
    pub fn best(&self) -> (&[Vec<f64>], &[f64]) {
        if self.best_loss.is_finite() {
            (&self.best_features, &self.best_params)
        } else {
            (&self.features, &self.params)
        }
    }
}

fn normal_draws(rng: &mut ChaCha8Rng, count: usize, sigma: f64) -> Vec<f64> {
    // Box-Muller; draws come in pairs
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        out.push(sigma * r * th.cos());
        if out.len() < count {
            out.push(sigma * r * th.sin());
        }
    }
    out
}

/// Fresh model: features from N(0, 0.01^2), parameters fan-in uniform.
pub fn init_model(arch: &DecoderArch, shape_count: usize, cfg: &TrainConfig) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let features: Vec<Vec<f64>> = (0..shape_count)
        .map(|_| normal_draws(&mut rng, arch.feature_len(), 0.01))
        .collect();
    let mut params = vec![0.0f64; arch.param_count()];
    let ranges = arch.layer_ranges();
    let fans = arch.layer_fan_in();
    for ((wr, br), fan) in ranges.iter().zip(&fans) {
        let bound = 1.0 / (*fan as f64).sqrt();
        for i in wr.clone().chain(br.clone()) {
            params[i] = rng.random_range(-bound..bound);
        }
    }
    let feat_adam = (0..shape_count)
        .map(|_| AdamState::new(arch.feature_len(), cfg.lr))
        .collect();
    let param_adam = AdamState::new(params.len(), cfg.lr);
    ModelState {
        arch: arch.clone(),
        features,
        params,
        feat_adam,
        param_adam,
        epochs_done: 0,
        loss_history: Vec::new(),
        best_loss: f64::INFINITY,
        best_features: Vec::new(),
        best_params: Vec::new(),
    }
}

/// Rescales the gradient so its global L2 norm never exceeds `max_norm`;
/// occasional straight-through-estimator spikes otherwise kick the
/// optimizer out of a settled quantized minimum late in training.
fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn check_tensors(tensors: &[TsdfDefTensor], arch: &DecoderArch) -> Result<Vec<Tensor4>> {
    if tensors.is_empty() {
        return Err(Error::InvalidArgument("no tensors to train on".into()));
    }
    let k = arch.output_resolution();
    for t in tensors {
        if t.grid.resolution != k {
            return Err(Error::Shape(format!(
                "tensor resolution {} != decoder output {k}",
                t.grid.resolution
            )));
        }
    }
    Ok(tensors.iter().map(tensor_to_input).collect())
}

/// Runs `epochs` additional training epochs on an existing state.
pub fn train_epochs(
    state: &mut ModelState,
    tensors: &[TsdfDefTensor],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<()> {
    let targets = check_tensors(tensors, &state.arch)?;
    if targets.len() != state.features.len() {
        return Err(Error::Shape(format!(
            "{} tensors for {} features",
            targets.len(),
            state.features.len()
        )));
    }
    let arch = state.arch.clone();
    for _ in 0..epochs {
        // harmonic decay keyed on the absolute epoch index: late epochs
        // anneal into a stable quantized minimum, and a resumed run sees
        // the exact same schedule as an uninterrupted one
        let lr = cfg.lr / (1.0 + state.epochs_done as f64 / 100.0);
        for a in &mut state.feat_adam {
            a.lr = lr;
        }
        state.param_adam.lr = lr;
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, state.epochs_done));
        let mut epoch_loss = 0.0f64;
        for &i in &order {
            let feature = Tensor4::from_data(arch.feature_dims(), state.features[i].clone())?;
            let (out, cache) =
                decoder_forward(&feature, &state.params, &arch, &cfg.feat_quant, &cfg.param_quant)?;
            let (loss, grad_out) =
                regression_loss(&out, &targets[i], cfg.lambda1, cfg.lambda2, cfg.tau)?;
            epoch_loss += loss;
            let grads = decoder_backward(
                &grad_out,
                &feature,
                &state.params,
                &arch,
                &cfg.feat_quant,
                &cfg.param_quant,
                &cache,
            );
            let mut feat_grad = grads.feature.data;
            let mut param_grad = grads.params;
            clip_grad_norm(&mut feat_grad, 1.0);
            clip_grad_norm(&mut param_grad, 1.0);
            state.feat_adam[i].step(&mut state.features[i], &feat_grad);
            state.param_adam.step(&mut state.params, &param_grad);
            // keep every raw value inside the quantizer domain so the STE
            // gradient never dies
            for v in &mut state.features[i] {
                *v = v.clamp(cfg.feat_quant.a, cfg.feat_quant.b);
            }
            for v in &mut state.params {
                *v = v.clamp(cfg.param_quant.a, cfg.param_quant.b);
            }
        }
        let epoch_loss = epoch_loss / targets.len() as f64;
        if epoch_loss < state.best_loss {
            state.best_loss = epoch_loss;
            state.best_features = state.features.clone();
            state.best_params = state.params.clone();
        }
        state.loss_history.push(epoch_loss);
        state.epochs_done += 1;
    }
    Ok(())
}

/// Joint training from scratch per the config epoch count.
pub fn train_set(
    tensors: &[TsdfDefTensor],
    arch: &DecoderArch,
    cfg: &TrainConfig,
) -> Result<ModelState> {
    check_tensors(tensors, arch)?;
    let mut state = init_model(arch, tensors.len(), cfg);
    train_epochs(&mut state, tensors, cfg, cfg.epochs)?;
    Ok(state)
}

/// Optimizes a feature for one new shape against frozen decoder
/// parameters. The model parameters are not mutated.
pub fn fit_new_feature(
    new_tensor: &TsdfDefTensor,
    state: &ModelState,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let arch = &state.arch;
    let (_, params) = state.best();
    let targets = check_tensors(std::slice::from_ref(new_tensor), arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut feature = normal_draws(&mut rng, arch.feature_len(), 0.01);
    let mut adam = AdamState::new(feature.len(), cfg.lr);
    for _ in 0..cfg.epochs {
        let f = Tensor4::from_data(arch.feature_dims(), feature.clone())?;
        let (out, cache) =
            decoder_forward(&f, params, arch, &cfg.feat_quant, &cfg.param_quant)?;
        let (_, grad_out) = regression_loss(&out, &targets[0], cfg.lambda1, cfg.lambda2, cfg.tau)?;
        let grads = decoder_backward(
            &grad_out,
            &f,
            params,
            arch,
            &cfg.feat_quant,
            &cfg.param_quant,
            &cache,
        );
        adam.step(&mut feature, &grads.feature.data);
        for v in &mut feature {
            *v = v.clamp(cfg.feat_quant.a, cfg.feat_quant.b);
        }
    }
    Ok(feature)
}

/// Decoded output for one feature of the model.
pub fn decode_feature(
    feature: &[f64],
    state: &ModelState,
    cfg: &TrainConfig,
) -> Result<TsdfDefTensor> {
    let f = Tensor4::from_data(state.arch.feature_dims(), feature.to_vec())?;
    let (_, params) = state.best();
    let (out, _) =
        decoder_forward(&f, params, &state.arch, &cfg.feat_quant, &cfg.param_quant)?;
    crate::decoder::output_to_tensor(&out)
}

fn write_adam(w: &mut impl Write, a: &AdamState) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(a.t)?;
    w.write_f64::<LittleEndian>(a.lr)?;
    for &v in a.m.iter().chain(a.v.iter()) {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_adam(r: &mut impl Read, len: usize) -> std::io::Result<AdamState> {
    let t = r.read_u64::<LittleEndian>()?;
    let lr = r.read_f64::<LittleEndian>()?;
    let mut a = AdamState::new(len, lr);
    a.t = t;
    for v in a.m.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    for v in a.v.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    Ok(a)
}

pub fn write_arch(w: &mut impl Write, arch: &DecoderArch) -> std::io::Result<()> {
    w.write_u16::<LittleEndian>(arch.feature_res as u16)?;
    w.write_u16::<LittleEndian>(arch.feature_channels as u16)?;
    w.write_u16::<LittleEndian>(arch.head_width as u16)?;
    w.write_u8(arch.modules.len() as u8)?;
    for m in &arch.modules {
        w.write_u8(m.kernel as u8)?;
        w.write_u8(m.scale as u8)?;
        w.write_u16::<LittleEndian>(m.out_channels as u16)?;
    }
    Ok(())
}

pub fn read_arch(r: &mut impl Read) -> Result<DecoderArch> {
    let feature_res = r.read_u16::<LittleEndian>().map_err(arch_io)? as usize;
    let feature_channels = r.read_u16::<LittleEndian>().map_err(arch_io)? as usize;
    let head_width = r.read_u16::<LittleEndian>().map_err(arch_io)? as usize;
    let count = r.read_u8().map_err(arch_io)? as usize;
    let mut modules = Vec::with_capacity(count);
    for _ in 0..count {
        let kernel = r.read_u8().map_err(arch_io)? as usize;
        let scale = r.read_u8().map_err(arch_io)? as usize;
        let out_channels = r.read_u16::<LittleEndian>().map_err(arch_io)? as usize;
        modules.push(UpsampleModule {
            kernel,
            scale,
            out_channels,
        });
    }
    DecoderArch::new(feature_res, feature_channels, head_width, modules)
}

fn arch_io(e: std::io::Error) -> Error {
    Error::Format(format!("truncated architecture descriptor: {e}"))
}

/// Serializes the full training state, optimizer moments included, so a
/// resumed run continues bit-identically.
pub fn save_model(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    (|| -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_u8(MODEL_VERSION)?;
        write_arch(&mut w, &state.arch)?;
        w.write_u64::<LittleEndian>(state.epochs_done)?;
        w.write_u32::<LittleEndian>(state.features.len() as u32)?;
        for feat in &state.features {
            for &v in feat {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        for &v in &state.params {
            w.write_f64::<LittleEndian>(v)?;
        }
        for a in &state.feat_adam {
            write_adam(&mut w, a)?;
        }
        write_adam(&mut w, &state.param_adam)?;
        w.write_u32::<LittleEndian>(state.loss_history.len() as u32)?;
        for &v in &state.loss_history {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_f64::<LittleEndian>(state.best_loss)?;
        if state.best_loss.is_finite() {
            for feat in &state.best_features {
                for &v in feat {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
            for &v in &state.best_params {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a model file (bad magic)",
            path.display()
        )));
    }
    let version = r.read_u8().map_err(|e| Error::io(path, e))?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported model version {version}",
            path.display()
        )));
    }
    let arch = read_arch(&mut r)?;
    (|| -> std::io::Result<ModelState> {
        let epochs_done = r.read_u64::<LittleEndian>()?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let flen = arch.feature_len();
        let mut features = Vec::with_capacity(n);
        for _ in 0..n {
            let mut feat = vec![0.0f64; flen];
            for v in feat.iter_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
            features.push(feat);
        }
        let mut params = vec![0.0f64; arch.param_count()];
        for v in params.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let mut feat_adam = Vec::with_capacity(n);
        for _ in 0..n {
            feat_adam.push(read_adam(&mut r, flen)?);
        }
        let param_adam = read_adam(&mut r, params.len())?;
        let hist_len = r.read_u32::<LittleEndian>()? as usize;
        let mut loss_history = vec![0.0f64; hist_len];
        for v in loss_history.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let best_loss = r.read_f64::<LittleEndian>()?;
        let mut best_features = Vec::new();
        let mut best_params = Vec::new();
        if best_loss.is_finite() {
            for _ in 0..n {
                let mut feat = vec![0.0f64; flen];
                for v in feat.iter_mut() {
                    *v = r.read_f64::<LittleEndian>()?;
                }
                best_features.push(feat);
            }
            best_params = vec![0.0f64; params.len()];
            for v in best_params.iter_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
        }
        Ok(ModelState {
            arch,
            features,
            params,
            feat_adam,
            param_adam,
            epochs_done,
            loss_history,
            best_loss,
            best_features,
            best_params,
        })
    })()
    .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{fit_tensor, FitOptions};
    use crate::grid::GridSpec;
    use crate::shapes;

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..TrainConfig::default()
        }
    }

    fn small_arch() -> DecoderArch {
        DecoderArch::standard(4, 4, 8, &[6, 4]).unwrap()
    }

    fn sample_tensors() -> Vec<TsdfDefTensor> {
        let grid = GridSpec::new(16).unwrap();
        let opts = FitOptions {
            max_iter: 20,
            ..FitOptions::default()
        };
        vec![
            fit_tensor(&shapes::sphere(0.5, 24, 48), grid, &opts).unwrap().tensor,
            fit_tensor(&shapes::torus(0.5, 0.2, 24, 12), grid, &opts).unwrap().tensor,
        ]
    }

    #[test]
    fn training_reduces_mean_loss() {
        let tensors = sample_tensors();
        let state = train_set(&tensors, &small_arch(), &small_cfg(40)).unwrap();
        let first = state.loss_history[0];
        let last = *state.loss_history.last().unwrap();
        assert!(last < first, "loss went {first} -> {last}");
        assert!(state.loss_history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let tensors = sample_tensors();
        let a = train_set(&tensors, &small_arch(), &small_cfg(5)).unwrap();
        let b = train_set(&tensors, &small_arch(), &small_cfg(5)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.features, b.features);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn split_run_resumes_bit_identically() {
        let tensors = sample_tensors();
        let cfg = small_cfg(6);
        let full = train_set(&tensors, &small_arch(), &cfg).unwrap();

        let mut half = train_set(&tensors, &small_arch(), &small_cfg(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&half, &path).unwrap();
        let mut resumed = load_model(&path).unwrap();
        train_epochs(&mut resumed, &tensors, &cfg, 3).unwrap();
        train_epochs(&mut half, &tensors, &cfg, 3).unwrap();

        assert_eq!(full.params, resumed.params);
        assert_eq!(full.features, resumed.features);
        assert_eq!(full.loss_history, resumed.loss_history);
        assert_eq!(half.params, resumed.params);
    }

    #[test]
    fn fit_new_feature_freezes_params() {
        let tensors = sample_tensors();
        let state = train_set(&tensors, &small_arch(), &small_cfg(10)).unwrap();
        let before = state.params.clone();
        let feat = fit_new_feature(&tensors[0], &state, &small_cfg(10)).unwrap();
        assert_eq!(state.params, before);
        assert_eq!(feat.len(), state.arch.feature_len());
    }

    #[test]
    fn mismatched_resolution_is_rejected() {
        let grid = GridSpec::new(8).unwrap();
        let t = TsdfDefTensor::zeros(grid);
        assert!(train_set(&[t], &small_arch(), &small_cfg(1)).is_err());
    }

    #[test]
    fn model_round_trip_preserves_everything() {
        let tensors = sample_tensors();
        let state = train_set(&tensors, &small_arch(), &small_cfg(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&state, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.arch, state.arch);
        assert_eq!(loaded.features, state.features);
        assert_eq!(loaded.params, state.params);
        assert_eq!(loaded.epochs_done, state.epochs_done);
        assert_eq!(loaded.loss_history, state.loss_history);
        assert_eq!(loaded.param_adam, state.param_adam);
        assert_eq!(loaded.feat_adam, state.feat_adam);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"WXYZ123456789").unwrap();
        assert!(load_model(&path).is_err());
    }
}
