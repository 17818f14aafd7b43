//! Plaintext `key=value` pipeline configuration with a closed schema:
//! unknown keys are rejected, every value is validated, and defaults match
//! the reference operating point (K=128, K'=4, C=16, L=5 and the standard
//! loss weights and schedules).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Tensor resolution.
    pub k: usize,
    /// Feature resolution.
    pub k_prime: usize,
    /// Feature channels.
    pub c: usize,
    /// Upsampling module count.
    pub l: usize,
    /// Per-module output widths, outermost first; length l.
    pub widths: Vec<usize>,
    /// Head layer width.
    pub head_width: usize,
    pub n_feat: u32,
    pub n_param: u32,
    pub lambda_reg: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub epochs: usize,
    pub lr_fit: f64,
    pub lr_train: f64,
    pub max_iter: usize,
    pub n_eval: usize,
    pub seed: u64,
    /// Azimuth angles in degrees for view-based monitoring.
    pub views: Vec<f64>,
    pub mesh_dir: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            k: 128,
            k_prime: 4,
            c: 16,
            l: 5,
            widths: vec![64, 64, 32, 32, 16],
            head_width: 64,
            n_feat: 8,
            n_param: 8,
            lambda_reg: 10.0,
            lambda1: 5.0,
            lambda2: 10.0,
            tau: 2.0 / 3.0,
            epochs: 400,
            lr_fit: 0.01,
            lr_train: 1e-3,
            max_iter: 500,
            n_eval: 100_000,
            seed: 0,
            views: vec![0.0, 90.0, 180.0, 270.0],
            mesh_dir: None,
            out_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| parse_num(key, s))
        .collect()
}

impl Config {
    /// Parses `key=value` lines; `#` starts a comment; blank lines ignored.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen = HashSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", ln + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
            match key {
                "K" => cfg.k = parse_num(key, value)?,
                "K_prime" => cfg.k_prime = parse_num(key, value)?,
                "C" => cfg.c = parse_num(key, value)?,
                "L" => cfg.l = parse_num(key, value)?,
                "widths" => cfg.widths = parse_list(key, value)?,
                "head_width" => cfg.head_width = parse_num(key, value)?,
                "N_feat" => cfg.n_feat = parse_num(key, value)?,
                "N_param" => cfg.n_param = parse_num(key, value)?,
                "lambda_reg" => cfg.lambda_reg = parse_num(key, value)?,
                "lambda1" => cfg.lambda1 = parse_num(key, value)?,
                "lambda2" => cfg.lambda2 = parse_num(key, value)?,
                "tau" => cfg.tau = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "lr_fit" => cfg.lr_fit = parse_num(key, value)?,
                "lr_train" => cfg.lr_train = parse_num(key, value)?,
                "maxIter" => cfg.max_iter = parse_num(key, value)?,
                "n_eval" => cfg.n_eval = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "views" => cfg.views = parse_list(key, value)?,
                "mesh_dir" => cfg.mesh_dir = Some(value.to_string()),
                "out_dir" => cfg.out_dir = Some(value.to_string()),
                other => {
                    return Err(Error::Config(format!("unknown key {other:?}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 8 {
            return Err(Error::Config(format!("K must be >= 8, got {}", self.k)));
        }
        if self.widths.len() != self.l {
            return Err(Error::Config(format!(
                "widths has {} entries for L={}",
                self.widths.len(),
                self.l
            )));
        }
        if self.k_prime << self.l != self.k {
            return Err(Error::Config(format!(
                "K_prime * 2^L = {} does not reach K = {}",
                self.k_prime << self.l,
                self.k
            )));
        }
        if self.c == 0 || self.head_width == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        for (name, bits) in [("N_feat", self.n_feat), ("N_param", self.n_param)] {
            if bits == 0 || bits > 24 {
                return Err(Error::Config(format!("{name} must be in 1..=24, got {bits}")));
            }
        }
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if self.lr_fit <= 0.0 || self.lr_train <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.max_iter == 0 || self.epochs == 0 || self.n_eval == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if self.views.is_empty() {
            return Err(Error::Config("need at least one view azimuth".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(s, "K = {}", self.k);
        let _ = writeln!(s, "K_prime = {}", self.k_prime);
        let _ = writeln!(s, "C = {}", self.c);
        let _ = writeln!(s, "L = {}", self.l);
        let _ = writeln!(s, "widths = {}", join(&self.widths));
        let _ = writeln!(s, "head_width = {}", self.head_width);
        let _ = writeln!(s, "N_feat = {}", self.n_feat);
        let _ = writeln!(s, "N_param = {}", self.n_param);
        let _ = writeln!(s, "lambda_reg = {}", self.lambda_reg);
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr_fit = {}", self.lr_fit);
        let _ = writeln!(s, "lr_train = {}", self.lr_train);
        let _ = writeln!(s, "maxIter = {}", self.max_iter);
        let _ = writeln!(s, "n_eval = {}", self.n_eval);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(
            s,
            "views = {}",
            self.views.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        );
        if let Some(d) = &self.mesh_dir {
            let _ = writeln!(s, "mesh_dir = {d}");
        }
        if let Some(d) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {d}");
        }
        s
    }

    pub fn arch(&self) -> Result<crate::decoder::DecoderArch> {
        crate::decoder::DecoderArch::standard(self.k_prime, self.c, self.head_width, &self.widths)
    }

    pub fn train_config(&self) -> crate::train::TrainConfig {
        crate::train::TrainConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau: self.tau,
            epochs: self.epochs,
            lr: self.lr_train,
            feat_quant: crate::quant::QuantSpec::symmetric(self.n_feat),
            param_quant: crate::quant::QuantSpec::symmetric(self.n_param),
            seed: self.seed,
        }
    }

    pub fn fit_options(&self) -> crate::fit::FitOptions {
        crate::fit::FitOptions {
            max_iter: self.max_iter,
            lr: self.lr_fit,
            lambda_reg: self.lambda_reg,
            seed: self.seed,
            freeze_deformation: false,
        }
    }
}
