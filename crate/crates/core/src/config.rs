//! Plain-text run configuration: `key = value` lines, `#` comments,
//! line-numbered errors, unknown keys rejected, every field defaulted.

use crate::error::{Error, Result};
use crate::model::{GeneratorConfig, LossConfig};
use crate::optim::AdamConfig;
use crate::tensor::{Precision, Real};
use crate::texture::GtcConfig;

/// Everything a training/generation run needs, assembled from module
/// configurations plus run-level settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: GeneratorConfig,
    pub loss: LossConfig,
    pub gtc: GtcConfig,
    pub adam: AdamConfig,
    /// Training steps; ignored when `epochs` is nonzero.
    pub steps: usize,
    /// When nonzero, train `epochs` passes over the training set instead
    /// of a fixed step count.
    pub epochs: usize,
    /// Volumes per optimizer step.
    pub batch: usize,
    pub seed_data: u64,
    pub seed_model: u64,
    pub seed_noise: u64,
    pub precision: Precision,
    /// Smoothing width of the per-volume noise field.
    pub noise_sigma: Real,
    /// Include the texture/grayscale scoring term in the objective.
    pub enable_gtc: bool,
    /// Checkpoint cadence in steps.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GeneratorConfig::default(),
            loss: LossConfig::default(),
            gtc: GtcConfig::default(),
            adam: AdamConfig::default(),
            steps: 100,
            epochs: 0,
            batch: 1,
            seed_data: 1,
            seed_model: 2,
            seed_noise: 3,
            precision: Precision::F64,
            noise_sigma: 1.5,
            enable_gtc: true,
            checkpoint_every: 50,
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::ConfigParse {
        line,
        msg: format!("invalid value '{v}' for {key}"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::ConfigParse {
            line,
            msg: format!("invalid boolean '{v}' for {key} (use true/false)"),
        }),
    }
}

fn parse_csv(line: usize, key: &str, v: &str) -> Result<Vec<Real>> {
    v.split(',')
        .map(|part| parse_num(line, key, part.trim()))
        .collect()
}

impl RunConfig {
    /// Parse a configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigParse {
                line,
                msg: format!("expected 'key = value', got '{content}'"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            if v.is_empty() {
                return Err(Error::ConfigParse {
                    line,
                    msg: format!("empty value for {key}"),
                });
            }
            match key {
                "base_channels" => cfg.gen.base_channels = parse_num(line, key, v)?,
                "n_spade_blocks" => cfg.gen.n_spade_blocks = parse_num(line, key, v)?,
                "image_h" => cfg.gen.image_hw.0 = parse_num(line, key, v)?,
                "image_w" => cfg.gen.image_hw.1 = parse_num(line, key, v)?,
                "n_slices" => cfg.gen.n_slices = parse_num(line, key, v)?,
                "k_classes" => cfg.gen.k_classes = parse_num(line, key, v)?,
                "enable_sif" => cfg.gen.enable_sif = parse_bool(line, key, v)?,
                "enable_noise" => cfg.gen.enable_noise = parse_bool(line, key, v)?,
                "sif_hidden" => cfg.gen.sif_hidden = parse_num(line, key, v)?,
                "adj_radius" => cfg.gen.adj_radius = parse_num(line, key, v)?,
                "adj_tau" => cfg.gen.adj_tau = parse_num(line, key, v)?,
                "noise_alpha" => cfg.gen.noise_alpha = parse_num(line, key, v)?,
                "noise_residual_scale" => {
                    cfg.gen.noise_residual_scale = parse_num(line, key, v)?
                }
                "lambda_feat" => cfg.loss.lambda_feat = parse_num(line, key, v)?,
                "lambda_perceptual" => cfg.loss.lambda_perceptual = parse_num(line, key, v)?,
                "lambda_gtc" => cfg.loss.lambda_gtc = parse_num(line, key, v)?,
                "n_discriminators" => cfg.loss.n_discriminators = parse_num(line, key, v)?,
                "n_disc_layers" => cfg.loss.n_disc_layers = parse_num(line, key, v)?,
                "disc_width" => cfg.loss.disc_width = parse_num(line, key, v)?,
                "gtc_epsilon" => cfg.gtc.epsilon = parse_num(line, key, v)?,
                "gtc_alpha" => cfg.gtc.alpha = parse_csv(line, key, v)?,
                "gtc_beta" => cfg.gtc.beta = parse_csv(line, key, v)?,
                "gtc_scales" => cfg.gtc.n_scales = parse_num(line, key, v)?,
                "gtc_combine_texture" => cfg.gtc.combine.0 = parse_num(line, key, v)?,
                "gtc_combine_gray" => cfg.gtc.combine.1 = parse_num(line, key, v)?,
                "gtc_magnitude_mode" => cfg.gtc.magnitude_mode = parse_bool(line, key, v)?,
                "lr" => cfg.adam.lr = parse_num(line, key, v)?,
                "beta1" => cfg.adam.beta1 = parse_num(line, key, v)?,
                "beta2" => cfg.adam.beta2 = parse_num(line, key, v)?,
                "adam_eps" => cfg.adam.eps = parse_num(line, key, v)?,
                "steps" => cfg.steps = parse_num(line, key, v)?,
                "epochs" => cfg.epochs = parse_num(line, key, v)?,
                "batch" => cfg.batch = parse_num(line, key, v)?,
                "seed_data" => cfg.seed_data = parse_num(line, key, v)?,
                "seed_model" => cfg.seed_model = parse_num(line, key, v)?,
                "seed_noise" => cfg.seed_noise = parse_num(line, key, v)?,
                "precision" => {
                    cfg.precision = match v {
                        "f64" => Precision::F64,
                        "f32" => Precision::F32,
                        _ => {
                            return Err(Error::ConfigParse {
                                line,
                                msg: format!("precision must be f64 or f32, got '{v}'"),
                            })
                        }
                    }
                }
                "noise_sigma" => cfg.noise_sigma = parse_num(line, key, v)?,
                "enable_gtc" => cfg.enable_gtc = parse_bool(line, key, v)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_num(line, key, v)?,
                _ => {
                    return Err(Error::ConfigParse {
                        line,
                        msg: format!("unknown key '{key}'"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.loss.validate()?;
        self.gtc.validate()?;
        self.adam.validate()?;
        if self.steps == 0 && self.epochs == 0 {
            return Err(Error::Config("steps and epochs cannot both be zero".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Canonical text listing every key (parses back to an equal value).
    pub fn to_text(&self) -> String {
        let csv = |v: &[Real]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("base_channels", self.gen.base_channels.to_string());
        kv("n_spade_blocks", self.gen.n_spade_blocks.to_string());
        kv("image_h", self.gen.image_hw.0.to_string());
        kv("image_w", self.gen.image_hw.1.to_string());
        kv("n_slices", self.gen.n_slices.to_string());
        kv("k_classes", self.gen.k_classes.to_string());
        kv("enable_sif", self.gen.enable_sif.to_string());
        kv("enable_noise", self.gen.enable_noise.to_string());
        kv("sif_hidden", self.gen.sif_hidden.to_string());
        kv("adj_radius", self.gen.adj_radius.to_string());
        kv("adj_tau", format!("{}", self.gen.adj_tau));
        kv("noise_alpha", format!("{}", self.gen.noise_alpha));
        kv(
            "noise_residual_scale",
            format!("{}", self.gen.noise_residual_scale),
        );
        kv("lambda_feat", format!("{}", self.loss.lambda_feat));
        kv("lambda_perceptual", format!("{}", self.loss.lambda_perceptual));
        kv("lambda_gtc", format!("{}", self.loss.lambda_gtc));
        kv("n_discriminators", self.loss.n_discriminators.to_string());
        kv("n_disc_layers", self.loss.n_disc_layers.to_string());
        kv("disc_width", self.loss.disc_width.to_string());
        kv("gtc_epsilon", format!("{}", self.gtc.epsilon));
        kv("gtc_alpha", csv(&self.gtc.alpha));
        kv("gtc_beta", csv(&self.gtc.beta));
        kv("gtc_scales", self.gtc.n_scales.to_string());
        kv("gtc_combine_texture", format!("{}", self.gtc.combine.0));
        kv("gtc_combine_gray", format!("{}", self.gtc.combine.1));
        kv("gtc_magnitude_mode", self.gtc.magnitude_mode.to_string());
        kv("lr", format!("{}", self.adam.lr));
        kv("beta1", format!("{}", self.adam.beta1));
        kv("beta2", format!("{}", self.adam.beta2));
        kv("adam_eps", format!("{}", self.adam.eps));
        kv("steps", self.steps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("seed_data", self.seed_data.to_string());
        kv("seed_model", self.seed_model.to_string());
        kv("seed_noise", self.seed_noise.to_string());
        kv(
            "precision",
            match self.precision {
                Precision::F64 => "f64".to_string(),
                Precision::F32 => "f32".to_string(),
            },
        );
        kv("noise_sigma", format!("{}", self.noise_sigma));
        kv("enable_gtc", self.enable_gtc.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }
}
