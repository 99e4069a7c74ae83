//! Run configuration: a flat `key=value` text file covering the model,
//! trainer and synthetic-data parameters. Unknown keys are rejected, and
//! every run logs the canonical form plus its SHA-256 digest so results
//! are reproducible from a single committed file.

use crate::error::{AlignError, Result};
use sha2::{Digest, Sha256};

/// Spatial recurrence depth is fixed to detect-then-regress.
pub const SPATIAL_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub block_channels: Vec<usize>,
    pub c_d: usize,
    pub c_r: usize,
    pub c_i: usize,
    pub c_p: usize,
    pub lstm_hidden: usize,
    pub t: usize,
    pub skip_connections: bool,
    pub n_identities: usize,
    pub id_feature: usize,
    pub map_radius: f64,
    pub heat_sigma: f64,
    pub w_fg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_clips: usize,
    pub epochs: [usize; 3],
    pub lr_drop_factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub enable_cls: bool,
    pub enable_trn: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub clips_per_identity: usize,
    pub val_clips_per_identity: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig {
                input_size: 64,
                block_channels: vec![16, 32, 64, 64],
                c_d: 7,
                c_r: 18,
                c_i: 16,
                c_p: 48,
                lstm_hidden: 64,
                t: 10,
                skip_connections: true,
                n_identities: 2,
                id_feature: 64,
                map_radius: 2.0,
                heat_sigma: 1.5,
                w_fg: 15.0,
            },
            train: TrainConfig {
                lr: 0.01,
                momentum: 0.9,
                batch_clips: 2,
                epochs: [30, 15, 15],
                lr_drop_factor: 10.0,
                patience: 5,
                min_delta: 1e-4,
                enable_cls: true,
                enable_trn: true,
            },
            synth: SynthConfig {
                clips_per_identity: 20,
                val_clips_per_identity: 2,
                noise_std: 0.02,
            },
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.block_channels.len()
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.block_channels.last().expect("non-empty blocks")
    }

    pub fn bottleneck_hw(&self) -> usize {
        self.input_size >> self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() {
            return Err(AlignError::config("block_channels must be non-empty"));
        }
        if self.c_i < 1 || self.c_p < 1 {
            return Err(AlignError::config("c_i and c_p must both be >= 1"));
        }
        if self.c_i + self.c_p != self.bottleneck_channels() {
            return Err(AlignError::config(format!(
                "c_i + c_p = {} must equal the last block channel count {}",
                self.c_i + self.c_p,
                self.bottleneck_channels()
            )));
        }
        let div = 1usize << self.stages();
        if self.input_size % div != 0 || self.bottleneck_hw() == 0 {
            return Err(AlignError::config(format!(
                "input_size {} not divisible into {} pooling stages",
                self.input_size,
                self.stages()
            )));
        }
        if self.c_d < 4 || self.c_d > 7 {
            return Err(AlignError::config(format!(
                "c_d={} outside the supported coarse landmark range 4..=7",
                self.c_d
            )));
        }
        if self.c_r < 1 || self.c_r > 18 {
            return Err(AlignError::config(format!(
                "c_r={} outside the supported fine landmark range 1..=18",
                self.c_r
            )));
        }
        if self.n_identities < 1 {
            return Err(AlignError::config("n_identities must be >= 1"));
        }
        if self.map_radius < 0.5 || self.heat_sigma <= 0.0 {
            return Err(AlignError::config("map_radius/heat_sigma out of range"));
        }
        if self.w_fg <= 0.0 {
            return Err(AlignError::config("w_fg must be positive"));
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AlignError::config("momentum must be in [0,1)"));
        }
        if self.lr <= 0.0 {
            return Err(AlignError::config("lr must be positive"));
        }
        if self.lr_drop_factor <= 1.0 {
            return Err(AlignError::config("lr_drop_factor must exceed 1"));
        }
        if self.batch_clips == 0 {
            return Err(AlignError::config("batch_clips must be >= 1"));
        }
        Ok(())
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(AlignError::config(format!("{key}: expected boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| AlignError::config(format!("{key}: cannot parse `{v}`")))
}

impl Config {
    /// Parse flat `key=value` text. Unknown keys are rejected by name;
    /// missing keys take their defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(AlignError::config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_size" => self.model.input_size = parse_num(key, value)?,
            "block_channels" => {
                self.model.block_channels = value
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "c_d" => self.model.c_d = parse_num(key, value)?,
            "c_r" => self.model.c_r = parse_num(key, value)?,
            "c_i" => self.model.c_i = parse_num(key, value)?,
            "c_p" => self.model.c_p = parse_num(key, value)?,
            "lstm_hidden" => self.model.lstm_hidden = parse_num(key, value)?,
            "t" => self.model.t = parse_num(key, value)?,
            "skip_connections" => self.model.skip_connections = parse_bool(key, value)?,
            "n_identities" => self.model.n_identities = parse_num(key, value)?,
            "id_feature" => self.model.id_feature = parse_num(key, value)?,
            "map_radius" => self.model.map_radius = parse_num(key, value)?,
            "heat_sigma" => self.model.heat_sigma = parse_num(key, value)?,
            "w_fg" => self.model.w_fg = parse_num(key, value)?,
            "lr" => self.train.lr = parse_num(key, value)?,
            "momentum" => self.train.momentum = parse_num(key, value)?,
            "batch_clips" => self.train.batch_clips = parse_num(key, value)?,
            "epochs_stage1" => self.train.epochs[0] = parse_num(key, value)?,
            "epochs_stage2" => self.train.epochs[1] = parse_num(key, value)?,
            "epochs_stage3" => self.train.epochs[2] = parse_num(key, value)?,
            "lr_drop_factor" => self.train.lr_drop_factor = parse_num(key, value)?,
            "patience" => self.train.patience = parse_num(key, value)?,
            "min_delta" => self.train.min_delta = parse_num(key, value)?,
            "enable_cls" => self.train.enable_cls = parse_bool(key, value)?,
            "enable_trn" => self.train.enable_trn = parse_bool(key, value)?,
            "clips_per_identity" => self.synth.clips_per_identity = parse_num(key, value)?,
            "val_clips_per_identity" => {
                self.synth.val_clips_per_identity = parse_num(key, value)?
            }
            "noise_std" => self.synth.noise_std = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => {
                return Err(AlignError::config(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.synth.noise_std < 0.0 {
            return Err(AlignError::config("noise_std must be non-negative"));
        }
        Ok(())
    }

    /// Canonical text: every key, sorted, one per line.
    pub fn canonical_text(&self) -> String {
        let chans = self
            .model
            .block_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut kv: Vec<(String, String)> = vec![
            ("batch_clips".into(), self.train.batch_clips.to_string()),
            ("block_channels".into(), chans),
            ("c_d".into(), self.model.c_d.to_string()),
            ("c_i".into(), self.model.c_i.to_string()),
            ("c_p".into(), self.model.c_p.to_string()),
            ("c_r".into(), self.model.c_r.to_string()),
            ("clips_per_identity".into(), self.synth.clips_per_identity.to_string()),
            ("enable_cls".into(), self.train.enable_cls.to_string()),
            ("enable_trn".into(), self.train.enable_trn.to_string()),
            ("epochs_stage1".into(), self.train.epochs[0].to_string()),
            ("epochs_stage2".into(), self.train.epochs[1].to_string()),
            ("epochs_stage3".into(), self.train.epochs[2].to_string()),
            ("heat_sigma".into(), format!("{:?}", self.model.heat_sigma)),
            ("id_feature".into(), self.model.id_feature.to_string()),
            ("input_size".into(), self.model.input_size.to_string()),
            ("lr".into(), format!("{:?}", self.train.lr)),
            ("lr_drop_factor".into(), format!("{:?}", self.train.lr_drop_factor)),
            ("lstm_hidden".into(), self.model.lstm_hidden.to_string()),
            ("map_radius".into(), format!("{:?}", self.model.map_radius)),
            ("min_delta".into(), format!("{:?}", self.train.min_delta)),
            ("momentum".into(), format!("{:?}", self.train.momentum)),
            ("n_identities".into(), self.model.n_identities.to_string()),
            ("noise_std".into(), format!("{:?}", self.synth.noise_std)),
            ("patience".into(), self.train.patience.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("skip_connections".into(), self.model.skip_connections.to_string()),
            ("t".into(), self.model.t.to_string()),
            ("val_clips_per_identity".into(), self.synth.val_clips_per_identity.to_string()),
            ("w_fg".into(), format!("{:?}", self.model.w_fg)),
        ];
        kv.sort();
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical text, hex-encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_text().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.canonical_text();
        let back = Config::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = Config::parse("warp_speed=9\n").unwrap_err();
        assert!(err.to_string().contains("warp_speed"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = Config::parse("# a comment\n\nseed=42 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn channel_split_must_match_bottleneck() {
        let mut cfg = Config::default();
        cfg.model.c_i = 10; // 10 + 48 != 64
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn indivisible_input_size_rejected() {
        let err = Config::parse("input_size=60\n").unwrap_err();
        assert!(err.to_string().contains("pooling"), "{err}");
    }

    #[test]
    fn digests_differ_when_any_key_differs() {
        let a = Config::default();
        let b = Config::parse("seed=1\n").unwrap();
        assert_ne!(a.digest(), b.digest());
    }
}
