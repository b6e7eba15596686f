//! Pipeline configuration: a flat key=value file, canonical serialization,
//! and the configuration hash embedded in every artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::TrainConfig;
use crate::descriptor::format_float;
use crate::error::{Error, Result};
use crate::selection::SelectionConfig;

/// Every tunable of the extraction/training/aggregation chain.
///
/// `train.seed` always mirrors `seed`; the file format exposes a single
/// `seed` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub scales: Vec<usize>,
    pub stride_fraction: f64,
    pub k: usize,
    pub t: f64,
    pub ambiguity_threshold: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scales: vec![64, 96, 128, 192],
            stride_fraction: 0.5,
            k: 50,
            t: 0.21,
            ambiguity_threshold: 0.25,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection_config(false).validate()?;
        self.train.validate()?;
        if !self.ambiguity_threshold.is_finite()
            || !(0.0..=1.0).contains(&self.ambiguity_threshold)
        {
            return Err(Error::InvalidArgument(format!(
                "ambiguity_threshold {} outside [0, 1]",
                self.ambiguity_threshold
            )));
        }
        Ok(())
    }

    /// Parses the key=value format. Blank lines and `#` comments are
    /// ignored; unknown or duplicate keys are errors. Missing keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "config line {}: expected key=value, got '{line}'",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidArgument(format!(
                    "config line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            let bad = |what: &str| {
                Error::InvalidArgument(format!(
                    "config line {}: bad {what} value '{value}' for key '{key}'",
                    lineno + 1
                ))
            };
            match key {
                "scales" => {
                    cfg.scales = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("scale list"))?;
                }
                "stride_fraction" => cfg.stride_fraction = value.parse().map_err(|_| bad("float"))?,
                "k" => cfg.k = value.parse().map_err(|_| bad("integer"))?,
                "t" => cfg.t = value.parse().map_err(|_| bad("float"))?,
                "ambiguity_threshold" => {
                    cfg.ambiguity_threshold = value.parse().map_err(|_| bad("float"))?
                }
                "epochs" => cfg.train.epochs = value.parse().map_err(|_| bad("integer"))?,
                "learning_rate" => {
                    cfg.train.learning_rate = value.parse().map_err(|_| bad("float"))?
                }
                "momentum" => cfg.train.momentum = value.parse().map_err(|_| bad("float"))?,
                "weight_decay" => {
                    cfg.train.weight_decay = value.parse().map_err(|_| bad("float"))?
                }
                "batch_size" => cfg.train.batch_size = value.parse().map_err(|_| bad("integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "config line {}: unknown key '{key}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical serialization: fixed key order, shortest float formatting,
    /// no seed. This string is what the configuration hash covers.
    pub fn canonical(&self) -> String {
        let scales: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        format!(
            "scales={}\nstride_fraction={}\nk={}\nt={}\nambiguity_threshold={}\n\
             epochs={}\nlearning_rate={}\nmomentum={}\nweight_decay={}\nbatch_size={}\n",
            scales.join(","),
            format_float(self.stride_fraction),
            self.k,
            format_float(self.t),
            format_float(self.ambiguity_threshold),
            self.train.epochs,
            format_float(self.train.learning_rate),
            format_float(self.train.momentum),
            format_float(self.train.weight_decay),
            self.train.batch_size,
        )
    }

    /// First 8 bytes of the SHA-256 of the canonical serialization, as a
    /// 16-digit hex string. The seed is deliberately not covered: it
    /// identifies a run, not a configuration.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same hash as a u64 for the binary model header.
    pub fn hash_u64(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_be_bytes(digest[..8].try_into().unwrap())
    }

    /// One-line provenance string for CSV comment headers.
    pub fn provenance_line(&self) -> String {
        format!(
            "config_hash={} seed={} {}",
            self.hash_hex(),
            self.seed,
            self.canonical().trim_end().replace('\n', " ")
        )
    }

    /// Full config echo written next to run artifacts; parses back via
    /// [`PipelineConfig::parse`].
    pub fn run_config_text(&self) -> String {
        format!(
            "# config_hash={}\n{}seed={}\n",
            self.hash_hex(),
            self.canonical(),
            self.seed
        )
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash_hex(),
            seed: self.seed,
            config: Some(Box::new(self.clone())),
        }
    }

    /// The selection settings implied by this configuration.
    pub fn selection_config(&self, keep_pixels: bool) -> SelectionConfig {
        SelectionConfig {
            scales: self.scales.clone(),
            stride_fraction: self.stride_fraction,
            k: self.k,
            t: self.t,
            seed: self.seed,
            keep_pixels,
            max_image_side: crate::imaging::MAX_IMAGE_SIDE,
        }
    }
}

/// Identity block embedded in JSON artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Box<PipelineConfig>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.scales, vec![64, 96, 128, 192]);
        assert_eq!(cfg.stride_fraction, 0.5);
        assert_eq!(cfg.k, 50);
        assert_eq!(cfg.t, 0.21);
        assert_eq!(cfg.ambiguity_threshold, 0.25);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.learning_rate, 0.0001);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.weight_decay, 0.0005);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.seed, 0);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn parse_round_trips_canonical_form() {
        let cfg = PipelineConfig {
            scales: vec![32, 48],
            stride_fraction: 0.25,
            k: 12,
            t: 0.5,
            ambiguity_threshold: 0.1,
            train: TrainConfig {
                epochs: 5,
                learning_rate: 0.01,
                momentum: 0.8,
                weight_decay: 0.001,
                batch_size: 16,
                seed: 99,
            },
            seed: 99,
        };
        let parsed = PipelineConfig::parse(&cfg.run_config_text()).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.train.seed, 99);
    }

    #[test]
    fn parse_ignores_comments_and_blanks() {
        let text = "# a comment\n\n  k = 7 \n";
        let cfg = PipelineConfig::parse(text).unwrap();
        assert_eq!(cfg.k, 7);
        assert_eq!(cfg.t, 0.21, "unset keys keep defaults");
    }

    #[test]
    fn parse_rejects_unknown_duplicate_and_malformed_keys() {
        assert!(PipelineConfig::parse("frobnicate=1\n").is_err());
        assert!(PipelineConfig::parse("k=5\nk=6\n").is_err());
        assert!(PipelineConfig::parse("just a line\n").is_err());
        assert!(PipelineConfig::parse("k=notanumber\n").is_err());
        let err = PipelineConfig::parse("frobnicate=1\n").unwrap_err().to_string();
        assert!(err.contains("frobnicate"), "{err}");
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn parse_validates_ranges() {
        assert!(PipelineConfig::parse("stride_fraction=0\n").is_err());
        assert!(PipelineConfig::parse("t=1.5\n").is_err());
        assert!(PipelineConfig::parse("ambiguity_threshold=2\n").is_err());
        assert!(PipelineConfig::parse("momentum=1\n").is_err());
    }

    #[test]
    fn hash_ignores_seed_but_tracks_other_keys() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.seed = 999;
        b.train.seed = 999;
        assert_eq!(a.hash_hex(), b.hash_hex());
        let mut c = a.clone();
        c.k = 51;
        assert_ne!(a.hash_hex(), c.hash_hex());
        assert_eq!(a.hash_hex().len(), 16);
        assert!(a.hash_hex().chars().all(|ch| ch.is_ascii_hexdigit()));
    }

    #[test]
    fn hash_u64_matches_hex() {
        let cfg = PipelineConfig::default();
        assert_eq!(format!("{:016x}", cfg.hash_u64()), cfg.hash_hex());
    }

    #[test]
    fn provenance_line_is_single_line_with_hash_and_seed() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 42;
        let line = cfg.provenance_line();
        assert_eq!(line.lines().count(), 1);
        assert!(line.contains(&cfg.hash_hex()));
        assert!(line.contains("seed=42"));
        assert!(line.contains("k=50"));
    }
}
