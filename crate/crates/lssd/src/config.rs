//! Flat `key = value` experiment configuration with `[model]`, `[data]` and
//! `[train]` sections and `#` comments. The raw text is echoed into the run
//! directory for provenance.

use std::path::Path;

use crate::data::{LanguageSpec, Transform};
use crate::error::{Error, Result};
use crate::loss::{LossMode, SentenceProb};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct DataSection {
    pub languages: Vec<LanguageSpec>,
    pub payload_len_min: usize,
    pub payload_len_max: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Config {
    /// Size of the shared payload vocabulary (full vocabulary adds the
    /// specials and one tag per language).
    pub vocab_payload: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
    pub data: DataSection,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            vocab_payload: 24,
            embed_dim: 64,
            hidden_dim: 128,
            layers: 2,
            heads: 4,
            max_seq_len: 16,
            dropout: 0.0,
            data: DataSection {
                languages: Vec::new(),
                payload_len_min: 3,
                payload_len_max: 6,
                seed: 7,
            },
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    /// Full vocabulary: PAD/BOS/EOS + one tag per language + payload tokens.
    pub fn vocab_size(&self) -> usize {
        3 + self.data.languages.len() + self.vocab_payload
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size(),
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.layers,
            num_heads: self.heads,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
        }
    }

    pub fn load(path: &Path) -> Result<(Config, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let cfg = parse_config(&text)?;
        Ok((cfg, text))
    }
}

fn parse_language_list(value: &str, len_range: (usize, usize)) -> Result<Vec<LanguageSpec>> {
    let bad = |entry: &str, why: &str| {
        Error::InvalidConfig(format!("language entry {entry:?}: {why}"))
    };
    let mut specs = Vec::new();
    for entry in value.split(',') {
        let entry = entry.trim();
        if entry.is_empty() {
            continue;
        }
        let parts: Vec<&str> = entry.split(':').collect();
        if parts.len() != 6 {
            return Err(bad(entry, "expected name:train:dev:test:transform:param"));
        }
        let name = parts[0].to_string();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(bad(entry, "name must be alphanumeric/underscore"));
        }
        let count = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| bad(entry, &format!("bad {what} count {s:?}")))
        };
        let param: u64 =
            parts[5].parse().map_err(|_| bad(entry, &format!("bad parameter {:?}", parts[5])))?;
        let transform = match parts[4] {
            "permutation" => Transform::Permutation { param },
            "reversal-permutation" => Transform::ReversalPermutation { param },
            "shift" => Transform::Shift { k: param as usize },
            other => return Err(bad(entry, &format!("unknown transform {other:?}"))),
        };
        specs.push(LanguageSpec {
            name,
            train_size: count(parts[1], "train")?,
            dev_size: count(parts[2], "dev")?,
            test_size: count(parts[3], "test")?,
            transform,
            payload_len_range: len_range,
        });
    }
    if specs.is_empty() {
        return Err(Error::InvalidConfig("at least one language required".into()));
    }
    Ok(specs)
}

/// Parses the exhaustive key set; unknown keys or malformed values are
/// configuration errors.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut section = String::new();
    // The language list needs payload_len_min/max, which may appear later;
    // parse it last.
    let mut languages_value: Option<String> = None;

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            if !matches!(section.as_str(), "model" | "data" | "train") {
                return Err(Error::InvalidConfig(format!(
                    "line {}: unknown section [{section}]",
                    ln + 1
                )));
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", ln + 1))
            })?;
        let err = |why: String| Error::InvalidConfig(format!("line {}: {why}", ln + 1));
        macro_rules! parse_to {
            ($dst:expr) => {
                $dst = value.parse().map_err(|_| err(format!("bad value for {key}: {value:?}")))?
            };
        }
        match (section.as_str(), key) {
            ("model", "vocab_payload") => parse_to!(cfg.vocab_payload),
            ("model", "embed_dim") => parse_to!(cfg.embed_dim),
            ("model", "hidden_dim") => parse_to!(cfg.hidden_dim),
            ("model", "layers") => parse_to!(cfg.layers),
            ("model", "heads") => parse_to!(cfg.heads),
            ("model", "max_seq_len") => parse_to!(cfg.max_seq_len),
            ("model", "dropout") => parse_to!(cfg.dropout),
            ("data", "languages") => languages_value = Some(value.to_string()),
            ("data", "payload_len_min") => parse_to!(cfg.data.payload_len_min),
            ("data", "payload_len_max") => parse_to!(cfg.data.payload_len_max),
            ("data", "seed") => parse_to!(cfg.data.seed),
            ("train", "mode") => {
                cfg.train.mode = value.parse::<LossMode>().map_err(|e| err(e.to_string()))?;
            }
            ("train", "epochs") => parse_to!(cfg.train.epochs),
            ("train", "steps_per_epoch") => parse_to!(cfg.train.steps_per_epoch),
            ("train", "batch_size") => parse_to!(cfg.train.batch_size),
            ("train", "alpha") => parse_to!(cfg.train.alpha),
            ("train", "sigma") => parse_to!(cfg.train.sigma),
            ("train", "tau") => parse_to!(cfg.train.tau),
            ("train", "label_smoothing") => parse_to!(cfg.train.label_smoothing),
            ("train", "smoothed_dev_loss") => parse_to!(cfg.train.smoothed_dev_loss),
            ("train", "sentence_prob") => {
                cfg.train.sentence_prob =
                    value.parse::<SentenceProb>().map_err(|e| err(e.to_string()))?;
            }
            ("train", "lr_scale") => parse_to!(cfg.train.lr_scale),
            ("train", "warmup_steps") => parse_to!(cfg.train.warmup_steps),
            ("train", "adam_beta1") => parse_to!(cfg.train.adam_beta1),
            ("train", "adam_beta2") => parse_to!(cfg.train.adam_beta2),
            ("train", "adam_eps") => parse_to!(cfg.train.adam_eps),
            ("train", "seed") => parse_to!(cfg.train.seed),
            _ => {
                return Err(err(format!(
                    "unknown key {key:?} in section [{}]",
                    if section.is_empty() { "<none>" } else { &section }
                )))
            }
        }
    }

    if cfg.data.payload_len_min == 0 || cfg.data.payload_len_min > cfg.data.payload_len_max {
        return Err(Error::InvalidConfig(format!(
            "payload length range [{}, {}] is invalid",
            cfg.data.payload_len_min, cfg.data.payload_len_max
        )));
    }
    let value = languages_value
        .ok_or_else(|| Error::InvalidConfig("missing [data] languages".into()))?;
    cfg.data.languages =
        parse_language_list(&value, (cfg.data.payload_len_min, cfg.data.payload_len_max))?;
    cfg.train.validate()?;
    cfg.model_config().validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# demo experiment
[model]
vocab_payload = 20
embed_dim = 32
hidden_dim = 64
layers = 1
heads = 2
max_seq_len = 12
dropout = 0.0

[data]
languages = lo:200:40:40:permutation:1, hi:4000:40:40:shift:5
payload_len_min = 3
payload_len_max = 6
seed = 11

[train]
mode = lssd_whole
epochs = 5
steps_per_epoch = 10
batch_size = 8
alpha = 2.0
sigma = 2.0
tau = 1.0
label_smoothing = 0.1
smoothed_dev_loss = true
sentence_prob = arith
lr_scale = 1.0
warmup_steps = 50
adam_beta1 = 0.9
adam_beta2 = 0.98
adam_eps = 1e-8
seed = 3
";

    #[test]
    fn parses_full_sample() {
        let cfg = parse_config(SAMPLE).unwrap();
        assert_eq!(cfg.vocab_payload, 20);
        assert_eq!(cfg.vocab_size(), 3 + 2 + 20);
        assert_eq!(cfg.data.languages.len(), 2);
        assert_eq!(cfg.data.languages[0].name, "lo");
        assert_eq!(cfg.data.languages[0].train_size, 200);
        assert_eq!(cfg.data.languages[0].payload_len_range, (3, 6));
        assert!(matches!(cfg.data.languages[1].transform, Transform::Shift { k: 5 }));
        assert_eq!(cfg.train.mode, LossMode::LssdWhole);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.warmup_steps, 50);
        assert_eq!(cfg.data.seed, 11);
        let mc = cfg.model_config();
        assert_eq!(mc.vocab_size, 25);
        assert_eq!(mc.num_layers, 1);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = SAMPLE.replace("epochs = 5", "epochs = 5   # five of them");
        assert_eq!(parse_config(&text).unwrap().train.epochs, 5);
    }

    #[test]
    fn unknown_key_rejected_with_line_number() {
        let text = format!("{SAMPLE}\nbogus = 1\n");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(parse_config("[wat]\n").is_err());
    }

    #[test]
    fn missing_languages_rejected() {
        let text = SAMPLE.replace("languages = lo:200:40:40:permutation:1, hi:4000:40:40:shift:5\n", "");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn malformed_language_entry_rejected() {
        for bad in ["lo:200:40:permutation:1", "lo:x:40:40:permutation:1", "lo:200:40:40:rot13:1"]
        {
            let text = SAMPLE.replace(
                "languages = lo:200:40:40:permutation:1, hi:4000:40:40:shift:5",
                &format!("languages = {bad}"),
            );
            assert!(parse_config(&text).is_err(), "{bad}");
        }
    }

    #[test]
    fn bad_length_range_rejected() {
        let text = SAMPLE.replace("payload_len_min = 3", "payload_len_min = 9");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn invalid_mode_rejected() {
        let text = SAMPLE.replace("mode = lssd_whole", "mode = turbo");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn defaults_fill_missing_train_keys() {
        let text = "\
[data]
languages = aa:10:4:4:shift:0
[train]
epochs = 2
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.adam_beta2, 0.98);
        assert_eq!(cfg.embed_dim, 64);
    }

    #[test]
    fn load_echoes_raw_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, SAMPLE).unwrap();
        let (cfg, echo) = Config::load(&path).unwrap();
        assert_eq!(echo, SAMPLE);
        assert_eq!(cfg.train.seed, 3);
        assert!(Config::load(&dir.path().join("missing.cfg")).is_err());
    }
}
