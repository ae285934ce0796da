//! Flat `key=value` configuration with dotted keys and a fixed key set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("corpus.dir", "corpus"),
    ("corpus.speakers", "4"),
    ("corpus.utterances", "800"),
    ("corpus.severities", "0.7"),
    ("corpus.words", "120"),
    ("corpus.min_len", "3"),
    ("corpus.max_len", "10"),
    ("corpus.dev_fraction", "0.15"),
    ("corpus.test_fraction", "0.15"),
    ("corpus.seed", "7"),
    ("recipe.dir", "recipe"),
    ("recipe.target_speaker", "all"),
    ("enhance.id", "spectral-gate"),
    ("codec.latent_dim", "64"),
    ("codec.stages", "4"),
    ("codec.codebook_size", "256"),
    ("codec.kmeans_iters", "15"),
    ("codec.max_frames", "16000"),
    ("codec.griffin_lim_iters", "32"),
    ("codec.seed", "11"),
    ("sv.embedder", "ge2e"),
    ("sv.hidden", "64"),
    ("sv.dim", "32"),
    ("sv.steps", "400"),
    ("sv.include_dysarthric", "true"),
    ("sv.windows_per_speaker", "8"),
    ("sv.lr", "0.002"),
    ("sv.seed", "5"),
    ("normal_set.window", "8"),
    ("normal_set.size", "4096"),
    ("normal_set.seed", "13"),
    ("content.backend", "mockfbank"),
    ("content.width", "128"),
    ("content.layers", "3"),
    ("content.kernel", "5"),
    ("content.batch", "8"),
    ("content.base_epochs", "12"),
    ("content.base_lr", "0.001"),
    ("content.finetune_epochs", "8"),
    ("content.finetune_lr", "0.0005"),
    ("content.seed", "1"),
    ("generator.hidden", "128"),
    ("generator.blocks", "6"),
    ("generator.dilation_cycle", "3"),
    ("generator.heads", "4"),
    ("generator.prompt_blocks", "2"),
    ("generator.steps", "2000"),
    ("generator.batch", "8"),
    ("generator.lr", "0.001"),
    ("generator.crop", "32"),
    ("generator.prompt_frames", "64"),
    ("generator.checkpoint_every", "500"),
    ("generator.seed", "17"),
    ("diffusion.beta_min", "0.1"),
    ("diffusion.beta_max", "20"),
    ("diffusion.t_min", "0.001"),
    ("diffusion.steps", "100"),
    ("diffusion.temperature", "1.0"),
    ("eval.split", "test"),
    ("eval.max_utterances", "0"),
    ("eval.seed", "23"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Config {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        DEFAULTS.iter().map(|(k, _)| *k)
    }

    /// Defaults overlaid with `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.typed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.typed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.typed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.typed(key)
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
            })
            .collect()
    }

    /// Resolved snapshot, one sorted `key=value` per line.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Hex digest over a tag, upstream digests and every key under the
    /// given prefixes.
    pub fn digest(&self, tag: &str, upstream: &[&str], prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        h.update(tag.as_bytes());
        for u in upstream {
            h.update(b"\0");
            h.update(u.as_bytes());
        }
        for (k, v) in &self.values {
            if prefixes.iter().any(|p| k.starts_with(p)) {
                h.update(format!("\n{k}={v}").as_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_reject_unknown() {
        let cfg = Config::parse("# recipe\ncodec.stages = 2\n\ndiffusion.steps=50 # fast\n").unwrap();
        assert_eq!(cfg.usize("codec.stages").unwrap(), 2);
        assert_eq!(cfg.usize("diffusion.steps").unwrap(), 50);
        assert!(Config::parse("codec.stagez=2").is_err());
        assert!(Config::parse("codec.stages").is_err());
        let mut c = Config::default();
        c.apply_overrides(&["eval.seed=3"]).unwrap();
        assert_eq!(c.u64("eval.seed").unwrap(), 3);
        assert!(c.apply_overrides(&["nope=1"]).is_err());
        assert!(c.usize("corpus.severities").is_err());
        assert_eq!(c.f64_list("corpus.severities").unwrap(), vec![0.7]);
    }

    #[test]
    fn snapshot_round_trips_and_digest_tracks_prefixes() {
        let mut c = Config::default();
        c.set("sv.steps", "10").unwrap();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        let d = c.digest("codec", &[], &["codec."]);
        c.set("sv.steps", "11").unwrap();
        assert_eq!(c.digest("codec", &[], &["codec."]), d);
        c.set("codec.seed", "12").unwrap();
        assert_ne!(c.digest("codec", &[], &["codec."]), d);
        assert_ne!(c.digest("codec", &["x"], &["codec."]), c.digest("codec", &[], &["codec."]));
    }
}
