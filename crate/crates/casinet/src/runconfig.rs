//! Run configuration: one flat key=value namespace merging the scene,
//! model, loss, and optimizer settings with run-level parameters and paths.
//! Sources merge as defaults < config file < command-line overrides; unknown
//! keys are rejected and every run writes its fully resolved configuration
//! next to its outputs.

use std::path::{Path, PathBuf};

use crate::config::{parse, ModelConfig};
use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::train::LossConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    /// Master seed: drives data generation, model initialization, batch
    /// order, and augmentation.
    pub seed: u64,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub train_count: usize,
    pub val_count: usize,
    /// Worker threads for the compute kernels; 0 keeps the library default.
    pub threads: usize,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneSpec::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            batch_size: 8,
            eval_interval: 200,
            train_count: 200,
            val_count: 50,
            threads: 0,
            out: None,
            data_dir: None,
            checkpoint: None,
            image: None,
        }
    }
}

impl RunConfig {
    /// Apply one key=value pair. Keys shared by several sections (seed,
    /// num_classes) are applied to all of them so a single value governs
    /// the whole run.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let mut hit = false;
        hit |= self.scene.apply_kv(key, value)?;
        hit |= self.model.apply_kv(key, value)?;
        hit |= self.loss.apply_kv(key, value)?;
        hit |= self.optim.apply_kv(key, value)?;
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.scene.seed = self.seed;
                hit = true;
            }
            "batch_size" => {
                self.batch_size = parse(key, value)?;
                hit = true;
            }
            "eval_interval" => {
                self.eval_interval = parse(key, value)?;
                hit = true;
            }
            "train_count" => {
                self.train_count = parse(key, value)?;
                hit = true;
            }
            "val_count" => {
                self.val_count = parse(key, value)?;
                hit = true;
            }
            "threads" => {
                self.threads = parse(key, value)?;
                hit = true;
            }
            "out" => {
                self.out = Some(PathBuf::from(value));
                hit = true;
            }
            "data_dir" => {
                self.data_dir = Some(PathBuf::from(value));
                hit = true;
            }
            "checkpoint" => {
                self.checkpoint = Some(PathBuf::from(value));
                hit = true;
            }
            "image" => {
                self.image = Some(PathBuf::from(value));
                hit = true;
            }
            _ => {}
        }
        if !hit {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.train_count == 0 || self.val_count == 0 {
            return Err(Error::Config("train_count and val_count must be positive".into()));
        }
        if self.scene.num_classes != self.model.num_classes {
            return Err(Error::Config(
                "num_classes differs between scene and model; set it through the shared key".into(),
            ));
        }
        Ok(())
    }

    /// Parse a key=value file ('#' comments and blank lines allowed) and
    /// apply it on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            self.apply_kv(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then overrides; validated.
    pub fn from_sources(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (k, v) in overrides {
            cfg.apply_kv(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved key=value snapshot.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let mut push = |kv: Vec<(String, String)>| {
            for (k, v) in kv {
                out.push_str(&format!("{k}={v}\n"));
            }
        };
        push(self.scene.to_kv());
        push(self.model.to_kv());
        push(self.loss.to_kv());
        push(self.optim.to_kv());
        push(vec![
            ("seed".into(), self.seed.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("eval_interval".into(), self.eval_interval.to_string()),
            ("train_count".into(), self.train_count.to_string()),
            ("val_count".into(), self.val_count.to_string()),
            ("threads".into(), self.threads.to_string()),
        ]);
        for (k, v) in [
            ("out", &self.out),
            ("data_dir", &self.data_dir),
            ("checkpoint", &self.checkpoint),
            ("image", &self.image),
        ] {
            if let Some(p) = v {
                out.push_str(&format!("{k}={}\n", p.display()));
            }
        }
        out
    }

    /// Write the resolved snapshot next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), self.resolved_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_kv("no_such_key", "1").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn shared_keys_fan_out() {
        let mut cfg = RunConfig::default();
        cfg.apply_kv("seed", "99").unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.scene.seed, 99);
        cfg.apply_kv("num_classes", "5").unwrap();
        assert_eq!(cfg.scene.num_classes, 5);
        assert_eq!(cfg.model.num_classes, 5);
        cfg.validate().unwrap();
    }

    #[test]
    fn file_then_overrides_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nbase_lr=0.5\nbatch_size=4\n").unwrap();
        let overrides = vec![("base_lr".to_string(), "0.25".to_string())];
        let cfg = RunConfig::from_sources(Some(&path), &overrides).unwrap();
        assert_eq!(cfg.optim.base_lr, 0.25);
        assert_eq!(cfg.batch_size, 4);
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_kv("use_csi", "false").unwrap();
        cfg.apply_kv("out", "/tmp/xyz").unwrap();
        let text = cfg.resolved_text();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.cfg");
        std::fs::write(&path, &text).unwrap();
        let back = RunConfig::from_sources(Some(&path), &[]).unwrap();
        assert_eq!(back.model.use_csi, false);
        assert_eq!(back.resolved_text(), text);
    }
}
