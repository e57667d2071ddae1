use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use soundgan::audio::FeatureConfig;
use soundgan::models::{DiscriminatorConfig, GeneratorConfig};
use soundgan::train::{LossConfig, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Directory of precomputed `<id>.sne` conditions; empty means the
    /// conditions are extracted from the audio.
    pub conditions: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.ndjson"),
            conditions: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Empty derives the id from a hash of the rest of the config.
    pub run_id: String,
    /// Progress line period in iterations; 0 is silent.
    pub log_every: u64,
    pub eval_folds: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            run_id: String::new(),
            log_every: 100,
            eval_folds: 10,
        }
    }
}

/// Everything a training run depends on. The copy written to
/// `config.txt` has the data-derived model fields filled in.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub output: OutputConfig,
    pub features: FeatureConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("serializable")
    }

    /// Every problem found, so all of them can be reported at once.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in [self.train.validate(), self.loss.validate()] {
            if let Err(e) = r {
                out.push(e.to_string());
            }
        }
        if !self.data.manifest.is_file() {
            out.push(format!("manifest {} does not exist", self.data.manifest.display()));
        }
        if !self.data.conditions.as_os_str().is_empty() && !self.data.conditions.is_dir() {
            out.push(format!("conditions directory {} does not exist", self.data.conditions.display()));
        }
        if self.generator.width == 0 || self.discriminator.width == 0 {
            out.push("network widths must be positive".into());
        }
        if self.output.eval_folds == 0 {
            out.push("eval_folds must be positive".into());
        }
        out
    }

    pub fn run_id(&self) -> String {
        if !self.output.run_id.is_empty() {
            return self.output.run_id.clone();
        }
        let digest = Sha256::digest(self.to_text().as_bytes());
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("run-{hex}")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join(self.run_id())
    }
}
