//! TOML experiment configuration. Unknown keys are errors in every section.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{build_dataset, DatasetConfig, DatasetManifest, Normalization, PhantomConfig, Split};
use crate::recon::ReconConfig;
use crate::schedule::derive_seed;
use crate::seg::SegConfig;
use crate::trainer::{MaskConfig, TrainSetup, TrainingConfig};

/// Environment variable overriding the default output root (`runs`).
pub const RUN_ROOT_ENV: &str = "MTMR_RUN_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub recon: ReconConfig,
    #[serde(default)]
    pub seg: SegConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Either existing manifests or a phantom dataset generated on first use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
    /// Where generated splits go; defaults to `<run dir>/data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default = "default_train_items")]
    pub train_items: usize,
    #[serde(default = "default_test_items")]
    pub test_items: usize,
    #[serde(default = "default_slices_per_volume")]
    pub slices_per_volume: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub phantom: PhantomConfig,
}

fn default_train_items() -> usize {
    200
}
fn default_test_items() -> usize {
    50
}
fn default_slices_per_volume() -> usize {
    10
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            test_manifest: None,
            root: None,
            train_items: default_train_items(),
            test_items: default_test_items(),
            slices_per_volume: default_slices_per_volume(),
            normalization: Normalization::default(),
            seed: 0,
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory; defaults to `$MTMR_RUN_ROOT/<name>` (or `runs/<name>`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    #[serde(default = "default_name")]
    pub name: String,
    /// Checkpoint every this many epochs; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_name() -> String {
    "run".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            run_dir: None,
            name: default_name(),
            checkpoint_every: 0,
        }
    }
}

impl OutputConfig {
    pub fn resolve_run_dir(&self) -> PathBuf {
        match &self.run_dir {
            Some(dir) => dir.clone(),
            None => {
                let root = std::env::var_os(RUN_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"));
                root.join(&self.name)
            }
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.recon.validate()?;
        self.seg.validate()?;
        self.training.validate()?;
        self.data.phantom.validate()?;
        if self.data.phantom.n_classes != self.seg.n_classes && self.data.train_manifest.is_none() {
            return Err(Error::InvalidConfig(format!(
                "phantom generates {} classes but seg predicts {}",
                self.data.phantom.n_classes, self.seg.n_classes
            )));
        }
        crate::kspace::make_mask(
            self.data.phantom.width,
            self.mask.center_fraction,
            self.mask.acceleration,
            0,
        )?;
        Ok(())
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            recon: self.recon.clone(),
            seg: self.seg.clone(),
            mask: self.mask.clone(),
            training: self.training.clone(),
        }
    }

    /// Existing manifests, or phantom splits built under the data root if
    /// they are not there yet.
    pub fn resolve_data(&self, run_dir: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
        let root = self.data.root.clone().unwrap_or_else(|| run_dir.join("data"));
        let split = |manifest: &Option<PathBuf>, split: Split, items: usize, stream: u64| {
            if let Some(path) = manifest {
                return DatasetManifest::load(path);
            }
            let path = DatasetManifest::manifest_path(&root, split);
            if path.exists() {
                return DatasetManifest::load(&path);
            }
            let cfg = DatasetConfig {
                phantom: self.data.phantom.clone(),
                split,
                slices_per_volume: self.data.slices_per_volume,
                normalization: self.data.normalization,
            };
            build_dataset(&cfg, items, derive_seed(self.data.seed, stream), &root)
        };
        Ok((
            split(&self.data.train_manifest, Split::Train, self.data.train_items, 0)?,
            split(&self.data.test_manifest, Split::Test, self.data.test_items, 1)?,
        ))
    }
}
