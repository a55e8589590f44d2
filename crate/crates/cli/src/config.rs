use dgmr_core::gmvae::NoiseMode;
use dgmr_core::splice::DgmVariant;
use dgmr_core::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub host: HostSection,
    #[serde(default)]
    pub dgm: Option<DgmSection>,
    #[serde(default)]
    pub splice: Option<SpliceSection>,
    pub train: TrainSection,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub corpus_path: Option<PathBuf>,
    #[serde(default = "one")]
    pub min_freq: usize,
    #[serde(default = "low")]
    pub policy: String,
    pub seed: u64,
    #[serde(default = "tenth")]
    pub val_fraction: f64,
    /// IDX images and labels for the mlp host.
    #[serde(default)]
    pub images_path: Option<PathBuf>,
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
    /// Synthetic image set used when no IDX files are given.
    #[serde(default)]
    pub surrogate: Option<SurrogateSection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSection {
    pub train: usize,
    pub val: usize,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub confusion: f64,
    #[serde(default = "pixel_noise")]
    pub pixel_noise: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HostSection {
    Mlp {
        #[serde(default = "mlp_sizes")]
        sizes: Vec<usize>,
    },
    Transformer {
        #[serde(default = "d128")]
        hidden: usize,
        #[serde(default = "d4")]
        heads: usize,
        #[serde(default = "d512")]
        ffn: usize,
        #[serde(default = "d4")]
        layers: usize,
        #[serde(default = "d64")]
        max_len: usize,
        #[serde(default = "d01")]
        dropout: f32,
    },
    Seq2seq {
        #[serde(default = "d64")]
        emb: usize,
        #[serde(default = "d128")]
        hidden: usize,
        #[serde(default = "d64")]
        max_len: usize,
    },
}

/// GMVAE settings; input and conditioning widths come from the snapshot.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgmSection {
    pub dim_z: usize,
    pub dim_w: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub sigma_dec: f32,
    pub dropout_rate: f32,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub separate_prior_nets: bool,
    #[serde(default)]
    pub variant: Option<DgmVariant>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpliceSection {
    pub site: String,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    #[serde(default)]
    pub snapshot_limit: Option<usize>,
    #[serde(default = "half")]
    pub dropout_rate: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    #[serde(default)]
    pub finetune_epochs: Option<usize>,
    #[serde(default)]
    pub finetune_lr: Option<f32>,
    #[serde(default = "mask_prob")]
    pub mask_prob: f64,
}

fn one() -> usize {
    1
}
fn low() -> String {
    "low".into()
}
fn tenth() -> f64 {
    0.1
}
fn half() -> f32 {
    0.5
}
fn pixel_noise() -> f32 {
    0.25
}
fn mask_prob() -> f64 {
    0.15
}
fn mlp_sizes() -> Vec<usize> {
    dgmr_core::hosts::mlp::DEFAULT_SIZES.to_vec()
}
fn d4() -> usize {
    4
}
fn d64() -> usize {
    64
}
fn d128() -> usize {
    128
}
fn d512() -> usize {
    512
}
fn d01() -> f32 {
    0.1
}

impl RunConfig {
    /// Parses strictly and resolves every path against the config's folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.out_dir);
        for p in [
            &mut cfg.data.corpus_path,
            &mut cfg.data.images_path,
            &mut cfg.data.labels_path,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn finetune_epochs(&self) -> usize {
        self.train.finetune_epochs.unwrap_or(self.train.epochs)
    }

    pub fn finetune_lr(&self) -> f32 {
        self.train.finetune_lr.unwrap_or(self.train.lr)
    }

    pub fn splice(&self) -> Result<&SpliceSection> {
        self.splice
            .as_ref()
            .ok_or_else(|| CoreError::Config("config has no splice section".into()))
    }

    pub fn dgm(&self) -> Result<&DgmSection> {
        self.dgm
            .as_ref()
            .ok_or_else(|| CoreError::Config("config has no dgm section".into()))
    }
}
