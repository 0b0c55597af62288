//! Flat `key = value` configuration files with namespaced keys, and the
//! typed sections built from them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::compare::CompareConfig;
use crate::experiments::data::{gen_synthetic, load_idx, Dataset, Split, SyntheticKind};
use crate::experiments::robustness::RobustnessSweep;
use crate::integrated::IntegratedConfig;
use crate::nas::{CellType, OpKind, OpSpace, SearchConfig, SupernetConfig};
use crate::nn::models::CnnConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parses UTF-8 text. Blank lines and `#` comments are skipped; every key
    /// must contain a `.` namespace and may appear once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.contains('.') || k.starts_with('.') || k.ends_with('.') {
                return Err(Error::Config(format!("line {}: key `{k}` is not namespaced", n + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets or replaces a value, e.g. from a command-line override.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("`{key} = {v}`: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.values.get(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| Error::Config(format!("`{key}` item `{s}`: {e}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Rejects every key not listed in `known`.
    pub fn ensure_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    /// Sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of [`Config::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const DATA_KEYS: &[&str] =
    &["data.kind", "data.n_per_class", "data.size", "data.seed", "data.images", "data.labels", "data.test_images", "data.test_labels"];
pub const TRAIN_KEYS: &[&str] = &[
    "train.epochs",
    "train.batch_size",
    "train.lr_init",
    "train.momentum",
    "train.weight_decay",
    "train.warmup_epochs",
    "train.schedule",
    "train.seed",
    "train.augment_flip",
    "train.augment_crop",
];
pub const MODEL_KEYS: &[&str] =
    &["model.width", "model.blocks", "model.kernel_size", "model.shape", "integrated.p_circular", "integrated.eval_branch"];
pub const SEARCH_KEYS: &[&str] = &[
    "search.epochs",
    "search.batch_size",
    "search.lr_init",
    "search.momentum",
    "search.weight_decay",
    "search.alpha_lr",
    "search.alpha_beta1",
    "search.alpha_beta2",
    "search.alpha_weight_decay",
    "search.seed",
    "search.channels",
    "search.num_nodes",
    "search.cells",
    "search.ops",
    "search.stem",
];
pub const COMPARE_KEYS: &[&str] = &["compare.shapes", "compare.kernel_sizes", "compare.seeds"];
pub const ROBUSTNESS_KEYS: &[&str] = &["robustness.mode", "robustness.angles", "robustness.trials", "robustness.seed"];

/// Where the images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { kind: SyntheticKind, n_per_class: usize, size: usize, seed: u64 },
    /// IDX training files, plus optional IDX test files.
    Idx { images: PathBuf, labels: PathBuf, test: Option<(PathBuf, PathBuf)> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { kind: SyntheticKind::RingVsCross, n_per_class: 128, size: 16, seed: 0 }
    }
}

impl DataSource {
    pub fn from_config(c: &Config) -> Result<Self> {
        if let Some(images) = c.get::<PathBuf>("data.images")? {
            let labels = c.get::<PathBuf>("data.labels")?.ok_or_else(|| Error::Config("data.images needs data.labels".into()))?;
            let test = match (c.get::<PathBuf>("data.test_images")?, c.get::<PathBuf>("data.test_labels")?) {
                (Some(i), Some(l)) => Some((i, l)),
                (None, None) => None,
                _ => return Err(Error::Config("data.test_images and data.test_labels go together".into())),
            };
            return Ok(DataSource::Idx { images, labels, test });
        }
        let DataSource::Synthetic { kind, n_per_class, size, seed } = DataSource::default() else { unreachable!() };
        let size = c.get_or("data.size", size)?;
        if size < 8 {
            return Err(Error::Config(format!("data.size must be at least 8, got {size}")));
        }
        Ok(DataSource::Synthetic {
            kind: c.get_or("data.kind", kind)?,
            n_per_class: c.get_or("data.n_per_class", n_per_class)?,
            size,
            seed: c.get_or("data.seed", seed)?,
        })
    }

    /// Training and held-out splits. Synthetic data and IDX files without a
    /// test pair are split in half with the data seed.
    pub fn load(&self, held_out: Split) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic { kind, n_per_class, size, seed } => {
                Ok(gen_synthetic(*kind, *n_per_class, *size, *seed)?.split_half(*seed, Split::Train, held_out))
            }
            DataSource::Idx { images, labels, test } => {
                let train = load_idx(images, labels)?;
                match test {
                    Some((ti, tl)) => {
                        let mut t = load_idx(ti, tl)?;
                        t.split = held_out;
                        Ok((train, t))
                    }
                    None => Ok(train.split_half(0, Split::Train, held_out)),
                }
            }
        }
    }
}

pub fn train_config(c: &Config) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: c.get_or("train.epochs", d.epochs)?,
        batch_size: c.get_or("train.batch_size", d.batch_size)?,
        lr_init: c.get_or("train.lr_init", d.lr_init)?,
        momentum: c.get_or("train.momentum", d.momentum)?,
        weight_decay: c.get_or("train.weight_decay", d.weight_decay)?,
        warmup_epochs: c.get_or("train.warmup_epochs", d.warmup_epochs)?,
        schedule: c.get_or("train.schedule", d.schedule)?,
        seed: c.get_or("train.seed", d.seed)?,
        augment_flip: c.get_or("train.augment_flip", d.augment_flip)?,
        augment_crop: c.get_or("train.augment_crop", d.augment_crop)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Model template; input channels and classes are filled in from the data.
pub fn cnn_config(c: &Config) -> Result<CnnConfig> {
    let d = CnnConfig::default();
    let i = IntegratedConfig::default();
    let p_circular = c.get_or("integrated.p_circular", i.p_circular)?;
    if !(0.0..=1.0).contains(&p_circular) {
        return Err(Error::Config(format!("integrated.p_circular must lie in [0, 1], got {p_circular}")));
    }
    Ok(CnnConfig {
        width: c.get_or("model.width", d.width)?,
        blocks: c.get_or("model.blocks", d.blocks)?,
        kernel_size: c.get_or("model.kernel_size", d.kernel_size)?,
        shape: c.get_or("model.shape", d.shape)?,
        integrated: IntegratedConfig { p_circular, eval_branch: c.get_or("integrated.eval_branch", i.eval_branch)? },
        ..d
    })
}

pub fn search_config(c: &Config) -> Result<SearchConfig> {
    let d = SearchConfig::default();
    let n = SupernetConfig::default();
    let ops = match c.list::<OpKind>("search.ops")? {
        Some(ops) => OpSpace::new(ops)?,
        None => n.ops.clone(),
    };
    let net = SupernetConfig {
        channels: c.get_or("search.channels", n.channels)?,
        num_nodes: c.get_or("search.num_nodes", n.num_nodes)?,
        cells: c.list::<CellType>("search.cells")?.unwrap_or(n.cells.clone()),
        stem: c.get_or("search.stem", n.stem)?,
        ops,
        ..n
    };
    let cfg = SearchConfig {
        net,
        epochs: c.get_or("search.epochs", d.epochs)?,
        batch_size: c.get_or("search.batch_size", d.batch_size)?,
        lr_init: c.get_or("search.lr_init", d.lr_init)?,
        momentum: c.get_or("search.momentum", d.momentum)?,
        weight_decay: c.get_or("search.weight_decay", d.weight_decay)?,
        alpha_lr: c.get_or("search.alpha_lr", d.alpha_lr)?,
        alpha_betas: (c.get_or("search.alpha_beta1", d.alpha_betas.0)?, c.get_or("search.alpha_beta2", d.alpha_betas.1)?),
        alpha_weight_decay: c.get_or("search.alpha_weight_decay", d.alpha_weight_decay)?,
        seed: c.get_or("search.seed", d.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn compare_config(c: &Config) -> Result<CompareConfig> {
    let d = CompareConfig::default();
    let cfg = CompareConfig {
        shapes: c.list("compare.shapes")?.unwrap_or(d.shapes),
        kernel_sizes: c.list("compare.kernel_sizes")?.unwrap_or(d.kernel_sizes),
        seeds: c.list("compare.seeds")?.unwrap_or(d.seeds),
        model: cnn_config(c)?,
        train: train_config(c)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn robustness_sweep(c: &Config) -> Result<RobustnessSweep> {
    let d = RobustnessSweep::default();
    let sweep = RobustnessSweep {
        angle_ranges: c.list("robustness.angles")?.unwrap_or(d.angle_ranges),
        mode: c.get_or("robustness.mode", d.mode)?,
        trials: c.get_or("robustness.trials", d.trials)?,
        seed: c.get_or("robustness.seed", d.seed)?,
    };
    sweep.validate()?;
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::warp::WarpMode;
    use crate::nn::layers::ShapeMode;

    #[test]
    fn parses_comments_and_namespaces() {
        let c = Config::parse("# header\ntrain.lr_init = 0.05  # inline\n\n search.cells = n, r \n").unwrap();
        assert_eq!(c.get::<f64>("train.lr_init").unwrap(), Some(0.05));
        assert_eq!(c.list::<CellType>("search.cells").unwrap(), Some(vec![CellType::Normal, CellType::Reduction]));
        assert_eq!(c.get::<f64>("train.momentum").unwrap(), None);
        assert!(Config::parse("lr = 1").is_err());
        assert!(Config::parse("train.lr_init 1").is_err());
        assert!(Config::parse("a.b = 1\na.b = 2").is_err());
        assert!(c.get::<usize>("train.lr_init").is_err());
    }

    #[test]
    fn hash_ignores_order_and_comments() {
        let a = Config::parse("x.a = 1\nx.b = 2").unwrap();
        let b = Config::parse("# c\nx.b=2\nx.a =1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), Config::parse("x.a = 1").unwrap().hash());
    }

    #[test]
    fn sections_build_and_validate() {
        let c = Config::parse(
            "train.epochs = 3\nmodel.shape = circular\nmodel.kernel_size = 5\nintegrated.p_circular = 0.25\n\
             compare.kernel_sizes = 3,5\nrobustness.mode = shear\nrobustness.angles = 10,70\nsearch.ops = sep_conv_3x3, zero\n",
        )
        .unwrap();
        assert_eq!(train_config(&c).unwrap().epochs, 3);
        let m = cnn_config(&c).unwrap();
        assert_eq!((m.shape, m.kernel_size, m.integrated.p_circular), (ShapeMode::Circular, 5, 0.25));
        assert_eq!(compare_config(&c).unwrap().kernel_sizes, vec![3, 5]);
        let r = robustness_sweep(&c).unwrap();
        assert_eq!((r.mode, r.angle_ranges.clone()), (WarpMode::Shear, vec![10, 70]));
        assert_eq!(search_config(&c).unwrap().net.ops.len(), 2);
        assert!(train_config(&Config::parse("train.lr_init = -1").unwrap()).is_err());
        assert!(cnn_config(&Config::parse("integrated.p_circular = 2").unwrap()).is_err());
        assert!(robustness_sweep(&Config::parse("robustness.angles = 95").unwrap()).is_err());
        assert!(DataSource::from_config(&Config::parse("data.size = 4").unwrap()).is_err());
        let known: Vec<&str> = TRAIN_KEYS.iter().chain(MODEL_KEYS).chain(COMPARE_KEYS).chain(ROBUSTNESS_KEYS).chain(SEARCH_KEYS).copied().collect();
        assert!(c.ensure_known(&known).is_ok());
        assert!(c.ensure_known(TRAIN_KEYS).is_err());
    }
}
