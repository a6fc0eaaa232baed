//! Experiment config files: a plain-text key-value format with
//! `[model]`, `[data]`, `[train]`, and `[analysis]` sections. Unknown
//! sections or keys are hard errors; every run writes its fully resolved
//! config next to the outputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use spikepool_core::attention::{AttentionKind, AttentionVariant};
use spikepool_core::model::ModelConfig;
use spikepool_core::train::{LrSchedule, TrainConfig};

#[derive(Clone, Debug)]
pub struct DataSection {
    /// Directory of an existing dataset (training split).
    pub dir: Option<PathBuf>,
    /// Directory of an existing test split.
    pub test_dir: Option<PathBuf>,
    /// Synthetic generation parameters, used when no directory is given.
    pub spec: String,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub seed: u64,
    pub duration_us: u32,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: None,
            test_dir: None,
            spec: "bars4".into(),
            n_train: 200,
            n_test: 100,
            noise: 0.0,
            seed: 1,
            duration_us: 100_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnalysisSection {
    pub bands: Vec<f64>,
    pub sigma: f64,
    pub radii: usize,
    pub half_width: f64,
    pub seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            bands: (1..=9).map(|i| i as f64 / 10.0).collect(),
            sigma: 1.0,
            radii: 16,
            half_width: 0.05,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainConfig,
    pub analysis: AnalysisSection,
}

impl ExperimentConfig {
    pub fn parse_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        // the preset applies first regardless of where it appears, so
        // explicit [model] keys always win over preset values
        let mut preset = None;
        let mut in_model = false;
        for raw in text.lines() {
            let line = raw.trim();
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                in_model = name.trim() == "model";
            } else if in_model {
                if let Some((k, v)) = line.split_once('=') {
                    if k.trim() == "preset" {
                        preset = Some(v.trim().to_string());
                    }
                }
            }
        }
        let mut model = ModelConfig::preset(preset.as_deref().unwrap_or("spikepool-tiny"))
            .map_err(|e| anyhow!(e.to_string()))?;
        let mut model_name_set = preset.is_some();
        let mut data = DataSection::default();
        let mut train = TrainConfig::default();
        let mut analysis = AnalysisSection::default();

        let mut section = String::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "model" | "data" | "train" | "analysis") {
                    bail!("line {}: unknown section [{}]", ln + 1, section);
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected 'key = value', got '{line}'", ln + 1))?;
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                bail!("line {}: key '{key}' before any section", ln + 1);
            }
            let qualified = format!("{section}.{key}");
            if !seen.insert(qualified.clone()) {
                bail!("line {}: duplicate key '{qualified}'", ln + 1);
            }
            let err = |what: &str| anyhow!("line {}: bad {what} value '{value}'", ln + 1);
            match (section.as_str(), key) {
                ("model", "preset") => {} // applied in the pre-scan above
                ("model", "name") => {
                    model.name = value.to_string();
                    model_name_set = true;
                }
                ("model", "depth") => model.depth = value.parse().map_err(|_| err("integer"))?,
                ("model", "dim") => model.dim = value.parse().map_err(|_| err("integer"))?,
                ("model", "timesteps") => {
                    model.timesteps = value.parse().map_err(|_| err("integer"))?
                }
                ("model", "attention") => {
                    let kind = AttentionKind::parse(value).map_err(|e| anyhow!(e.to_string()))?;
                    model.attention = AttentionVariant {
                        kind,
                        ..model.attention
                    };
                }
                ("model", "ssa_scale") => {
                    model.attention.ssa_scale = value.parse().map_err(|_| err("float"))?
                }
                ("model", "pool_kernel") => {
                    model.attention.pool_kernel = value.parse().map_err(|_| err("integer"))?
                }
                ("model", "pool_stride") => {
                    model.attention.pool_stride = value.parse().map_err(|_| err("integer"))?
                }
                ("model", "pool_padding") => {
                    model.attention.pool_padding = value.parse().map_err(|_| err("integer"))?
                }
                ("model", "pool_kt") => {
                    model.attention.pool_kt = value.parse().map_err(|_| err("integer"))?
                }
                ("model", "in_channels") => {
                    model.in_channels = value.parse().map_err(|_| err("integer"))?
                }
                ("model", "height") => model.height = value.parse().map_err(|_| err("integer"))?,
                ("model", "width") => model.width = value.parse().map_err(|_| err("integer"))?,
                ("model", "num_classes") => {
                    model.num_classes = value.parse().map_err(|_| err("integer"))?
                }
                ("model", "mlp_ratio") => {
                    model.mlp_ratio = value.parse().map_err(|_| err("float"))?
                }
                ("model", "tau") => model.lif.tau = value.parse().map_err(|_| err("float"))?,
                ("model", "v_th") => model.lif.v_th = value.parse().map_err(|_| err("float"))?,
                ("model", "surrogate_width") => {
                    model.lif.surrogate_width = value.parse().map_err(|_| err("float"))?
                }
                ("data", "dir") => data.dir = Some(PathBuf::from(value)),
                ("data", "test_dir") => data.test_dir = Some(PathBuf::from(value)),
                ("data", "spec") => data.spec = value.to_string(),
                ("data", "n_train") => data.n_train = value.parse().map_err(|_| err("integer"))?,
                ("data", "n_test") => data.n_test = value.parse().map_err(|_| err("integer"))?,
                ("data", "noise") => data.noise = value.parse().map_err(|_| err("float"))?,
                ("data", "seed") => data.seed = value.parse().map_err(|_| err("integer"))?,
                ("data", "duration_us") => {
                    data.duration_us = value.parse().map_err(|_| err("integer"))?
                }
                ("train", "lr") => train.lr = value.parse().map_err(|_| err("float"))?,
                ("train", "weight_decay") => {
                    train.weight_decay = value.parse().map_err(|_| err("float"))?
                }
                ("train", "beta1") => train.beta1 = value.parse().map_err(|_| err("float"))?,
                ("train", "beta2") => train.beta2 = value.parse().map_err(|_| err("float"))?,
                ("train", "epochs") => train.epochs = value.parse().map_err(|_| err("integer"))?,
                ("train", "batch_size") => {
                    train.batch_size = value.parse().map_err(|_| err("integer"))?
                }
                ("train", "seed") => train.seed = value.parse().map_err(|_| err("integer"))?,
                ("train", "lr_schedule") => {
                    train.schedule =
                        LrSchedule::parse(value).map_err(|e| anyhow!(e.to_string()))?
                }
                ("train", "early_stop_acc") => {
                    train.early_stop_acc = Some(value.parse().map_err(|_| err("float"))?)
                }
                ("analysis", "bands") => {
                    analysis.bands = value
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<f64>, _>>()
                        .map_err(|_| err("band list"))?;
                }
                ("analysis", "sigma") => analysis.sigma = value.parse().map_err(|_| err("float"))?,
                ("analysis", "radii") => {
                    analysis.radii = value.parse().map_err(|_| err("integer"))?
                }
                ("analysis", "half_width") => {
                    analysis.half_width = value.parse().map_err(|_| err("float"))?
                }
                ("analysis", "seed") => analysis.seed = value.parse().map_err(|_| err("integer"))?,
                (section, key) => bail!("line {}: unknown key '{key}' in [{section}]", ln + 1),
            }
        }
        if !model_name_set {
            model.name = "custom".into();
        }
        model.validate().map_err(|e| anyhow!(e.to_string()))?;
        train.validate().map_err(|e| anyhow!(e.to_string()))?;
        Ok(ExperimentConfig {
            model,
            data,
            train,
            analysis,
        })
    }

    /// Serializes the fully resolved configuration.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "name = {}", m.name);
        let _ = writeln!(s, "depth = {}", m.depth);
        let _ = writeln!(s, "dim = {}", m.dim);
        let _ = writeln!(s, "timesteps = {}", m.timesteps);
        let _ = writeln!(s, "attention = {}", m.attention.kind.as_str());
        let _ = writeln!(s, "ssa_scale = {}", m.attention.ssa_scale);
        let _ = writeln!(s, "pool_kernel = {}", m.attention.pool_kernel);
        let _ = writeln!(s, "pool_stride = {}", m.attention.pool_stride);
        let _ = writeln!(s, "pool_padding = {}", m.attention.pool_padding);
        let _ = writeln!(s, "pool_kt = {}", m.attention.pool_kt);
        let _ = writeln!(s, "in_channels = {}", m.in_channels);
        let _ = writeln!(s, "height = {}", m.height);
        let _ = writeln!(s, "width = {}", m.width);
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "mlp_ratio = {}", m.mlp_ratio);
        let _ = writeln!(s, "tau = {}", m.lif.tau);
        let _ = writeln!(s, "v_th = {}", m.lif.v_th);
        let _ = writeln!(s, "surrogate_width = {}", m.lif.surrogate_width);
        let d = &self.data;
        let _ = writeln!(s, "\n[data]");
        if let Some(dir) = &d.dir {
            let _ = writeln!(s, "dir = {}", dir.display());
        }
        if let Some(dir) = &d.test_dir {
            let _ = writeln!(s, "test_dir = {}", dir.display());
        }
        if d.dir.is_none() {
            let _ = writeln!(s, "spec = {}", d.spec);
            let _ = writeln!(s, "n_train = {}", d.n_train);
            let _ = writeln!(s, "n_test = {}", d.n_test);
            let _ = writeln!(s, "noise = {}", d.noise);
            let _ = writeln!(s, "seed = {}", d.seed);
            let _ = writeln!(s, "duration_us = {}", d.duration_us);
        }
        let t = &self.train;
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "beta1 = {}", t.beta1);
        let _ = writeln!(s, "beta2 = {}", t.beta2);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "lr_schedule = {}", t.schedule.as_str());
        if let Some(a) = t.early_stop_acc {
            let _ = writeln!(s, "early_stop_acc = {a}");
        }
        let a = &self.analysis;
        let _ = writeln!(s, "\n[analysis]");
        let bands: Vec<String> = a.bands.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "bands = {}", bands.join(","));
        let _ = writeln!(s, "sigma = {}", a.sigma);
        let _ = writeln!(s, "radii = {}", a.radii);
        let _ = writeln!(s, "half_width = {}", a.half_width);
        let _ = writeln!(s, "seed = {}", a.seed);
        s
    }
}
