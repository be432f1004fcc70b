use std::path::{Path, PathBuf};

use anyhow::Context;
use cardioquant::geometry::AxisMethod;
use cardioquant::neural::{load_model_file, TrainConfig, UNetConfig};
use cardioquant::preprocess::PreprocessConfig;
use cardioquant::segment::{BackgroundSubtraction, Canny, Gmm, KMeans, Otsu, Segmenter, Threshold, UNetSegmenter};
use cardioquant::synth::{SynthConfig, TrainingRanges};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::exit::{Failure, EXIT_CONFIG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendName {
    Otsu,
    Threshold,
    Canny,
    Bgsub,
    Kmeans,
    Gmm,
    Unet,
    /// Replays the manifest's ground-truth masks.
    Masks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub name: BackendName,
    /// `threshold`: pixels at or below this are ventricle.
    pub threshold: u8,
    pub canny_low: f64,
    pub canny_high: f64,
    /// `bgsub`: absolute difference from the temporal median.
    pub tau: f64,
    /// `kmeans` / `gmm` cluster count.
    pub k: usize,
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            name: BackendName::Unet,
            threshold: 128,
            canny_low: 0.1,
            canny_high: 0.3,
            tau: 30.0,
            k: 3,
            seed: 0,
        }
    }
}

/// One JSON document configures every subcommand; command-line flags win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub backend: BackendConfig,
    pub geometry_method: AxisMethod,
    pub model_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub fps_rates: Vec<f64>,
    pub synth: SynthConfig,
    pub training_ranges: TrainingRanges,
    pub unet: UNetConfig,
    pub train: TrainConfig,
}

/// Flags shared by every subcommand that can override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<BackendName>,
    pub model: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub geometry: Option<AxisMethod>,
    pub fps_rates: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::config)?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(Failure::config)
    }

    /// A `--seed` flag reseeds every stochastic component at once.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(b) = o.backend {
            self.backend.name = b;
        }
        if let Some(m) = &o.model {
            self.model_path = Some(m.clone());
        }
        if let Some(s) = o.seed {
            self.backend.seed = s;
            self.synth.seed = s;
            self.unet.seed = s;
            self.train.seed = s;
        }
        if let Some(out) = &o.out {
            self.output_dir = Some(out.clone());
        }
        if let Some(g) = o.geometry {
            self.geometry_method = g;
        }
        if let Some(r) = &o.fps_rates {
            self.fps_rates = r.clone();
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.preprocess.validate().map_err(Failure::config)?;
        let b = &self.backend;
        if b.name == BackendName::Unet && self.model_path.is_none() {
            return Err(Failure::msg(EXIT_CONFIG, "backend unet requires --model (or model_path in the config)"));
        }
        if b.name == BackendName::Canny && !(0.0 <= b.canny_low && b.canny_low < b.canny_high && b.canny_high <= 1.0) {
            return Err(Failure::msg(EXIT_CONFIG, "canny thresholds need 0 <= low < high <= 1"));
        }
        if matches!(b.name, BackendName::Kmeans | BackendName::Gmm) && b.k < 2 {
            return Err(Failure::msg(EXIT_CONFIG, "k must be at least 2"));
        }
        if b.name == BackendName::Bgsub && !(b.tau >= 0.0) {
            return Err(Failure::msg(EXIT_CONFIG, "tau must be non-negative"));
        }
        Ok(())
    }
}

/// A backend ready to run. Mask replay needs the manifest, so it is built per video.
pub enum Backend {
    Ready(Box<dyn Segmenter>),
    Masks,
}

pub fn build_backend(cfg: &RunConfig) -> Result<Backend, Failure> {
    let b = &cfg.backend;
    let seg: Box<dyn Segmenter> = match b.name {
        BackendName::Otsu => Box::new(Otsu),
        BackendName::Threshold => Box::new(Threshold(b.threshold)),
        BackendName::Canny => Box::new(Canny { low: b.canny_low, high: b.canny_high }),
        BackendName::Bgsub => Box::new(BackgroundSubtraction { tau: b.tau }),
        BackendName::Kmeans => Box::new(KMeans { k: b.k, seed: b.seed }),
        BackendName::Gmm => Box::new(Gmm { k: b.k, seed: b.seed }),
        BackendName::Unet => {
            let path = cfg.model_path.as_ref().expect("validated");
            let model = load_model_file(path)
                .with_context(|| format!("loading model {}", path.display()))
                .map_err(Failure::config)?;
            Box::new(UNetSegmenter { model })
        }
        BackendName::Masks => return Ok(Backend::Masks),
    };
    Ok(Backend::Ready(seg))
}
