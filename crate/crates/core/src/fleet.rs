//! One predictor per vessel: splitting, training, packaging and persistence.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lstm::{self, LstmNetwork, Topology, TrainConfig, Trainer};
use crate::preprocess::{self, RegularTrack, Sample, ScalerParams};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    /// How many qualifying vessels to model, in vessel id order. `None` keeps all.
    pub vessels: Option<usize>,
    pub min_points: usize,
    pub period_secs: u32,
    pub window: usize,
    /// Held-out samples per vessel.
    pub test_points: usize,
    pub topology: Topology,
    pub train: TrainConfig,
    /// Skip vessels whose series is too short instead of failing.
    pub skip_short: bool,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            vessels: Some(5),
            min_points: 500,
            period_secs: 5,
            window: 10,
            test_points: 108,
            topology: Topology::default(),
            train: TrainConfig::default(),
            skip_short: false,
        }
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        self.train.validate()?;
        if self.window == 0
            || self.test_points == 0
            || self.period_secs == 0
            || self.min_points == 0
        {
            return Err(Error::InvalidConfig(
                "window, test points, period and min points must be positive".into(),
            ));
        }
        if self.topology.out_dim != 2 {
            return Err(Error::InvalidConfig(
                "vessel predictors output (lat, lon)".into(),
            ));
        }
        if self.topology.input_dim != preprocess::K {
            return Err(Error::InvalidConfig(format!(
                "input width must be {}",
                preprocess::K
            )));
        }
        Ok(())
    }
}

/// A trained vessel predictor with everything needed to roll it forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub vessel_id: String,
    pub topology: Topology,
    pub window_size: usize,
    pub period_secs: u32,
    pub scaler: ScalerParams,
    pub train_end_time: DateTime<Utc>,
    /// Final `window_size` scaled training rows.
    pub last_training_window: Vec<Sample>,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub network: LstmNetwork,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        self.network.validate()?;
        if self.network.topology() != self.topology {
            return Err(Error::InvalidConfig(format!(
                "model {}: stored topology disagrees with weights",
                self.vessel_id
            )));
        }
        if self.last_training_window.len() != self.window_size {
            return Err(Error::InvalidConfig(format!(
                "model {}: seed window has {} rows, expected {}",
                self.vessel_id,
                self.last_training_window.len(),
                self.window_size
            )));
        }
        if (0..preprocess::K).any(|j| {
            self.scaler.min[j].is_nan()
                || self.scaler.max[j].is_nan()
                || self.scaler.min[j] > self.scaler.max[j]
        }) {
            return Err(Error::InvalidConfig(format!(
                "model {}: scaler min > max",
                self.vessel_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub vessel_id: String,
    pub seed: u64,
    pub series_len: usize,
    pub train_len: usize,
    pub test_len: usize,
    pub windows: usize,
    pub losses: Vec<f64>,
}

/// Chronological split into a training prefix and a `w`-sample test suffix.
pub fn split(series: &RegularTrack, w: usize) -> Result<(RegularTrack, RegularTrack)> {
    let n = series.len();
    if w == 0 || w >= n {
        return Err(Error::SplitTooLarge { n, w });
    }
    let cut = n - w;
    let train = RegularTrack {
        features: series.features[..cut].to_vec(),
        ..series.clone()
    };
    let test = RegularTrack {
        vessel_id: series.vessel_id.clone(),
        start_time: series.time_at(cut),
        period_secs: series.period_secs,
        features: series.features[cut..].to_vec(),
    };
    Ok((train, test))
}

/// Per-vessel seed: root seed xor the FNV-1a hash of the vessel id.
pub fn vessel_seed(root: u64, vessel_id: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in vessel_id.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    root ^ hash
}

/// Trains one vessel's predictor. Only the first `n - w` samples are read.
pub fn train_vessel(
    series: &RegularTrack,
    cfg: &FleetConfig,
) -> Result<(ModelBundle, TrainingHistory)> {
    let m = cfg.window;
    let n = series.len();
    if n <= m + cfg.test_points {
        return Err(Error::TrackTooShort {
            vessel_id: series.vessel_id.clone(),
            len: n,
            needed: m + cfg.test_points + 1,
        });
    }
    let train_len = n - cfg.test_points;
    let prefix = &series.features[..train_len];
    let scaler = ScalerParams::fit(prefix, train_len);
    let scaled = scaler.scale_series(prefix);
    let windows =
        preprocess::make_windows(&scaled, m, train_len).map_err(|_| Error::TrackTooShort {
            vessel_id: series.vessel_id.clone(),
            len: train_len,
            needed: m + 1,
        })?;

    let seed = vessel_seed(cfg.train.seed, &series.vessel_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut network = LstmNetwork::init(&cfg.topology, &mut rng);
    let mut trainer = Trainer::new(&network, cfg.train)?;
    let losses = trainer.fit(&mut network, &windows.inputs, &windows.targets, &mut rng)?;
    info!(
        "vessel {}: {} windows, loss {:.3e} -> {:.3e}",
        series.vessel_id,
        windows.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );

    let bundle = ModelBundle {
        format_version: FORMAT_VERSION,
        vessel_id: series.vessel_id.clone(),
        topology: cfg.topology,
        window_size: m,
        period_secs: series.period_secs,
        scaler,
        train_end_time: series.time_at(train_len - 1),
        last_training_window: scaled[train_len - m..].to_vec(),
        train_config: cfg.train,
        seed,
        network,
    };
    let history = TrainingHistory {
        vessel_id: series.vessel_id.clone(),
        seed,
        series_len: n,
        train_len,
        test_len: cfg.test_points,
        windows: windows.len(),
        losses,
    };
    Ok((bundle, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedFleet {
    pub bundles: Vec<ModelBundle>,
    pub histories: Vec<TrainingHistory>,
}

/// Trains every track independently. Results are ordered by vessel id, so
/// neither input order nor scheduling affects the output.
pub fn train_fleet(tracks: &[RegularTrack], cfg: &FleetConfig) -> Result<TrainedFleet> {
    cfg.validate()?;
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        tracks.par_iter().map(|t| train_vessel(t, cfg)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = tracks.iter().map(|t| train_vessel(t, cfg)).collect();

    let mut trained = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(pair) => trained.push(pair),
            Err(Error::TrackTooShort {
                vessel_id,
                len,
                needed,
            }) if cfg.skip_short => {
                warn!("skipping vessel {vessel_id}: {len} samples, need {needed}");
            }
            Err(e) => return Err(e),
        }
    }
    trained.sort_by(|a, b| a.0.vessel_id.cmp(&b.0.vessel_id));
    let (bundles, histories) = trained.into_iter().unzip();
    Ok(TrainedFleet { bundles, histories })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub vessel_id: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Effective run configuration, echoed for provenance.
    pub config: serde_json::Value,
    pub models: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn model_file_name(vessel_id: &str) -> String {
    let safe: String = vessel_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("model_{safe}.json")
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one JSON file per model plus `manifest.json` with content checksums.
pub fn save_fleet(
    bundles: &[ModelBundle],
    dir: &Path,
    config: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut models = Vec::with_capacity(bundles.len());
    for b in bundles {
        let bytes = serde_json::to_vec(b)?;
        let file = model_file_name(&b.vessel_id);
        write_file(&dir.join(&file), &bytes)?;
        models.push(ManifestEntry {
            vessel_id: b.vessel_id.clone(),
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config,
        models,
    };
    write_file(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn read_file(path: PathBuf) -> Result<Vec<u8>> {
    match fs::read(&path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path)),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Loads and verifies every model listed in the directory's manifest.
pub fn load_fleet(dir: &Path) -> Result<(Manifest, Vec<ModelBundle>)> {
    let manifest: Manifest = serde_json::from_slice(&read_file(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut bundles = Vec::with_capacity(manifest.models.len());
    for entry in &manifest.models {
        let path = dir.join(&entry.file);
        let bytes = read_file(path.clone())?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::ChecksumMismatch(path));
        }
        let bundle: ModelBundle = serde_json::from_slice(&bytes)?;
        bundle.validate()?;
        bundles.push(bundle);
    }
    Ok((manifest, bundles))
}

/// Layer-by-layer trainable parameter counts for the configured topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: String,
    pub d_in: usize,
    pub units: usize,
    pub params: usize,
}

pub fn parameter_table(topo: &Topology) -> Vec<LayerCount> {
    let mut rows: Vec<LayerCount> = (0..topo.layers)
        .map(|l| {
            let d_in = if l == 0 { topo.input_dim } else { topo.hidden };
            LayerCount {
                layer: format!("lstm_{}", l + 1),
                d_in,
                units: topo.hidden,
                params: lstm::count_params(d_in, topo.hidden),
            }
        })
        .collect();
    rows.push(LayerCount {
        layer: "dense".into(),
        d_in: topo.hidden,
        units: topo.out_dim,
        params: lstm::count_dense_params(topo.hidden, topo.out_dim),
    });
    rows
}
