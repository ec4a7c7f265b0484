//! Stage functions shared by the command-line tool and the acceptance tests:
//! synthesize, train, associate, evaluate. Each stage reads and writes files
//! so it can run on its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::associator::{
    self, Assignment, AssociationConfig, AssociationDecision, EARTH_RADIUS_KM,
};
use crate::error::{Error, Result};
use crate::evaluator::{self, EvaluationReport, RunMetadata};
use crate::fleet::{self, write_file, FleetConfig, LayerCount, TrainingHistory, TRAIN_REPORT_FILE};
use crate::ingest::{self, AisMessage, ParseMode};
use crate::lstm::{FillPolicy, Topology, TrainConfig};
use crate::preprocess::{self, RegularTrack};
use crate::synthgen::{self, SynthOutput, SynthSpec};

pub const FLEET_CSV: &str = "fleet.csv";
pub const TRUTH_CSV: &str = "truth.csv";
pub const HOLDOUT_CSV: &str = "holdout.csv";

/// Every tunable of a run, serialized flat. Paths are locations rather than
/// parameters and are left out of the provenance echo and hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub vessels: usize,
    pub points: usize,
    pub jitter: f64,
    pub noise_std_deg: f64,
    /// Pair of vessel indices forced to cross.
    pub crossing: Option<[usize; 2]>,
    pub crossing_sample: Option<usize>,

    /// Cap on modelled vessels, in vessel id order.
    pub max_models: Option<usize>,
    pub min_points: usize,
    pub period_secs: u32,
    pub window: usize,
    pub test_points: usize,
    pub skip_short: bool,
    pub lenient: bool,

    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub residual: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,

    pub earth_radius_km: f64,
    /// New-track threshold; absent means every observation joins a known vessel.
    pub tau_km: Option<f64>,

    pub data_dir: Option<PathBuf>,
    pub models_dir: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub decisions: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let topo = Topology::default();
        let train = TrainConfig::default();
        let fleet = FleetConfig::default();
        RunConfig {
            seed: 42,
            vessels: 5,
            points: 648,
            jitter: 0.2,
            noise_std_deg: 1e-4,
            crossing: None,
            crossing_sample: None,
            max_models: None,
            min_points: fleet.min_points,
            period_secs: fleet.period_secs,
            window: fleet.window,
            test_points: fleet.test_points,
            skip_short: false,
            lenient: false,
            hidden: topo.hidden,
            layers: topo.layers,
            dropout: topo.dropout,
            residual: topo.residual,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            beta1: train.beta1,
            beta2: train.beta2,
            epsilon: train.epsilon,
            earth_radius_km: EARTH_RADIUS_KM,
            tau_km: None,
            data_dir: None,
            models_dir: None,
            observations: None,
            truth: None,
            decisions: None,
            report_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn topology(&self) -> Topology {
        Topology {
            input_dim: preprocess::K,
            hidden: self.hidden,
            layers: self.layers,
            out_dim: 2,
            dropout: self.dropout,
            residual: self.residual,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            seed: self.seed,
        }
    }

    pub fn fleet_config(&self) -> FleetConfig {
        FleetConfig {
            vessels: self.max_models,
            min_points: self.min_points,
            period_secs: self.period_secs,
            window: self.window,
            test_points: self.test_points,
            topology: self.topology(),
            train: self.train_config(),
            skip_short: self.skip_short,
        }
    }

    pub fn association_config(&self) -> AssociationConfig {
        AssociationConfig {
            tau_km: self.tau_km.unwrap_or(f64::INFINITY),
            earth_radius_km: self.earth_radius_km,
            policy: FillPolicy::HoldLast,
        }
    }

    pub fn parse_mode(&self) -> ParseMode {
        if self.lenient {
            ParseMode::Lenient
        } else {
            ParseMode::Strict
        }
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let mut spec = SynthSpec::fleet(self.vessels, self.points, self.seed);
        spec.period_secs = self.period_secs;
        spec.jitter = self.jitter;
        spec.noise_std_deg = self.noise_std_deg;
        let pair = self.crossing.map(|[a, b]| (a, b));
        let sample = self.crossing_sample.unwrap_or(self.points * 9 / 10);
        synthgen::overlap_scenario(&spec, pair, sample)
    }

    pub fn validate(&self) -> Result<()> {
        self.fleet_config().validate()?;
        if self.earth_radius_km.is_nan() || self.earth_radius_km <= 0.0 {
            return Err(Error::InvalidConfig("earth radius must be positive".into()));
        }
        if matches!(self.tau_km, Some(t) if t.is_nan() || t <= 0.0) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        Ok(())
    }

    /// The run parameters as JSON, without paths.
    pub fn provenance(&self) -> serde_json::Value {
        let mut stripped = self.clone();
        stripped.data_dir = None;
        stripped.models_dir = None;
        stripped.observations = None;
        stripped.truth = None;
        stripped.decisions = None;
        stripped.report_dir = None;
        serde_json::to_value(stripped).expect("config serializes")
    }

    /// sha256 of the compact provenance JSON.
    pub fn hash(&self) -> String {
        fleet::sha256_hex(self.provenance().to_string().as_bytes())
    }

    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            seed: self.seed,
            config_hash: self.hash(),
            config: self.provenance(),
        }
    }
}

fn create_file(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn open_file(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

/// Writes `fleet.csv` and `truth.csv` into `out_dir`.
pub fn run_synth(cfg: &RunConfig, out_dir: &Path) -> Result<SynthOutput> {
    let out = synthgen::generate(&cfg.synth_spec()?)?;
    ingest::write_csv(create_file(&out_dir.join(FLEET_CSV))?, &out.messages)?;
    synthgen::write_truth(create_file(&out_dir.join(TRUTH_CSV))?, &out.truth)?;
    info!(
        "wrote {} messages for {} vessels to {}",
        out.messages.len(),
        out.vessel_ids.len(),
        out_dir.display()
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselTrainReport {
    pub vessel_id: String,
    pub raw_points: usize,
    pub max_raw_gap_secs: i64,
    pub history: TrainingHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub excluded: Vec<String>,
    pub holdout_observations: usize,
    pub parameters: Vec<LayerCount>,
    pub parameter_note: String,
    pub vessels: Vec<VesselTrainReport>,
    pub metadata: RunMetadata,
}

/// Parses a labelled log, filters and resamples every vessel, trains one
/// predictor each and saves them to `models_dir` with a training report.
/// Raw messages after the latest training end are written to
/// `holdout.csv` without their VID, ready for association.
pub fn run_train(cfg: &RunConfig, csv_path: &Path, models_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let fleet_cfg = cfg.fleet_config();
    let parsed = ingest::parse_csv(open_file(csv_path)?, cfg.parse_mode())?;
    for e in &parsed.skipped {
        warn!("skipped row: {e}");
    }
    let tracks = ingest::group_tracks(&parsed.records);
    let mut excluded = Vec::new();
    let mut kept = Vec::new();
    for t in tracks {
        if t.len() >= fleet_cfg.min_points {
            kept.push(t);
        } else {
            warn!(
                "excluding vessel {}: {} points, threshold {}",
                t.vessel_id,
                t.len(),
                fleet_cfg.min_points
            );
            excluded.push(t.vessel_id);
        }
    }
    if let Some(cap) = fleet_cfg.vessels {
        for t in kept.drain(cap.min(kept.len())..) {
            info!("not modelling vessel {}: cap of {cap} reached", t.vessel_id);
            excluded.push(t.vessel_id);
        }
    }
    if kept.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no vessel has at least {} points",
            fleet_cfg.min_points
        )));
    }
    let series = kept
        .iter()
        .map(|t| preprocess::resample(t, fleet_cfg.period_secs))
        .collect::<Result<Vec<RegularTrack>>>()?;
    let trained = fleet::train_fleet(&series, &fleet_cfg)?;
    fleet::save_fleet(&trained.bundles, models_dir, cfg.provenance())?;

    let modelled: BTreeMap<&str, _> = trained
        .bundles
        .iter()
        .map(|b| (b.vessel_id.as_str(), b))
        .collect();
    let cutoff = trained.bundles.iter().map(|b| b.train_end_time).max();
    let holdout: Vec<AisMessage> = parsed
        .records
        .iter()
        .filter(|m| modelled.contains_key(m.vessel_id.as_str()) && Some(m.timestamp) > cutoff)
        .cloned()
        .collect();
    let mut sorted = holdout.clone();
    sorted.sort_by_key(|m| (m.timestamp, m.object_id));
    let obs: Vec<_> = sorted.iter().map(AisMessage::observation).collect();
    ingest::write_observations(create_file(&models_dir.join(HOLDOUT_CSV))?, &obs)?;

    let vessels = trained
        .histories
        .into_iter()
        .map(|history| {
            let raw = kept
                .iter()
                .find(|t| t.vessel_id == history.vessel_id)
                .expect("trained vessel was kept");
            VesselTrainReport {
                vessel_id: history.vessel_id.clone(),
                raw_points: raw.len(),
                max_raw_gap_secs: raw.max_gap_seconds(),
                history,
            }
        })
        .collect();
    let parameters = fleet::parameter_table(&fleet_cfg.topology);
    let report = TrainReport {
        excluded,
        holdout_observations: obs.len(),
        parameter_note: format!(
            "first recurrent layer has 4*((k + h)*h + h) = {} parameters for k = {}, h = {}; the \
             commonly printed 4864 corresponds to k = 5",
            parameters[0].params, fleet_cfg.topology.input_dim, fleet_cfg.topology.hidden
        ),
        parameters,
        vessels,
        metadata: cfg.metadata(),
    };
    write_file(
        &models_dir.join(TRAIN_REPORT_FILE),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}

/// Associates every observation in `obs_path` and writes the decisions CSV.
pub fn run_associate(
    cfg: &RunConfig,
    models_dir: &Path,
    obs_path: &Path,
    decisions_path: &Path,
) -> Result<Vec<AssociationDecision>> {
    cfg.validate()?;
    let (_, bundles) = fleet::load_fleet(models_dir)?;
    let parsed = ingest::parse_observations(open_file(obs_path)?, cfg.parse_mode())?;
    for e in &parsed.skipped {
        warn!("skipped row: {e}");
    }
    let mut obs = parsed.records;
    obs.sort_by_key(|o| (o.timestamp, o.object_id));
    let decisions = associator::associate_batch(&obs, &bundles, &cfg.association_config())?;
    let vessels: Vec<String> = bundles.iter().map(|b| b.vessel_id.clone()).collect();
    associator::write_decisions(create_file(decisions_path)?, &vessels, &decisions)?;
    info!(
        "associated {} observations against {} models",
        decisions.len(),
        vessels.len()
    );
    Ok(decisions)
}

/// Scores a decisions CSV against ground truth and writes the report files.
pub fn run_evaluate(
    cfg: &RunConfig,
    decisions_path: &Path,
    truth_path: &Path,
    report_dir: &Path,
) -> Result<EvaluationReport> {
    let rows = associator::read_decisions(open_file(decisions_path)?)?;
    let truth = synthgen::read_truth(open_file(truth_path)?)?;
    let assignments: Vec<(u64, Assignment)> = rows
        .into_iter()
        .map(|r| (r.object_id, r.assigned))
        .collect();
    let cm = evaluator::confusion(&assignments, &truth)?;
    let report = EvaluationReport::new(cm, cfg.metadata());
    evaluator::report(&report, report_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            vessels: 2,
            points: 80,
            min_points: 50,
            test_points: 12,
            hidden: 4,
            layers: 2,
            epochs: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(
            (c.epochs, c.batch_size, c.learning_rate, c.window, c.hidden),
            (100, 10, 1e-4, 10, 32)
        );
        assert_eq!((c.min_points, c.period_secs, c.test_points), (500, 5, 108));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = tiny();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let partial = RunConfig::from_toml("epochs = 7\ntau_km = 0.5\n").unwrap();
        assert_eq!(
            (partial.epochs, partial.tau_km, partial.hidden),
            (7, Some(0.5), 32)
        );
        assert!(RunConfig::from_toml("epoch = 7").is_err());
    }

    #[test]
    fn hash_ignores_paths_but_not_parameters() {
        let a = tiny();
        let b = RunConfig {
            models_dir: Some("elsewhere".into()),
            ..tiny()
        };
        let c = RunConfig { seed: 1, ..tiny() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn small_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let data = dir.path().join("data");
        let models = dir.path().join("models");
        let synth = run_synth(&cfg, &data).unwrap();
        let tr = run_train(&cfg, &data.join(FLEET_CSV), &models).unwrap();
        assert_eq!(tr.vessels.len(), 2);
        assert!(tr.holdout_observations > 0);
        assert_eq!(tr.parameters[0].params, 4 * ((4 + 4) * 4 + 4));

        let decisions_path = dir.path().join("decisions.csv");
        let decisions =
            run_associate(&cfg, &models, &models.join(HOLDOUT_CSV), &decisions_path).unwrap();
        assert_eq!(decisions.len(), tr.holdout_observations);
        for d in &decisions {
            assert!(synth.truth.contains_key(&d.object_id));
        }

        let report = run_evaluate(
            &cfg,
            &decisions_path,
            &data.join(TRUTH_CSV),
            &dir.path().join("report"),
        )
        .unwrap();
        assert_eq!(report.decisions as usize, decisions.len());
        assert_eq!(report.metadata.config_hash, cfg.hash());
    }

    #[test]
    fn short_tracks_are_excluded_with_a_record() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            min_points: 81,
            ..tiny()
        };
        run_synth(&cfg, dir.path()).unwrap();
        let err = run_train(&cfg, &dir.path().join(FLEET_CSV), &dir.path().join("m")).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn missing_input_is_reported_as_missing() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_train(&tiny(), &dir.path().join("nope.csv"), dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
