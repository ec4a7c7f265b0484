//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns JSON text so the page needs no generated typings.

use std::collections::BTreeMap;

use serde_json::{json, Value};
use trackassoc::associator::{self, Assignment, AssociationConfig, GeoPoint, EARTH_RADIUS_KM};
use trackassoc::evaluator::{confusion, macro_averages, metrics};
use trackassoc::fleet::{self, FleetConfig};
use trackassoc::ingest::{self, ParseMode};
use trackassoc::lstm::{predict_sequence, FillPolicy, Topology, TrainConfig};
use trackassoc::preprocess::{resample, LAT, LON};
use trackassoc::synthgen::{self, SynthSpec};
use wasm_bindgen::prelude::*;

/// Great-circle distance in km on a 6371 km sphere.
#[wasm_bindgen]
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    associator::haversine(
        GeoPoint::new(lat1, lon1),
        GeoPoint::new(lat2, lon2),
        EARTH_RADIUS_KM,
    )
}

/// Parses a labelled AIS CSV and resamples each vessel onto a regular grid.
/// Returns `{vessels: [{id, raw: [[t, lat, lon]], grid: [[t, lat, lon]]}], skipped}`
/// with `t` in seconds since the vessel's first message.
#[wasm_bindgen]
pub fn resample_preview(csv_text: &str, period_secs: u32) -> Result<String, String> {
    let parsed =
        ingest::parse_csv(csv_text.as_bytes(), ParseMode::Lenient).map_err(|e| e.to_string())?;
    let mut vessels = Vec::new();
    for track in ingest::group_tracks(&parsed.records) {
        if track.len() < 2 {
            continue;
        }
        let start = track.messages[0].timestamp;
        let raw: Vec<Value> = track
            .messages
            .iter()
            .map(|m| json!([(m.timestamp - start).num_seconds(), m.lat, m.lon]))
            .collect();
        let reg = resample(&track, period_secs).map_err(|e| e.to_string())?;
        let grid: Vec<Value> = reg
            .features
            .iter()
            .enumerate()
            .map(|(i, s)| json!([i as u64 * period_secs as u64, s[LAT], s[LON]]))
            .collect();
        vessels.push(json!({ "id": track.vessel_id, "raw": raw, "grid": grid }));
    }
    Ok(json!({ "vessels": vessels, "skipped": parsed.skipped.len() }).to_string())
}

/// A synthetic CSV for the resampling explorer.
#[wasm_bindgen]
pub fn sample_csv(seed: u64, vessels: usize, points: usize, jitter: f64) -> Result<String, String> {
    let mut spec = SynthSpec::fleet(vessels, points, seed);
    spec.jitter = jitter;
    spec.noise_std_deg = 1e-4;
    let out = synthgen::generate(&spec).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    ingest::write_csv(&mut buf, &out.messages).map_err(|e| e.to_string())?;
    String::from_utf8(buf).map_err(|e| e.to_string())
}

/// Scaled-down end-to-end run: synthesize a fleet, train a small predictor
/// per vessel, associate the held-out messages and score them.
#[wasm_bindgen]
pub fn demo_run(
    seed: u64,
    vessels: usize,
    points: usize,
    epochs: usize,
    crossing: bool,
) -> Result<String, String> {
    run(seed, vessels, points, epochs, crossing).map_err(|e| e.to_string())
}

fn run(
    seed: u64,
    vessels: usize,
    points: usize,
    epochs: usize,
    crossing: bool,
) -> trackassoc::Result<String> {
    let mut spec = SynthSpec::fleet(vessels, points, seed);
    spec.jitter = 0.2;
    spec.noise_std_deg = 1e-4;
    let test_points = (points / 6).max(1);
    let spec =
        synthgen::overlap_scenario(&spec, crossing.then_some((0, 1)), points - test_points / 2)?;
    let synth = synthgen::generate(&spec)?;

    let cfg = FleetConfig {
        vessels: None,
        min_points: 2,
        test_points,
        topology: Topology {
            hidden: 8,
            layers: 2,
            ..Topology::default()
        },
        train: TrainConfig {
            epochs,
            learning_rate: 1e-3,
            seed,
            ..TrainConfig::default()
        },
        ..FleetConfig::default()
    };
    let tracks = ingest::group_tracks(&synth.messages);
    let series = tracks
        .iter()
        .map(|t| resample(t, cfg.period_secs))
        .collect::<trackassoc::Result<Vec<_>>>()?;
    let trained = fleet::train_fleet(&series, &cfg)?;

    let cutoff = trained.bundles.iter().map(|b| b.train_end_time).max();
    let mut holdout: Vec<_> = synth
        .messages
        .iter()
        .filter(|m| Some(m.timestamp) > cutoff)
        .collect();
    holdout.sort_by_key(|m| (m.timestamp, m.object_id));
    let observations: Vec<_> = holdout.iter().map(|m| m.observation()).collect();
    let decisions = associator::associate_batch(
        &observations,
        &trained.bundles,
        &AssociationConfig::default(),
    )?;

    let assignments: Vec<(u64, Assignment)> = decisions
        .iter()
        .map(|d| (d.object_id, d.assigned.clone()))
        .collect();
    let cm = confusion(&assignments, &synth.truth)?;
    let per_vessel = metrics(&cm);
    let macro_avg = macro_averages(&per_vessel);

    let mut out_vessels = Vec::new();
    for (track, bundle) in tracks.iter().zip(&trained.bundles) {
        let path = predict_sequence(
            &bundle.network,
            &bundle.last_training_window,
            test_points,
            FillPolicy::HoldLast,
        )?;
        let predicted: Vec<Value> = path
            .iter()
            .map(|&p| {
                let [lat, lon] = bundle.scaler.unscale(p);
                json!([lat, lon])
            })
            .collect();
        let raw: Vec<Value> = track
            .messages
            .iter()
            .map(|m| json!([m.lat, m.lon]))
            .collect();
        let history = trained
            .histories
            .iter()
            .find(|h| h.vessel_id == bundle.vessel_id);
        out_vessels.push(json!({
            "id": bundle.vessel_id,
            "track": raw,
            "predicted": predicted,
            "final_loss": history.and_then(|h| h.losses.last()),
        }));
    }
    let f1: BTreeMap<&str, f64> = per_vessel
        .iter()
        .map(|m| (m.vessel_id.as_str(), m.f1))
        .collect();
    let out_decisions: Vec<Value> = decisions
        .iter()
        .map(|d| {
            json!({
                "object_id": d.object_id,
                "lat": d.observed.lat,
                "lon": d.observed.lon,
                "truth": synth.truth.get(&d.object_id),
                "assigned": d.assigned.to_string(),
                "distance_km": d.winning_distance,
            })
        })
        .collect();
    Ok(json!({
        "vessels": out_vessels,
        "decisions": out_decisions,
        "f1": f1,
        "macro_f1": macro_avg.f1,
    })
    .to_string())
}
