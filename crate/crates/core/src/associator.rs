//! Great-circle nearest-prediction assignment of unlabelled observations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet::ModelBundle;
use crate::ingest::{format_timestamp, Observation};
use crate::lstm::{FillPolicy, Rollout};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const NEW_TRACK: &str = "NEW";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPoint { lat, lon }
    }

    /// Clamps latitude to the poles and wraps longitude into `[-180, 180]`.
    pub fn normalized(lat: f64, lon: f64) -> Self {
        let lon = if (-180.0..=180.0).contains(&lon) {
            lon
        } else {
            (lon + 180.0).rem_euclid(360.0) - 180.0
        };
        GeoPoint {
            lat: lat.clamp(-90.0, 90.0),
            lon,
        }
    }
}

/// Haversine great-circle distance on a sphere of radius `r` (same unit as the result).
pub fn haversine(p: GeoPoint, q: GeoPoint, r: f64) -> f64 {
    let (phi1, phi2) = (p.lat.to_radians(), q.lat.to_radians());
    let dphi = (q.lat - p.lat).to_radians();
    let dlambda = (q.lon - p.lon).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * r * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Assignment {
    Vessel(String),
    NewTrack,
}

impl Assignment {
    pub fn parse(s: &str) -> Self {
        if s == NEW_TRACK {
            Assignment::NewTrack
        } else {
            Assignment::Vessel(s.to_string())
        }
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assignment::Vessel(v) => f.write_str(v),
            Assignment::NewTrack => f.write_str(NEW_TRACK),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationDecision {
    pub object_id: u64,
    pub observed: GeoPoint,
    pub observation_time: DateTime<Utc>,
    /// Distance in km from the observation to every vessel's prediction.
    pub distances: BTreeMap<String, f64>,
    pub assigned: Assignment,
    pub winning_distance: f64,
}

/// Assigns an observation to the nearest prediction, or to a new track when
/// the nearest one is farther than `tau` km. Ties go to the smallest vessel id.
pub fn associate(
    obs: &Observation,
    predictions: &BTreeMap<String, GeoPoint>,
    tau: f64,
    radius: f64,
) -> AssociationDecision {
    assert!(
        !predictions.is_empty(),
        "association needs at least one predicted track"
    );
    let observed = GeoPoint::new(obs.lat, obs.lon);
    let distances: BTreeMap<String, f64> = predictions
        .iter()
        .map(|(vid, p)| (vid.clone(), haversine(observed, *p, radius)))
        .collect();
    let (best, winning_distance) = distances
        .iter()
        .fold(None::<(&String, f64)>, |best, (vid, &d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((vid, d)),
        })
        .expect("non-empty");
    let assigned = if winning_distance <= tau {
        Assignment::Vessel(best.clone())
    } else {
        Assignment::NewTrack
    };
    AssociationDecision {
        object_id: obs.object_id,
        observed,
        observation_time: obs.timestamp,
        distances,
        assigned,
        winning_distance,
    }
}

/// Number of grid steps from the end of training to `target`, rounded, at least one.
pub fn steps_until(bundle: &ModelBundle, target: DateTime<Utc>) -> Result<usize> {
    if target <= bundle.train_end_time {
        return Err(Error::TimeBeforeTraining {
            vessel_id: bundle.vessel_id.clone(),
            time: format_timestamp(&target),
            train_end: format_timestamp(&bundle.train_end_time),
        });
    }
    let secs = (target - bundle.train_end_time).num_seconds() as f64;
    Ok(((secs / bundle.period_secs as f64).round() as usize).max(1))
}

/// Rolls every vessel model forward, caching progress between calls with
/// non-decreasing target times.
#[derive(Debug, Clone)]
pub struct FleetPredictor<'a> {
    bundles: &'a [ModelBundle],
    rollouts: Vec<Rollout>,
}

impl<'a> FleetPredictor<'a> {
    pub fn new(bundles: &'a [ModelBundle], policy: FillPolicy) -> Self {
        FleetPredictor {
            bundles,
            rollouts: bundles
                .iter()
                .map(|b| Rollout::new(&b.last_training_window, policy))
                .collect(),
        }
    }

    /// Predicted position of every vessel at `target`.
    pub fn predict_at(&mut self, target: DateTime<Utc>) -> Result<BTreeMap<String, GeoPoint>> {
        let mut out = BTreeMap::new();
        for (bundle, roll) in self.bundles.iter().zip(&mut self.rollouts) {
            let steps = steps_until(bundle, target)?;
            if steps < roll.steps_taken() {
                *roll = Rollout::new(&bundle.last_training_window, roll.policy());
            }
            let scaled = roll
                .advance_to(&bundle.network, steps)?
                .expect("at least one step");
            let [lat, lon] = bundle.scaler.unscale(scaled);
            out.insert(bundle.vessel_id.clone(), GeoPoint::normalized(lat, lon));
        }
        Ok(out)
    }
}

/// One-shot prediction of every vessel's position at `target`.
pub fn predict_positions(
    bundles: &[ModelBundle],
    target: DateTime<Utc>,
) -> Result<BTreeMap<String, GeoPoint>> {
    FleetPredictor::new(bundles, FillPolicy::HoldLast).predict_at(target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    /// New-track threshold in km; infinite disables the new-track branch.
    pub tau_km: f64,
    pub earth_radius_km: f64,
    pub policy: FillPolicy,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig {
            tau_km: f64::INFINITY,
            earth_radius_km: EARTH_RADIUS_KM,
            policy: FillPolicy::HoldLast,
        }
    }
}

/// Associates time-ordered observations one by one. Several observations may
/// land on the same track; each observation gets exactly one decision.
pub fn associate_batch(
    observations: &[Observation],
    bundles: &[ModelBundle],
    cfg: &AssociationConfig,
) -> Result<Vec<AssociationDecision>> {
    if observations
        .windows(2)
        .any(|w| w[1].timestamp < w[0].timestamp)
    {
        return Err(Error::InvalidConfig(
            "observations must be sorted by time".into(),
        ));
    }
    if observations.is_empty() {
        return Ok(Vec::new());
    }
    if bundles.is_empty() {
        return Err(Error::InvalidConfig(
            "no vessel models to associate against".into(),
        ));
    }
    let mut predictor = FleetPredictor::new(bundles, cfg.policy);
    observations
        .iter()
        .map(|obs| {
            let predictions = predictor.predict_at(obs.timestamp)?;
            Ok(associate(
                obs,
                &predictions,
                cfg.tau_km,
                cfg.earth_radius_km,
            ))
        })
        .collect()
}

/// One row of the decisions CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRow {
    pub object_id: u64,
    pub assigned: Assignment,
    pub winning_distance_km: f64,
    pub distances: BTreeMap<String, f64>,
}

impl From<&AssociationDecision> for DecisionRow {
    fn from(d: &AssociationDecision) -> Self {
        DecisionRow {
            object_id: d.object_id,
            assigned: d.assigned.clone(),
            winning_distance_km: d.winning_distance,
            distances: d.distances.clone(),
        }
    }
}

/// Writes `OBJECT_ID,ASSIGNED_VID,WINNING_DISTANCE_KM,DIST_<vid>...`.
/// `vessels` fixes the distance column order.
pub fn write_decisions<W: Write>(
    out: W,
    vessels: &[String],
    decisions: &[AssociationDecision],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "OBJECT_ID".to_string(),
        "ASSIGNED_VID".into(),
        "WINNING_DISTANCE_KM".into(),
    ];
    header.extend(vessels.iter().map(|v| format!("DIST_{v}")));
    w.write_record(&header)?;
    for d in decisions {
        let mut row = vec![
            d.object_id.to_string(),
            d.assigned.to_string(),
            d.winning_distance.to_string(),
        ];
        row.extend(
            vessels
                .iter()
                .map(|v| d.distances.get(v).map_or(String::new(), |x| x.to_string())),
        );
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<decisions>", e))?;
    Ok(())
}

pub fn read_decisions<R: Read>(input: R) -> Result<Vec<DecisionRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    let expect = ["OBJECT_ID", "ASSIGNED_VID", "WINNING_DISTANCE_KM"];
    if header.len() < 3 || header.iter().zip(expect).any(|(h, e)| h != e) {
        return Err(Error::BadHeader(format!(
            "decisions header must start with {}",
            expect.join(",")
        )));
    }
    let vessels: Vec<String> = header
        .iter()
        .skip(3)
        .map(|h| h.strip_prefix("DIST_").unwrap_or(h).to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| Error::MalformedRow { line, reason };
        if record.len() != header.len() {
            return Err(bad(format!("expected {} columns", header.len())));
        }
        let object_id = record[0].parse().map_err(|_| bad("OBJECT_ID".into()))?;
        let winning_distance_km = record[2]
            .parse()
            .map_err(|_| bad("WINNING_DISTANCE_KM".into()))?;
        let mut distances = BTreeMap::new();
        for (v, cell) in vessels.iter().zip(record.iter().skip(3)) {
            if !cell.is_empty() {
                distances.insert(
                    v.clone(),
                    cell.parse().map_err(|_| bad(format!("DIST_{v}")))?,
                );
            }
        }
        rows.push(DecisionRow {
            object_id,
            assigned: Assignment::parse(&record[1]),
            winning_distance_km,
            distances,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::{self, LstmNetwork, Topology, TrainConfig};
    use crate::preprocess::ScalerParams;
    use chrono::Duration;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const R: f64 = EARTH_RADIUS_KM;

    fn obs(lat: f64, lon: f64) -> Observation {
        Observation {
            object_id: 1,
            timestamp: DateTime::from_timestamp(1_600_000_000, 0).unwrap(),
            lat,
            lon,
            speed: 0.0,
            course: 0.0,
        }
    }

    fn preds(items: &[(&str, f64, f64)]) -> BTreeMap<String, GeoPoint> {
        items
            .iter()
            .map(|&(v, a, b)| (v.to_string(), GeoPoint::new(a, b)))
            .collect()
    }

    fn bundle(vid: &str, net: LstmNetwork, scaler: ScalerParams) -> ModelBundle {
        ModelBundle {
            format_version: crate::fleet::FORMAT_VERSION,
            vessel_id: vid.into(),
            topology: net.topology(),
            window_size: 10,
            period_secs: 5,
            scaler,
            train_end_time: DateTime::from_timestamp(1_600_000_000, 0).unwrap(),
            last_training_window: (0..10)
                .map(|i| [0.1 * i as f64, 0.05 * i as f64, 0.5, 0.5])
                .collect(),
            train_config: TrainConfig::default(),
            seed: 0,
            network: net,
        }
    }

    #[test]
    fn analytic_distances() {
        let o = GeoPoint::new(0.0, 0.0);
        assert_eq!(haversine(o, o, R), 0.0);
        let d = haversine(o, GeoPoint::new(0.0, 1.0), R);
        assert!((d - 111.1949266).abs() < 1e-6);
        let d = haversine(o, GeoPoint::new(0.0, 180.0), R);
        assert!((d - std::f64::consts::PI * R).abs() < 1e-9);
        assert!((d - 20015.0867).abs() < 1e-4);
    }

    #[test]
    fn nearest_prediction_wins() {
        let p = preds(&[("A", 37.90, 23.60), ("B", 37.95, 23.70)]);
        let d = associate(&obs(37.91, 23.61), &p, f64::INFINITY, R);
        assert_eq!(d.assigned, Assignment::Vessel("A".into()));
        // Frozen from an independent double-precision haversine evaluation.
        assert!((d.distances["A"] - 1.4164021304754846).abs() < 1e-9);
        assert!((d.distances["B"] - 9.060429713738733).abs() < 1e-9);
        assert_eq!(d.winning_distance, d.distances["A"]);

        let d = associate(&obs(37.91, 23.61), &p, 0.5, R);
        assert_eq!(d.assigned, Assignment::NewTrack);
    }

    #[test]
    fn ties_go_to_smallest_vessel_id() {
        let p = preds(&[
            ("zeta", 37.9, 23.6),
            ("alpha", 37.9, 23.6),
            ("mid", 37.9, 23.6),
        ]);
        let d = associate(&obs(37.9, 23.6), &p, f64::INFINITY, R);
        assert_eq!(d.assigned, Assignment::Vessel("alpha".into()));
        assert_eq!(d.winning_distance, 0.0);
    }

    #[test]
    fn step_rounding() {
        let b = bundle(
            "a",
            LstmNetwork::zeros(&Topology::default()),
            ScalerParams {
                min: [0.0; 4],
                max: [1.0; 4],
            },
        );
        let t0 = b.train_end_time;
        assert_eq!(steps_until(&b, t0 + Duration::seconds(5)).unwrap(), 1);
        assert_eq!(steps_until(&b, t0 + Duration::seconds(1)).unwrap(), 1);
        assert_eq!(steps_until(&b, t0 + Duration::seconds(12)).unwrap(), 2);
        assert_eq!(steps_until(&b, t0 + Duration::seconds(13)).unwrap(), 3);
        assert!(matches!(
            steps_until(&b, t0),
            Err(Error::TimeBeforeTraining { .. })
        ));
    }

    #[test]
    fn zero_network_unscales_to_minimum() {
        let scaler = ScalerParams {
            min: [30.0, 20.0, 0.0, 0.0],
            max: [40.0, 21.0, 1.0, 1.0],
        };
        let b = bundle("a", LstmNetwork::zeros(&Topology::default()), scaler);
        let p = predict_positions(
            std::slice::from_ref(&b),
            b.train_end_time + Duration::seconds(5),
        )
        .unwrap();
        assert_eq!(p["a"], GeoPoint::new(30.0, 20.0));
    }

    #[test]
    fn positions_follow_the_rollout() {
        let net = LstmNetwork::init(&Topology::default(), &mut ChaCha8Rng::seed_from_u64(3));
        let scaler = ScalerParams {
            min: [37.0, 23.0, 0.0, 0.0],
            max: [38.0, 24.0, 100.0, 3600.0],
        };
        let b = bundle("a", net, scaler);

        let one = predict_positions(
            std::slice::from_ref(&b),
            b.train_end_time + Duration::seconds(5),
        )
        .unwrap();
        let direct = lstm::predict(&b.network, &b.last_training_window).unwrap();
        let [lat, lon] = scaler.unscale([direct[0], direct[1]]);
        assert_eq!(one["a"], GeoPoint::new(lat, lon));

        let four = predict_positions(
            std::slice::from_ref(&b),
            b.train_end_time + Duration::seconds(20),
        )
        .unwrap();
        let seq =
            lstm::predict_sequence(&b.network, &b.last_training_window, 4, FillPolicy::HoldLast)
                .unwrap();
        let [lat, lon] = scaler.unscale(seq[3]);
        assert_eq!(four["a"], GeoPoint::new(lat, lon));

        // Incremental advance agrees with fresh rollouts.
        let mut pred = FleetPredictor::new(std::slice::from_ref(&b), FillPolicy::HoldLast);
        pred.predict_at(b.train_end_time + Duration::seconds(5))
            .unwrap();
        assert_eq!(
            pred.predict_at(b.train_end_time + Duration::seconds(20))
                .unwrap(),
            four
        );
        assert_eq!(
            pred.predict_at(b.train_end_time + Duration::seconds(5))
                .unwrap(),
            one
        );
    }

    #[test]
    fn batch_composition() {
        let net = LstmNetwork::init(&Topology::default(), &mut ChaCha8Rng::seed_from_u64(4));
        let scaler = ScalerParams {
            min: [37.0, 23.0, 0.0, 0.0],
            max: [38.0, 24.0, 100.0, 3600.0],
        };
        let bundles = vec![
            bundle("a", net.clone(), scaler),
            bundle("b", LstmNetwork::zeros(&net.topology()), scaler),
        ];
        let cfg = AssociationConfig::default();
        assert!(associate_batch(&[], &bundles, &cfg).unwrap().is_empty());

        let mut o = obs(37.5, 23.5);
        o.timestamp = bundles[0].train_end_time + Duration::seconds(5);
        let batch = associate_batch(std::slice::from_ref(&o), &bundles, &cfg).unwrap();
        let single = associate(
            &o,
            &predict_positions(&bundles, o.timestamp).unwrap(),
            f64::INFINITY,
            R,
        );
        assert_eq!(batch, vec![single]);

        let early = obs(37.5, 23.5);
        assert!(matches!(
            associate_batch(&[early], &bundles, &cfg),
            Err(Error::TimeBeforeTraining { .. })
        ));
    }

    #[test]
    fn decisions_csv_round_trip() {
        let p = preds(&[("A", 37.90, 23.60), ("B", 37.95, 23.70)]);
        let ds = vec![
            associate(&obs(37.91, 23.61), &p, f64::INFINITY, R),
            associate(&obs(37.91, 23.61), &p, 0.5, R),
        ];
        let vessels = vec!["A".to_string(), "B".to_string()];
        let mut buf = Vec::new();
        write_decisions(&mut buf, &vessels, &ds).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("OBJECT_ID,ASSIGNED_VID,WINNING_DISTANCE_KM,DIST_A,DIST_B\n"));
        assert!(text.lines().nth(2).unwrap().contains(",NEW,"));
        let rows = read_decisions(buf.as_slice()).unwrap();
        let expect: Vec<DecisionRow> = ds.iter().map(DecisionRow::from).collect();
        assert_eq!(rows, expect);
    }

    fn point() -> impl Strategy<Value = GeoPoint> {
        (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(a, b)| GeoPoint::new(a, b))
    }

    proptest! {
        #[test]
        fn metric_properties(p in point(), q in point(), s in point()) {
            let pq = haversine(p, q, R);
            prop_assert_eq!(pq, haversine(q, p, R));
            prop_assert!((0.0..=std::f64::consts::PI * R).contains(&pq));
            prop_assert!(haversine(p, s, R) <= pq + haversine(q, s, R) + 1e-9);
            prop_assert_eq!(haversine(p, p, R), 0.0);
        }

        #[test]
        fn assignment_is_the_argmin(o in point(), ps in prop::collection::vec(point(), 1..6)) {
            let p: BTreeMap<String, GeoPoint> = ps.iter().enumerate().map(|(i, g)| (format!("v{i}"), *g)).collect();
            let d = associate(&obs(o.lat, o.lon), &p, f64::INFINITY, R);
            let min = d.distances.values().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(d.winning_distance, min);
            match &d.assigned {
                Assignment::Vessel(v) => prop_assert_eq!(d.distances[v], min),
                Assignment::NewTrack => prop_assert!(false),
            }
            let scaled = associate(&obs(o.lat, o.lon), &p, f64::INFINITY, 2.5 * R);
            prop_assert_eq!(scaled.assigned, d.assigned);
        }
    }
}
