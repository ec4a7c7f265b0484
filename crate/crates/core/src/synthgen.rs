//! Labelled synthetic AIS fleets for exercising the pipeline end to end.
//!
//! Motion is flat-earth over small regions: a constant course and speed plus a
//! sinusoidal cross-track wiggle, optionally with timestamp jitter and
//! Gaussian position noise.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::associator::{haversine, GeoPoint, EARTH_RADIUS_KM};
use crate::error::{Error, Result};
use crate::ingest::AisMessage;
use crate::preprocess::wrap_course;

pub const KM_PER_DEGREE: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
const KM_PER_NM: f64 = 1.852;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselMotion {
    pub start: GeoPoint,
    /// Heading in degrees clockwise from north.
    pub course_deg: f64,
    pub speed_knots: f64,
    /// Cross-track wiggle amplitude in degrees of arc.
    pub amplitude_deg: f64,
    /// Wiggle period in nominal samples.
    pub wiggle_period_samples: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub vessels: Vec<VesselMotion>,
    pub points: usize,
    pub period_secs: u32,
    /// Timestamp jitter as a fraction of the period, in `[0, 1)`.
    pub jitter: f64,
    pub noise_std_deg: f64,
    pub seed: u64,
    pub start_time: DateTime<Utc>,
}

/// Default epoch of synthetic logs.
pub fn default_start_time() -> DateTime<Utc> {
    DateTime::from_timestamp(1_583_013_600, 0).expect("valid epoch")
}

impl SynthSpec {
    /// `z` well-separated vessels (0.6 degrees of latitude apart) at 8-14 knots.
    ///
    /// Headings lie within 10 degrees of a diagonal. Near-cardinal headings
    /// leave one coordinate almost constant, so min-max scaling stretches the
    /// wiggle and noise over the full unit range; headings near north also
    /// wrap the course feature.
    pub fn fleet(z: usize, points: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1ee7);
        let vessels = (0..z)
            .map(|i| VesselMotion {
                start: GeoPoint::new(37.0 + 0.6 * i as f64, 24.0 + rng.random_range(-0.05..0.05)),
                course_deg: 45.0
                    + 90.0 * rng.random_range(0..4) as f64
                    + rng.random_range(-10.0..10.0),
                speed_knots: rng.random_range(8.0..14.0),
                amplitude_deg: 0.0005,
                wiggle_period_samples: 120.0,
            })
            .collect();
        SynthSpec {
            vessels,
            points,
            period_secs: 5,
            jitter: 0.0,
            noise_std_deg: 0.0,
            seed,
            start_time: default_start_time(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vessels.is_empty() {
            return bad("at least one vessel is required");
        }
        if self.points < 2 {
            return bad("at least two points per vessel are required");
        }
        if self.period_secs == 0 {
            return bad("period must be positive");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must lie in [0, 1)");
        }
        if self.noise_std_deg.is_nan() || self.noise_std_deg < 0.0 {
            return bad("noise std must be non-negative");
        }
        if self
            .vessels
            .iter()
            .any(|v| v.wiggle_period_samples <= 0.0 || v.speed_knots < 0.0)
        {
            return bad("wiggle period must be positive and speed non-negative");
        }
        Ok(())
    }

    fn wiggle_phase_rate(&self, v: &VesselMotion) -> f64 {
        2.0 * std::f64::consts::PI / (v.wiggle_period_samples * self.period_secs as f64)
    }

    /// Displacement in (north, east) km after `t` seconds.
    fn displacement_km(&self, v: &VesselMotion, t: f64) -> (f64, f64) {
        let (s, c) = v.course_deg.to_radians().sin_cos();
        let along = v.speed_knots * KM_PER_NM * t / 3600.0;
        let cross = v.amplitude_deg * KM_PER_DEGREE * (self.wiggle_phase_rate(v) * t).sin();
        (along * c - cross * s, along * s + cross * c)
    }

    /// Noiseless position of vessel `idx` at `t` seconds after the start.
    pub fn position(&self, idx: usize, t: f64) -> GeoPoint {
        let v = &self.vessels[idx];
        let (n, e) = self.displacement_km(v, t);
        GeoPoint::new(
            v.start.lat + n / KM_PER_DEGREE,
            v.start.lon + e / (KM_PER_DEGREE * v.start.lat.to_radians().cos()),
        )
    }

    /// Instantaneous heading in degrees at `t` seconds.
    pub fn heading(&self, idx: usize, t: f64) -> f64 {
        let v = &self.vessels[idx];
        let (s, c) = v.course_deg.to_radians().sin_cos();
        let along_rate = v.speed_knots * KM_PER_NM / 3600.0;
        let w = self.wiggle_phase_rate(v);
        let cross_rate = v.amplitude_deg * KM_PER_DEGREE * w * (w * t).cos();
        let north = along_rate * c - cross_rate * s;
        let east = along_rate * s + cross_rate * c;
        wrap_course(east.atan2(north).to_degrees() * 10.0) / 10.0
    }
}

/// Generated log plus the ground-truth vessel of every object id.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub messages: Vec<AisMessage>,
    pub truth: BTreeMap<u64, String>,
    pub vessel_ids: Vec<String>,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Sample offsets in seconds: first and last on the nominal grid, interior
/// points jittered and kept strictly increasing.
fn sample_offsets(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<i64> {
    let p = spec.period_secs as i64;
    let n = spec.points;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let nominal = i as i64 * p;
        let jitter = if i == 0 || i + 1 == n || spec.jitter == 0.0 {
            0
        } else {
            (rng.random_range(-spec.jitter..=spec.jitter) * p as f64).round() as i64
        };
        let t = nominal + jitter;
        out.push(match out.last() {
            Some(&prev) if t <= prev => prev + 1,
            _ => t,
        });
    }
    out
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vessel_ids: Vec<String> = Vec::with_capacity(spec.vessels.len());
    while vessel_ids.len() < spec.vessels.len() {
        let vid = format!("{:08x}", rng.random::<u32>());
        if !vessel_ids.contains(&vid) {
            vessel_ids.push(vid);
        }
    }
    let noise =
        Normal::new(0.0, spec.noise_std_deg).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    // (offset secs, vessel index, lat, lon, speed, course)
    let mut rows = Vec::with_capacity(spec.points * spec.vessels.len());
    for idx in 0..spec.vessels.len() {
        let offsets = sample_offsets(spec, &mut rng);
        let positions: Vec<GeoPoint> = offsets
            .iter()
            .map(|&t| {
                let p = spec.position(idx, t as f64);
                if spec.noise_std_deg > 0.0 {
                    GeoPoint::new(
                        p.lat + noise.sample(&mut rng),
                        p.lon + noise.sample(&mut rng),
                    )
                } else {
                    p
                }
            })
            .collect();
        for i in 0..offsets.len() {
            let (a, b) = if i == 0 { (0, 1) } else { (i - 1, i) };
            let dt = (offsets[b] - offsets[a]) as f64;
            let knots =
                haversine(positions[a], positions[b], EARTH_RADIUS_KM) / KM_PER_NM / (dt / 3600.0);
            let course = wrap_course(round1(spec.heading(idx, offsets[i] as f64) * 10.0));
            rows.push((
                offsets[i],
                idx,
                positions[i].lat,
                positions[i].lon,
                round1(knots * 10.0),
                course,
            ));
        }
    }
    rows.sort_by_key(|r| (r.0, r.1));

    let mut messages = Vec::with_capacity(rows.len());
    let mut truth = BTreeMap::new();
    for (k, (t, idx, lat, lon, speed, course)) in rows.into_iter().enumerate() {
        let object_id = k as u64 + 1;
        truth.insert(object_id, vessel_ids[idx].clone());
        messages.push(AisMessage {
            object_id,
            vessel_id: vessel_ids[idx].clone(),
            timestamp: spec.start_time + Duration::seconds(t),
            lat,
            lon,
            speed,
            course,
        });
    }
    Ok(SynthOutput {
        messages,
        truth,
        vessel_ids,
    })
}

/// Moves vessel `pair.1` so that it crosses vessel `pair.0` at `crossing_sample`.
/// If the two courses are within 30 degrees, the second is turned 90 degrees.
/// `None` returns an unchanged copy.
pub fn overlap_scenario(
    spec: &SynthSpec,
    pair: Option<(usize, usize)>,
    crossing_sample: usize,
) -> Result<SynthSpec> {
    let Some((a, b)) = pair else {
        return Ok(spec.clone());
    };
    let n = spec.vessels.len();
    if a == b || a >= n || b >= n {
        return Err(Error::InvalidConfig(format!(
            "invalid crossing pair ({a}, {b}) for {n} vessels"
        )));
    }
    if crossing_sample >= spec.points {
        return Err(Error::InvalidConfig(format!(
            "crossing sample {crossing_sample} beyond {} points",
            spec.points
        )));
    }
    let mut out = spec.clone();
    let t = crossing_sample as f64 * spec.period_secs as f64;
    let meet = spec.position(a, t);
    let diff = (out.vessels[b].course_deg - out.vessels[a].course_deg).rem_euclid(360.0);
    if diff.min(360.0 - diff) < 30.0 {
        out.vessels[b].course_deg = (out.vessels[a].course_deg + 90.0).rem_euclid(360.0);
    }
    // The east-west scale depends on the start latitude, so iterate to a fixed point.
    for _ in 0..8 {
        let v = out.vessels[b];
        let (dn, de) = out.displacement_km(&v, t);
        let lat = meet.lat - dn / KM_PER_DEGREE;
        let lon = meet.lon - de / (KM_PER_DEGREE * lat.to_radians().cos());
        out.vessels[b].start = GeoPoint::new(lat, lon);
    }
    Ok(out)
}

pub fn write_truth<W: Write>(out: W, truth: &BTreeMap<u64, String>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["OBJECT_ID", "VID"])?;
    for (id, vid) in truth {
        w.write_record([id.to_string(), vid.clone()])?;
    }
    w.flush().map_err(|e| Error::io("<truth>", e))?;
    Ok(())
}

pub fn read_truth<R: std::io::Read>(input: R) -> Result<BTreeMap<u64, String>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    let find = |n: &str| header.iter().position(|h| h.trim().eq_ignore_ascii_case(n));
    let (id_col, vid_col) = match (find("OBJECT_ID"), find("VID")) {
        (Some(i), Some(v)) => (i, v),
        _ => {
            return Err(Error::BadHeader(
                "truth file needs OBJECT_ID and VID".into(),
            ))
        }
    };
    let mut truth = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record
            .get(id_col)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::MalformedRow {
                line,
                reason: "OBJECT_ID".into(),
            })?;
        let vid = record.get(vid_col).ok_or_else(|| Error::MalformedRow {
            line,
            reason: "VID".into(),
        })?;
        truth.insert(id, vid.trim().to_string());
    }
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{self, group_tracks, ParseMode};
    use crate::preprocess::{resample, LAT, LON};

    fn straight(points: usize) -> SynthSpec {
        let mut s = SynthSpec::fleet(1, points, 7);
        s.vessels[0].amplitude_deg = 0.0;
        s
    }

    #[test]
    fn full_scale_row_count() {
        let out = generate(&SynthSpec::fleet(5, 648, 42)).unwrap();
        assert_eq!(out.messages.len(), 3240);
        assert_eq!(out.truth.len(), 3240);
        let ids: Vec<u64> = out.truth.keys().copied().collect();
        assert_eq!(ids, (1..=3240).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_csv() {
        let mut spec = SynthSpec::fleet(3, 50, 42);
        spec.jitter = 0.2;
        spec.noise_std_deg = 1e-4;
        let render = || {
            let mut buf = Vec::new();
            ingest::write_csv(&mut buf, &generate(&spec).unwrap().messages).unwrap();
            buf
        };
        assert_eq!(render(), render());
    }

    #[test]
    fn output_parses_strictly_and_round_trips() {
        let mut spec = SynthSpec::fleet(4, 80, 3);
        spec.jitter = 0.5;
        spec.noise_std_deg = 1e-4;
        let out = generate(&spec).unwrap();
        let mut buf = Vec::new();
        ingest::write_csv(&mut buf, &out.messages).unwrap();
        let parsed = ingest::parse_csv(buf.as_slice(), ParseMode::Strict).unwrap();
        assert_eq!(parsed.records, out.messages);

        let mut tbuf = Vec::new();
        write_truth(&mut tbuf, &out.truth).unwrap();
        assert_eq!(read_truth(tbuf.as_slice()).unwrap(), out.truth);
    }

    #[test]
    fn jitter_makes_irregular_but_increasing_times() {
        let mut spec = SynthSpec::fleet(1, 200, 5);
        spec.jitter = 0.2;
        let out = generate(&spec).unwrap();
        let tracks = group_tracks(&out.messages);
        let gaps: Vec<i64> = tracks[0]
            .messages
            .windows(2)
            .map(|w| (w[1].timestamp - w[0].timestamp).num_seconds())
            .collect();
        assert!(gaps.iter().all(|&g| g > 0));
        assert!(gaps.iter().any(|&g| g != 5));
        let span =
            (tracks[0].messages[199].timestamp - tracks[0].messages[0].timestamp).num_seconds();
        assert_eq!(span, 199 * 5);
    }

    #[test]
    fn noiseless_tracks_follow_the_motion_model() {
        let spec = SynthSpec::fleet(2, 100, 11);
        let out = generate(&spec).unwrap();
        for (idx, vid) in out.vessel_ids.iter().enumerate() {
            for m in out.messages.iter().filter(|m| &m.vessel_id == vid) {
                let t = (m.timestamp - spec.start_time).num_seconds() as f64;
                let p = spec.position(idx, t);
                assert_eq!((m.lat, m.lon), (p.lat, p.lon));
                assert_eq!(m.course, wrap_course(round1(spec.heading(idx, t) * 10.0)));
            }
        }
    }

    #[test]
    fn straight_track_resamples_exactly() {
        let spec = straight(60);
        let out = generate(&spec).unwrap();
        let track = &group_tracks(&out.messages)[0];
        let reg = resample(track, 5).unwrap();
        assert_eq!(reg.len(), 60);
        for (i, s) in reg.features.iter().enumerate() {
            let p = spec.position(0, i as f64 * 5.0);
            assert_eq!((s[LAT], s[LON]), (p.lat, p.lon));
        }
    }

    #[test]
    fn speed_column_matches_displacement() {
        let spec = straight(20);
        let out = generate(&spec).unwrap();
        let nominal = spec.vessels[0].speed_knots * 10.0;
        for m in &out.messages {
            assert!((m.speed - nominal).abs() < 0.2, "{} vs {nominal}", m.speed);
        }
    }

    #[test]
    fn crossing_pair_meets_near_requested_sample() {
        let spec = SynthSpec::fleet(5, 300, 21);
        let crossed = overlap_scenario(&spec, Some((0, 1)), 150).unwrap();
        let dist = |i: usize| {
            let t = i as f64 * 5.0;
            haversine(
                crossed.position(0, t),
                crossed.position(1, t),
                EARTH_RADIUS_KM,
            )
        };
        let (argmin, min) = (0..300)
            .map(|i| (i, dist(i)))
            .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
        assert!(min < 0.1, "closest approach {min} km");
        assert!((argmin as i64 - 150).abs() <= 2);
        assert_eq!(crossed.vessels[2..], spec.vessels[2..]);
    }

    #[test]
    fn crossing_preconditions() {
        let spec = SynthSpec::fleet(3, 30, 1);
        assert_eq!(overlap_scenario(&spec, None, 5).unwrap(), spec);
        assert!(overlap_scenario(&spec, Some((1, 1)), 5).is_err());
        assert!(overlap_scenario(&spec, Some((0, 3)), 5).is_err());
        assert!(overlap_scenario(&spec, Some((0, 1)), 30).is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut s = SynthSpec::fleet(1, 10, 1);
        s.jitter = 1.0;
        assert!(generate(&s).is_err());
        assert!(generate(&SynthSpec::fleet(0, 10, 1)).is_err());
        assert!(generate(&SynthSpec::fleet(1, 1, 1)).is_err());
    }
}
