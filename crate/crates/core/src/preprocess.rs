//! Resampling onto a fixed grid, min-max scaling and sliding-window construction.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RawTrack;

/// Number of per-sample features: lat, lon, speed, course.
pub const K: usize = 4;
pub const LAT: usize = 0;
pub const LON: usize = 1;
pub const SPEED: usize = 2;
pub const COURSE: usize = 3;

/// Full turn in the course column's unit (tenths of degrees).
pub const FULL_TURN: f64 = 3600.0;

pub type Sample = [f64; K];

/// Evenly spaced multivariate series. Sample `i` sits at `start_time + i * period_secs`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularTrack {
    pub vessel_id: String,
    pub start_time: DateTime<Utc>,
    pub period_secs: u32,
    pub features: Vec<Sample>,
}

impl RegularTrack {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn time_at(&self, index: usize) -> DateTime<Utc> {
        self.start_time + Duration::seconds(index as i64 * self.period_secs as i64)
    }
}

/// Signed shortest angular difference `b - a` in tenths of degrees, in `[-1800, 1800)`.
pub fn course_delta(a: f64, b: f64) -> f64 {
    (b - a + FULL_TURN / 2.0).rem_euclid(FULL_TURN) - FULL_TURN / 2.0
}

pub fn wrap_course(c: f64) -> f64 {
    let r = c.rem_euclid(FULL_TURN);
    if r >= FULL_TURN {
        0.0
    } else {
        r
    }
}

fn lerp(a: f64, b: f64, frac: f64) -> f64 {
    let v = a + (b - a) * frac;
    v.clamp(a.min(b), a.max(b))
}

fn interpolate(a: &Sample, b: &Sample, frac: f64) -> Sample {
    [
        lerp(a[LAT], b[LAT], frac),
        lerp(a[LON], b[LON], frac),
        lerp(a[SPEED], b[SPEED], frac),
        wrap_course(a[COURSE] + course_delta(a[COURSE], b[COURSE]) * frac),
    ]
}

/// Resamples a raw track onto a grid anchored at its first timestamp.
///
/// Lat, lon and speed are interpolated linearly between the bracketing raw
/// messages; course follows the shorter way around the compass. The last grid
/// point never passes the last raw timestamp.
pub fn resample(track: &RawTrack, period_secs: u32) -> Result<RegularTrack> {
    if track.len() < 2 {
        return Err(Error::TrackTooShort {
            vessel_id: track.vessel_id.clone(),
            len: track.len(),
            needed: 2,
        });
    }
    if period_secs == 0 {
        return Err(Error::InvalidConfig(
            "resampling period must be positive".into(),
        ));
    }
    let start = track.messages[0].timestamp;
    let offsets: Vec<i64> = track
        .messages
        .iter()
        .map(|m| (m.timestamp - start).num_seconds())
        .collect();
    let raw: Vec<Sample> = track
        .messages
        .iter()
        .map(|m| [m.lat, m.lon, m.speed, m.course])
        .collect();
    let span = *offsets.last().unwrap();
    let period = period_secs as i64;
    let count = (span / period + 1) as usize;

    let mut features = Vec::with_capacity(count);
    let mut j = 0;
    for i in 0..count {
        let g = i as i64 * period;
        while j + 1 < offsets.len() && offsets[j + 1] <= g {
            j += 1;
        }
        if offsets[j] == g {
            features.push(raw[j]);
        } else {
            let (t0, t1) = (offsets[j], offsets[j + 1]);
            let frac = (g - t0) as f64 / (t1 - t0) as f64;
            features.push(interpolate(&raw[j], &raw[j + 1], frac));
        }
    }
    Ok(RegularTrack {
        vessel_id: track.vessel_id.clone(),
        start_time: start,
        period_secs,
        features,
    })
}

/// Per-feature min/max fitted on a training prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Sample,
    pub max: Sample,
}

impl ScalerParams {
    /// Fits on the first `train_len` samples only.
    pub fn fit(series: &[Sample], train_len: usize) -> Self {
        assert!(
            (1..=series.len()).contains(&train_len),
            "train_len {train_len} outside 1..={}",
            series.len()
        );
        let mut min = [f64::INFINITY; K];
        let mut max = [f64::NEG_INFINITY; K];
        for row in &series[..train_len] {
            for j in 0..K {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        ScalerParams { min, max }
    }

    /// `(x - min) / (max - min)`, or 0.0 for a constant feature.
    pub fn scale(&self, x: &Sample) -> Sample {
        std::array::from_fn(|j| {
            let range = self.max[j] - self.min[j];
            if range == 0.0 {
                0.0
            } else {
                (x[j] - self.min[j]) / range
            }
        })
    }

    /// Inverse of [`scale`](Self::scale) for the (lat, lon) pair.
    pub fn unscale(&self, y: [f64; 2]) -> [f64; 2] {
        std::array::from_fn(|j| self.min[j] + y[j] * (self.max[j] - self.min[j]))
    }

    pub fn scale_series(&self, series: &[Sample]) -> Vec<Sample> {
        series.iter().map(|x| self.scale(x)).collect()
    }
}

pub fn fit_scaler(series: &RegularTrack, train_len: usize) -> ScalerParams {
    ScalerParams::fit(&series.features, train_len)
}

/// Sliding-window training pairs. `inputs[i]` is rows `i..i+m` of the scaled
/// series and `targets[i]` the (lat, lon) of row `i+m`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub inputs: Vec<Vec<Sample>>,
    pub targets: Vec<[f64; 2]>,
    pub window_size: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Builds `train_len - m` windows from the first `train_len` scaled rows.
/// Nothing at or beyond `train_len` is read.
pub fn make_windows(scaled: &[Sample], m: usize, train_len: usize) -> Result<WindowSet> {
    if m == 0 || train_len <= m || train_len > scaled.len() {
        return Err(Error::TrackTooShort {
            vessel_id: String::new(),
            len: train_len.min(scaled.len()),
            needed: m + 1,
        });
    }
    let train = &scaled[..train_len];
    let count = train_len - m;
    let inputs = (0..count).map(|t| train[t..t + m].to_vec()).collect();
    let targets = (0..count)
        .map(|t| [train[t + m][LAT], train[t + m][LON]])
        .collect();
    Ok(WindowSet {
        inputs,
        targets,
        window_size: m,
    })
}
