//! AIS CSV decoding and per-vessel track assembly.
//!
//! The on-disk schema is the seven-column AIS log
//! `OBJECT_ID,VID,SEQUENCE_DTTM,LAT,LON,SPEED,COURSE`. Columns are matched by
//! name (case-insensitive) so their order in the file is irrelevant.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

pub const HEADER: [&str; 7] = [
    "OBJECT_ID",
    "VID",
    "SEQUENCE_DTTM",
    "LAT",
    "LON",
    "SPEED",
    "COURSE",
];

/// One decoded AIS row. Speed is in tenths of knots, course in tenths of degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AisMessage {
    pub object_id: u64,
    pub vessel_id: String,
    pub timestamp: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    pub speed: f64,
    pub course: f64,
}

/// An AIS row whose vessel id is unknown (or withheld).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub object_id: u64,
    pub timestamp: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    pub speed: f64,
    pub course: f64,
}

impl AisMessage {
    pub fn observation(&self) -> Observation {
        Observation {
            object_id: self.object_id,
            timestamp: self.timestamp,
            lat: self.lat,
            lon: self.lon,
            speed: self.speed,
            course: self.course,
        }
    }
}

/// Chronologically ordered messages from one vessel.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrack {
    pub vessel_id: String,
    pub messages: Vec<AisMessage>,
}

impl RawTrack {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Linear check of the ordering predicate: non-decreasing time, ties by object id.
    pub fn is_chronological(&self) -> bool {
        self.messages.windows(2).all(|w| {
            (w[0].timestamp, w[0].object_id) <= (w[1].timestamp, w[1].object_id)
                && w[0].vessel_id == w[1].vessel_id
        }) && self.messages.iter().all(|m| m.vessel_id == self.vessel_id)
    }

    /// Largest gap between consecutive raw messages, in seconds.
    pub fn max_gap_seconds(&self) -> i64 {
        self.messages
            .windows(2)
            .map(|w| (w[1].timestamp - w[0].timestamp).num_seconds())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

/// Records decoded from a CSV stream plus the rows skipped in lenient mode.
#[derive(Debug)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub skipped: Vec<Error>,
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .ok()
        .map(|t| t.and_utc())
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

struct Columns {
    object_id: usize,
    vid: Option<usize>,
    time: usize,
    lat: usize,
    lon: usize,
    speed: usize,
    course: usize,
    width: usize,
}

impl Columns {
    fn resolve(header: &csv::StringRecord, require_vid: bool) -> Result<Self> {
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(name))
        };
        let need =
            |name: &str| find(name).ok_or_else(|| Error::BadHeader(format!("no {name} column")));
        let vid = find("VID");
        if require_vid && vid.is_none() {
            return Err(Error::BadHeader("no VID column".into()));
        }
        Ok(Columns {
            object_id: need("OBJECT_ID")?,
            vid,
            time: need("SEQUENCE_DTTM")?,
            lat: need("LAT")?,
            lon: need("LON")?,
            speed: need("SPEED")?,
            course: need("COURSE")?,
            width: header.len(),
        })
    }
}

fn number(record: &csv::StringRecord, idx: usize, field: &'static str, line: u64) -> Result<f64> {
    let raw = record[idx].trim();
    raw.parse::<f64>().map_err(|_| Error::MalformedRow {
        line,
        reason: format!("{field}: cannot parse {raw:?} as a number"),
    })
}

fn check(ok: bool, line: u64, field: &'static str, value: f64) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            line,
            field,
            value: value.to_string(),
        })
    }
}

fn decode_row(
    record: &csv::StringRecord,
    cols: &Columns,
    line: u64,
) -> Result<(Option<String>, Observation)> {
    if record.len() != cols.width {
        return Err(Error::MalformedRow {
            line,
            reason: format!("expected {} columns, found {}", cols.width, record.len()),
        });
    }
    let raw_id = record[cols.object_id].trim();
    let object_id = raw_id.parse::<u64>().map_err(|_| Error::MalformedRow {
        line,
        reason: format!("OBJECT_ID: {raw_id:?} is not a non-negative integer"),
    })?;
    if object_id == 0 {
        return Err(Error::OutOfRange {
            line,
            field: "OBJECT_ID",
            value: "0".into(),
        });
    }
    let vid = match cols.vid {
        Some(i) => {
            let v = record[i].trim();
            if v.is_empty() {
                return Err(Error::MalformedRow {
                    line,
                    reason: "VID is empty".into(),
                });
            }
            Some(v.to_string())
        }
        None => None,
    };
    let raw_time = record[cols.time].trim();
    let timestamp = parse_timestamp(raw_time).ok_or_else(|| Error::MalformedRow {
        line,
        reason: format!("SEQUENCE_DTTM: {raw_time:?} is not YYYY-MM-DDTHH:MM:SSZ"),
    })?;
    let lat = number(record, cols.lat, "LAT", line)?;
    let lon = number(record, cols.lon, "LON", line)?;
    let speed = number(record, cols.speed, "SPEED", line)?;
    let course = number(record, cols.course, "COURSE", line)?;
    check((-90.0..=90.0).contains(&lat), line, "LAT", lat)?;
    check((-180.0..=180.0).contains(&lon), line, "LON", lon)?;
    check(speed >= 0.0 && speed.is_finite(), line, "SPEED", speed)?;
    check((0.0..3600.0).contains(&course), line, "COURSE", course)?;
    Ok((
        vid,
        Observation {
            object_id,
            timestamp,
            lat,
            lon,
            speed,
            course,
        },
    ))
}

fn parse_rows<R: Read, T>(
    input: R,
    mode: ParseMode,
    require_vid: bool,
    mut build: impl FnMut(Option<String>, Observation) -> T,
) -> Result<Parsed<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| Error::BadHeader(e.to_string()))?
        .clone();
    let cols = Columns::resolve(&header, require_vid)?;

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for row in reader.records() {
        let outcome = match row {
            Ok(record) => {
                let line = record.position().map_or(0, |p| p.line());
                decode_row(&record, &cols, line)
            }
            Err(e) => Err(Error::MalformedRow {
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            }),
        };
        match outcome {
            Ok((vid, obs)) => records.push(build(vid, obs)),
            Err(e) if mode == ParseMode::Lenient => skipped.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok(Parsed { records, skipped })
}

/// Decodes a labelled AIS log. The VID column is mandatory.
pub fn parse_csv<R: Read>(input: R, mode: ParseMode) -> Result<Parsed<AisMessage>> {
    parse_rows(input, mode, true, |vid, o| AisMessage {
        object_id: o.object_id,
        vessel_id: vid.expect("VID column resolved"),
        timestamp: o.timestamp,
        lat: o.lat,
        lon: o.lon,
        speed: o.speed,
        course: o.course,
    })
}

/// Decodes unlabelled observations. A VID column, if present, is ignored.
pub fn parse_observations<R: Read>(input: R, mode: ParseMode) -> Result<Parsed<Observation>> {
    parse_rows(input, mode, false, |_, o| o)
}

pub fn write_csv<W: Write>(out: W, messages: &[AisMessage]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for m in messages {
        w.write_record([
            m.object_id.to_string(),
            m.vessel_id.clone(),
            format_timestamp(&m.timestamp),
            m.lat.to_string(),
            m.lon.to_string(),
            m.speed.to_string(),
            m.course.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Writes observations in the AIS schema without the VID column.
pub fn write_observations<W: Write>(out: W, observations: &[Observation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "OBJECT_ID",
        "SEQUENCE_DTTM",
        "LAT",
        "LON",
        "SPEED",
        "COURSE",
    ])?;
    for o in observations {
        w.write_record([
            o.object_id.to_string(),
            format_timestamp(&o.timestamp),
            o.lat.to_string(),
            o.lon.to_string(),
            o.speed.to_string(),
            o.course.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Splits messages into one track per vessel, sorted by `(timestamp, object_id)`.
/// Tracks come out in vessel id order.
pub fn group_tracks(messages: &[AisMessage]) -> Vec<RawTrack> {
    let mut by_vessel: BTreeMap<&str, Vec<AisMessage>> = BTreeMap::new();
    for m in messages {
        by_vessel.entry(&m.vessel_id).or_default().push(m.clone());
    }
    by_vessel
        .into_iter()
        .map(|(vid, mut msgs)| {
            msgs.sort_by_key(|m| (m.timestamp, m.object_id));
            RawTrack {
                vessel_id: vid.to_string(),
                messages: msgs,
            }
        })
        .collect()
}

pub fn filter_min_points(tracks: Vec<RawTrack>, threshold: usize) -> Vec<RawTrack> {
    assert!(threshold >= 1, "threshold must be at least 1");
    tracks
        .into_iter()
        .filter(|t| t.len() >= threshold)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: &str = "OBJECT_ID,VID,SEQUENCE_DTTM,LAT,LON,SPEED,COURSE
1,10807db4,2020-02-29T22:00:01Z,37.85671667,23.53735,0,0
2,203d4b0c,2020-02-29T22:00:01Z,37.9483,23.64101667,0,349.9
3,50ee2bf4,2020-02-29T22:00:01Z,37.93902333,23.66884833,0,228.3
4,8b998a42,2020-02-29T22:00:01Z,37.93884,23.66863333,0,0.1
5,3265e660,2020-02-29T22:00:02Z,37.93147167,23.68042667,0,170.1
";

    fn msg(id: u64, vid: &str, secs: i64) -> AisMessage {
        AisMessage {
            object_id: id,
            vessel_id: vid.into(),
            timestamp: DateTime::from_timestamp(1_583_013_600 + secs, 0).unwrap(),
            lat: 37.9,
            lon: 23.6,
            speed: 0.0,
            course: 0.0,
        }
    }

    #[test]
    fn parses_reference_rows() {
        let parsed = parse_csv(TABLE.as_bytes(), ParseMode::Strict).unwrap();
        assert_eq!(parsed.records.len(), 5);
        let first = &parsed.records[0];
        assert_eq!(first.object_id, 1);
        assert_eq!(first.vessel_id, "10807db4");
        assert_eq!(format_timestamp(&first.timestamp), "2020-02-29T22:00:01Z");
        assert_eq!(first.lat, 37.85671667);
        assert_eq!(first.lon, 23.53735);
        assert_eq!(first.speed, 0.0);
        assert_eq!(first.course, 0.0);
    }

    #[test]
    fn header_only_is_empty() {
        let parsed = parse_csv(
            "OBJECT_ID,VID,SEQUENCE_DTTM,LAT,LON,SPEED,COURSE\n".as_bytes(),
            ParseMode::Strict,
        )
        .unwrap();
        assert!(parsed.records.is_empty());
    }

    #[test]
    fn columns_resolved_by_name_in_any_order() {
        let text = "lon,Lat,vid,object_id,course,speed,sequence_dttm\n23.5,37.8,abc,9,10,20,2020-02-29T22:00:01Z\n";
        let parsed = parse_csv(text.as_bytes(), ParseMode::Strict).unwrap();
        let m = &parsed.records[0];
        assert_eq!(
            (m.object_id, m.vessel_id.as_str(), m.lat, m.lon),
            (9, "abc", 37.8, 23.5)
        );
        assert_eq!((m.speed, m.course), (20.0, 10.0));
    }

    #[test]
    fn latitude_out_of_range_is_rejected_in_strict_mode() {
        let text = "OBJECT_ID,VID,SEQUENCE_DTTM,LAT,LON,SPEED,COURSE\n1,a,2020-02-29T22:00:01Z,91.0,23.5,0,0\n";
        match parse_csv(text.as_bytes(), ParseMode::Strict) {
            Err(Error::OutOfRange { field, line, .. }) => {
                assert_eq!(field, "LAT");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lenient_mode_skips_and_counts() {
        let text = "OBJECT_ID,VID,SEQUENCE_DTTM,LAT,LON,SPEED,COURSE
1,a,2020-02-29T22:00:01Z,37.0,23.5,0,0
2,a,2020-02-29T22:00:02Z,abc,23.5,0,0
3,a,2020-02-29T22:00:03Z,37.0,23.5,0
4,a,2020-02-29 22:00:04,37.0,23.5,0,0
5,a,2020-02-29T22:00:05Z,37.0,23.5,0,3600
6,a,2020-02-29T22:00:06Z,37.0,23.5,0,0
";
        let parsed = parse_csv(text.as_bytes(), ParseMode::Lenient).unwrap();
        let ids: Vec<u64> = parsed.records.iter().map(|m| m.object_id).collect();
        assert_eq!(ids, [1, 6]);
        assert_eq!(parsed.skipped.len(), 4);
        assert!(matches!(
            parsed.skipped[0],
            Error::MalformedRow { line: 3, .. }
        ));
        assert!(matches!(
            parsed.skipped[1],
            Error::MalformedRow { line: 4, .. }
        ));
        assert!(matches!(
            parsed.skipped[3],
            Error::OutOfRange {
                field: "COURSE",
                ..
            }
        ));

        assert!(matches!(
            parse_csv(text.as_bytes(), ParseMode::Strict),
            Err(Error::MalformedRow { line: 3, .. })
        ));
    }

    #[test]
    fn missing_column_is_a_header_error() {
        let text = "OBJECT_ID,VID,SEQUENCE_DTTM,LAT,LON,SPEED\n";
        assert!(matches!(
            parse_csv(text.as_bytes(), ParseMode::Strict),
            Err(Error::BadHeader(_))
        ));
    }

    #[test]
    fn observations_ignore_vid() {
        let parsed = parse_observations(TABLE.as_bytes(), ParseMode::Strict).unwrap();
        assert_eq!(parsed.records.len(), 5);
        let mut buf = Vec::new();
        write_observations(&mut buf, &parsed.records).unwrap();
        let again = parse_observations(buf.as_slice(), ParseMode::Strict).unwrap();
        assert_eq!(again.records, parsed.records);
    }

    #[test]
    fn distinct_vessels_give_singleton_tracks() {
        let parsed = parse_csv(TABLE.as_bytes(), ParseMode::Strict).unwrap();
        let tracks = group_tracks(&parsed.records);
        assert_eq!(tracks.len(), 5);
        assert!(tracks.iter().all(|t| t.len() == 1));
    }

    #[test]
    fn reversed_input_is_sorted() {
        let msgs: Vec<_> = (0..6)
            .rev()
            .map(|i| msg(10 + i, "a", i as i64 * 5))
            .collect();
        let tracks = group_tracks(&msgs);
        let times: Vec<_> = tracks[0].messages.iter().map(|m| m.timestamp).collect();
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        assert!(tracks[0].is_chronological());
    }

    #[test]
    fn equal_timestamps_tie_break_on_object_id() {
        let tracks = group_tracks(&[msg(7, "a", 0), msg(3, "a", 0)]);
        let ids: Vec<u64> = tracks[0].messages.iter().map(|m| m.object_id).collect();
        assert_eq!(ids, [3, 7]);
    }

    #[test]
    fn threshold_filter() {
        let track = |n: usize| RawTrack {
            vessel_id: format!("v{n}"),
            messages: (0..n)
                .map(|i| msg(i as u64 + 1, &format!("v{n}"), i as i64))
                .collect(),
        };
        let kept = filter_min_points(vec![track(499), track(500), track(501)], 500);
        let lens: Vec<usize> = kept.iter().map(RawTrack::len).collect();
        assert_eq!(lens, [500, 501]);

        let all = vec![track(1), track(3)];
        assert_eq!(filter_min_points(all.clone(), 1), all);
        assert!(filter_min_points(all, 10).is_empty());
    }
}
