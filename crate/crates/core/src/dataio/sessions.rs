use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{DateTime, Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::calendar::{calendar_features, CALENDAR_FEATURES};
use super::DataError;

/// One charging event as recorded by a station.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChargingSession {
    pub station_id: String,
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    pub energy_kwh: f64,
}

/// Per-station demand discretized onto a regular slot grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandPanel {
    pub stations: Vec<String>,
    pub interval_minutes: u32,
    /// `demand[station][slot]` in kWh.
    pub demand: Vec<Vec<f64>>,
    /// Raw calendar features per slot.
    pub calendar: Vec<[f64; CALENDAR_FEATURES]>,
    pub slot_times: Vec<NaiveDateTime>,
}

impl DemandPanel {
    pub fn num_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slot_times.len()
    }

    pub fn slots_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }

    /// Write one row per (slot, station).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "slot_time",
            "station_id",
            "demand_kwh",
            "hour",
            "day_of_week",
            "day_of_month",
            "day_of_year",
            "month",
            "year",
        ])?;
        for (t, when) in self.slot_times.iter().enumerate() {
            let cal = &self.calendar[t];
            for (s, id) in self.stations.iter().enumerate() {
                let mut rec = vec![
                    when.format("%Y-%m-%dT%H:%M:%S").to_string(),
                    id.clone(),
                    self.demand[s][t].to_string(),
                ];
                rec.extend(cal.iter().map(|c| format!("{c}")));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn floor_to_grid(t: NaiveDateTime, interval: u32) -> NaiveDateTime {
    let mins = t.hour() * 60 + t.minute();
    let floored = mins - mins % interval;
    t.date().and_hms_opt(floored / 60, floored % 60, 0).expect("valid time")
}

fn ceil_to_grid(t: NaiveDateTime, interval: u32) -> NaiveDateTime {
    let f = floor_to_grid(t, interval);
    if f == t {
        f
    } else {
        f + Duration::minutes(interval as i64)
    }
}

/// Spread each session's energy over the slots it overlaps, proportionally to
/// the overlap duration. The grid runs from the slot holding the earliest start
/// to the slot holding the latest end; slots nobody charged in are zero.
/// Stations are ordered by their earliest session start, ties by id.
pub fn discretize_sessions(sessions: &[ChargingSession], interval_minutes: u32) -> Result<DemandPanel, DataError> {
    if interval_minutes == 0 || 1440 % interval_minutes != 0 {
        return Err(DataError::BadInterval(interval_minutes));
    }
    if sessions.is_empty() {
        return Err(DataError::EmptyInput);
    }
    for s in sessions {
        if !(s.energy_kwh.is_finite() && s.energy_kwh >= 0.0) {
            return Err(DataError::NegativeEnergy {
                station: s.station_id.clone(),
                energy: s.energy_kwh,
            });
        }
        if s.start >= s.end {
            return Err(DataError::InvertedInterval {
                station: s.station_id.clone(),
                start: s.start,
            });
        }
    }

    let mut first_seen: HashMap<&str, NaiveDateTime> = HashMap::new();
    for s in sessions {
        first_seen
            .entry(&s.station_id)
            .and_modify(|t| *t = (*t).min(s.start))
            .or_insert(s.start);
    }
    let mut order: Vec<(&str, NaiveDateTime)> = first_seen.into_iter().collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
    let stations: Vec<String> = order.iter().map(|(id, _)| id.to_string()).collect();
    let index: HashMap<&str, usize> = order.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();

    let t0 = floor_to_grid(
        sessions.iter().map(|s| s.start).min().expect("nonempty"),
        interval_minutes,
    );
    let t1 = ceil_to_grid(
        sessions.iter().map(|s| s.end).max().expect("nonempty"),
        interval_minutes,
    );
    let step = interval_minutes as i64 * 60;
    let n_slots = ((t1 - t0).num_seconds() / step) as usize;

    let mut demand = vec![vec![0.0; n_slots]; stations.len()];
    for s in sessions {
        let row = &mut demand[index[s.station_id.as_str()]];
        let total = (s.end - s.start).num_milliseconds() as f64;
        let first = ((s.start - t0).num_seconds() / step) as usize;
        let mut slot = first;
        loop {
            let lo = t0 + Duration::seconds(slot as i64 * step);
            let hi = lo + Duration::seconds(step);
            if lo >= s.end {
                break;
            }
            let overlap = (hi.min(s.end) - lo.max(s.start)).num_milliseconds() as f64;
            row[slot] += s.energy_kwh * overlap / total;
            slot += 1;
        }
    }

    let slot_times: Vec<NaiveDateTime> = (0..n_slots).map(|k| t0 + Duration::seconds(k as i64 * step)).collect();
    let calendar = slot_times.iter().map(|t| calendar_features(*t)).collect();
    Ok(DemandPanel {
        stations,
        interval_minutes,
        demand,
        calendar,
        slot_times,
    })
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    DateTime::parse_from_rfc3339(s).ok().map(|t| t.naive_local())
}

#[derive(Deserialize)]
struct SessionRow {
    station_id: String,
    start_iso8601: String,
    end_iso8601: String,
    energy_kwh: f64,
}

/// Read `station_id,start_iso8601,end_iso8601,energy_kwh` rows.
pub fn read_sessions_csv<R: Read>(r: R) -> Result<Vec<ChargingSession>, DataError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (line, rec) in rdr.deserialize::<SessionRow>().enumerate() {
        let row = rec?;
        let parse = |s: &str| {
            parse_timestamp(s).ok_or_else(|| DataError::Parse {
                line: line + 2,
                message: format!("bad timestamp `{s}`"),
            })
        };
        out.push(ChargingSession {
            start: parse(&row.start_iso8601)?,
            end: parse(&row.end_iso8601)?,
            station_id: row.station_id,
            energy_kwh: row.energy_kwh,
        });
    }
    Ok(out)
}

pub fn write_sessions_csv<W: Write>(sessions: &[ChargingSession], w: W) -> Result<(), DataError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["station_id", "start_iso8601", "end_iso8601", "energy_kwh"])?;
    for s in sessions {
        out.write_record([
            s.station_id.clone(),
            s.start.format("%Y-%m-%dT%H:%M:%S").to_string(),
            s.end.format("%Y-%m-%dT%H:%M:%S").to_string(),
            s.energy_kwh.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
