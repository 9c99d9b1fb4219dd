use chrono::{Datelike, NaiveDateTime, Timelike};

pub const CALENDAR_FEATURES: usize = 6;

/// `(hour, weekday Mon=0, day-of-month, day-of-year, month, year)`.
pub fn calendar_features(t: NaiveDateTime) -> [f64; CALENDAR_FEATURES] {
    [
        t.hour() as f64,
        t.weekday().num_days_from_monday() as f64,
        t.day() as f64,
        t.ordinal() as f64,
        t.month() as f64,
        t.year() as f64,
    ]
}

/// Fixed (min, max) used to scale each calendar feature into [0, 1].
pub const CALENDAR_RANGES: [(f64, f64); CALENDAR_FEATURES] = [
    (0.0, 23.0),
    (0.0, 6.0),
    (1.0, 31.0),
    (1.0, 366.0),
    (1.0, 12.0),
    (2000.0, 2100.0),
];

pub fn scale_calendar(raw: &[f64; CALENDAR_FEATURES]) -> [f64; CALENDAR_FEATURES] {
    let mut out = [0.0; CALENDAR_FEATURES];
    for (k, (lo, hi)) in CALENDAR_RANGES.iter().enumerate() {
        out[k] = ((raw[k] - lo) / (hi - lo)).clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn at(y: i32, m: u32, d: u32, hh: u32, mm: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d)
            .unwrap()
            .and_hms_opt(hh, mm, 0)
            .unwrap()
    }

    #[test]
    fn known_dates() {
        assert_eq!(
            calendar_features(at(2018, 1, 1, 0, 0)),
            [0.0, 0.0, 1.0, 1.0, 1.0, 2018.0]
        );
        assert_eq!(
            calendar_features(at(2018, 12, 31, 23, 30)),
            [23.0, 0.0, 31.0, 365.0, 12.0, 2018.0]
        );
        assert_eq!(calendar_features(at(2020, 2, 29, 12, 0))[3], 60.0);
    }

    #[test]
    fn scaled_into_unit_interval() {
        let s = scale_calendar(&calendar_features(at(2019, 7, 14, 18, 30)));
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(scale_calendar(&calendar_features(at(2018, 1, 1, 0, 0)))[0], 0.0);
    }
}
