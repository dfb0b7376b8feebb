use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, SecondsFormat, TimeZone, Utc};

/// Parses an ISO-8601 timestamp into UTC.
///
/// Accepts RFC 3339 with any offset, a naive `YYYY-MM-DDTHH:MM:SS[.f]`
/// (interpreted as UTC) and a bare `YYYY-MM-DD`.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&t));
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).unwrap()))
}

/// Canonical form: RFC 3339, UTC, second precision, `Z` suffix.
pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn normalize_timestamp(s: &str) -> Option<String> {
    parse_timestamp(s).map(|t| format_timestamp(&t))
}

pub fn utc_year(s: &str) -> Option<i32> {
    parse_timestamp(s).map(|t| t.year())
}

pub fn year_start(year: i32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(year, 1, 1, 0, 0, 0).unwrap()
}

pub fn year_end(year: i32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(year, 12, 31, 23, 59, 59).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepted_forms_normalize() {
        assert_eq!(normalize_timestamp("2020-03-01").unwrap(), "2020-03-01T00:00:00Z");
        assert_eq!(
            normalize_timestamp("2020-03-01T12:00:00+02:00").unwrap(),
            "2020-03-01T10:00:00Z"
        );
        assert_eq!(normalize_timestamp("2020-03-01T10:00:00").unwrap(), "2020-03-01T10:00:00Z");
        assert!(normalize_timestamp("yesterday").is_none());
        assert_eq!(utc_year("2019-12-31T23:30:00-01:00"), Some(2020));
    }
}
