//! UTC timestamps and clocks.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, Duration, NaiveDate, SecondsFormat, TimeZone, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// An instant in UTC, exchanged as an RFC 3339 string with a zero offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(DateTime<Utc>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("`{0}` is not an RFC 3339 UTC timestamp")]
pub struct TimestampError(pub String);

impl Timestamp {
    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Timestamp(dt)
    }

    pub fn from_unix_seconds(secs: i64) -> Option<Self> {
        Utc.timestamp_opt(secs, 0).single().map(Timestamp)
    }

    /// Parses an RFC 3339 string. Only `Z` or a `+00:00`/`-00:00` offset is accepted.
    pub fn parse(s: &str) -> Result<Self, TimestampError> {
        let parsed = DateTime::parse_from_rfc3339(s).map_err(|_| TimestampError(s.to_string()))?;
        if parsed.offset().local_minus_utc() != 0 {
            return Err(TimestampError(s.to_string()));
        }
        Ok(Timestamp(parsed.with_timezone(&Utc)))
    }

    pub fn datetime(&self) -> DateTime<Utc> {
        self.0
    }

    pub fn unix_seconds(&self) -> i64 {
        self.0.timestamp()
    }

    pub fn date(&self) -> NaiveDate {
        self.0.date_naive()
    }

    pub fn start_of_day(&self) -> Timestamp {
        Timestamp(self.0.date_naive().and_hms_opt(0, 0, 0).unwrap().and_utc())
    }

    pub fn start_of_hour(&self) -> Timestamp {
        let dt = self.0;
        Timestamp(dt.date_naive().and_hms_opt(dt.hour(), 0, 0).unwrap().and_utc())
    }

    pub fn plus_seconds(&self, secs: i64) -> Timestamp {
        Timestamp(self.0 + Duration::seconds(secs))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.to_rfc3339_opts(SecondsFormat::AutoSi, true))
    }
}

impl FromStr for Timestamp {
    type Err = TimestampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Source of "now". Everything that stamps records takes one so tests can pin time.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp(Utc::now())
    }
}

/// A clock that always reads the same instant.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub Timestamp);

impl Clock for FixedClock {
    fn now(&self) -> Timestamp {
        self.0
    }
}

/// A clock that starts at a fixed instant and advances one second per reading.
#[derive(Debug)]
pub struct SteppingClock {
    next: AtomicI64,
}

impl SteppingClock {
    pub fn starting_at(start: Timestamp) -> Self {
        SteppingClock {
            next: AtomicI64::new(start.unix_seconds()),
        }
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> Timestamp {
        let secs = self.next.fetch_add(1, Ordering::SeqCst);
        Timestamp::from_unix_seconds(secs).expect("clock within chrono range")
    }
}
