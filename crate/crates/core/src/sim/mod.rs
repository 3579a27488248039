//! Deterministic home-monitoring workload: ambient sensor samples and daily
//! scripted tasks for a cohort, a seeded share of them corrupted, plus the
//! ground-truth ledger that says what the gateway must conclude.

mod replay;
mod stream;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Number, Value};

pub use replay::{
    replay, BatchBundle, EndpointError, GatewayEndpoint, IngestEndpoint, ReplayError, ReplayMode, ReplayOutcome,
    ReplayReport,
};
pub use stream::{load_stream, write_stream, StreamError};

use crate::digest::sha256_hex;
use crate::gateway::{BatchTotals, Record};
use crate::model::{CideSchema, FieldKind, ViolationCode};
use crate::study;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    DropRequired,
    OutOfRange,
    WrongType,
    UnknownField,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::DropRequired,
        CorruptionKind::OutOfRange,
        CorruptionKind::WrongType,
        CorruptionKind::UnknownField,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviceProfile {
    BedSensor { interval_minutes: u32 },
    MotionSensor { interval_minutes: u32 },
    SleepSurvey,
    CognitiveTask,
}

impl DeviceProfile {
    pub fn task_id(&self) -> &'static str {
        match self {
            DeviceProfile::BedSensor { .. } => study::BED_SENSOR,
            DeviceProfile::MotionSensor { .. } => study::MOTION_SENSOR,
            DeviceProfile::SleepSurvey => study::SLEEP_SURVEY,
            DeviceProfile::CognitiveTask => study::COGNITIVE_TASK,
        }
    }

    fn device_prefix(&self) -> &'static str {
        match self {
            DeviceProfile::BedSensor { .. } => "bed",
            DeviceProfile::MotionSensor { .. } => "pir",
            DeviceProfile::SleepSurvey => "app",
            DeviceProfile::CognitiveTask => "tab",
        }
    }

    /// Standard kit: a bed sensor every 30 minutes, a motion sensor every
    /// hour, one survey and one cognitive task a day.
    pub fn standard_kit() -> Vec<DeviceProfile> {
        vec![
            DeviceProfile::BedSensor { interval_minutes: 30 },
            DeviceProfile::MotionSensor { interval_minutes: 60 },
            DeviceProfile::SleepSurvey,
            DeviceProfile::CognitiveTask,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub participants: u32,
    pub days: u32,
    #[serde(default = "default_study")]
    pub study_id: String,
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
    #[serde(default = "DeviceProfile::standard_kit")]
    pub devices: Vec<DeviceProfile>,
    #[serde(default)]
    pub corruption_rate: f64,
    #[serde(default = "all_kinds")]
    pub corruption_kinds: Vec<CorruptionKind>,
}

fn default_study() -> String {
    "s1".into()
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 3, 1).expect("valid date")
}

fn all_kinds() -> Vec<CorruptionKind> {
    CorruptionKind::ALL.to_vec()
}

impl SimConfig {
    /// The standard kit for `participants` over `days`, all corruption kinds.
    pub fn new(seed: u64, participants: u32, days: u32, corruption_rate: f64) -> Self {
        SimConfig {
            seed,
            participants,
            days,
            study_id: default_study(),
            start_date: default_start(),
            devices: DeviceProfile::standard_kit(),
            corruption_rate,
            corruption_kinds: all_kinds(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.participants == 0 || self.participants > 9999 {
            return bad(format!("participants must be in 1..=9999, got {}", self.participants));
        }
        if self.days == 0 || self.days > 3660 {
            return bad(format!("days must be in 1..=3660, got {}", self.days));
        }
        if !crate::model::ident::is_identifier(&self.study_id) {
            return bad(format!("study_id `{}` is not a valid identifier", self.study_id));
        }
        if self.devices.is_empty() {
            return bad("at least one device profile is required".into());
        }
        let mut tasks: Vec<&str> = self.devices.iter().map(DeviceProfile::task_id).collect();
        tasks.sort_unstable();
        if tasks.windows(2).any(|w| w[0] == w[1]) {
            return bad("each device profile may appear once".into());
        }
        for d in &self.devices {
            if let DeviceProfile::BedSensor { interval_minutes } | DeviceProfile::MotionSensor { interval_minutes } = d
            {
                if *interval_minutes == 0 || *interval_minutes > 1440 {
                    return bad(format!("interval_minutes must be in 1..=1440, got {interval_minutes}"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return bad(format!(
                "corruption_rate must be in [0, 1], got {}",
                self.corruption_rate
            ));
        }
        if self.corruption_rate > 0.0 && self.corruption_kinds.is_empty() {
            return bad("corruption_rate > 0 needs at least one corruption kind".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("INVALID_CONFIG: {0}")]
    InvalidConfig(String),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        "INVALID_CONFIG"
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimBlob {
    pub content: Vec<u8>,
    pub content_type: String,
}

/// One emitted submission. The record never carries an inline blob; replay
/// decides how the blob travels.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    pub record: Record,
    pub blob: Option<SimBlob>,
}

impl SimRecord {
    pub fn record_file(index: usize) -> String {
        format!("records/r{index:05}.json")
    }

    pub fn blob_file(index: usize) -> String {
        format!("blobs/b{index:05}.txt")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedViolation {
    pub field: String,
    pub code: ViolationCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub index: usize,
    pub record_file: String,
    pub participant_id: String,
    pub device_id: String,
    pub task_id: String,
    pub capture_time: String,
    pub corruption: Option<CorruptionKind>,
    pub expected: Verdict,
    pub expected_violations: Vec<ExpectedViolation>,
}

/// Per participant, day, task and numeric field, over gate-valid records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayAggregate {
    pub participant_id: String,
    pub day: NaiveDate,
    pub task_id: String,
    pub field: String,
    pub count: u64,
    /// Exact integer sum for integer fields.
    pub sum: Number,
    pub min: Number,
    pub max: Number,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLedger {
    pub config: SimConfig,
    pub records: Vec<LedgerRecord>,
    pub aggregates: Vec<DayAggregate>,
    /// Every sensitive field value emitted, for containment scans.
    pub sensitive_values: Vec<String>,
}

impl GroundTruthLedger {
    pub fn corrupted_count(&self) -> usize {
        self.records.iter().filter(|r| r.corruption.is_some()).count()
    }

    /// Gateway totals a first complete ingest of the stream must report.
    pub fn expected_totals(&self) -> BatchTotals {
        let received = self.records.len() as u64;
        let rejected = self.records.iter().filter(|r| r.expected == Verdict::Invalid).count() as u64;
        BatchTotals {
            received,
            accepted: received - rejected,
            rejected,
            duplicate: 0,
        }
    }

    pub fn participant_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.participant_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn aggregate(&self, participant_id: &str, day: NaiveDate, task_id: &str, field: &str) -> Option<&DayAggregate> {
        self.aggregates
            .iter()
            .find(|a| a.participant_id == participant_id && a.day == day && a.task_id == task_id && a.field == field)
    }

    pub fn to_document(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("ledger serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStream {
    pub records: Vec<SimRecord>,
}

/// Bounded random walk.
struct Walk {
    value: f64,
    step: f64,
    lo: f64,
    hi: f64,
}

impl Walk {
    fn start(rng: &mut ChaCha8Rng, lo: f64, hi: f64, step: f64) -> Self {
        let value = rng.gen_range(lo..=hi);
        Walk { value, step, lo, hi }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        self.value = (self.value + rng.gen_range(-self.step..=self.step)).clamp(self.lo, self.hi);
        self.value
    }
}

fn tenths(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn thousandths(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

const NOTE_OPENERS: [&str; 6] = [
    "Woke after a vivid dream about",
    "Restless night, kept thinking about",
    "Neighbour's dog barked, then worried about",
    "Took a late nap, mind busy with",
    "Back pain flared while planning",
    "Slept in the armchair after calling about",
];

const NOTE_TOPICS: [&str; 6] = [
    "my sister's hospital visit",
    "the pharmacy refill",
    "grandson Tobias moving abroad",
    "the broken boiler",
    "the dentist appointment",
    "money for the roof repair",
];

struct ParticipantState {
    heart_rate: Walk,
    respiration: Walk,
    motion: Walk,
    sleep_minutes: Walk,
    score: Walk,
    reaction_ms: Walk,
}

impl ParticipantState {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        ParticipantState {
            heart_rate: Walk::start(rng, 50.0, 80.0, 3.0),
            respiration: Walk::start(rng, 11.0, 18.0, 0.6),
            motion: Walk::start(rng, 0.0, 20.0, 6.0),
            sleep_minutes: Walk::start(rng, 300.0, 480.0, 45.0),
            score: Walk::start(rng, 55.0, 90.0, 6.0),
            reaction_ms: Walk::start(rng, 350.0, 900.0, 60.0),
        }
    }
}

fn payload(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("payload literals are objects"),
    }
}

/// Generates the stream and its ledger. Identical configs give identical output.
pub fn generate(config: &SimConfig) -> Result<(SimStream, GroundTruthLedger), SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let participants: Vec<String> = (1..=config.participants).map(|p| format!("pt-{p:04}")).collect();
    let mut states: Vec<ParticipantState> = participants.iter().map(|_| ParticipantState::new(&mut rng)).collect();
    let mut records = Vec::new();
    let mut sensitive_values = Vec::new();

    for day_index in 0..config.days {
        let day = config.start_date + chrono::Days::new(day_index as u64);
        let midnight = Timestamp::parse(&format!("{day}T00:00:00Z")).expect("valid midnight");
        for (p, participant_id) in participants.iter().enumerate() {
            let state = &mut states[p];
            for device in &config.devices {
                let device_id = format!("{}-{:04}", device.device_prefix(), p + 1);
                let mut emit = |at: Timestamp, payload: Map<String, Value>, blob: Option<SimBlob>| {
                    records.push(SimRecord {
                        record: Record {
                            study_id: config.study_id.clone(),
                            participant_id: participant_id.clone(),
                            device_id: device_id.clone(),
                            task_id: device.task_id().to_string(),
                            capture_time: at.to_string(),
                            payload,
                            blob: None,
                            client_checksum: blob.as_ref().map(|b| sha256_hex(&b.content)),
                        },
                        blob,
                    })
                };
                match device {
                    DeviceProfile::BedSensor { interval_minutes } => {
                        for k in 0..(1440 / interval_minutes) {
                            let at = midnight.plus_seconds(k as i64 * *interval_minutes as i64 * 60);
                            let hr = tenths(state.heart_rate.next(&mut rng));
                            let rr = tenths(state.respiration.next(&mut rng));
                            emit(at, payload(json!({"heart_rate": hr, "respiration_rate": rr})), None);
                        }
                    }
                    DeviceProfile::MotionSensor { interval_minutes } => {
                        for k in 0..(1440 / interval_minutes) {
                            let at = midnight.plus_seconds(k as i64 * *interval_minutes as i64 * 60);
                            let events = state.motion.next(&mut rng).round() as i64;
                            let room = ["bedroom", "kitchen", "living_room", "bathroom"][rng.gen_range(0..4)];
                            emit(at, payload(json!({"motion_events": events, "room": room})), None);
                        }
                    }
                    DeviceProfile::SleepSurvey => {
                        let at = midnight.plus_seconds(7 * 3600 + rng.gen_range(0..90) * 60);
                        let minutes = state.sleep_minutes.next(&mut rng).round() as i64;
                        let awakenings: i64 = rng.gen_range(0..=6);
                        let efficiency = thousandths(rng.gen_range(0.6..0.98));
                        let quality = ["poor", "fair", "good", "excellent"][rng.gen_range(0..4)];
                        let mut body = payload(json!({
                            "sleep_minutes": minutes,
                            "awakenings": awakenings,
                            "sleep_efficiency": efficiency,
                            "sleep_quality": quality,
                        }));
                        if rng.gen_bool(0.5) {
                            let note = format!(
                                "{} {} (ref {:08x})",
                                NOTE_OPENERS.choose(&mut rng).expect("non-empty"),
                                NOTE_TOPICS.choose(&mut rng).expect("non-empty"),
                                rng.gen::<u32>()
                            );
                            sensitive_values.push(note.clone());
                            body.insert("note".into(), Value::String(note));
                        }
                        emit(at, body, None);
                    }
                    DeviceProfile::CognitiveTask => {
                        let at = midnight.plus_seconds(15 * 3600 + rng.gen_range(0..120) * 60);
                        let score = state.score.next(&mut rng).round() as i64;
                        let reaction = state.reaction_ms.next(&mut rng).round() as i64;
                        let recalled: u32 = rng.gen_range(3..=12);
                        let content = format!(
                            "word recall session {day} device {device_id}\nrecalled {recalled} of 12 words\nscore {score}\n"
                        )
                        .into_bytes();
                        let transcript = sha256_hex(&content);
                        emit(
                            at,
                            payload(json!({"score": score, "reaction_ms": reaction, "transcript": transcript})),
                            Some(SimBlob {
                                content,
                                content_type: "text/plain".into(),
                            }),
                        );
                    }
                }
            }
        }
    }

    let schemas: BTreeMap<String, CideSchema> = study::cide_schemas()
        .into_iter()
        .map(|s| (s.task_id.clone(), s))
        .collect();
    let total = records.len();
    let corrupt_count = (config.corruption_rate * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut corruption: BTreeMap<usize, (CorruptionKind, ExpectedViolation)> = BTreeMap::new();
    for &index in &order[..corrupt_count] {
        let kind = *config.corruption_kinds.choose(&mut rng).expect("validated non-empty");
        let schema = &schemas[&records[index].record.task_id];
        let violation = corrupt(&mut records[index].record.payload, schema, kind, &mut rng);
        corruption.insert(index, (kind, violation));
    }

    let ledger_records: Vec<LedgerRecord> = records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let c = corruption.get(&index);
            LedgerRecord {
                index,
                record_file: SimRecord::record_file(index),
                participant_id: r.record.participant_id.clone(),
                device_id: r.record.device_id.clone(),
                task_id: r.record.task_id.clone(),
                capture_time: r.record.capture_time.clone(),
                corruption: c.map(|(k, _)| *k),
                expected: if c.is_some() { Verdict::Invalid } else { Verdict::Valid },
                expected_violations: c.map(|(_, v)| vec![v.clone()]).unwrap_or_default(),
            }
        })
        .collect();
    let aggregates = day_aggregates(&records, &ledger_records, &schemas);
    let ledger = GroundTruthLedger {
        config: config.clone(),
        records: ledger_records,
        aggregates,
        sensitive_values,
    };
    Ok((SimStream { records }, ledger))
}

/// Applies one corruption and returns the single violation it must cause.
fn corrupt(
    payload: &mut Map<String, Value>,
    schema: &CideSchema,
    kind: CorruptionKind,
    rng: &mut ChaCha8Rng,
) -> ExpectedViolation {
    let violation = |field: &str, code| ExpectedViolation {
        field: field.to_string(),
        code,
    };
    match kind {
        CorruptionKind::DropRequired => {
            let required: Vec<&str> = schema
                .fields
                .iter()
                .filter(|f| f.required)
                .map(|f| f.name.as_str())
                .collect();
            let field = *required.choose(rng).expect("every study task has required fields");
            payload.remove(field);
            violation(field, ViolationCode::MissingRequired)
        }
        CorruptionKind::OutOfRange => {
            let ranged: Vec<_> = schema
                .fields
                .iter()
                .filter(|f| f.kind.is_numeric() && f.constraints.max.is_some())
                .collect();
            let spec = *ranged
                .choose(rng)
                .expect("every study task has a bounded numeric field");
            let max = spec.constraints.max.expect("filtered");
            let value = match spec.kind {
                FieldKind::Integer => Value::from(max as i64 + rng.gen_range(1..=100)),
                _ => json!(tenths(max + rng.gen_range(1.0..10.0))),
            };
            payload.insert(spec.name.clone(), value);
            violation(&spec.name, ViolationCode::RangeViolation)
        }
        CorruptionKind::WrongType => {
            let present: Vec<_> = schema.fields.iter().filter(|f| payload.contains_key(&f.name)).collect();
            let spec = *present.choose(rng).expect("payload has schema fields");
            let value = if spec.kind.is_numeric() { json!("n/a") } else { json!(7) };
            payload.insert(spec.name.clone(), value);
            violation(&spec.name, ViolationCode::TypeMismatch)
        }
        CorruptionKind::UnknownField => {
            payload.insert("firmware_debug".into(), json!("fw-2.3.1"));
            violation("firmware_debug", ViolationCode::UnknownField)
        }
    }
}

fn day_aggregates(
    records: &[SimRecord],
    ledger: &[LedgerRecord],
    schemas: &BTreeMap<String, CideSchema>,
) -> Vec<DayAggregate> {
    #[derive(Default)]
    struct Acc {
        count: u64,
        int_sum: i128,
        float_sum: f64,
        values: Vec<Number>,
    }
    let mut accs: BTreeMap<(String, NaiveDate, String, String), (FieldKind, Acc)> = BTreeMap::new();
    for (r, l) in records.iter().zip(ledger) {
        if l.expected != Verdict::Valid {
            continue;
        }
        let day = Timestamp::parse(&r.record.capture_time).expect("generated time").date();
        for spec in schemas[&r.record.task_id].fields.iter().filter(|f| f.kind.is_numeric()) {
            let Some(Value::Number(n)) = r.record.payload.get(&spec.name) else {
                continue;
            };
            let key = (
                r.record.participant_id.clone(),
                day,
                r.record.task_id.clone(),
                spec.name.clone(),
            );
            let (_, acc) = accs.entry(key).or_insert_with(|| (spec.kind, Acc::default()));
            acc.count += 1;
            match n.as_i64() {
                Some(i) if spec.kind == FieldKind::Integer => acc.int_sum += i as i128,
                _ => acc.float_sum += n.as_f64().expect("finite"),
            }
            acc.values.push(n.clone());
        }
    }
    accs.into_iter()
        .map(|((participant_id, day, task_id, field), (kind, acc))| {
            let by_value = |a: &&Number, b: &&Number| a.as_f64().partial_cmp(&b.as_f64()).expect("finite");
            let min = acc.values.iter().min_by(by_value).expect("non-empty").clone();
            let max = acc.values.iter().max_by(by_value).expect("non-empty").clone();
            let (sum, mean) = if kind == FieldKind::Integer {
                let s = i64::try_from(acc.int_sum).expect("sums fit in i64");
                (Number::from(s), acc.int_sum as f64 / acc.count as f64)
            } else {
                (
                    Number::from_f64(acc.float_sum).expect("finite"),
                    acc.float_sum / acc.count as f64,
                )
            };
            DayAggregate {
                participant_id,
                day,
                task_id,
                field,
                count: acc.count,
                sum,
                min,
                max,
                mean,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
