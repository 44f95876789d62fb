//! Raw event-log ingestion: click filtering, tag resolution, sessionization
//! into journeys, and the journeys JSON-lines format.
//!
//! A journey is an "event-interval-event" sequence. Each event after the first
//! carries `gap_s`, the seconds elapsed since the previous event. The gap that
//! precedes event `i + 1` is the time spent in the state opened by event `i`,
//! so downstream code attributes it to the genre of event `i`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest gap (seconds) emitted for events sharing a timestamp.
pub const MIN_GAP_S: f64 = 0.001;

/// Default inactivity threshold that closes a journey.
pub const DEFAULT_GAP_THRESHOLD_S: f64 = 1800.0;

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("line {line}: malformed timestamp {value:?}")]
    Timestamp { line: usize, value: String },
    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("missing required column {0:?} in header")]
    MissingColumn(String),
    #[error("customer {customer}: event at {timestamp} ms precedes the previous event (out-of-order data)")]
    NegativeGap { customer: String, timestamp: i64 },
    #[error("customer {customer}: {msg}")]
    Structure { customer: String, msg: String },
    #[error("journeys file line {line}: {msg}")]
    Journal { line: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Churn outcome attached to a customer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChurnLabel {
    Active,
    Cancelled,
}

impl ChurnLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ChurnLabel::Active => "active",
            ChurnLabel::Cancelled => "cancelled",
        }
    }

    /// Single-letter code used in dendrogram leaf labels.
    pub fn code(self) -> char {
        match self {
            ChurnLabel::Active => 'A',
            ChurnLabel::Cancelled => 'C',
        }
    }
}

impl fmt::Display for ChurnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChurnLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "active" | "a" | "0" => Ok(ChurnLabel::Active),
            "cancelled" | "canceled" | "c" | "1" => Ok(ChurnLabel::Cancelled),
            other => Err(format!("unknown churn label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEventRecord {
    pub customer_id: String,
    pub timestamp_ms: i64,
    pub event_id: String,
    pub event_spec: Vec<String>,
    pub url_context: Option<String>,
    pub channel: Option<String>,
    pub genre: Option<u8>,
}

/// The two reference tables used to pick click events out of the raw stream
/// and give them short tags.
#[derive(Debug, Clone, Default)]
pub struct LabelTables {
    pub click_events: HashSet<String>,
    /// `(event_id, url_context)` → tag. An empty url acts as a wildcard for
    /// the event id.
    pub context_labels: HashMap<(String, String), String>,
}

impl LabelTables {
    pub fn resolve(&self, event_id: &str, url: Option<&str>) -> Option<&str> {
        let url = url.unwrap_or("");
        self.context_labels
            .get(&(event_id.to_string(), url.to_string()))
            .or_else(|| self.context_labels.get(&(event_id.to_string(), String::new())))
            .map(String::as_str)
    }

    /// Loads the click-event table (`event_id`, extra columns ignored) and the
    /// context table (`event_id,url,tag`). Both files carry a header row.
    pub fn from_readers<R1: Read, R2: Read>(
        clicks: R1,
        contexts: R2,
        delimiter: u8,
    ) -> Result<Self, EventLogError> {
        let mut tables = LabelTables::default();
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .flexible(true)
            .from_reader(clicks);
        for rec in rdr.records() {
            let rec = rec?;
            if let Some(id) = rec.get(0).map(str::trim).filter(|s| !s.is_empty()) {
                tables.click_events.insert(id.to_string());
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .flexible(true)
            .from_reader(contexts);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let (id, url, tag) = match (rec.get(0), rec.get(1), rec.get(2)) {
                (Some(id), Some(url), Some(tag)) => (id.trim(), url.trim(), tag.trim()),
                (Some(id), Some(tag), None) => (id.trim(), "", tag.trim()),
                _ => {
                    return Err(EventLogError::Record {
                        line,
                        msg: "context table rows need event_id[,url],tag".into(),
                    })
                }
            };
            let key = (id.to_string(), url.to_string());
            if tables.context_labels.insert(key, tag.to_string()).is_some() {
                return Err(EventLogError::Record {
                    line,
                    msg: format!("duplicate context label for ({id:?}, {url:?})"),
                });
            }
        }
        Ok(tables)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledEvent {
    pub customer_id: String,
    pub timestamp_ms: i64,
    pub tag: String,
    pub genre: Option<u8>,
    pub channel: Option<String>,
}

/// Counters produced while filtering the raw stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub read: usize,
    /// Records whose event id is not a click event.
    pub dropped_non_click: usize,
    /// Click records whose `(event_id, url)` pair has no tag.
    pub unresolved: usize,
}

/// Keeps click records, resolves their tags and sorts the result by
/// `(customer_id, timestamp)`. The sort is stable, so simultaneous events keep
/// their input order.
pub fn parse_and_label<I>(records: I, tables: &LabelTables) -> (Vec<LabelledEvent>, ParseStats)
where
    I: IntoIterator<Item = RawEventRecord>,
{
    let mut stats = ParseStats::default();
    let mut out = Vec::new();
    for rec in records {
        stats.read += 1;
        if !tables.click_events.contains(&rec.event_id) {
            stats.dropped_non_click += 1;
            continue;
        }
        match tables.resolve(&rec.event_id, rec.url_context.as_deref()) {
            Some(tag) => out.push(LabelledEvent {
                customer_id: rec.customer_id,
                timestamp_ms: rec.timestamp_ms,
                tag: tag.to_string(),
                genre: rec.genre,
                channel: rec.channel,
            }),
            None => {
                stats.unresolved += 1;
                log::warn!(
                    "no tag for event {:?} with context {:?}",
                    rec.event_id,
                    rec.url_context
                );
            }
        }
    }
    out.sort_by(|a, b| {
        a.customer_id
            .cmp(&b.customer_id)
            .then(a.timestamp_ms.cmp(&b.timestamp_ms))
    });
    (out, stats)
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    if let Ok(v) = raw.parse::<i64>() {
        return (v >= 0).then_some(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return (v.is_finite() && v >= 0.0).then_some(v.round() as i64);
    }
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%d/%m/%Y %H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S",
    ];
    FORMATS.iter().find_map(|fmt| {
        NaiveDateTime::parse_from_str(raw, fmt)
            .ok()
            .map(|dt| dt.and_utc().timestamp_millis())
            .filter(|ms| *ms >= 0)
    })
}

fn normalize_header(h: &str) -> String {
    h.trim().to_ascii_uppercase().replace([' ', '-'], "_")
}

/// Reads a delimited raw log. The header must name `customer_id`,
/// `EVENT_DT_TM`, `EVENT_ID`, `EVENT_SPEC_1` and `URL` (case-insensitive,
/// spaces and underscores interchangeable). Optional columns: further
/// `EVENT_SPEC_n`, `CHANNEL`, `GENRE`. Line numbers in errors are 1-based and
/// count the header.
pub fn read_raw_log<R: Read>(reader: R, delimiter: u8) -> Result<Vec<RawEventRecord>, EventLogError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(normalize_header).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| find(name).ok_or_else(|| EventLogError::MissingColumn(name.into()));
    let customer_col = need("CUSTOMER_ID")?;
    let ts_col = need("EVENT_DT_TM")?;
    let id_col = need("EVENT_ID")?;
    need("EVENT_SPEC_1")?;
    let url_col = need("URL")?;
    let channel_col = find("CHANNEL");
    let genre_col = find("GENRE");
    let mut spec_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix("EVENT_SPEC_")
                .and_then(|n| n.parse::<usize>().ok())
                .map(|n| (n, i))
        })
        .collect();
    spec_cols.sort_unstable();

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let ts_raw = field(ts_col);
        let timestamp_ms = parse_timestamp(ts_raw).ok_or_else(|| EventLogError::Timestamp {
            line,
            value: ts_raw.to_string(),
        })?;
        let event_id = field(id_col);
        if event_id.is_empty() {
            return Err(EventLogError::Record {
                line,
                msg: "empty EVENT_ID".into(),
            });
        }
        let genre = match genre_col.map(field).filter(|s| !s.is_empty()) {
            None => None,
            Some(g) => Some(g.parse::<u8>().map_err(|_| EventLogError::Record {
                line,
                msg: format!("genre {g:?} is not a category index"),
            })?),
        };
        let nonempty = |s: &str| (!s.is_empty()).then(|| s.to_string());
        out.push(RawEventRecord {
            customer_id: field(customer_col).to_string(),
            timestamp_ms,
            event_id: event_id.to_string(),
            event_spec: spec_cols.iter().map(|&(_, c)| field(c).to_string()).collect(),
            url_context: nonempty(field(url_col)),
            channel: channel_col.map(field).and_then(nonempty),
            genre,
        });
    }
    Ok(out)
}

/// One event of a journey as stored in the journeys file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JourneyEvent {
    pub tag: String,
    pub genre: Option<u8>,
    /// Seconds since the previous event; absent for the first event.
    pub gap_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Journey {
    pub customer_id: String,
    /// 1-based ordinal within the customer.
    pub journey_index: usize,
    pub start_ms: i64,
    pub end_ms: i64,
    pub channel: String,
    pub events: Vec<JourneyEvent>,
    /// Optional journey-level predictor for the event-count model.
    pub covariate: Option<f64>,
}

impl Journey {
    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    /// Gaps in event order (length `n_events - 1`).
    pub fn gaps(&self) -> impl Iterator<Item = f64> + '_ {
        self.events.iter().filter_map(|e| e.gap_s)
    }

    pub fn total_duration_s(&self) -> f64 {
        self.gaps().sum()
    }

    pub fn genres(&self) -> impl Iterator<Item = Option<u8>> + '_ {
        self.events.iter().map(|e| e.genre)
    }

    /// Reconstructs labelled events (timestamps rebuilt from whole-ms gaps).
    pub fn to_events(&self) -> Vec<LabelledEvent> {
        let mut t = self.start_ms;
        self.events
            .iter()
            .map(|e| {
                if let Some(g) = e.gap_s {
                    t += (g * 1000.0).round() as i64;
                }
                LabelledEvent {
                    customer_id: self.customer_id.clone(),
                    timestamp_ms: t,
                    tag: e.tag.clone(),
                    genre: e.genre,
                    channel: (!self.channel.is_empty()).then(|| self.channel.clone()),
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<(), String> {
        let Some(first) = self.events.first() else {
            return Err("journey has no events".into());
        };
        if first.gap_s.is_some() {
            return Err("first event must not carry a gap".into());
        }
        for e in &self.events[1..] {
            match e.gap_s {
                Some(g) if g > 0.0 && g.is_finite() => {}
                Some(g) => return Err(format!("non-positive gap {g}")),
                None => return Err("missing gap after the first event".into()),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CustomerJourneys {
    pub customer_id: String,
    pub label: Option<ChurnLabel>,
    pub journeys: Vec<Journey>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub customers: Vec<CustomerJourneys>,
}

impl Dataset {
    pub fn n_customers(&self) -> usize {
        self.customers.len()
    }

    pub fn n_journeys(&self) -> usize {
        self.customers.iter().map(|c| c.journeys.len()).sum()
    }

    pub fn n_events(&self) -> usize {
        self.customers
            .iter()
            .flat_map(|c| &c.journeys)
            .map(Journey::n_events)
            .sum()
    }

    pub fn is_labelled(&self) -> bool {
        !self.customers.is_empty() && self.customers.iter().all(|c| c.label.is_some())
    }

    /// Checks the structural invariants: contiguous journey indices from 1,
    /// positive gaps, and labels on all customers or none.
    pub fn validate(&self) -> Result<(), EventLogError> {
        let labelled = self.customers.iter().filter(|c| c.label.is_some()).count();
        if labelled != 0 && labelled != self.customers.len() {
            return Err(EventLogError::Structure {
                customer: "*".into(),
                msg: "churn labels must be present for all customers or for none".into(),
            });
        }
        let mut seen = HashSet::new();
        for c in &self.customers {
            if !seen.insert(c.customer_id.as_str()) {
                return Err(EventLogError::Structure {
                    customer: c.customer_id.clone(),
                    msg: "customer listed twice".into(),
                });
            }
            for (i, j) in c.journeys.iter().enumerate() {
                if j.journey_index != i + 1 {
                    return Err(EventLogError::Structure {
                        customer: c.customer_id.clone(),
                        msg: format!(
                            "journey indices must be contiguous from 1 (found {} at position {})",
                            j.journey_index,
                            i + 1
                        ),
                    });
                }
                j.validate().map_err(|msg| EventLogError::Structure {
                    customer: c.customer_id.clone(),
                    msg: format!("journey {}: {msg}", j.journey_index),
                })?;
            }
        }
        Ok(())
    }

    /// Attaches labels by customer id. Customers missing from `labels` keep
    /// `None`, which `validate` rejects if any other customer is labelled.
    pub fn apply_labels(&mut self, labels: &HashMap<String, ChurnLabel>) {
        for c in &mut self.customers {
            c.label = labels.get(&c.customer_id).copied();
        }
    }
}

/// Session-boundary rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionRule {
    /// Tags that always open a new journey (power-on, box wake-up...).
    pub power_on_tags: Vec<String>,
    /// A gap strictly longer than this many seconds opens a new journey.
    pub gap_threshold_s: f64,
    /// Channel → genre lookup used for events without their own genre.
    pub channel_genres: BTreeMap<String, u8>,
}

impl Default for SessionRule {
    fn default() -> Self {
        Self {
            power_on_tags: Vec::new(),
            gap_threshold_s: DEFAULT_GAP_THRESHOLD_S,
            channel_genres: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub journeys: usize,
    /// Zero gaps floored to [`MIN_GAP_S`].
    pub floored_gaps: usize,
    /// Events whose genre stayed unknown after the channel fallback.
    pub missing_genre: usize,
}

/// Splits sorted labelled events into journeys, returning them grouped per
/// customer in first-appearance order.
pub fn build_journeys(
    events: &[LabelledEvent],
    rule: &SessionRule,
) -> Result<(Dataset, SessionStats), EventLogError> {
    let power_on: HashSet<&str> = rule.power_on_tags.iter().map(String::as_str).collect();
    let mut stats = SessionStats::default();
    let mut customers: Vec<CustomerJourneys> = Vec::new();

    let mut pending: Vec<&LabelledEvent> = Vec::new();
    let flush = |pending: &mut Vec<&LabelledEvent>,
                 customers: &mut Vec<CustomerJourneys>,
                 stats: &mut SessionStats| {
        if pending.is_empty() {
            return;
        }
        let journey = assemble_journey(pending, rule, stats);
        match customers.last_mut() {
            Some(c) if c.customer_id == journey.customer_id => {
                let mut journey = journey;
                journey.journey_index = c.journeys.len() + 1;
                c.journeys.push(journey);
            }
            _ => customers.push(CustomerJourneys {
                customer_id: journey.customer_id.clone(),
                label: None,
                journeys: vec![journey],
            }),
        }
        stats.journeys += 1;
        pending.clear();
    };

    for ev in events {
        if let Some(prev) = pending.last() {
            if prev.customer_id != ev.customer_id {
                if customers.iter().any(|c| c.customer_id == ev.customer_id) {
                    return Err(EventLogError::Structure {
                        customer: ev.customer_id.clone(),
                        msg: "events are not grouped by customer".into(),
                    });
                }
                flush(&mut pending, &mut customers, &mut stats);
            } else {
                let dt = ev.timestamp_ms - prev.timestamp_ms;
                if dt < 0 {
                    return Err(EventLogError::NegativeGap {
                        customer: ev.customer_id.clone(),
                        timestamp: ev.timestamp_ms,
                    });
                }
                let boundary =
                    power_on.contains(ev.tag.as_str()) || dt as f64 / 1000.0 > rule.gap_threshold_s;
                if boundary {
                    flush(&mut pending, &mut customers, &mut stats);
                }
            }
        }
        pending.push(ev);
    }
    flush(&mut pending, &mut customers, &mut stats);
    Ok((Dataset { customers }, stats))
}

fn assemble_journey(events: &[&LabelledEvent], rule: &SessionRule, stats: &mut SessionStats) -> Journey {
    let channel = events
        .iter()
        .rev()
        .find_map(|e| e.channel.clone())
        .unwrap_or_default();
    let journey_genre = rule.channel_genres.get(&channel).copied();
    let mut out = Vec::with_capacity(events.len());
    for (i, ev) in events.iter().enumerate() {
        let gap_s = if i == 0 {
            None
        } else {
            let dt = (ev.timestamp_ms - events[i - 1].timestamp_ms) as f64 / 1000.0;
            if dt <= 0.0 {
                stats.floored_gaps += 1;
                Some(MIN_GAP_S)
            } else {
                Some(dt)
            }
        };
        let genre = ev
            .genre
            .or_else(|| {
                ev.channel
                    .as_ref()
                    .and_then(|c| rule.channel_genres.get(c).copied())
            })
            .or(journey_genre);
        if genre.is_none() {
            stats.missing_genre += 1;
        }
        out.push(JourneyEvent {
            tag: ev.tag.clone(),
            genre,
            gap_s,
        });
    }
    Journey {
        customer_id: events[0].customer_id.clone(),
        journey_index: 1,
        start_ms: events[0].timestamp_ms,
        end_ms: events[events.len() - 1].timestamp_ms,
        channel,
        events: out,
        covariate: None,
    }
}

/// Keeps the first `max_journeys` journeys per customer and the first
/// `max_events` events per journey.
pub fn truncate_dataset(data: &Dataset, max_journeys: usize, max_events: usize) -> Dataset {
    assert!(max_journeys >= 1 && max_events >= 1, "caps must be at least 1");
    let customers = data
        .customers
        .iter()
        .map(|c| CustomerJourneys {
            customer_id: c.customer_id.clone(),
            label: c.label,
            journeys: c
                .journeys
                .iter()
                .take(max_journeys)
                .map(|j| {
                    let events: Vec<JourneyEvent> = j.events.iter().take(max_events).cloned().collect();
                    let kept: f64 = events.iter().filter_map(|e| e.gap_s).sum();
                    let mut j = j.clone();
                    if events.len() < j.events.len() {
                        j.end_ms = j.start_ms + (kept * 1000.0).round() as i64;
                    }
                    j.events = events;
                    j
                })
                .collect(),
        })
        .collect();
    Dataset { customers }
}

#[derive(Debug, Serialize, Deserialize)]
struct JourneyLine {
    customer_id: String,
    journey_index: usize,
    start: i64,
    end: i64,
    channel: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<ChurnLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    covariate: Option<f64>,
    events: Vec<JourneyEvent>,
}

/// Writes one JSON object per journey.
pub fn write_journeys<W: Write>(data: &Dataset, mut w: W) -> Result<(), EventLogError> {
    for c in &data.customers {
        for j in &c.journeys {
            let line = JourneyLine {
                customer_id: j.customer_id.clone(),
                journey_index: j.journey_index,
                start: j.start_ms,
                end: j.end_ms,
                channel: j.channel.clone(),
                label: c.label,
                covariate: j.covariate,
                events: j.events.clone(),
            };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads a journeys file. Lines for one customer must be contiguous.
pub fn read_journeys<R: BufRead>(r: R) -> Result<Dataset, EventLogError> {
    let mut customers: Vec<CustomerJourneys> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JourneyLine = serde_json::from_str(&line).map_err(|e| EventLogError::Journal {
            line: line_no,
            msg: e.to_string(),
        })?;
        let journey = Journey {
            customer_id: parsed.customer_id.clone(),
            journey_index: parsed.journey_index,
            start_ms: parsed.start,
            end_ms: parsed.end,
            channel: parsed.channel,
            events: parsed.events,
            covariate: parsed.covariate,
        };
        match customers.last_mut() {
            Some(c) if c.customer_id == parsed.customer_id => {
                if c.label != parsed.label {
                    return Err(EventLogError::Journal {
                        line: line_no,
                        msg: "label changes within a customer".into(),
                    });
                }
                c.journeys.push(journey);
            }
            _ => customers.push(CustomerJourneys {
                customer_id: parsed.customer_id,
                label: parsed.label,
                journeys: vec![journey],
            }),
        }
    }
    let data = Dataset { customers };
    data.validate()?;
    Ok(data)
}

/// Reads a `customer_id,label` table (header row required).
pub fn read_labels<R: Read>(r: R, delimiter: u8) -> Result<HashMap<String, ChurnLabel>, EventLogError> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).from_reader(r);
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let (Some(id), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(EventLogError::Record {
                line,
                msg: "expected customer_id,label".into(),
            });
        };
        let label = label.parse().map_err(|msg| EventLogError::Record { line, msg })?;
        out.insert(id.trim().to_string(), label);
    }
    Ok(out)
}

/// Reads a `channel,genre` table (header row required).
pub fn read_channel_genres<R: Read>(r: R, delimiter: u8) -> Result<BTreeMap<String, u8>, EventLogError> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).from_reader(r);
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let parsed = rec
            .get(0)
            .zip(rec.get(1))
            .and_then(|(c, g)| g.trim().parse::<u8>().ok().map(|g| (c.trim().to_string(), g)));
        let Some((channel, genre)) = parsed else {
            return Err(EventLogError::Record {
                line,
                msg: "expected channel,genre".into(),
            });
        };
        out.insert(channel, genre);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tables() -> LabelTables {
        let clicks = "event_id\n100\n200\nK\nD\n";
        let ctx = "event_id,url,tag\n100,/home,A_1\n200,,B_2\nK,,K_385\nD,,D_58\n";
        LabelTables::from_readers(clicks.as_bytes(), ctx.as_bytes(), b',').unwrap()
    }

    fn ev(customer: &str, t: i64, tag: &str) -> LabelledEvent {
        LabelledEvent {
            customer_id: customer.into(),
            timestamp_ms: t,
            tag: tag.into(),
            genre: Some(1),
            channel: None,
        }
    }

    fn raw(customer: &str, t: i64, id: &str, url: Option<&str>) -> RawEventRecord {
        RawEventRecord {
            customer_id: customer.into(),
            timestamp_ms: t,
            event_id: id.into(),
            event_spec: vec![],
            url_context: url.map(String::from),
            channel: None,
            genre: None,
        }
    }

    #[test]
    fn click_with_context_gets_tag() {
        let (out, stats) = parse_and_label(vec![raw("c1", 5, "100", Some("/home"))], &tables());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tag, "A_1");
        assert_eq!(stats.unresolved, 0);
    }

    #[test]
    fn empty_stream() {
        let (out, stats) = parse_and_label(Vec::new(), &tables());
        assert!(out.is_empty());
        assert_eq!(stats, ParseStats::default());
    }

    #[test]
    fn unknown_event_id_dropped_and_counted() {
        let recs = vec![
            raw("c1", 3, "200", None),
            raw("c1", 1, "999", None),
            raw("c1", 2, "100", Some("/home")),
        ];
        let (out, stats) = parse_and_label(recs, &tables());
        assert_eq!(out.len(), 2);
        assert_eq!(stats.dropped_non_click, 1);
        assert_eq!(out[0].timestamp_ms, 2);
        assert_eq!(out[1].tag, "B_2");
    }

    #[test]
    fn unresolvable_context_counted() {
        let (out, stats) = parse_and_label(vec![raw("c1", 0, "100", Some("/other"))], &tables());
        assert!(out.is_empty());
        assert_eq!(stats.unresolved, 1);
    }

    #[test]
    fn gap_in_seconds() {
        let events = vec![ev("c", 1_000_000, "K_385"), ev("c", 1_006_479, "D_58")];
        let (data, _) = build_journeys(&events, &SessionRule::default()).unwrap();
        let j = &data.customers[0].journeys[0];
        assert_eq!(j.gaps().collect::<Vec<_>>(), vec![6.479]);
        assert_eq!(j.events[0].tag, "K_385");
    }

    #[test]
    fn single_event_journey() {
        let (data, _) = build_journeys(&[ev("c", 0, "X")], &SessionRule::default()).unwrap();
        let j = &data.customers[0].journeys[0];
        assert_eq!(j.n_events(), 1);
        assert_eq!(j.gaps().count(), 0);
    }

    #[test]
    fn inactivity_splits_journeys() {
        let events = vec![ev("c", 0, "X"), ev("c", 45 * 60 * 1000, "Y")];
        let (data, stats) = build_journeys(&events, &SessionRule::default()).unwrap();
        assert_eq!(stats.journeys, 2);
        let js = &data.customers[0].journeys;
        assert_eq!(js.len(), 2);
        assert_eq!((js[0].n_events(), js[1].n_events()), (1, 1));
        assert_eq!(js[1].journey_index, 2);
    }

    #[test]
    fn power_on_tag_starts_journey() {
        let rule = SessionRule {
            power_on_tags: vec!["ON".into()],
            ..Default::default()
        };
        let events = vec![ev("c", 0, "X"), ev("c", 10, "ON"), ev("c", 20, "Y")];
        let (data, _) = build_journeys(&events, &rule).unwrap();
        let js = &data.customers[0].journeys;
        assert_eq!(js.len(), 2);
        assert_eq!(js[1].events[0].tag, "ON");
    }

    #[test]
    fn duplicate_timestamps_floored() {
        let events = vec![ev("c", 0, "X"), ev("c", 0, "Y")];
        let (data, stats) = build_journeys(&events, &SessionRule::default()).unwrap();
        assert_eq!(stats.floored_gaps, 1);
        assert_eq!(data.customers[0].journeys[0].events[1].gap_s, Some(MIN_GAP_S));
    }

    #[test]
    fn out_of_order_is_an_error() {
        let events = vec![ev("c", 10, "X"), ev("c", 5, "Y")];
        assert!(matches!(
            build_journeys(&events, &SessionRule::default()),
            Err(EventLogError::NegativeGap { .. })
        ));
    }

    #[test]
    fn channel_fallback_for_genre() {
        let mut rule = SessionRule::default();
        rule.channel_genres.insert("BBC".into(), 4);
        let mut a = ev("c", 0, "X");
        a.genre = None;
        let mut b = ev("c", 1000, "Y");
        b.genre = None;
        b.channel = Some("BBC".into());
        let (data, stats) = build_journeys(&[a, b], &rule).unwrap();
        let j = &data.customers[0].journeys[0];
        assert_eq!(j.channel, "BBC");
        assert_eq!(j.genres().collect::<Vec<_>>(), vec![Some(4), Some(4)]);
        assert_eq!(stats.missing_genre, 0);
    }

    fn long_journey(n: usize) -> Journey {
        Journey {
            customer_id: "c".into(),
            journey_index: 1,
            start_ms: 0,
            end_ms: (n as i64 - 1) * 1000,
            channel: String::new(),
            events: (0..n)
                .map(|i| JourneyEvent {
                    tag: format!("T{i}"),
                    genre: Some(1),
                    gap_s: (i > 0).then_some(1.0),
                })
                .collect(),
            covariate: None,
        }
    }

    #[test]
    fn truncation_rules() {
        let mut journeys = Vec::new();
        for i in 0..500 {
            let mut j = long_journey(if i == 0 { 500 } else { 10 });
            j.journey_index = i + 1;
            journeys.push(j);
        }
        let data = Dataset {
            customers: vec![CustomerJourneys {
                customer_id: "c".into(),
                label: None,
                journeys,
            }],
        };
        let t = truncate_dataset(&data, 300, 300);
        let js = &t.customers[0].journeys;
        assert_eq!(js.len(), 300);
        assert_eq!(js[0].n_events(), 300);
        assert_eq!(js[0].gaps().count(), 299);
        assert_eq!(js[0].end_ms, 299_000);
        assert_eq!(js[1], data.customers[0].journeys[1]);
        t.validate().unwrap();
    }

    #[test]
    fn raw_log_parsing() {
        let text = "customer_id,EVENT_DT_TM,EVENT_ID,EVENT_SPEC_1,URL,GENRE\n\
                    c1,1000,100,x,/home,3\n\
                    c1,2019-10-01 10:00:00.500,200,y,,\n";
        let recs = read_raw_log(text.as_bytes(), b',').unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].genre, Some(3));
        assert_eq!(recs[0].url_context.as_deref(), Some("/home"));
        assert_eq!(recs[1].timestamp_ms, 1_569_924_000_500);
        assert_eq!(recs[1].event_spec, vec!["y".to_string()]);
    }

    #[test]
    fn malformed_timestamp_names_line() {
        let text = "customer_id,EVENT_DT_TM,EVENT_ID,EVENT_SPEC_1,URL\nc1,1,100,x,\nc1,yesterday,100,x,\n";
        let err = read_raw_log(text.as_bytes(), b',').unwrap_err();
        assert!(matches!(err, EventLogError::Timestamp { line: 3, .. }), "{err}");
    }

    #[test]
    fn missing_column_reported() {
        let text = "customer_id,EVENT_ID\nc,1\n";
        assert!(matches!(
            read_raw_log(text.as_bytes(), b','),
            Err(EventLogError::MissingColumn(_))
        ));
    }

    #[test]
    fn journeys_file_round_trip() {
        let events = vec![
            ev("a", 0, "X"),
            ev("a", 1500, "Y"),
            ev("b", 0, "X"),
            ev("b", 4_000_000, "Z"),
        ];
        let (mut data, _) = build_journeys(&events, &SessionRule::default()).unwrap();
        data.customers[0].label = Some(ChurnLabel::Active);
        data.customers[1].label = Some(ChurnLabel::Cancelled);
        let mut buf = Vec::new();
        write_journeys(&data, &mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.starts_with(r#"{"customer_id":"a","journey_index":1,"start":0,"end":1500,"channel":"","label":"active","events":[{"tag":"X","genre":1,"gap_s":null},{"tag":"Y","genre":1,"gap_s":1.5}]}"#));
        let back = read_journeys(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn mixed_labels_rejected() {
        let (mut data, _) =
            build_journeys(&[ev("a", 0, "X"), ev("b", 0, "X")], &SessionRule::default()).unwrap();
        data.customers[0].label = Some(ChurnLabel::Active);
        assert!(data.validate().is_err());
    }
}
