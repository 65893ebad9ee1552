//! Event model shared by every pipeline stage: clicks, delayed action
//! observations, and the on-disk stream format.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hashed feature slots for one click, one slot per field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub slots: Vec<u32>,
}

impl FeatureVector {
    pub fn new(slots: Vec<u32>) -> Self {
        FeatureVector { slots }
    }

    pub fn n_fields(&self) -> usize {
        self.slots.len()
    }
}

/// Static description of one delayed feedback channel.
///
/// The label action is the conversion itself, revealed at the maturation
/// horizon; every other action is a cheaper signal revealed earlier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub action_id: u32,
    pub reveal_delay_hours: f64,
    pub cardinality: u32,
    pub is_label_action: bool,
}

/// Validates a spec list: contiguous ids, exactly one label action, sane
/// delays and cardinalities. Returns the label action id.
pub fn validate_specs(specs: &[ActionSpec]) -> Result<u32> {
    if specs.is_empty() {
        return Err(Error::config("actions", "at least one action is required"));
    }
    let mut label = None;
    for (i, s) in specs.iter().enumerate() {
        let field = format!("actions[{i}]");
        if s.action_id as usize != i {
            return Err(Error::config(field, format!("action_id {} must equal position {i}", s.action_id)));
        }
        if !s.reveal_delay_hours.is_finite() || s.reveal_delay_hours < 0.0 {
            return Err(Error::config(field, "reveal_delay_hours must be finite and >= 0"));
        }
        if s.cardinality < 2 {
            return Err(Error::config(field, "cardinality must be >= 2"));
        }
        if s.is_label_action {
            if s.cardinality != 2 {
                return Err(Error::config(field, "label action must be binary"));
            }
            if label.replace(s.action_id).is_some() {
                return Err(Error::config(field, "multiple label actions declared"));
            }
        }
    }
    label.ok_or_else(|| Error::config("actions", "exactly one label action is required"))
}

/// One click with its latent conversion outcome and per-action outcomes.
///
/// `conversion_delay_hours` is present exactly when `converts` is true.
/// `actions[j]` is the outcome of action `j` in spec order; the label
/// action's outcome always equals `converts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub sample_id: u64,
    pub click_time_hours: f64,
    pub features: FeatureVector,
    pub converts: bool,
    pub conversion_delay_hours: Option<f64>,
    pub actions: Vec<u32>,
}

impl ClickEvent {
    /// Conversion time, defined only for converters.
    pub fn conversion_time(&self) -> Option<f64> {
        self.conversion_delay_hours.map(|d| self.click_time_hours + d)
    }
}

/// What gets revealed when an observation event fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    ActionObserved { action_id: u32, outcome: u32 },
    LabelRevealed { converted: bool },
}

/// One reveal on the wall clock, pointing back at its source click.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationEvent {
    pub click_idx: usize,
    pub sample_id: u64,
    pub reveal_time_hours: f64,
    pub kind: ObservationKind,
}

/// Expands one click into its observation timeline: every action fires at
/// `click_time + reveal_delay`, the label action fires as `LabelRevealed`.
/// Produces exactly one event per spec entry.
pub fn derive_timeline(click_idx: usize, click: &ClickEvent, specs: &[ActionSpec]) -> Result<Vec<ObservationEvent>> {
    if click.actions.len() != specs.len() {
        return Err(Error::ShapeMismatch(format!(
            "click {} carries {} action outcomes, specs declare {}",
            click.sample_id,
            click.actions.len(),
            specs.len()
        )));
    }
    let mut events = Vec::with_capacity(specs.len());
    for (j, spec) in specs.iter().enumerate() {
        let outcome = click.actions[j];
        if outcome >= spec.cardinality {
            return Err(Error::ShapeMismatch(format!(
                "click {} action {} outcome {} exceeds cardinality {}",
                click.sample_id, j, outcome, spec.cardinality
            )));
        }
        let kind = if spec.is_label_action {
            if (outcome == 1) != click.converts {
                return Err(Error::ShapeMismatch(format!(
                    "click {} label action outcome {} disagrees with converts={}",
                    click.sample_id, outcome, click.converts
                )));
            }
            ObservationKind::LabelRevealed { converted: click.converts }
        } else {
            ObservationKind::ActionObserved { action_id: spec.action_id, outcome }
        };
        events.push(ObservationEvent {
            click_idx,
            sample_id: click.sample_id,
            reveal_time_hours: click.click_time_hours + spec.reveal_delay_hours,
            kind,
        });
    }
    Ok(events)
}

/// Sorts clicks by time, breaking ties by sample id. All consumers assume
/// this order.
pub fn sort_clicks(clicks: &mut [ClickEvent]) {
    clicks.sort_by(|a, b| {
        a.click_time_hours
            .total_cmp(&b.click_time_hours)
            .then(a.sample_id.cmp(&b.sample_id))
    });
}

/// Writes a click stream as CSV with the canonical header
/// `sample_id,click_time_hours,converts,conversion_delay_hours,slot_*,action_*`.
/// The delay column is empty for non-converters.
pub fn write_stream(path: &Path, clicks: &[ClickEvent]) -> Result<()> {
    if clicks.is_empty() {
        return Err(Error::EmptyInput("cannot write an empty stream".into()));
    }
    let n_fields = clicks[0].features.n_fields();
    let n_actions = clicks[0].actions.len();
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut header = vec![
        "sample_id".to_string(),
        "click_time_hours".to_string(),
        "converts".to_string(),
        "conversion_delay_hours".to_string(),
    ];
    header.extend((0..n_fields).map(|f| format!("slot_{f}")));
    header.extend((0..n_actions).map(|j| format!("action_{j}")));
    writeln!(w, "{}", header.join(","))?;

    let mut line = String::new();
    for c in clicks {
        if c.features.n_fields() != n_fields || c.actions.len() != n_actions {
            return Err(Error::ShapeMismatch(format!(
                "click {} has inconsistent field or action count",
                c.sample_id
            )));
        }
        line.clear();
        line.push_str(&c.sample_id.to_string());
        line.push(',');
        line.push_str(&c.click_time_hours.to_string());
        line.push(',');
        line.push(if c.converts { '1' } else { '0' });
        line.push(',');
        match (c.converts, c.conversion_delay_hours) {
            (true, Some(d)) => line.push_str(&d.to_string()),
            (false, None) => {}
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "click {} converts={} but delay presence disagrees",
                    c.sample_id, c.converts
                )))
            }
        }
        for s in &c.features.slots {
            line.push(',');
            line.push_str(&s.to_string());
        }
        for a in &c.actions {
            line.push(',');
            line.push_str(&a.to_string());
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a click stream written by [`write_stream`]. Returns clicks sorted
/// by click time. Malformed rows are hard errors with their line number.
pub fn read_stream(path: &Path) -> Result<Vec<ClickEvent>> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(file));

    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let bad_header = |msg: &str| Error::StreamFormat { line: 1, message: msg.to_string() };
    if cols.len() < 5
        || cols[0] != "sample_id"
        || cols[1] != "click_time_hours"
        || cols[2] != "converts"
        || cols[3] != "conversion_delay_hours"
    {
        return Err(bad_header("expected sample_id,click_time_hours,converts,conversion_delay_hours,slot_*,action_*"));
    }
    let n_fields = cols[4..].iter().take_while(|c| c.starts_with("slot_")).count();
    let n_actions = cols[4 + n_fields..].iter().take_while(|c| c.starts_with("action_")).count();
    if n_fields == 0 {
        return Err(bad_header("no slot_* columns"));
    }
    if 4 + n_fields + n_actions != cols.len() {
        return Err(bad_header("unrecognized trailing columns"));
    }

    let mut clicks = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = (i + 2) as u64;
        let record = record?;
        let fail = |msg: String| Error::StreamFormat { line, message: msg };
        if record.len() != cols.len() {
            return Err(fail(format!("expected {} fields, got {}", cols.len(), record.len())));
        }
        let sample_id: u64 = record[0].parse().map_err(|_| fail(format!("bad sample_id `{}`", &record[0])))?;
        let click_time_hours: f64 =
            record[1].parse().map_err(|_| fail(format!("bad click_time_hours `{}`", &record[1])))?;
        if !click_time_hours.is_finite() || click_time_hours < 0.0 {
            return Err(fail(format!("click_time_hours {click_time_hours} out of range")));
        }
        let converts = match &record[2] {
            "0" => false,
            "1" => true,
            v => return Err(fail(format!("bad converts flag `{v}`"))),
        };
        let delay_raw = &record[3];
        let conversion_delay_hours = if delay_raw.is_empty() {
            None
        } else {
            let d: f64 = delay_raw.parse().map_err(|_| fail(format!("bad conversion_delay_hours `{delay_raw}`")))?;
            if !d.is_finite() || d < 0.0 {
                return Err(fail(format!("conversion_delay_hours {d} out of range")));
            }
            Some(d)
        };
        if converts != conversion_delay_hours.is_some() {
            return Err(fail("converts flag disagrees with delay presence".into()));
        }
        let mut slots = Vec::with_capacity(n_fields);
        for f in 0..n_fields {
            let v: u32 = record[4 + f].parse().map_err(|_| fail(format!("bad slot_{f} `{}`", &record[4 + f])))?;
            slots.push(v);
        }
        let mut actions = Vec::with_capacity(n_actions);
        for j in 0..n_actions {
            let col = 4 + n_fields + j;
            let v: u32 = record[col].parse().map_err(|_| fail(format!("bad action_{j} `{}`", &record[col])))?;
            actions.push(v);
        }
        clicks.push(ClickEvent {
            sample_id,
            click_time_hours,
            features: FeatureVector::new(slots),
            converts,
            conversion_delay_hours,
            actions,
        });
    }
    if clicks.is_empty() {
        return Err(Error::EmptyInput(format!("stream {} has no rows", path.display())));
    }
    sort_clicks(&mut clicks);
    Ok(clicks)
}
