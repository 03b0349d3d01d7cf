//! `src,dst,timestamp,state_label,f1,...,fm` event files (Jodie layout).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Event, EventStore};
use crate::error::{Result, SigError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsvSchema {
    /// Offset destination ids by `max(src) + 1`, for exports where sources
    /// and destinations are numbered independently (user/item files).
    pub bipartite: bool,
    /// Fixed node count; defaults to one past the largest id.
    pub node_count: Option<usize>,
}

pub fn load_events(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<EventStore> {
    let text = fs::read_to_string(path)?;
    parse_events(&text, schema)
}

/// Parses event rows. A first line whose leading field is not an integer is
/// treated as a header.
pub fn parse_events(text: &str, schema: &CsvSchema) -> Result<EventStore> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields[0].parse::<usize>().is_err() {
            continue;
        }
        let lineno = i + 1;
        let err = |msg: String| SigError::Parse { line: lineno, msg };
        if fields.len() < 4 {
            return Err(err(format!(
                "expected at least 4 fields, found {}",
                fields.len()
            )));
        }
        let src = fields[0]
            .parse::<usize>()
            .map_err(|_| err(format!("bad source id `{}`", fields[0])))?;
        let dst = fields[1]
            .parse::<usize>()
            .map_err(|_| err(format!("bad destination id `{}`", fields[1])))?;
        let time = fields[2]
            .parse::<f64>()
            .map_err(|_| err(format!("bad timestamp `{}`", fields[2])))?;
        if !time.is_finite() || time < 0.0 {
            return Err(err(format!(
                "timestamp {time} must be finite and nonnegative"
            )));
        }
        let features = fields[4..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad feature `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = events.first() {
            let first: &(usize, Event) = first;
            if first.1.features.len() != features.len() {
                return Err(err(format!(
                    "inconsistent feature arity: {} vs {} on line {}",
                    features.len(),
                    first.1.features.len(),
                    first.0
                )));
            }
        }
        events.push((lineno, Event::new(src, dst, time, features)));
    }
    if events.is_empty() {
        return Err(SigError::NoEvents);
    }
    let mut events: Vec<Event> = events.into_iter().map(|(_, e)| e).collect();
    if schema.bipartite {
        let offset = events.iter().map(|e| e.src).max().unwrap_or(0) + 1;
        for e in &mut events {
            e.dst += offset;
        }
    }
    EventStore::from_events(events, schema.node_count)
}

/// Writes the store in time order with a header line. Floats use the
/// shortest round-trip representation, so reloading is lossless.
pub fn write_events(store: &EventStore, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "src,dst,timestamp,state_label")?;
    for k in 0..store.feature_dim() {
        write!(w, ",f{}", k + 1)?;
    }
    writeln!(w)?;
    for e in store.events() {
        write!(w, "{},{},{},0", e.src, e.dst, e.time)?;
        for f in &e.features {
            write!(w, ",{f}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
