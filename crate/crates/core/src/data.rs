//! Event sequences, JSON Lines ingestion, padding and time standardization.
//!
//! File layout: the first line is a meta object `{"num_types": K, "max_len": N}`,
//! every following non-empty line is `{"taus": [..], "types": [..]}`. Sequences
//! longer than `N` are split into consecutive chunks of at most `N` events.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Inter-event duration.
    pub tau: f64,
    /// Category in `0..K`.
    pub k: usize,
}

impl Event {
    pub fn new(tau: f64, k: usize) -> Self {
        Self { tau, k }
    }
}

/// Non-empty, chronologically ordered events.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    events: Vec<Event>,
}

impl EventSequence {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::Validation("event sequence must contain at least one event".into()));
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn taus(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.tau).collect()
    }

    pub fn types(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.k).collect()
    }

    /// Absolute event times, measured from the start of the sequence.
    pub fn times(&self) -> Vec<f64> {
        cumulative(&self.taus())
    }
}

pub fn cumulative(taus: &[f64]) -> Vec<f64> {
    taus.iter()
        .scan(0.0, |acc, &t| {
            *acc += t;
            Some(*acc)
        })
        .collect()
}

/// Affine time transform applied to every tau before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TauScaler {
    Identity,
    Standard { mean: f64, std: f64 },
}

impl TauScaler {
    pub fn apply(&self, tau: f64) -> f64 {
        match *self {
            TauScaler::Identity => tau,
            TauScaler::Standard { mean, std } => (tau - mean) / std,
        }
    }

    /// Back to dataset units, clamped at zero.
    pub fn invert(&self, z: f64) -> f64 {
        let t = match *self {
            TauScaler::Identity => z,
            TauScaler::Standard { mean, std } => z * std + mean,
        };
        t.max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    pub num_types: usize,
    pub max_len: usize,
    pub tau_scaler: TauScaler,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    num_types: usize,
    max_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeqLine {
    taus: Vec<f64>,
    types: Vec<i64>,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, num_types: usize, max_len: usize) -> Result<Self> {
        let ds = Self { sequences, num_types, max_len, tau_scaler: TauScaler::Identity };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_types == 0 || self.max_len == 0 {
            return Err(Error::Validation("num_types and max_len must be positive".into()));
        }
        if let TauScaler::Standard { std, .. } = self.tau_scaler {
            if !(std > 0.0) {
                return Err(Error::Validation(format!("scaler std must be positive, got {std}")));
            }
        }
        for (s, seq) in self.sequences.iter().enumerate() {
            if seq.len() > self.max_len {
                return Err(Error::Validation(format!(
                    "sequence {s} has {} events, max_len is {}",
                    seq.len(),
                    self.max_len
                )));
            }
            for e in seq.events() {
                if e.k >= self.num_types {
                    return Err(Error::Validation(format!(
                        "sequence {s}: type {} >= num_types {}",
                        e.k, self.num_types
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    pub fn all_events(&self) -> impl Iterator<Item = &Event> {
        self.sequences.iter().flat_map(|s| s.events().iter())
    }

    /// Replaces every tau by `scaler.apply(tau)` and records the scaler.
    pub fn with_scaler(&self, scaler: TauScaler) -> Self {
        let sequences = self
            .sequences
            .iter()
            .map(|s| EventSequence {
                events: s.events.iter().map(|e| Event::new(scaler.apply(e.tau), e.k)).collect(),
            })
            .collect();
        Self { sequences, num_types: self.num_types, max_len: self.max_len, tau_scaler: scaler }
    }

    /// Leading `train_fraction` of the sequences and the rest, in file order.
    pub fn split(&self, train_fraction: f64) -> (Self, Self) {
        let n = self.sequences.len();
        let n_train = ((n as f64) * train_fraction.clamp(0.0, 1.0)).round() as usize;
        let mk = |seqs: &[EventSequence]| Self {
            sequences: seqs.to_vec(),
            num_types: self.num_types,
            max_len: self.max_len,
            tau_scaler: self.tau_scaler,
        };
        (mk(&self.sequences[..n_train]), mk(&self.sequences[n_train..]))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_meta(&mut w, self.num_types, self.max_len)?;
        for s in &self.sequences {
            write_sequence(&mut w, s.events())?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_meta<W: Write>(w: &mut W, num_types: usize, max_len: usize) -> Result<()> {
    serde_json::to_writer(&mut *w, &MetaLine { num_types, max_len })?;
    writeln!(w)?;
    Ok(())
}

pub fn write_sequence<W: Write>(w: &mut W, events: &[Event]) -> Result<()> {
    let line = SeqLine {
        taus: events.iter().map(|e| e.tau).collect(),
        types: events.iter().map(|e| e.k as i64).collect(),
    };
    serde_json::to_writer(&mut *w, &line)?;
    writeln!(w)?;
    Ok(())
}

/// Reads a dataset file; see the module docs for the layout.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    parse_jsonl(reader)
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut meta: Option<MetaLine> = None;
    let mut sequences = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let Some(m) = &meta else {
            let m: MetaLine = serde_json::from_str(text).map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("expected meta object {{\"num_types\", \"max_len\"}}: {e}"),
            })?;
            if m.num_types == 0 || m.max_len == 0 {
                return Err(Error::Parse { line: lineno, msg: "num_types and max_len must be positive".into() });
            }
            meta = Some(m);
            continue;
        };
        let rec: SeqLine = serde_json::from_str(text)
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if rec.taus.len() != rec.types.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("{} taus but {} types", rec.taus.len(), rec.types.len()),
            });
        }
        if rec.taus.is_empty() {
            return Err(Error::Parse { line: lineno, msg: "empty sequence".into() });
        }
        let mut events = Vec::with_capacity(rec.taus.len());
        for (&tau, &k) in rec.taus.iter().zip(&rec.types) {
            if !(tau >= 0.0) || !tau.is_finite() {
                return Err(Error::Validation(format!("line {lineno}: tau {tau} is negative or not finite")));
            }
            if k < 0 || k as usize >= m.num_types {
                return Err(Error::Validation(format!(
                    "line {lineno}: type {k} outside 0..{}",
                    m.num_types
                )));
            }
            events.push(Event::new(tau, k as usize));
        }
        for chunk in events.chunks(m.max_len) {
            sequences.push(EventSequence { events: chunk.to_vec() });
        }
    }
    let meta = meta.ok_or_else(|| Error::Parse { line: 1, msg: "missing meta line".into() })?;
    Dataset::new(sequences, meta.num_types, meta.max_len)
}

/// Pads to length `n` with `(0, 0)` placeholders; mask is true on real events.
pub fn pad_and_mask(seq: &[Event], n: usize) -> Result<(Vec<Event>, Vec<bool>)> {
    if seq.is_empty() {
        return Err(Error::Validation("cannot pad an empty sequence".into()));
    }
    if seq.len() > n {
        return Err(Error::Validation(format!("sequence of {} events exceeds N = {n}", seq.len())));
    }
    let mut events = seq.to_vec();
    events.resize(n, Event::new(0.0, 0));
    let mask = (0..n).map(|i| i < seq.len()).collect();
    Ok((events, mask))
}

/// Population mean/std standardization over every tau in `dataset`.
pub fn standardize_tau(dataset: &Dataset) -> Result<(Dataset, TauScaler)> {
    let n = dataset.num_events();
    if n < 2 {
        return Err(Error::Validation("standardization needs at least 2 events".into()));
    }
    let mean = dataset.all_events().map(|e| e.tau).sum::<f64>() / n as f64;
    let var = dataset.all_events().map(|e| (e.tau - mean).powi(2)).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return Err(Error::Validation(
            "taus have zero variance; use the identity scaler instead".into(),
        ));
    }
    let scaler = TauScaler::Standard { mean, std: var.sqrt() };
    Ok((dataset.with_scaler(scaler), scaler))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dataset> {
        parse_jsonl(s.as_bytes())
    }

    #[test]
    fn parses_two_events() {
        let ds = parse("{\"num_types\":2,\"max_len\":4}\n{\"taus\":[0.5,1.2],\"types\":[0,1]}\n").unwrap();
        assert_eq!(ds.sequences.len(), 1);
        assert_eq!(ds.sequences[0].events(), &[Event::new(0.5, 0), Event::new(1.2, 1)]);
    }

    #[test]
    fn split_keeps_leading_train_fraction() {
        let mut text = String::from("{\"num_types\":1,\"max_len\":4}\n");
        for i in 1..=10 {
            text.push_str(&format!("{{\"taus\":[{i}],\"types\":[0]}}\n"));
        }
        let (train, test) = parse(&text).unwrap().split(0.8);
        assert_eq!((train.sequences.len(), test.sequences.len()), (8, 2));
        assert_eq!(test.sequences[0].events()[0].tau, 9.0);
    }

    #[test]
    fn type_out_of_range_names_line() {
        let err = parse("{\"num_types\":2,\"max_len\":4}\n{\"taus\":[0.5,1.2],\"types\":[0,5]}\n").unwrap_err();
        assert!(matches!(&err, Error::Validation(m) if m.contains("line 2")), "{err}");
    }

    #[test]
    fn negative_tau_rejected() {
        let err = parse("{\"num_types\":2,\"max_len\":4}\n{\"taus\":[-0.5],\"types\":[0]}\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse("{\"num_types\":2,\"max_len\":4}\n{\"taus\":[1],\"types\":[0]}\n{oops\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = parse("{\"num_types\":2,\"max_len\":4}\n{\"taus\":[1,2],\"types\":[0]}\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn three_lines_three_sequences_and_chunking() {
        let text = "{\"num_types\":1,\"max_len\":2}\n\
            {\"taus\":[1],\"types\":[0]}\n{\"taus\":[1,2],\"types\":[0,0]}\n{\"taus\":[1],\"types\":[0]}\n";
        assert_eq!(parse(text).unwrap().sequences.len(), 3);
        let long = "{\"num_types\":1,\"max_len\":2}\n{\"taus\":[1,2,3,4,5],\"types\":[0,0,0,0,0]}\n";
        let ds = parse(long).unwrap();
        assert_eq!(ds.sequences.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn padding() {
        let ev = [Event::new(1.0, 1), Event::new(2.0, 0)];
        let (p, m) = pad_and_mask(&ev, 4).unwrap();
        assert_eq!(m, vec![true, true, false, false]);
        assert_eq!(&p[..2], &ev);
        assert_eq!(p[3], Event::new(0.0, 0));
        let (_, m) = pad_and_mask(&ev, 2).unwrap();
        assert!(m.iter().all(|&b| b));
        assert!(pad_and_mask(&[], 3).is_err());
        assert!(pad_and_mask(&ev, 1).is_err());
        assert!(EventSequence::new(vec![]).is_err());
    }

    #[test]
    fn standardization_oracle() {
        let seq = EventSequence::new([1.0, 1.0, 3.0, 3.0].iter().map(|&t| Event::new(t, 0)).collect()).unwrap();
        let ds = Dataset::new(vec![seq], 1, 4).unwrap();
        let (z, sc) = standardize_tau(&ds).unwrap();
        assert_eq!(sc, TauScaler::Standard { mean: 2.0, std: 1.0 });
        assert_eq!(z.sequences[0].taus(), vec![-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(sc.invert(-5.0), 0.0);
        for t in [0.0, 0.7, 3.0, 12.5] {
            assert!((sc.invert(sc.apply(t)) - t).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_variance_rejected() {
        let seq = EventSequence::new(vec![Event::new(2.0, 0); 3]).unwrap();
        let ds = Dataset::new(vec![seq], 1, 4).unwrap();
        assert!(matches!(standardize_tau(&ds), Err(Error::Validation(m)) if m.contains("identity")));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let seq = EventSequence::new(vec![Event::new(0.25, 1), Event::new(3.5, 0)]).unwrap();
        let ds = Dataset::new(vec![seq.clone(), seq], 2, 3).unwrap();
        ds.write_jsonl(&path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), ds);
    }

    proptest::proptest! {
        #[test]
        fn pad_is_lossless(taus in proptest::collection::vec(0.0f64..100.0, 1..12), extra in 0usize..5) {
            let ev: Vec<Event> = taus.iter().enumerate().map(|(i, &t)| Event::new(t, i % 3)).collect();
            let (p, m) = pad_and_mask(&ev, ev.len() + extra).unwrap();
            let back: Vec<Event> = p.iter().zip(&m).filter(|(_, &v)| v).map(|(e, _)| *e).collect();
            proptest::prop_assert_eq!(back, ev);
        }

        #[test]
        fn standardize_round_trip(taus in proptest::collection::vec(0.0f64..50.0, 2..30)) {
            let ev: Vec<Event> = taus.iter().map(|&t| Event::new(t, 0)).collect();
            let ds = Dataset::new(vec![EventSequence::new(ev).unwrap()], 1, 64).unwrap();
            if let Ok((z, sc)) = standardize_tau(&ds) {
                for (orig, zt) in taus.iter().zip(z.sequences[0].taus()) {
                    proptest::prop_assert!((sc.invert(zt) - orig).abs() < 1e-6);
                }
            }
        }
    }
}
