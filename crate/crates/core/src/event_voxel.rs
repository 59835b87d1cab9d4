//! Event streams: parsing, fixed-count windowing and voxel-grid accumulation.
//!
//! A window of N events is spread over D temporal slices. Each event's
//! timestamp is normalized to `t~ = (D-1)(t - t_first)/(t_last - t_first)`
//! and its polarity is deposited on slice `d` with weight
//! `max(0, 1 - |d - t~|)`, so at most two neighbouring slices receive mass
//! and the weights of one event always sum to one.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::On => 1.0,
            Polarity::Off => -1.0,
        }
    }

    /// Accepts the on-disk encodings {-1, +1} and {0, 1}.
    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1 => Some(Polarity::On),
            0 | -1 => Some(Polarity::Off),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::On => Polarity::Off,
            Polarity::Off => Polarity::On,
        }
    }
}

/// One brightness-change event; `t` in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventRecord {
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

impl EventRecord {
    pub fn new(t: u64, x: u32, y: u32, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

fn check_sorted(events: &[EventRecord]) -> Result<()> {
    match events.windows(2).position(|w| w[1].t < w[0].t) {
        Some(i) => Err(Error::UnsortedEvents(i + 1)),
        None => Ok(()),
    }
}

/// Maps each timestamp onto `[0, slices - 1]`. A window whose first and
/// last timestamps coincide maps every event to 0.
pub fn normalize_timestamps(events: &[EventRecord], slices: usize) -> Result<Vec<f64>> {
    if slices == 0 {
        return Err(Error::Config("number of slices must be at least 1".into()));
    }
    let (first, last) = match (events.first(), events.last()) {
        (Some(f), Some(l)) => (f.t, l.t),
        _ => return Err(Error::Invalid("cannot normalize an empty event window".into())),
    };
    check_sorted(events)?;
    if last == first {
        return Ok(vec![0.0; events.len()]);
    }
    let span = (last - first) as f64;
    let scale = (slices - 1) as f64;
    Ok(events
        .iter()
        .map(|e| scale * (e.t - first) as f64 / span)
        .collect())
}

/// D x H x W event volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub slices: Array3<f64>,
    pub n_events: usize,
    pub t_start: u64,
    pub t_end: u64,
}

/// JSON sidecar written next to a serialized grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct VoxelSidecar {
    pub D: usize,
    pub H: usize,
    pub W: usize,
    pub N: usize,
    pub t_start: u64,
    pub t_end: u64,
}

impl VoxelGrid {
    pub fn depth(&self) -> usize {
        self.slices.dim().0
    }

    pub fn sidecar(&self) -> VoxelSidecar {
        let (d, h, w) = self.slices.dim();
        VoxelSidecar {
            D: d,
            H: h,
            W: w,
            N: self.n_events,
            t_start: self.t_start,
            t_end: self.t_end,
        }
    }
}

/// Accumulates a time-sorted event window into a `slices x height x width` grid.
pub fn voxelize(events: &[EventRecord], slices: usize, height: usize, width: usize) -> Result<VoxelGrid> {
    if slices == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "voxel grid dimensions must be positive, got {slices}x{height}x{width}"
        )));
    }
    for (index, e) in events.iter().enumerate() {
        if e.x as usize >= width || e.y as usize >= height {
            return Err(Error::EventOutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width,
                height,
            });
        }
    }
    let mut grid = Array3::<f64>::zeros((slices, height, width));
    if events.is_empty() {
        return Ok(VoxelGrid {
            slices: grid,
            n_events: 0,
            t_start: 0,
            t_end: 0,
        });
    }
    let times = normalize_timestamps(events, slices)?;
    // Events sharing a timestamp share their weights; their polarities are
    // summed per pixel as integers first so the result does not depend on
    // their order within the stream.
    let mut start = 0;
    let mut group: Vec<(usize, usize, i64)> = Vec::new();
    while start < events.len() {
        let t = events[start].t;
        let end = start + events[start..].iter().take_while(|e| e.t == t).count();
        group.clear();
        group.extend(
            events[start..end]
                .iter()
                .map(|e| (e.y as usize, e.x as usize, e.p.sign() as i64)),
        );
        group.sort_unstable_by_key(|&(y, x, _)| (y, x));
        let tn = times[start];
        let lo = tn.floor();
        let frac = tn - lo;
        let lo = lo as usize;
        let mut i = 0;
        while i < group.len() {
            let (y, x, _) = group[i];
            let mut net = 0i64;
            while i < group.len() && (group[i].0, group[i].1) == (y, x) {
                net += group[i].2;
                i += 1;
            }
            if net == 0 {
                continue;
            }
            let p = net as f64;
            grid[[lo, y, x]] += p * (1.0 - frac);
            if frac > 0.0 && lo + 1 < slices {
                grid[[lo + 1, y, x]] += p * frac;
            }
        }
        start = end;
    }
    Ok(VoxelGrid {
        slices: grid,
        n_events: events.len(),
        t_start: events[0].t,
        t_end: events[events.len() - 1].t,
    })
}

/// Consecutive non-overlapping windows of exactly `window` events.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunks<'a> {
    pub windows: Vec<&'a [EventRecord]>,
    /// Trailing events that did not fill a whole window.
    pub dropped: usize,
}

pub fn chunk_stream(events: &[EventRecord], window: usize) -> Result<Chunks<'_>> {
    if window == 0 {
        return Err(Error::Config("window size must be at least 1".into()));
    }
    let windows: Vec<_> = events.chunks_exact(window).collect();
    Ok(Chunks {
        dropped: events.len() - windows.len() * window,
        windows,
    })
}

/// Decodes N-MNIST 40-bit records: x, y, then polarity in bit 7 of the third
/// byte followed by a 23-bit big-endian timestamp in microseconds.
pub fn parse_nmnist(bytes: &[u8]) -> Result<Vec<EventRecord>> {
    let whole = bytes.len() / 5 * 5;
    if whole != bytes.len() {
        return Err(Error::Truncated { offset: whole });
    }
    Ok(bytes
        .chunks_exact(5)
        .map(|r| {
            let p = if r[2] & 0x80 != 0 {
                Polarity::On
            } else {
                Polarity::Off
            };
            let t = (u64::from(r[2] & 0x7f) << 16) | (u64::from(r[3]) << 8) | u64::from(r[4]);
            EventRecord::new(t, u32::from(r[0]), u32::from(r[1]), p)
        })
        .collect())
}

/// Inverse of [`parse_nmnist`]. Fails if a field does not fit the record layout.
pub fn encode_nmnist(events: &[EventRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(events.len() * 5);
    for (i, e) in events.iter().enumerate() {
        if e.x > 255 || e.y > 255 || e.t >= 1 << 23 {
            return Err(Error::Invalid(format!(
                "event {i} does not fit the N-MNIST record layout: {e:?}"
            )));
        }
        let pol = if e.p == Polarity::On { 0x80 } else { 0 };
        out.extend_from_slice(&[
            e.x as u8,
            e.y as u8,
            pol | ((e.t >> 16) as u8 & 0x7f),
            (e.t >> 8) as u8,
            e.t as u8,
        ]);
    }
    Ok(out)
}

/// Parses `t,x,y,p` lines. A leading non-numeric header line and blank or
/// `#` lines are skipped; `p` may be -1/1 or 0/1.
pub fn parse_events_csv(text: &str) -> Result<Vec<EventRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::Format {
            path: "<csv>".into(),
            reason: format!("line {}: {what}: {line:?}", lineno + 1),
        };
        if fields.len() != 4 {
            return Err(bad("expected 4 fields t,x,y,p"));
        }
        if lineno == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        let t: u64 = fields[0].parse().map_err(|_| bad("bad timestamp"))?;
        let x: u32 = fields[1].parse().map_err(|_| bad("bad x"))?;
        let y: u32 = fields[2].parse().map_err(|_| bad("bad y"))?;
        let p = fields[3]
            .parse::<i64>()
            .ok()
            .and_then(Polarity::from_code)
            .ok_or_else(|| bad("polarity must be -1, 0 or 1"))?;
        out.push(EventRecord::new(t, x, y, p));
    }
    Ok(out)
}

pub fn events_to_csv(events: &[EventRecord]) -> String {
    let mut s = String::from("t,x,y,p\n");
    for e in events {
        s.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p.sign() as i64));
    }
    s
}

/// Reads a CSV (`.csv`/`.txt`) or N-MNIST binary event file.
pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let is_text = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("csv") | Some("txt")
    );
    let name = path.display().to_string();
    let with_path = |e: Error| match e {
        Error::Format { reason, .. } => Error::Format {
            path: name.clone(),
            reason,
        },
        Error::Truncated { offset } => Error::Format {
            path: name.clone(),
            reason: format!("truncated record at byte offset {offset}"),
        },
        e => e,
    };
    if is_text {
        parse_events_csv(&fs::read_to_string(path)?).map_err(with_path)
    } else {
        parse_nmnist(&fs::read(path)?).map_err(with_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(t: u64, x: u32, y: u32, on: bool) -> EventRecord {
        EventRecord::new(t, x, y, if on { Polarity::On } else { Polarity::Off })
    }

    #[test]
    fn normalized_timestamps() {
        let e = [ev(0, 0, 0, true), ev(100, 0, 0, true), ev(200, 0, 0, true)];
        assert_eq!(normalize_timestamps(&e, 3).unwrap(), vec![0.0, 1.0, 2.0]);
        let e = [ev(0, 0, 0, true), ev(50, 0, 0, true), ev(200, 0, 0, true)];
        assert_eq!(normalize_timestamps(&e, 10).unwrap(), vec![0.0, 2.25, 9.0]);
        assert_eq!(normalize_timestamps(&e[..1], 7).unwrap(), vec![0.0]);
    }

    #[test]
    fn normalize_rejects_unsorted_and_empty() {
        let e = [ev(10, 0, 0, true), ev(5, 0, 0, true)];
        assert!(matches!(normalize_timestamps(&e, 3), Err(Error::UnsortedEvents(1))));
        assert!(normalize_timestamps(&[], 3).is_err());
    }

    #[test]
    fn voxelize_integer_times() {
        let e = [ev(0, 0, 0, true), ev(100, 0, 0, false), ev(200, 0, 1, true)];
        let g = voxelize(&e, 3, 2, 2).unwrap();
        let mut expected = Array3::<f64>::zeros((3, 2, 2));
        expected[[0, 0, 0]] = 1.0;
        expected[[1, 0, 0]] = -1.0;
        expected[[2, 1, 0]] = 1.0;
        assert_eq!(g.slices, expected);
        assert_eq!((g.n_events, g.t_start, g.t_end), (3, 0, 200));
    }

    #[test]
    fn voxelize_half_way_event_splits_evenly() {
        // D = 2 and t~ of the middle event = 0.5.
        let e = [ev(0, 1, 1, false), ev(50, 0, 0, true), ev(100, 1, 1, false)];
        let g = voxelize(&e, 2, 2, 2).unwrap();
        assert_eq!(g.slices[[0, 0, 0]], 0.5);
        assert_eq!(g.slices[[1, 0, 0]], 0.5);
    }

    #[test]
    fn voxelize_degenerate_window_uses_first_slice() {
        let e = [ev(7, 0, 0, true), ev(7, 1, 0, true)];
        let g = voxelize(&e, 3, 1, 2).unwrap();
        assert_eq!(g.slices.index_axis(ndarray::Axis(0), 0).sum(), 2.0);
        assert_eq!(g.slices.sum(), 2.0);
    }

    #[test]
    fn voxelize_out_of_bounds_reports_index() {
        let e = [ev(0, 0, 0, true), ev(1, 5, 0, true)];
        match voxelize(&e, 3, 4, 4).unwrap_err() {
            Error::EventOutOfBounds { index, x, .. } => assert_eq!((index, x), (1, 5)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn chunking() {
        let events: Vec<_> = (0..75_000u64).map(|t| ev(t, 0, 0, true)).collect();
        let c = chunk_stream(&events, 25_000).unwrap();
        assert_eq!((c.windows.len(), c.dropped), (3, 0));
        for (k, w) in c.windows.iter().enumerate() {
            assert_eq!(w[0].t, (k * 25_000) as u64);
            assert_eq!(w.len(), 25_000);
        }
        let c = chunk_stream(&events[..10], 25).unwrap();
        assert_eq!((c.windows.len(), c.dropped), (0, 10));
        assert!(chunk_stream(&events, 0).is_err());
    }

    #[test]
    fn nmnist_decoding() {
        let e = parse_nmnist(&[0x02, 0x03, 0x80, 0x00, 0x64]).unwrap();
        assert_eq!(e, vec![ev(100, 2, 3, true)]);
        assert!(parse_nmnist(&[]).unwrap().is_empty());
        assert!(matches!(
            parse_nmnist(&[0u8; 6]),
            Err(Error::Truncated { offset: 5 })
        ));
        let e = parse_nmnist(&[0xff, 0x00, 0x7f, 0xff, 0xff]).unwrap();
        assert_eq!(e, vec![ev((1 << 23) - 1, 255, 0, false)]);
    }

    #[test]
    fn csv_parsing() {
        let e = parse_events_csv("t,x,y,p\n0,1,2,1\n5,0,0,-1\n\n9,3,3,0\n").unwrap();
        assert_eq!(e, vec![ev(0, 1, 2, true), ev(5, 0, 0, false), ev(9, 3, 3, false)]);
        assert!(parse_events_csv("0,1,2,3\n").is_err());
        assert!(parse_events_csv("0,1,2\n").is_err());
        let round = parse_events_csv(&events_to_csv(&e)).unwrap();
        assert_eq!(round, e);
    }

    fn arb_events(w: u32, h: u32) -> impl Strategy<Value = Vec<EventRecord>> {
        arb_events_in(w, h, 10_000)
    }

    fn arb_events_in(w: u32, h: u32, tmax: u64) -> impl Strategy<Value = Vec<EventRecord>> {
        prop::collection::vec((0u64..tmax, 0..w, 0..h, any::<bool>()), 1..200).prop_map(|mut v| {
            v.sort_by_key(|e| e.0);
            v.into_iter().map(|(t, x, y, p)| ev(t, x, y, p)).collect()
        })
    }

    proptest! {
        #[test]
        fn mass_is_conserved(events in arb_events(6, 5), d in 1usize..12) {
            let g = voxelize(&events, d, 5, 6).unwrap();
            let mut per_pixel = Array3::<f64>::zeros((1, 5, 6));
            for e in &events {
                per_pixel[[0, e.y as usize, e.x as usize]] += e.p.sign();
            }
            for y in 0..5 {
                for x in 0..6 {
                    let s: f64 = (0..d).map(|k| g.slices[[k, y, x]]).sum();
                    prop_assert!((s - per_pixel[[0, y, x]]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn negating_polarity_negates_grid(events in arb_events(4, 4), d in 1usize..6) {
            let neg: Vec<_> = events.iter().map(|e| EventRecord { p: e.p.flipped(), ..*e }).collect();
            let a = voxelize(&events, d, 4, 4).unwrap();
            let b = voxelize(&neg, d, 4, 4).unwrap();
            prop_assert_eq!(a.slices.mapv(|v| -v), b.slices);
        }

        #[test]
        fn same_timestamp_order_is_irrelevant(events in arb_events_in(3, 3, 12), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = events.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut start = 0;
            while start < shuffled.len() {
                let t = shuffled[start].t;
                let end = start + shuffled[start..].iter().take_while(|e| e.t == t).count();
                shuffled[start..end].shuffle(&mut rng);
                start = end;
            }
            prop_assert_eq!(voxelize(&events, 4, 3, 3).unwrap(), voxelize(&shuffled, 4, 3, 3).unwrap());
        }

        #[test]
        fn nmnist_round_trip(raw in prop::collection::vec((0u64..(1 << 23), 0u32..256, 0u32..256, any::<bool>()), 0..50)) {
            let events: Vec<_> = raw.into_iter().map(|(t, x, y, p)| ev(t, x, y, p)).collect();
            prop_assert_eq!(parse_nmnist(&encode_nmnist(&events).unwrap()).unwrap(), events);
        }
    }
}
