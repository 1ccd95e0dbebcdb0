//! Asynchronous event data, the companion frame and ground-truth sequence, and the
//! on-disk sequence layout.
//!
//! A sequence directory holds:
//!
//! * `meta.json` with `width`, `height`, `fps` and optionally `frame_timestamps_us`,
//!   `attributes` and `name`,
//! * `frames/%06d.pgm` (binary P5, maxval 255),
//! * `events.evt` (magic `FE01`, u32 LE width, u32 LE height, then 13-byte records
//!   `u64 t_us, u16 x, u16 y, i8 p`, all little endian) or `events.csv`
//!   (header `t_us,x,y,p`),
//! * `gt.txt` with lines `frame_index,x,y,w,h`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const EVT_MAGIC: &[u8; 4] = b"FE01";
const EVT_RECORD: usize = 13;

/// One brightness-change impulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// +1 brighter, -1 darker.
    pub p: i8,
}

impl Event {
    pub const fn new(t: u64, x: u16, y: u16, p: i8) -> Self {
        Event { t, x, y, p }
    }
}

/// Events from one sensor, expected in non-decreasing time order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    events: Vec<Event>,
}

impl EventStream {
    /// Wraps events without checking invariants; see [`validate`].
    pub fn new(width: usize, height: usize, events: Vec<Event>) -> Self {
        EventStream { width, height, events }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, Vec::new())
    }

    /// Builds a stream and rejects it unless every invariant holds.
    pub fn validated(width: usize, height: usize, events: Vec<Event>) -> Result<Self> {
        let s = Self::new(width, height, events);
        let report = validate(&s);
        if report.is_empty() {
            Ok(s)
        } else {
            Err(Error::Data(format!("invalid event stream: {}", report.summary())))
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t <= w[1].t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    /// Indices `i` with `t[i] < t[i - 1]`.
    pub sortedness: Vec<usize>,
    pub out_of_bounds: Vec<usize>,
    pub bad_polarity: Vec<usize>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.sortedness.is_empty() && self.out_of_bounds.is_empty() && self.bad_polarity.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{} sortedness, {} out-of-bounds, {} polarity violations",
            self.sortedness.len(),
            self.out_of_bounds.len(),
            self.bad_polarity.len()
        )
    }
}

pub fn validate(stream: &EventStream) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, e) in stream.events.iter().enumerate() {
        if i > 0 && e.t < stream.events[i - 1].t {
            report.sortedness.push(i);
        }
        if e.x as usize >= stream.width || e.y as usize >= stream.height {
            report.out_of_bounds.push(i);
        }
        if e.p != 1 && e.p != -1 {
            report.bad_polarity.push(i);
        }
    }
    report
}

/// Events with `t` in `[t0, t1)`, or `[t0, t1]` when `closed_end`; order preserved.
pub fn slice(stream: &EventStream, t0: u64, t1: u64, closed_end: bool) -> Result<EventStream> {
    if t0 > t1 {
        return Err(Error::Range(format!("slice start {t0} is after end {t1}")));
    }
    let inside = |t: u64| t >= t0 && (t < t1 || (closed_end && t == t1));
    let events = if stream.is_sorted() {
        let lo = stream.events.partition_point(|e| e.t < t0);
        let hi = if closed_end {
            stream.events.partition_point(|e| e.t <= t1)
        } else {
            stream.events.partition_point(|e| e.t < t1)
        };
        stream.events[lo..hi.max(lo)].to_vec()
    } else {
        stream.events.iter().copied().filter(|e| inside(e.t)).collect()
    };
    Ok(EventStream::new(stream.width, stream.height, events))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub index: usize,
    /// Microseconds.
    pub t: u64,
    pub image: GrayImage,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub boxes: BTreeMap<usize, BBox>,
}

impl GroundTruth {
    pub fn get(&self, frame: usize) -> Option<&BBox> {
        self.boxes.get(&frame)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_timestamps_us: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl SequenceMeta {
    /// Nominal frame period in microseconds.
    pub fn period_us(&self) -> u64 {
        (1e6 / self.fps).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub meta: SequenceMeta,
    pub stream: EventStream,
    pub frames: Vec<FrameRecord>,
    pub gt: GroundTruth,
}

impl Sequence {
    pub fn name(&self) -> &str {
        self.meta.name.as_deref().unwrap_or("sequence")
    }

    /// Time window of events belonging to frame `j`: from the previous frame (or one
    /// nominal period before the first frame) up to and including frame `j`.
    pub fn event_window(&self, j: usize) -> (u64, u64) {
        let t1 = self.frames[j].t;
        let t0 = if j == 0 {
            t1.saturating_sub(self.meta.period_us())
        } else {
            self.frames[j - 1].t
        };
        (t0, t1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EventFileFormat {
    #[default]
    Binary,
    Csv,
}

fn not_found_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::NotFound(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("frames").join(format!("{index:06}.pgm"))
}

/// Loads and validates a sequence directory.
///
/// Events outside `[T_0 - period, T_last]` are dropped. Events out of time order are
/// stably sorted.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| not_found_or_io(&meta_path, e))?;
    let mut meta: SequenceMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::parse_line("meta.json", e.line(), e.to_string()))?;
    if meta.width == 0 || meta.height == 0 || !(meta.fps > 0.0) {
        return Err(Error::Geometry(format!(
            "meta.json declares {}x{} at {} fps",
            meta.width, meta.height, meta.fps
        )));
    }
    if meta.name.is_none() {
        meta.name = dir.file_name().map(|n| n.to_string_lossy().into_owned());
    }

    let frames_dir = dir.join("frames");
    let mut names: Vec<String> = fs::read_dir(&frames_dir)
        .map_err(|e| not_found_or_io(&frames_dir, e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::NotFound(frames_dir.join("000000.pgm")));
    }
    let period = meta.period_us();
    let timestamps: Vec<u64> = match &meta.frame_timestamps_us {
        Some(ts) => {
            if ts.len() != names.len() {
                return Err(Error::Data(format!(
                    "meta.json lists {} frame timestamps for {} frames",
                    ts.len(),
                    names.len()
                )));
            }
            ts.clone()
        }
        None => (0..names.len() as u64).map(|j| j * period).collect(),
    };
    if timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data("frame timestamps are not strictly increasing".into()));
    }

    let mut frames = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let expected = format!("{j:06}.pgm");
        if *name != expected {
            return Err(Error::NotFound(frames_dir.join(expected)));
        }
        let image = GrayImage::read_pgm(&frames_dir.join(name))?;
        if image.width != meta.width || image.height != meta.height {
            return Err(Error::Geometry(format!(
                "frame {name} is {}x{}, sensor is {}x{}",
                image.width, image.height, meta.width, meta.height
            )));
        }
        frames.push(FrameRecord {
            index: j,
            t: timestamps[j],
            image,
        });
    }

    let evt_path = dir.join("events.evt");
    let csv_path = dir.join("events.csv");
    let mut events = if evt_path.exists() {
        let bytes = fs::read(&evt_path)?;
        let (w, h, ev) = parse_evt(&bytes)?;
        if w != meta.width || h != meta.height {
            return Err(Error::Geometry(format!(
                "events.evt declares {w}x{h}, sensor is {}x{}",
                meta.width, meta.height
            )));
        }
        ev
    } else {
        let text = fs::read_to_string(&csv_path).map_err(|e| not_found_or_io(&csv_path, e))?;
        parse_events_csv(&text)?
    };

    let t_lo = timestamps[0].saturating_sub(period);
    let t_hi = *timestamps.last().unwrap();
    let before = events.len();
    events.retain(|e| e.t >= t_lo && e.t <= t_hi);
    if events.len() != before {
        log::debug!("dropped {} events outside [{t_lo}, {t_hi}]", before - events.len());
    }
    if let Some(e) = events
        .iter()
        .find(|e| e.x as usize >= meta.width || e.y as usize >= meta.height)
    {
        return Err(Error::Geometry(format!(
            "event at ({}, {}) outside {}x{} sensor",
            e.x, e.y, meta.width, meta.height
        )));
    }
    if events.windows(2).any(|w| w[1].t < w[0].t) {
        events.sort_by_key(|e| e.t);
    }
    let stream = EventStream::new(meta.width, meta.height, events);

    let gt_path = dir.join("gt.txt");
    let gt_text = fs::read_to_string(&gt_path).map_err(|e| not_found_or_io(&gt_path, e))?;
    let gt = parse_gt(&gt_text, frames.len())?;

    Ok(Sequence {
        meta,
        stream,
        frames,
        gt,
    })
}

pub fn parse_evt(bytes: &[u8]) -> Result<(usize, usize, Vec<Event>)> {
    if bytes.len() < 12 || &bytes[0..4] != EVT_MAGIC {
        return Err(Error::parse_offset("events.evt", 0, "missing FE01 header"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() % EVT_RECORD != 0 {
        let offset = 12 + (body.len() / EVT_RECORD) * EVT_RECORD;
        return Err(Error::parse_offset("events.evt", offset as u64, "truncated event record"));
    }
    let mut events = Vec::with_capacity(body.len() / EVT_RECORD);
    for (k, rec) in body.chunks_exact(EVT_RECORD).enumerate() {
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let p = rec[12] as i8;
        if p != 1 && p != -1 {
            let offset = 12 + k * EVT_RECORD + 12;
            return Err(Error::parse_offset("events.evt", offset as u64, format!("polarity {p}")));
        }
        events.push(Event { t, x, y, p });
    }
    Ok((width, height, events))
}

pub fn encode_evt(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + stream.len() * EVT_RECORD);
    out.extend_from_slice(EVT_MAGIC);
    out.extend_from_slice(&(stream.width as u32).to_le_bytes());
    out.extend_from_slice(&(stream.height as u32).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
    }
    out
}

/// Parses `events.csv`. Line numbers in errors are 1-based and count the header.
pub fn parse_events_csv(text: &str) -> Result<Vec<Event>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "t_us,x,y,p" => {}
        _ => return Err(Error::parse_line("events.csv", 1, "expected header t_us,x,y,p")),
    }
    let mut events = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse_line("events.csv", lineno, format!("expected 4 fields, got {}", fields.len())));
        }
        let bad = |what: &str| Error::parse_line("events.csv", lineno, format!("bad {what}"));
        let t = fields[0].parse::<u64>().map_err(|_| bad("t_us"))?;
        let x = fields[1].parse::<u16>().map_err(|_| bad("x"))?;
        let y = fields[2].parse::<u16>().map_err(|_| bad("y"))?;
        let p = fields[3].parse::<i8>().map_err(|_| bad("p"))?;
        if p != 1 && p != -1 {
            return Err(Error::parse_line("events.csv", lineno, format!("polarity must be -1 or 1, got {p}")));
        }
        events.push(Event { t, x, y, p });
    }
    Ok(events)
}

pub fn encode_events_csv(stream: &EventStream) -> String {
    let mut s = String::with_capacity(16 + stream.len() * 20);
    s.push_str("t_us,x,y,p\n");
    for e in stream.events() {
        s.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
    }
    s
}

pub fn parse_gt(text: &str, frame_count: usize) -> Result<GroundTruth> {
    let mut gt = GroundTruth::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::parse_line("gt.txt", lineno, "expected frame_index,x,y,w,h"));
        }
        let index = fields[0]
            .parse::<usize>()
            .map_err(|_| Error::parse_line("gt.txt", lineno, "bad frame index"))?;
        let mut v = [0.0; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = fields[k + 1]
                .parse::<f64>()
                .map_err(|_| Error::parse_line("gt.txt", lineno, "bad coordinate"))?;
        }
        let b = BBox::from_slice(&v);
        if !b.is_valid() {
            return Err(Error::parse_line("gt.txt", lineno, "box must have w > 0 and h > 0"));
        }
        if index >= frame_count {
            return Err(Error::Data(format!("gt.txt line {lineno} references missing frame {index}")));
        }
        gt.boxes.insert(index, b);
    }
    Ok(gt)
}

pub fn encode_gt(gt: &GroundTruth) -> String {
    gt.boxes
        .iter()
        .map(|(i, b)| format!("{i},{},{},{},{}\n", b.x, b.y, b.w, b.h))
        .collect()
}

/// Writes a sequence in the directory layout read by [`load_sequence`].
pub fn write_sequence(dir: &Path, seq: &Sequence, format: EventFileFormat) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    let mut meta = seq.meta.clone();
    meta.frame_timestamps_us = Some(seq.frames.iter().map(|f| f.t).collect());
    let mut f = fs::File::create(dir.join("meta.json"))?;
    f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())?;
    f.write_all(b"\n")?;
    for fr in &seq.frames {
        fr.image.write_pgm(&frame_path(dir, fr.index))?;
    }
    match format {
        EventFileFormat::Binary => fs::write(dir.join("events.evt"), encode_evt(&seq.stream))?,
        EventFileFormat::Csv => fs::write(dir.join("events.csv"), encode_events_csv(&seq.stream))?,
    }
    fs::write(dir.join("gt.txt"), encode_gt(&seq.gt))?;
    Ok(())
}

/// Sequence directories directly below `root` (those containing `meta.json`), sorted by name.
/// `root` itself is returned when it is a sequence directory.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("meta.json").exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| not_found_or_io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("meta.json").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(ts: &[u64]) -> EventStream {
        EventStream::new(10, 10, ts.iter().map(|&t| Event::new(t, 1, 1, 1)).collect())
    }

    #[test]
    fn slice_examples() {
        let s = stream(&[0, 10, 20, 29]);
        let ts = |s: &EventStream| s.events().iter().map(|e| e.t).collect::<Vec<_>>();
        assert_eq!(ts(&slice(&s, 10, 20, false).unwrap()), vec![10]);
        assert_eq!(ts(&slice(&s, 10, 20, true).unwrap()), vec![10, 20]);
        assert_eq!(slice(&stream(&[0]), 0, 0, true).unwrap().len(), 1);
        assert_eq!(slice(&stream(&[0]), 0, 0, false).unwrap().len(), 0);
        assert!(matches!(slice(&s, 5, 4, false), Err(Error::Range(_))));
    }

    #[test]
    fn slice_unsorted_falls_back_to_filter() {
        let s = stream(&[20, 5, 10, 3]);
        let out = slice(&s, 4, 15, false).unwrap();
        assert_eq!(out.events().iter().map(|e| e.t).collect::<Vec<_>>(), vec![5, 10]);
    }

    #[test]
    fn validate_reports() {
        assert!(validate(&stream(&[1, 2, 2, 3])).is_empty());
        let r = validate(&stream(&[5, 3]));
        assert_eq!(r.sortedness, vec![1]);
        let bad = EventStream::new(4, 4, vec![Event::new(0, 4, 0, 1), Event::new(1, 0, 0, 0)]);
        let r = validate(&bad);
        assert_eq!(r.out_of_bounds, vec![0]);
        assert_eq!(r.bad_polarity, vec![1]);
    }

    #[test]
    fn csv_polarity_zero_reports_line() {
        let mut text = String::from("t_us,x,y,p\n");
        for t in 0..5 {
            text.push_str(&format!("{t},1,1,1\n"));
        }
        text.push_str("6,1,1,0\n");
        match parse_events_csv(&text) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, crate::error::ParseLocation::Line(7)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn evt_roundtrip_and_truncation() {
        let s = EventStream::new(346, 260, vec![Event::new(7, 345, 259, -1), Event::new(u64::MAX, 0, 0, 1)]);
        let bytes = encode_evt(&s);
        let (w, h, ev) = parse_evt(&bytes).unwrap();
        assert_eq!((w, h), (346, 260));
        assert_eq!(ev, s.events());
        assert!(parse_evt(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn gt_rejects_degenerate_and_missing_frames() {
        assert!(parse_gt("0,1,1,0,3\n", 2).is_err());
        assert!(matches!(parse_gt("5,1,1,2,3\n", 2), Err(Error::Data(_))));
        let gt = parse_gt("0,1.5,2,3,4\n1,0.1,0.2,0.3,0.4\n", 2).unwrap();
        assert_eq!(gt.get(1), Some(&BBox::new(0.1, 0.2, 0.3, 0.4)));
    }
}
