//! Conversion of asynchronous events into fixed-size 2-D frames.
//!
//! The default representation splits the inter-frame interval into `n` equal bins and
//! writes, per pixel, the polarity of the most recent event inside each bin
//! (255 for positive, 0 for negative, 127 when the pixel saw no event). Five classic
//! representations are provided for comparison: per-polarity event counts, signed
//! event frames, exponential time surfaces, linearly decaying time surfaces and a
//! bilinear temporal voxel grid.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_stream::{slice, EventStream};

pub const NO_EVENT: u8 = 127;

/// `n` equal bins over `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinSpec {
    pub t_start: u64,
    pub t_end: u64,
    pub n: usize,
}

impl BinSpec {
    pub fn new(t_start: u64, t_end: u64, n: usize) -> Result<Self> {
        let spec = BinSpec { t_start, t_end, n };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if self.t_end <= self.t_start || self.n == 0 {
            return Err(Error::Range(format!(
                "invalid bin spec [{}, {}] with n = {}",
                self.t_start, self.t_end, self.n
            )));
        }
        Ok(())
    }

    /// Bin width in microseconds.
    pub fn width(&self) -> f64 {
        (self.t_end - self.t_start) as f64 / self.n as f64
    }

    /// First integer timestamp belonging to bin `i` (0-based); `i == n` gives one past the
    /// half-open range of the last bin.
    pub fn boundary(&self, i: usize) -> u64 {
        let span = (self.t_end - self.t_start) as u128;
        let num = span * i as u128;
        let n = self.n as u128;
        self.t_start + num.div_ceil(n) as u64
    }

    /// Time range of bin `i` as (start, end); the last bin ends at `t_end` inclusive.
    pub fn bin_range(&self, i: usize) -> (u64, u64) {
        let end = if i + 1 == self.n { self.t_end } else { self.boundary(i + 1) };
        (self.boundary(i), end)
    }
}

/// Splits `[t_start, t_end]` into `n` half-open bins, the last one closed.
pub fn bin_events(stream: &EventStream, spec: &BinSpec) -> Result<Vec<EventStream>> {
    spec.check()?;
    (0..spec.n)
        .map(|i| {
            let last = i + 1 == spec.n;
            let (lo, hi) = if last {
                (spec.boundary(i), spec.t_end)
            } else {
                (spec.boundary(i), spec.boundary(i + 1))
            };
            slice(stream, lo, hi, last)
        })
        .collect()
}

/// Latest-timestamp polarity frame for one bin.
///
/// Among events at one pixel, the one with the greatest timestamp sets the value; ties
/// go to the later event in stream order.
pub fn aggregate_latest_polarity(bin: &EventStream, width: usize, height: usize) -> Vec<u8> {
    let mut frame = vec![NO_EVENT; width * height];
    let mut latest: Vec<Option<u64>> = vec![None; width * height];
    for e in bin.events() {
        let idx = e.y as usize * width + e.x as usize;
        if latest[idx].is_none_or(|t| e.t >= t) {
            latest[idx] = Some(e.t);
            frame[idx] = if e.p > 0 { 255 } else { 0 };
        }
    }
    frame
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    LatestPolarity,
    EventCount,
    EventFrame,
    TimeSurface,
    Tsltd,
    ZhuVoxel,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 6] = [
        AggregationMethod::LatestPolarity,
        AggregationMethod::EventCount,
        AggregationMethod::EventFrame,
        AggregationMethod::TimeSurface,
        AggregationMethod::Tsltd,
        AggregationMethod::ZhuVoxel,
    ];

    /// Output channels produced per time bin.
    pub fn channels(&self) -> usize {
        match self {
            AggregationMethod::LatestPolarity | AggregationMethod::EventFrame | AggregationMethod::ZhuVoxel => 1,
            AggregationMethod::EventCount | AggregationMethod::TimeSurface | AggregationMethod::Tsltd => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregationMethod::LatestPolarity => "latest_polarity",
            AggregationMethod::EventCount => "event_count",
            AggregationMethod::EventFrame => "event_frame",
            AggregationMethod::TimeSurface => "time_surface",
            AggregationMethod::Tsltd => "tsltd",
            AggregationMethod::ZhuVoxel => "zhu_voxel",
        }
    }
}

impl FromStr for AggregationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregationMethod::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation method {s:?}")))
    }
}

impl std::fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Time context for the baseline representations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineParams {
    pub t_start: u64,
    pub t_end: u64,
    /// Time-surface decay constant in microseconds; defaults to a third of the window.
    pub tau: Option<f64>,
}

impl BaselineParams {
    pub fn new(t_start: u64, t_end: u64) -> Self {
        BaselineParams { t_start, t_end, tau: None }
    }

    fn span(&self) -> f64 {
        ((self.t_end.saturating_sub(self.t_start)) as f64).max(1.0)
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(self.span() / 3.0)
    }
}

/// Channel-major real-valued maps in [0, 255] before 8-bit quantization.
pub fn aggregate_baseline(
    bin: &EventStream,
    method: AggregationMethod,
    params: &BaselineParams,
    width: usize,
    height: usize,
) -> Result<Vec<Vec<f64>>> {
    let npix = width * height;
    let idx = |x: u16, y: u16| y as usize * width + x as usize;
    let channel = |p: i8| usize::from(p < 0);
    match method {
        AggregationMethod::LatestPolarity => Err(Error::Config(
            "latest_polarity is not a baseline method; use aggregate_latest_polarity".into(),
        )),
        AggregationMethod::EventCount => {
            let mut counts = vec![vec![0.0f64; npix]; 2];
            for e in bin.events() {
                counts[channel(e.p)][idx(e.x, e.y)] += 1.0;
            }
            let max = counts.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
            if max > 0.0 {
                for v in counts.iter_mut().flatten() {
                    *v = 255.0 * *v / max;
                }
            }
            Ok(counts)
        }
        AggregationMethod::EventFrame => {
            let mut sum = vec![0.0f64; npix];
            for e in bin.events() {
                sum[idx(e.x, e.y)] += e.p as f64;
            }
            Ok(vec![signed_to_byte_range(sum)])
        }
        AggregationMethod::TimeSurface | AggregationMethod::Tsltd => {
            let mut latest: Vec<Vec<Option<u64>>> = vec![vec![None; npix]; 2];
            for e in bin.events() {
                let slot = &mut latest[channel(e.p)][idx(e.x, e.y)];
                if slot.is_none_or(|t| e.t >= t) {
                    *slot = Some(e.t);
                }
            }
            let span = params.span();
            let tau = params.tau();
            let surface = |t: Option<u64>| match t {
                None => 0.0,
                Some(t) => {
                    let age = params.t_end.saturating_sub(t) as f64;
                    if method == AggregationMethod::TimeSurface {
                        255.0 * (-age / tau).exp()
                    } else {
                        255.0 * (1.0 - age / span).max(0.0)
                    }
                }
            };
            Ok(latest
                .into_iter()
                .map(|ch| ch.into_iter().map(surface).collect())
                .collect())
        }
        AggregationMethod::ZhuVoxel => Ok(zhu_voxel(bin, params, 1, width, height)),
    }
}

/// Bilinear temporal voxel grid with `n` temporal samples over `[t_start, t_end]`,
/// mapped affinely so zero lands on 127.
pub fn zhu_voxel(
    events: &EventStream,
    params: &BaselineParams,
    n: usize,
    width: usize,
    height: usize,
) -> Vec<Vec<f64>> {
    let npix = width * height;
    let mut grid = vec![vec![0.0f64; npix]; n];
    let span = params.span();
    for e in events.events() {
        let idx = e.y as usize * width + e.x as usize;
        let tn = (n - 1) as f64 * (e.t.saturating_sub(params.t_start)) as f64 / span;
        for (i, ch) in grid.iter_mut().enumerate() {
            let w = 1.0 - (i as f64 - tn).abs();
            if w > 0.0 {
                ch[idx] += e.p as f64 * w;
            }
        }
    }
    let max = grid.iter().flatten().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if max > 0.0 { 127.0 / max } else { 0.0 };
    grid.into_iter()
        .map(|ch| ch.into_iter().map(|v| 127.0 + v * scale).collect())
        .collect()
}

fn signed_to_byte_range(values: Vec<f64>) -> Vec<f64> {
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if max > 0.0 { 127.0 / max } else { 0.0 };
    values.into_iter().map(|v| 127.0 + v * scale).collect()
}

pub fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// `bins * channels_per_bin` planes of `height x width` 8-bit values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatedFrames {
    pub width: usize,
    pub height: usize,
    pub bins: usize,
    pub channels_per_bin: usize,
    pub method: AggregationMethod,
    pub spec: BinSpec,
    pub data: Vec<u8>,
}

impl AggregatedFrames {
    pub fn channels(&self) -> usize {
        self.bins * self.channels_per_bin
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Planes belonging to bin `i`.
    pub fn bin_planes(&self, i: usize) -> &[u8] {
        let n = self.width * self.height * self.channels_per_bin;
        &self.data[i * n..(i + 1) * n]
    }
}

/// Bins the events of `[t_j, t_next]` and aggregates each bin with `method`.
pub fn aggregate_interframe(
    stream: &EventStream,
    t_j: u64,
    t_next: u64,
    n: usize,
    method: AggregationMethod,
) -> Result<AggregatedFrames> {
    let spec = BinSpec::new(t_j, t_next, n)?;
    let (w, h) = (stream.width, stream.height);
    let data: Vec<u8> = if method == AggregationMethod::ZhuVoxel {
        let interval = slice(stream, t_j, t_next, true)?;
        zhu_voxel(&interval, &BaselineParams::new(t_j, t_next), n, w, h)
            .into_iter()
            .flatten()
            .map(quantize)
            .collect()
    } else {
        let bins = bin_events(stream, &spec)?;
        let per_bin: Vec<Result<Vec<u8>>> = bins
            .par_iter()
            .enumerate()
            .map(|(i, bin)| {
                if method == AggregationMethod::LatestPolarity {
                    Ok(aggregate_latest_polarity(bin, w, h))
                } else {
                    let (lo, hi) = spec.bin_range(i);
                    let maps = aggregate_baseline(bin, method, &BaselineParams::new(lo, hi), w, h)?;
                    Ok(maps.into_iter().flatten().map(quantize).collect())
                }
            })
            .collect();
        let mut data = Vec::with_capacity(n * method.channels() * w * h);
        for b in per_bin {
            data.extend(b?);
        }
        data
    };
    Ok(AggregatedFrames {
        width: w,
        height: h,
        bins: n,
        channels_per_bin: method.channels(),
        method,
        spec,
        data,
    })
}
