//! Synthetic frame and event sequences with exact ground truth.
//!
//! A latent intensity image in [0, 1] is rendered `substeps` times per frame period.
//! Each pixel keeps a reference log intensity and fires one event per contrast
//! threshold crossed, timestamped by linear interpolation between substeps. Frames are
//! rendered from the same latent scene, optionally degraded; events never are.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::event_stream::{write_sequence, Event, EventFileFormat, EventStream, FrameRecord, GroundTruth, Sequence, SequenceMeta};
use crate::image::GrayImage;

/// Offset inside `log(I + LOG_EPS)`.
pub const LOG_EPS: f64 = 1e-3;
const LL_GAIN: f64 = 0.15;
const LL_NOISE: f64 = 0.02;
const HDR_HEADROOM: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    #[default]
    Rect,
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Texture {
    #[default]
    Flat,
    /// Squares of `period` pixels alternating between the object intensity and `other`.
    Checker { period: f64, other: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Trajectory {
    /// Center through `(t_seconds, x, y)` waypoints, held constant outside them.
    Linear { waypoints: Vec<[f64; 3]> },
    Sinusoid {
        center: [f64; 2],
        amplitude: [f64; 2],
        period_s: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl Trajectory {
    pub fn position(&self, t: f64) -> (f64, f64) {
        match self {
            Trajectory::Linear { waypoints } => {
                let (first, last) = (waypoints[0], waypoints[waypoints.len() - 1]);
                if t <= first[0] {
                    return (first[1], first[2]);
                }
                for w in waypoints.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    if t <= b[0] {
                        let f = if b[0] > a[0] { (t - a[0]) / (b[0] - a[0]) } else { 1.0 };
                        return (a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2]));
                    }
                }
                (last[1], last[2])
            }
            Trajectory::Sinusoid {
                center,
                amplitude,
                period_s,
                phase,
            } => {
                let a = 2.0 * std::f64::consts::PI * t / period_s + phase;
                (center[0] + amplitude[0] * a.sin(), center[1] + amplitude[1] * a.cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    #[serde(default)]
    pub shape: Shape,
    #[serde(default)]
    pub texture: Texture,
    pub intensity: f64,
    pub width: f64,
    pub height: f64,
    pub trajectory: Trajectory,
    /// Relative size oscillation `1 + a sin(2 pi t / scale_period_s)`.
    #[serde(default)]
    pub scale_amplitude: f64,
    #[serde(default = "one")]
    pub scale_period_s: f64,
}

fn one() -> f64 {
    1.0
}

impl ObjectSpec {
    pub fn bbox(&self, t: f64) -> BBox {
        let (cx, cy) = self.trajectory.position(t);
        let s = 1.0 + self.scale_amplitude * (2.0 * std::f64::consts::PI * t / self.scale_period_s).sin();
        BBox::from_center(cx, cy, self.width * s, self.height * s)
    }

    fn value_at(&self, b: &BBox, px: f64, py: f64) -> Option<f64> {
        let inside = match self.shape {
            Shape::Rect => px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h,
            Shape::Disk => {
                let (cx, cy) = b.center();
                let (dx, dy) = ((px - cx) / (b.w / 2.0), (py - cy) / (b.h / 2.0));
                dx * dx + dy * dy <= 1.0
            }
        };
        if !inside {
            return None;
        }
        Some(match self.texture {
            Texture::Flat => self.intensity,
            Texture::Checker { period, other } => {
                let (u, v) = (((px - b.x) / period).floor() as i64, ((py - b.y) / period).floor() as i64);
                if (u + v).rem_euclid(2) == 0 {
                    self.intensity
                } else {
                    other
                }
            }
        })
    }
}

/// Frame degradation; events are always computed from the clean latent scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Degradation {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Low light: dim, noisy frames.
    #[serde(rename = "LL")]
    LowLight,
    /// High dynamic range: bright regions saturate.
    #[serde(rename = "HDR")]
    Hdr,
    /// Fast motion with blur: each frame averages the substeps around its timestamp.
    #[serde(rename = "FWB")]
    Blur,
}

impl Degradation {
    pub fn attribute(&self) -> Option<&'static str> {
        match self {
            Degradation::None => None,
            Degradation::LowLight => Some("LL"),
            Degradation::Hdr => Some("HDR"),
            Degradation::Blur => Some("FWB"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub frames: usize,
    pub substeps: usize,
    pub background: f64,
    /// The first object is the tracked target.
    pub objects: Vec<ObjectSpec>,
    pub contrast_threshold: f64,
    pub mode: Degradation,
    /// Spurious events per pixel per second.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            name: "scene".into(),
            width: 346,
            height: 260,
            fps: 40.0,
            frames: 40,
            substeps: 16,
            background: 0.3,
            objects: vec![ObjectSpec {
                shape: Shape::Rect,
                texture: Texture::Flat,
                intensity: 0.8,
                width: 40.0,
                height: 30.0,
                trajectory: Trajectory::Linear {
                    waypoints: vec![[0.0, 80.0, 130.0], [1.0, 266.0, 130.0]],
                },
                scale_amplitude: 0.0,
                scale_period_s: 1.0,
            }],
            contrast_threshold: 0.15,
            mode: Degradation::None,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn period_us(&self) -> u64 {
        (1e6 / self.fps).round() as u64
    }

    /// Timestamp of frame `j`; the first frame sits one period after the start so its
    /// inter-frame window holds events too.
    pub fn frame_time(&self, j: usize) -> u64 {
        (j as u64 + 1) * self.period_us()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene {}: {m}", self.name)));
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return bad("geometry must be within 1..=65535");
        }
        if !(self.fps > 0.0) || self.period_us() == 0 || self.frames == 0 || self.substeps == 0 {
            return bad("fps, frames and substeps must be positive");
        }
        if !(self.contrast_threshold > 0.0) || !(self.noise_rate >= 0.0) {
            return bad("contrast threshold must be positive and noise rate non-negative");
        }
        if !(0.0..=1.0).contains(&self.background) {
            return bad("background intensity must be in [0, 1]");
        }
        if self.objects.is_empty() {
            return bad("at least one object is required");
        }
        for o in &self.objects {
            if !(o.width > 0.0 && o.height > 0.0) || !(0.0..=1.0).contains(&o.intensity) {
                return bad("objects need positive size and intensity in [0, 1]");
            }
            if let Texture::Checker { period, other } = o.texture {
                if !(period > 0.0) || !(0.0..=1.0).contains(&other) {
                    return bad("checker period must be positive and intensity in [0, 1]");
                }
            }
            match &o.trajectory {
                Trajectory::Linear { waypoints } if waypoints.is_empty() => return bad("empty waypoint list"),
                Trajectory::Sinusoid { period_s, .. } if !(*period_s > 0.0) => return bad("sinusoid period must be positive"),
                _ => {}
            }
            if !(o.scale_period_s > 0.0) || !(o.scale_amplitude.abs() < 1.0) {
                return bad("scale oscillation must keep the size positive");
            }
        }
        // the target must stay at least partially visible
        let end = self.frame_time(self.frames - 1) as f64 * 1e-6;
        let checks = self.frames * self.substeps;
        for k in 0..=checks {
            let t = end * k as f64 / checks as f64;
            for o in &self.objects {
                let b = o.bbox(t);
                if b.x + b.w <= 0.0 || b.y + b.h <= 0.0 || b.x >= self.width as f64 || b.y >= self.height as f64 {
                    return bad("an object leaves the image");
                }
            }
        }
        Ok(())
    }

    /// Latent intensity at time `t` (seconds), row-major.
    pub fn render(&self, t: f64) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut img = vec![self.background; w * h];
        for o in &self.objects {
            let b = o.bbox(t);
            let x0 = b.x.floor().max(0.0) as usize;
            let y0 = b.y.floor().max(0.0) as usize;
            let x1 = ((b.x + b.w).ceil().max(0.0) as usize).min(w);
            let y1 = ((b.y + b.h).ceil().max(0.0) as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    if let Some(v) = o.value_at(&b, x as f64 + 0.5, y as f64 + 0.5) {
                        img[y * w + x] = v;
                    }
                }
            }
        }
        img
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub sequence: Sequence,
}

/// Renders a scene into frames, events and ground truth.
pub fn simulate(spec: &SceneSpec) -> Result<SimOutput> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.contrast_threshold;
    let log = |v: f64| (v + LOG_EPS).ln();

    let mut l_prev: Vec<f64> = spec.render(0.0).into_iter().map(log).collect();
    let mut l_ref = l_prev.clone();
    let mut events: Vec<Event> = Vec::new();
    let noise = (spec.noise_rate > 0.0).then_some(spec.noise_rate);
    let mut t_prev = 0u64;
    let last = spec.frame_time(spec.frames - 1);
    let steps = spec.frames * spec.substeps;
    for k in 1..=steps {
        let t_now = (last as u128 * k as u128 / steps as u128) as u64;
        let dt = (t_now - t_prev) as f64;
        let l_now: Vec<f64> = spec.render(t_now as f64 * 1e-6).into_iter().map(log).collect();
        let mut batch: Vec<Event> = Vec::new();
        for i in 0..w * h {
            let d = l_now[i] - l_ref[i];
            let n = (d.abs() / c + 1e-9).floor() as i64;
            if n == 0 {
                continue;
            }
            let s = d.signum();
            let span = l_now[i] - l_prev[i];
            for m in 1..=n {
                let level = l_ref[i] + s * m as f64 * c;
                let f = if span.abs() > 0.0 { ((level - l_prev[i]) / span).clamp(0.0, 1.0) } else { 1.0 };
                let t = t_prev + (f * dt).round() as u64;
                batch.push(Event::new(t.max(t_prev + 1).min(t_now), (i % w) as u16, (i / w) as u16, s as i8));
            }
            l_ref[i] += s * n as f64 * c;
        }
        if let Some(rate) = noise {
            let lambda = rate * (w * h) as f64 * dt * 1e-6;
            let count = Poisson::new(lambda).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
            for _ in 0..count {
                let t = rng.random_range(t_prev + 1..=t_now.max(t_prev + 1));
                let p = if rng.random_bool(0.5) { 1 } else { -1 };
                batch.push(Event::new(t, rng.random_range(0..w) as u16, rng.random_range(0..h) as u16, p));
            }
        }
        batch.sort_by_key(|e| e.t);
        events.extend(batch);
        l_prev = l_now;
        t_prev = t_now;
    }

    let period = spec.period_us() as f64 * 1e-6;
    let read_noise = Normal::new(0.0, LL_NOISE).expect("positive sigma");
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = GroundTruth::default();
    for j in 0..spec.frames {
        let t = spec.frame_time(j) as f64 * 1e-6;
        let latent = match spec.mode {
            Degradation::Blur => {
                let mut acc = vec![0.0; w * h];
                for s in 0..spec.substeps {
                    let ts = t + period * ((s as f64 + 0.5) / spec.substeps as f64 - 0.5);
                    acc.iter_mut().zip(spec.render(ts)).for_each(|(a, v)| *a += v);
                }
                acc.iter().map(|a| a / spec.substeps as f64).collect()
            }
            _ => spec.render(t),
        };
        let data = latent
            .into_iter()
            .map(|v| match spec.mode {
                Degradation::LowLight => quantize(LL_GAIN * v + read_noise.sample(&mut rng)),
                Degradation::Hdr => quantize(v / HDR_HEADROOM),
                _ => quantize(v),
            })
            .collect();
        frames.push(FrameRecord {
            index: j,
            t: spec.frame_time(j),
            image: GrayImage::new(w, h, data)?,
        });
        gt.boxes.insert(j, spec.objects[0].bbox(t));
    }
    let meta = SequenceMeta {
        width: w,
        height: h,
        fps: spec.fps,
        frame_timestamps_us: Some(frames.iter().map(|f| f.t).collect()),
        attributes: spec.mode.attribute().map(|a| vec![a.to_string()]).unwrap_or_default(),
        name: Some(spec.name.clone()),
    };
    Ok(SimOutput {
        sequence: Sequence {
            meta,
            stream: EventStream::new(w, h, events),
            frames,
            gt,
        },
    })
}

/// Simulates every spec into `out_dir/<name>` and returns the event count of each.
pub fn make_dataset(specs: &[SceneSpec], out_dir: &Path) -> Result<Vec<usize>> {
    let mut names = std::collections::BTreeSet::new();
    for s in specs {
        if !names.insert(s.name.as_str()) {
            return Err(Error::Config(format!("duplicate scene name {}", s.name)));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut counts = Vec::with_capacity(specs.len());
    for s in specs {
        let out = simulate(s)?;
        write_sequence(&out_dir.join(&s.name), &out.sequence, EventFileFormat::Binary)?;
        counts.push(out.sequence.stream.len());
        log::info!("simulated {} ({} events)", s.name, out.sequence.stream.len());
    }
    Ok(counts)
}

/// `count` varied scenes at `width x height`: flat and textured rects and disks on
/// linear or sinusoidal paths, cycling through clean, blurred, low-light and HDR frames.
pub fn desk_specs(count: usize, width: usize, height: usize, frames: usize, seed: u64) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);
    let modes = [Degradation::None, Degradation::Blur, Degradation::None, Degradation::LowLight, Degradation::None, Degradation::Hdr];
    (0..count)
        .map(|i| {
            let size = wf.min(hf) * rng.random_range(0.18..0.28);
            let (ow, oh) = (size * rng.random_range(0.8..1.25), size * rng.random_range(0.8..1.25));
            let (mx, my) = (ow / 2.0 + 2.0, oh / 2.0 + 2.0);
            let pick = |rng: &mut ChaCha8Rng| [rng.random_range(mx..wf - mx), rng.random_range(my..hf - my)];
            let duration = frames as f64 / 40.0;
            let trajectory = if i % 2 == 0 {
                let (a, b, c) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
                Trajectory::Linear {
                    waypoints: vec![[0.0, a[0], a[1]], [duration / 2.0, b[0], b[1]], [duration, c[0], c[1]]],
                }
            } else {
                let amp = [rng.random_range(0.1..0.3) * wf, rng.random_range(0.1..0.3) * hf];
                Trajectory::Sinusoid {
                    center: [wf / 2.0, hf / 2.0],
                    amplitude: [amp[0].min(wf / 2.0 - mx), amp[1].min(hf / 2.0 - my)],
                    period_s: duration * rng.random_range(0.8..1.5),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            };
            let bright = rng.random_bool(0.5);
            let (bg, fg) = if bright { (0.25, 0.85) } else { (0.7, 0.15) };
            let texture = if i % 3 == 1 {
                Texture::Checker {
                    period: (size / 4.0).max(2.0),
                    other: (fg + bg) / 2.0,
                }
            } else {
                Texture::Flat
            };
            let mut objects = vec![ObjectSpec {
                shape: if i % 4 == 3 { Shape::Disk } else { Shape::Rect },
                texture,
                intensity: fg,
                width: ow,
                height: oh,
                trajectory,
                scale_amplitude: 0.0,
                scale_period_s: 1.0,
            }];
            if i % 4 == 2 {
                // slower distractor
                let d = size * 0.6;
                let a = [rng.random_range(d..wf - d), rng.random_range(d..hf - d)];
                let b = [rng.random_range(d..wf - d), rng.random_range(d..hf - d)];
                objects.push(ObjectSpec {
                    shape: Shape::Disk,
                    texture: Texture::Flat,
                    intensity: (fg + bg) / 2.0,
                    width: d,
                    height: d,
                    trajectory: Trajectory::Linear {
                        waypoints: vec![[0.0, a[0], a[1]], [duration, b[0], b[1]]],
                    },
                    scale_amplitude: 0.0,
                    scale_period_s: 1.0,
                });
            }
            SceneSpec {
                name: format!("seq_{i:02}"),
                width,
                height,
                frames,
                background: bg,
                objects,
                mode: modes[i % modes.len()],
                seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
                ..SceneSpec::default()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::validate;

    fn small(traj: Trajectory) -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 48,
            frames: 10,
            objects: vec![ObjectSpec {
                shape: Shape::Rect,
                texture: Texture::Flat,
                intensity: 0.8,
                width: 12.0,
                height: 10.0,
                trajectory: traj,
                scale_amplitude: 0.0,
                scale_period_s: 1.0,
            }],
            ..SceneSpec::default()
        }
    }

    fn linear(speed: f64) -> Trajectory {
        Trajectory::Linear {
            waypoints: vec![[0.0, 16.0, 24.0], [1.0, 16.0 + speed, 24.0]],
        }
    }

    #[test]
    fn static_scene_is_silent() {
        let out = simulate(&small(linear(0.0))).unwrap();
        assert!(out.sequence.stream.is_empty());
    }

    #[test]
    fn two_threshold_step_gives_two_events() {
        // a 1x1 object whose log intensity is exactly 2C above the background jumps
        // from pixel (5, 5) to pixel (0, 0) within one substep
        let c: f64 = 0.15;
        let bg: f64 = 0.2;
        let fg = (bg + LOG_EPS) * (2.0 * c).exp() - LOG_EPS;
        let mut spec = small(Trajectory::Linear {
            waypoints: vec![[0.0, 5.5, 5.5], [0.0124, 5.5, 5.5], [0.0125, 0.5, 0.5]],
        });
        spec.objects[0].width = 1.0;
        spec.objects[0].height = 1.0;
        spec.objects[0].intensity = fg;
        spec.background = bg;
        spec.frames = 2;
        let out = simulate(&spec).unwrap();
        let at = |x, y| -> Vec<i8> {
            out.sequence.stream.events().iter().filter(|e| (e.x, e.y) == (x, y)).map(|e| e.p).collect()
        };
        assert_eq!(at(0, 0), vec![1, 1]);
        assert_eq!(at(5, 5), vec![-1, -1]);
        assert_eq!(out.sequence.stream.len(), 4);
    }

    #[test]
    fn linear_gt_and_valid_stream() {
        let out = simulate(&small(linear(30.0))).unwrap();
        let s = &out.sequence;
        assert!(validate(&s.stream).is_empty());
        let cx: Vec<f64> = (0..10).map(|j| s.gt.get(j).unwrap().center().0).collect();
        let d = cx[1] - cx[0];
        for j in 1..10 {
            assert!((cx[j] - cx[j - 1] - d).abs() < 1e-9);
        }
    }

    #[test]
    fn balance_and_speed() {
        let slow = simulate(&small(linear(20.0))).unwrap().sequence.stream;
        let fast = simulate(&small(linear(40.0))).unwrap().sequence.stream;
        let pos = slow.events().iter().filter(|e| e.p > 0).count() as f64;
        let neg = slow.len() as f64 - pos;
        assert!((pos - neg).abs() <= 0.05 * slow.len() as f64, "{pos} vs {neg}");
        assert!(fast.len() >= 2 * slow.len(), "{} vs {}", fast.len(), slow.len());
    }

    #[test]
    fn degraded_modes_keep_events() {
        let base = small(linear(30.0));
        let clean = simulate(&base).unwrap().sequence;
        for mode in [Degradation::LowLight, Degradation::Hdr, Degradation::Blur] {
            let s = simulate(&SceneSpec { mode, ..base.clone() }).unwrap().sequence;
            assert_eq!(s.stream, clean.stream);
            assert_ne!(s.frames, clean.frames);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small(linear(10.0));
        s.contrast_threshold = 0.0;
        assert!(matches!(simulate(&s), Err(Error::Config(_))));
        let s = small(linear(10_000.0));
        assert!(matches!(simulate(&s), Err(Error::Config(_))));
    }
}
