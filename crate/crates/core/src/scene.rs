//! Procedural dynamic scenes and the plain-text scene file.
//!
//! A scene is a sequence of frames, each an ordered list of Gaussian
//! primitives. The position of a primitive in that list is its identity.
//! Generated scenes plant a salient structure: a fraction of primitives are
//! bright, small and clustered on simple shapes that drift over time, the
//! rest is a faint static background.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Aabb { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a]) {
                return Err(Error::Validation {
                    field: "bbox",
                    reason: format!("min {:?} must be < max {:?} componentwise", self.min, self.max),
                });
            }
        }
        Ok(())
    }

    /// Closed-box containment.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self) -> Vec3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }
}

impl Default for Aabb {
    fn default() -> Self {
        Aabb {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vec3,
    pub opacity: f64,
    pub scale: Vec3,
}

impl GaussianPrimitive {
    pub fn validate(&self) -> Result<()> {
        let finite = self.center.iter().chain(self.scale.iter()).all(|v| v.is_finite())
            && self.opacity.is_finite();
        if !finite {
            return Err(Error::Validation {
                field: "primitive",
                reason: "non-finite field".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Validation {
                field: "opacity",
                reason: format!("{} outside [0,1]", self.opacity),
            });
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Validation {
                field: "scale",
                reason: format!("{:?} has a non-positive component", self.scale),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub primitives: Vec<GaussianPrimitive>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub clusters: usize,
    pub primitives_per_cluster: usize,
    pub fraction_salient: f64,
    pub motion_amplitude: f64,
    pub bbox: Aabb,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 2026,
            num_frames: 8,
            clusters: 4,
            primitives_per_cluster: 96,
            fraction_salient: 0.25,
            motion_amplitude: 0.02,
            bbox: Aabb::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let count = |field: &'static str, v: usize| {
            if v == 0 {
                Err(Error::Validation {
                    field,
                    reason: "must be >= 1".into(),
                })
            } else {
                Ok(())
            }
        };
        count("num_frames", self.num_frames)?;
        count("clusters", self.clusters)?;
        count("primitives_per_cluster", self.primitives_per_cluster)?;
        if !(0.0..=1.0).contains(&self.fraction_salient) {
            return Err(Error::Validation {
                field: "fraction_salient",
                reason: format!("{} outside [0,1]", self.fraction_salient),
            });
        }
        if !(self.motion_amplitude.is_finite() && self.motion_amplitude >= 0.0) {
            return Err(Error::Validation {
                field: "motion_amplitude",
                reason: format!("{} must be finite and >= 0", self.motion_amplitude),
            });
        }
        self.bbox.validate()
    }

    pub fn num_primitives(&self) -> usize {
        self.clusters * self.primitives_per_cluster
    }

    pub fn num_salient(&self) -> usize {
        (self.fraction_salient * self.num_primitives() as f64).round() as usize
    }
}

/// A generated scene together with the planted ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub frames: Vec<Frame>,
    /// `salient[i]` tells whether primitive identity `i` belongs to the salient structure.
    pub salient: Vec<bool>,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Vec<Frame>> {
    Ok(generate_scene_with_truth(spec)?.frames)
}

#[derive(Clone, Copy)]
enum Shape {
    Segment,
    Square,
    Shell,
}

/// Generation uses only `+ - * /` and `sqrt`, all correctly rounded under
/// IEEE-754, so output is bit-identical across platforms.
pub fn generate_scene_with_truth(spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &[tag::SCENE]);
    let bbox = spec.bbox;
    let ext = bbox.extent();
    let unit = ext[0].min(ext[1]).min(ext[2]);
    // One pixel of a 64 px render of the narrowest axis.
    let s_base = unit / 64.0;
    let shape_radius = 0.12 * unit;
    let jitter = 0.25 * s_base;
    let margin = shape_radius + 2.0 * jitter;

    let n = spec.num_primitives();
    let n_salient = spec.num_salient();

    struct Cluster {
        origin: Vec3,
        velocity: Vec3,
    }
    let clusters: Vec<Cluster> = (0..spec.clusters)
        .map(|_| {
            let mut origin = [0.0; 3];
            for a in 0..3 {
                let lo = bbox.min[a] + margin;
                let hi = bbox.max[a] - margin;
                origin[a] = if lo < hi {
                    rng::uniform(&mut rng, lo, hi)
                } else {
                    0.5 * (bbox.min[a] + bbox.max[a])
                };
            }
            let velocity = rng::unit_vector(&mut rng);
            Cluster { origin, velocity }
        })
        .collect();
    // Orthonormal frame per cluster for the planar square outline.
    let frames_uv: Vec<(Vec3, Vec3)> = (0..spec.clusters)
        .map(|_| {
            let u = rng::unit_vector(&mut rng);
            let e = if u[0].abs() < 0.5 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let w = normalize(cross(u, e));
            (u, cross(w, u))
        })
        .collect();

    // Static per-identity attributes. The identity order is a seeded
    // permutation so salient primitives are spread across indices.
    struct Member {
        cluster: Option<usize>,
        offset: Vec3,
        opacity: f64,
        scale: Vec3,
    }
    let mut members: Vec<Member> = Vec::with_capacity(n);
    for i in 0..n_salient {
        let k = i % spec.clusters;
        let shape = match k % 3 {
            0 => Shape::Segment,
            1 => Shape::Square,
            _ => Shape::Shell,
        };
        let (u, v) = frames_uv[k];
        let offset = match shape {
            Shape::Segment => scale3(u, rng::uniform(&mut rng, -1.0, 1.0) * shape_radius),
            Shape::Square => {
                let t = rng::uniform(&mut rng, -1.0, 1.0) * shape_radius;
                let side = rng::below(&mut rng, 4);
                let (a, b) = match side {
                    0 => (t, shape_radius),
                    1 => (t, -shape_radius),
                    2 => (shape_radius, t),
                    _ => (-shape_radius, t),
                };
                add3(scale3(u, a), scale3(v, b))
            }
            Shape::Shell => scale3(rng::unit_vector(&mut rng), shape_radius),
        };
        let opacity = rng::uniform(&mut rng, 0.8, 1.0);
        let scale = [
            rng::uniform(&mut rng, 1.0, 1.5) * s_base,
            rng::uniform(&mut rng, 1.0, 1.5) * s_base,
            rng::uniform(&mut rng, 1.0, 1.5) * s_base,
        ];
        members.push(Member {
            cluster: Some(k),
            offset,
            opacity,
            scale,
        });
    }
    for _ in n_salient..n {
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = rng::uniform(&mut rng, bbox.min[a], bbox.max[a]);
        }
        let opacity = rng::uniform(&mut rng, 0.002, 0.012);
        let scale = [
            rng::uniform(&mut rng, 1.0, 2.0) * s_base,
            rng::uniform(&mut rng, 1.0, 2.0) * s_base,
            rng::uniform(&mut rng, 1.0, 2.0) * s_base,
        ];
        members.push(Member {
            cluster: None,
            offset: p,
            opacity,
            scale,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng, &mut order);
    let members: Vec<Member> = {
        let mut slots: Vec<Option<Member>> = members.into_iter().map(Some).collect();
        order.iter().map(|&i| slots[i].take().expect("permutation")).collect()
    };
    let salient: Vec<bool> = members.iter().map(|m| m.cluster.is_some()).collect();

    let mut frames = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let mut frng = rng::stream(spec.seed, &[tag::SCENE, t as u64 + 1]);
        let positions: Vec<Vec3> = clusters
            .iter()
            .map(|c| {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    let lo = bbox.min[a] + margin;
                    let hi = bbox.max[a] - margin;
                    let travel = c.origin[a] + t as f64 * spec.motion_amplitude * c.velocity[a];
                    p[a] = if lo < hi { reflect(travel, lo, hi) } else { c.origin[a] };
                }
                p
            })
            .collect();
        let primitives = members
            .iter()
            .map(|m| {
                let base = match m.cluster {
                    Some(k) => add3(positions[k], m.offset),
                    None => m.offset,
                };
                let mut center = [0.0; 3];
                for a in 0..3 {
                    let j = rng::uniform(&mut frng, -jitter, jitter);
                    center[a] = (base[a] + j).clamp(bbox.min[a], bbox.max[a]);
                }
                GaussianPrimitive {
                    center,
                    opacity: m.opacity,
                    scale: m.scale,
                }
            })
            .collect();
        frames.push(Frame { index: t, primitives });
    }
    Ok(GeneratedScene { frames, salient })
}

/// Triangle-wave fold of `x` into `[lo, hi]`.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    let mut r = (x - lo) % (2.0 * w);
    if r < 0.0 {
        r += 2.0 * w;
    }
    if r > w {
        r = 2.0 * w - r;
    }
    lo + r
}

fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    scale3(a, 1.0 / n)
}

// ---------------------------------------------------------------------------
// Scene file

const SCENE_MAGIC: &str = "EGS-SCENE";
const SCENE_VERSION: &str = "v1";

pub fn scene_to_string(frames: &[Frame]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SCENE_MAGIC} {SCENE_VERSION} {}", frames.len());
    for f in frames {
        let _ = writeln!(out, "FRAME {} {}", f.index, f.primitives.len());
        for p in &f.primitives {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                p.center[0], p.center[1], p.center[2], p.opacity, p.scale[0], p.scale[1], p.scale[2]
            );
        }
    }
    out
}

pub fn write_scene(frames: &[Frame], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for f in frames {
        for p in &f.primitives {
            p.validate()?;
        }
    }
    fs::write(path, scene_to_string(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text)
}

pub fn parse_scene(text: &str) -> Result<Vec<Frame>> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
    let (ln, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        reason: "empty file".into(),
    })?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 3 || parts[0] != SCENE_MAGIC || parts[1] != SCENE_VERSION {
        return Err(Error::Parse {
            line: ln,
            reason: format!("expected `{SCENE_MAGIC} {SCENE_VERSION} <num_frames>`"),
        });
    }
    let num_frames: usize = parse_num(parts[2], ln)?;

    let mut frames: Vec<Frame> = Vec::with_capacity(num_frames);
    let mut last_line = ln;
    for _ in 0..num_frames {
        let (ln, line) = lines.next().ok_or_else(|| {
            Error::Format(format!("header declares {num_frames} frames, found {}", frames.len()))
        })?;
        if line.is_empty() {
            return Err(Error::Format(format!(
                "header declares {num_frames} frames, found {}",
                frames.len()
            )));
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 || parts[0] != "FRAME" {
            return Err(Error::Parse {
                line: ln,
                reason: "expected `FRAME <t> <N>`".into(),
            });
        }
        let index: usize = parse_num(parts[1], ln)?;
        let count: usize = parse_num(parts[2], ln)?;
        if let Some(prev) = frames.last() {
            if index <= prev.index {
                return Err(Error::Parse {
                    line: ln,
                    reason: format!("frame index {index} not greater than {}", prev.index),
                });
            }
        }
        let mut primitives = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, row) = lines.next().ok_or_else(|| {
                Error::Format(format!("frame {index} declares {count} primitives, file ended early"))
            })?;
            if row.starts_with("FRAME") || row.is_empty() {
                return Err(Error::Format(format!(
                    "frame {index} declares {count} primitives, found {} (line {ln})",
                    primitives.len()
                )));
            }
            let vals: Vec<&str> = row.split(' ').collect();
            if vals.len() != 7 {
                return Err(Error::Parse {
                    line: ln,
                    reason: format!("expected 7 fields, found {}", vals.len()),
                });
            }
            let mut v = [0.0f64; 7];
            for (slot, s) in v.iter_mut().zip(&vals) {
                *slot = parse_num(s, ln)?;
            }
            let p = GaussianPrimitive {
                center: [v[0], v[1], v[2]],
                opacity: v[3],
                scale: [v[4], v[5], v[6]],
            };
            p.validate().map_err(|e| Error::Parse {
                line: ln,
                reason: e.to_string(),
            })?;
            primitives.push(p);
            last_line = ln;
        }
        frames.push(Frame { index, primitives });
        last_line = last_line.max(ln);
    }
    for (ln, rest) in lines {
        if !rest.is_empty() {
            return Err(Error::Format(format!(
                "unexpected content after frame {} at line {ln} (after line {last_line})",
                num_frames
            )));
        }
    }
    Ok(frames)
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        reason: format!("cannot parse `{s}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SceneSpec {
        SceneSpec {
            seed: 1,
            num_frames: 1,
            clusters: 1,
            primitives_per_cluster: 1,
            fraction_salient: 1.0,
            motion_amplitude: 0.0,
            bbox: Aabb::default(),
        }
    }

    #[test]
    fn degenerate_counts() {
        let frames = generate_scene(&tiny()).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].primitives.len(), 1);
        assert!(frames[0].primitives[0].opacity >= 0.8);
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec::default();
        let a = scene_to_string(&generate_scene(&spec).unwrap());
        let b = scene_to_string(&generate_scene(&spec).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn counts_match_spec_arithmetic() {
        let spec = SceneSpec {
            seed: 2026,
            clusters: 4,
            primitives_per_cluster: 512,
            num_frames: 8,
            ..SceneSpec::default()
        };
        let g = generate_scene_with_truth(&spec).unwrap();
        assert_eq!(g.frames.len(), 8);
        for f in &g.frames {
            assert_eq!(f.primitives.len(), 2048);
        }
        // enumerate salient identities by the planted opacity threshold
        let by_opacity = g.frames[0].primitives.iter().filter(|p| p.opacity >= 0.8).count();
        assert_eq!(by_opacity, 512);
        assert_eq!(g.salient.iter().filter(|&&s| s).count(), 512);
    }

    #[test]
    fn generated_invariants() {
        let spec = SceneSpec {
            num_frames: 12,
            motion_amplitude: 0.3,
            ..SceneSpec::default()
        };
        let g = generate_scene_with_truth(&spec).unwrap();
        for (t, f) in g.frames.iter().enumerate() {
            assert_eq!(f.index, t);
            for (p, &s) in f.primitives.iter().zip(&g.salient) {
                p.validate().unwrap();
                assert!(spec.bbox.contains(&p.center));
                if s {
                    assert!(p.opacity >= 0.8);
                } else {
                    assert!(p.opacity <= 0.2);
                }
            }
        }
    }

    #[test]
    fn clusters_move() {
        let spec = SceneSpec {
            num_frames: 2,
            motion_amplitude: 0.05,
            ..SceneSpec::default()
        };
        let g = generate_scene_with_truth(&spec).unwrap();
        let i = g.salient.iter().position(|&s| s).unwrap();
        let a = g.frames[0].primitives[i].center;
        let b = g.frames[1].primitives[i].center;
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        assert!(d > 0.02 && d < 0.08, "moved {d}");
    }

    #[test]
    fn validation_names_field() {
        let mut spec = tiny();
        spec.clusters = 0;
        match generate_scene(&spec) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "clusters"),
            other => panic!("{other:?}"),
        }
        let mut spec = tiny();
        spec.bbox.max[1] = -5.0;
        assert!(matches!(generate_scene(&spec), Err(Error::Validation { field: "bbox", .. })));
        let mut spec = tiny();
        spec.fraction_salient = 1.5;
        assert!(matches!(
            generate_scene(&spec),
            Err(Error::Validation { field: "fraction_salient", .. })
        ));
    }

    #[test]
    fn empty_and_single_round_trip() {
        let text = scene_to_string(&[]);
        assert_eq!(text, "EGS-SCENE v1 0\n");
        assert_eq!(parse_scene(&text).unwrap(), Vec::<Frame>::new());

        let frames = vec![Frame {
            index: 0,
            primitives: vec![GaussianPrimitive {
                center: [0.1, -0.2, 1.0 / 3.0],
                opacity: 0.5,
                scale: [1e-3, 2.0, 0.7],
            }],
        }];
        let text = scene_to_string(&frames);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_scene(&text).unwrap(), frames);
    }

    #[test]
    fn generated_round_trip_through_file() {
        let spec = SceneSpec {
            seed: 7,
            ..SceneSpec::default()
        };
        let frames = generate_scene(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.egs");
        write_scene(&frames, &path).unwrap();
        assert_eq!(read_scene(&path).unwrap(), frames);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "EGS-SCENE v1 1\nFRAME 0 1\n0 0 0 0.5 1 1\n";
        match parse_scene(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bad = "EGS-SCENE v1 1\nFRAME 0 2\n0 0 0 0.5 1 1 1\n";
        assert!(matches!(parse_scene(bad), Err(Error::Format(_))));
        let bad = "EGS-SCENE v1 2\nFRAME 0 0\n";
        assert!(matches!(parse_scene(bad), Err(Error::Format(_))));
        let bad = "EGS-SCENE v2 0\n";
        assert!(matches!(parse_scene(bad), Err(Error::Parse { line: 1, .. })));
        let bad = "EGS-SCENE v1 1\nFRAME 0 1\n0 0 x 0.5 1 1 1\n";
        assert!(matches!(parse_scene(bad), Err(Error::Parse { line: 3, .. })));
        let bad = "EGS-SCENE v1 2\nFRAME 3 0\nFRAME 3 0\n";
        assert!(matches!(parse_scene(bad), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn reflect_stays_in_range() {
        for i in -50..50 {
            let x = i as f64 * 0.37;
            let r = reflect(x, -0.5, 0.5);
            assert!((-0.5..=0.5).contains(&r));
        }
        assert_eq!(reflect(0.2, 0.0, 1.0), 0.2);
        assert!((reflect(1.2, 0.0, 1.0) - 0.8).abs() < 1e-12);
    }
}
