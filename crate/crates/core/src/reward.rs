//! The frozen environment: an orthographic grayscale splat renderer, image
//! metrics, the runtime model, the mixed quality target and the scalar
//! reward.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::RwLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{fps, CandidatePool};
use crate::scene::{Aabb, GaussianPrimitive};

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const PSNR_CAP: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-12;
/// Contributions whose exponent exceeds this are skipped (`e^-30 < 1e-13`).
const EXPONENT_CUTOFF: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::arg(format!(
                "image {width}x{height} with {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::arg("pixel outside [0, 1]"));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Sum of pixel intensities.
    pub fn l1(&self) -> f64 {
        self.pixels.iter().sum()
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|p| (p * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Orthographic projection along -z onto the bbox's xy face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub bbox: Aabb,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(bbox: Aabb, width: usize, height: usize) -> Self {
        Camera { bbox, width, height }
    }

    /// Pixel-space position and isotropic footprint of `p`.
    pub fn project(&self, p: &GaussianPrimitive) -> (f64, f64, f64) {
        let ext = self.bbox.extent();
        let sx = self.width as f64 / ext[0];
        let sy = self.height as f64 / ext[1];
        let u = (p.center[0] - self.bbox.min[0]) * sx;
        let v = (p.center[1] - self.bbox.min[1]) * sy;
        let sigma = 0.5 * (p.scale[0] * sx + p.scale[1] * sy);
        (u, v, sigma)
    }
}

/// Additive splatting with a final clamp to `[0, 1]`. Pixel `(i, j)` has its
/// center at `(i + 0.5, j + 0.5)`. The sum is order independent up to
/// floating-point association, and primitives are always visited in the
/// given order so repeated calls are bit-identical.
pub fn render<'a>(prims: impl IntoIterator<Item = &'a GaussianPrimitive>, cam: &Camera) -> Image {
    let (w, h) = (cam.width, cam.height);
    let mut acc = vec![0.0; w * h];
    let mut ex = vec![0.0; w];
    let mut ey = vec![0.0; h];
    for p in prims {
        let (u, v, sigma) = cam.project(p);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let reach = (EXPONENT_CUTOFF / inv).sqrt();
        let (x0, x1) = span(u, reach, w);
        let (y0, y1) = span(v, reach, h);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        for i in x0..x1 {
            let d = i as f64 + 0.5 - u;
            ex[i] = (-d * d * inv).exp();
        }
        for j in y0..y1 {
            let d = j as f64 + 0.5 - v;
            ey[j] = p.opacity * (-d * d * inv).exp();
        }
        for j in y0..y1 {
            let row = &mut acc[j * w..(j + 1) * w];
            let s = ey[j];
            for i in x0..x1 {
                row[i] += s * ex[i];
            }
        }
    }
    for a in &mut acc {
        *a = a.clamp(0.0, 1.0);
    }
    Image {
        width: w,
        height: h,
        pixels: acc,
    }
}

/// Pixel index range whose centers lie within `reach` of `c`.
fn span(c: f64, reach: f64, n: usize) -> (usize, usize) {
    let lo = (c - reach - 0.5).ceil().max(0.0);
    let hi = (c + reach - 0.5).floor() + 1.0;
    let hi = hi.min(n as f64);
    if hi <= lo {
        return (0, 0);
    }
    (lo as usize, hi as usize)
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::arg(format!(
            "image dims differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.pixels.len() as f64;
    Ok(a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// PSNR in dB for unit peak, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all window positions fully inside the image. Images
/// smaller than the window use a window as large as the smaller side.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    let size = SSIM_WINDOW.min(w).min(h);
    let taps = gaussian_taps(size, SSIM_SIGMA);
    let (ow, oh) = (w - size + 1, h - size + 1);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, ty) in taps.iter().enumerate() {
                for (dx, tx) in taps.iter().enumerate() {
                    let k = ty * tx;
                    let idx = (oy + dy) * w + ox + dx;
                    let (x, y) = (a.pixels[idx], b.pixels[idx]);
                    mx += k * x;
                    my += k * y;
                    xx += k * x * x;
                    yy += k * y * y;
                    xy += k * x * y;
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

pub fn dssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(((1.0 - ssim(a, b)?) / 2.0).clamp(0.0, 1.0))
}

/// Convex blend of the reference and teacher qualities.
pub fn mixed_target(psi_ref: f64, psi_tea: f64, eta: f64) -> f64 {
    eta * psi_ref + (1.0 - eta) * psi_tea
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuntimeSource {
    Measured,
    Model,
}

impl std::str::FromStr for RuntimeSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "measured" => Ok(RuntimeSource::Measured),
            "model" => Ok(RuntimeSource::Model),
            other => Err(Error::arg(format!("unknown runtime source `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda_budget: f64,
    pub lambda_time: f64,
    pub lambda_violation: f64,
    pub lambda_gain: f64,
    /// PSNR tolerance in dB.
    pub delta: f64,
    pub eta: f64,
    pub kappa_max: usize,
    pub ref_budget: usize,
    pub teacher_budget: usize,
    pub runtime_source: RuntimeSource,
    /// Runtime model `t = cost_a + cost_b * kappa`, seconds.
    pub cost_a: f64,
    pub cost_b: f64,
    pub image_width: usize,
    pub image_height: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_budget: 0.1,
            lambda_time: 0.5,
            lambda_violation: 1.0,
            lambda_gain: 0.5,
            delta: 0.1,
            eta: 0.5,
            kappa_max: 256,
            ref_budget: 256,
            teacher_budget: 512,
            runtime_source: RuntimeSource::Model,
            cost_a: 2e-3,
            cost_b: 1e-5,
            image_width: DEFAULT_IMAGE_SIZE,
            image_height: DEFAULT_IMAGE_SIZE,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::Validation { field, reason });
        for (field, v) in [
            ("lambda_budget", self.lambda_budget),
            ("lambda_time", self.lambda_time),
            ("lambda_violation", self.lambda_violation),
            ("lambda_gain", self.lambda_gain),
            ("delta", self.delta),
            ("cost_a", self.cost_a),
            ("cost_b", self.cost_b),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, format!("{v} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta", format!("{} outside [0,1]", self.eta));
        }
        if self.kappa_max == 0 || self.ref_budget == 0 {
            return bad("kappa_max", "budgets must be >= 1".into());
        }
        if self.teacher_budget < self.ref_budget {
            return bad(
                "teacher_budget",
                format!("{} below ref_budget {}", self.teacher_budget, self.ref_budget),
            );
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image_width", "image dims must be >= 1".into());
        }
        if self.runtime_source == RuntimeSource::Model && self.cost_a + self.cost_b <= 0.0 {
            return bad("cost_a", "runtime model must give positive times".into());
        }
        Ok(())
    }

    pub fn model_time(&self, kappa: usize) -> f64 {
        self.cost_a + self.cost_b * kappa as f64
    }
}

/// Inputs of the scalar reward for one action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub psi_rl: f64,
    pub psi_ref: f64,
    pub psi_tea: f64,
    pub t_rl: f64,
    pub t_ref: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub psi_rl: f64,
    pub psi_ref: f64,
    pub psi_tea: f64,
    pub psi_tgt: f64,
    pub t_rl: f64,
    pub t_ref: f64,
    pub term_budget: f64,
    pub term_time: f64,
    pub term_violation: f64,
    pub term_gain: f64,
    pub total: f64,
}

/// Sparsity, runtime, violation and gain terms and their sum.
pub fn reward(kappa: usize, q: &Quality, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    if !(q.t_ref > 0.0) {
        return Err(Error::arg(format!("t_ref must be > 0, got {}", q.t_ref)));
    }
    if kappa > cfg.kappa_max {
        return Err(Error::arg(format!("kappa {kappa} exceeds kappa_max {}", cfg.kappa_max)));
    }
    let psi_tgt = mixed_target(q.psi_ref, q.psi_tea, cfg.eta);
    let term_budget = -cfg.lambda_budget * (kappa as f64 / cfg.kappa_max as f64);
    let term_time = -cfg.lambda_time * (q.t_rl / q.t_ref - 1.0).max(0.0);
    let term_violation = -cfg.lambda_violation * (psi_tgt - q.psi_rl - cfg.delta).max(0.0);
    let term_gain = cfg.lambda_gain * (q.psi_rl - psi_tgt).max(0.0);
    Ok(RewardBreakdown {
        psi_rl: q.psi_rl,
        psi_ref: q.psi_ref,
        psi_tea: q.psi_tea,
        psi_tgt,
        t_rl: q.t_rl,
        t_ref: q.t_ref,
        term_budget,
        term_time,
        term_violation,
        term_gain,
        total: term_budget + term_time + term_violation + term_gain,
    })
}

/// FPS reference and teacher qualities for one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct References {
    pub psi_ref: f64,
    pub psi_tea: f64,
    pub t_ref: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct RefKey {
    scene: usize,
    frame: usize,
    ref_budget: usize,
    teacher_budget: usize,
}

/// Renderer, metrics and reference memo shared by training and evaluation.
///
/// Memo entries are keyed by the caller's scene id and the frame index, so
/// two different scene sets must not share one environment under the same ids.
#[derive(Debug)]
pub struct Environment {
    pub cfg: RewardConfig,
    pub camera: Camera,
    refs: RwLock<HashMap<RefKey, References>>,
    targets: RwLock<HashMap<(usize, usize), Image>>,
}

impl Environment {
    pub fn new(cfg: RewardConfig, bbox: Aabb) -> Result<Self> {
        cfg.validate()?;
        bbox.validate()?;
        let camera = Camera::new(bbox, cfg.image_width, cfg.image_height);
        Ok(Environment {
            cfg,
            camera,
            refs: RwLock::new(HashMap::new()),
            targets: RwLock::new(HashMap::new()),
        })
    }

    /// Render of every primitive in the frame, memoized per `(scene, frame)`.
    pub fn target(&self, scene: usize, frame: &crate::scene::Frame) -> Image {
        let key = (scene, frame.index);
        if let Some(img) = self.targets.read().expect("target cache poisoned").get(&key) {
            return img.clone();
        }
        let img = render(&frame.primitives, &self.camera);
        self.targets
            .write()
            .expect("target cache poisoned")
            .entry(key)
            .or_insert(img)
            .clone()
    }

    pub fn render_subset(&self, pool: &CandidatePool, local: &[usize]) -> Image {
        render(local.iter().map(|&k| &pool.candidates[k].1), &self.camera)
    }

    /// PSNR of the subset against the full frame.
    pub fn quality(&self, scene: usize, frame: &crate::scene::Frame, pool: &CandidatePool, local: &[usize]) -> Result<f64> {
        psnr(&self.render_subset(pool, local), &self.target(scene, frame))
    }

    /// Seconds spent producing an action of size `kappa`, either from the
    /// cost model or from the measured sampler and render time.
    pub fn runtime(&self, kappa: usize, measured: f64) -> f64 {
        match self.cfg.runtime_source {
            RuntimeSource::Model => self.cfg.model_time(kappa),
            RuntimeSource::Measured => measured,
        }
    }

    /// FPS@ref and FPS@teacher quality and the reference time, memoized.
    pub fn reference_quality(&self, scene: usize, frame: &crate::scene::Frame, pool: &CandidatePool) -> Result<References> {
        if pool.is_empty() {
            return Err(Error::arg("reference quality of an empty pool"));
        }
        let key = RefKey {
            scene,
            frame: frame.index,
            ref_budget: self.cfg.ref_budget,
            teacher_budget: self.cfg.teacher_budget,
        };
        if let Some(r) = self.refs.read().expect("reference cache poisoned").get(&key) {
            return Ok(*r);
        }
        let target = self.target(scene, frame);
        let centers = pool.local_centers();
        let start = Instant::now();
        let ref_set = fps(&centers, self.cfg.ref_budget.min(pool.len()))?;
        let ref_img = self.render_subset(pool, &ref_set);
        let measured = start.elapsed().as_secs_f64();
        let tea_set = fps(&centers, self.cfg.teacher_budget.min(pool.len()))?;
        let r = References {
            psi_ref: psnr(&ref_img, &target)?,
            psi_tea: psnr(&self.render_subset(pool, &tea_set), &target)?,
            t_ref: match self.cfg.runtime_source {
                RuntimeSource::Model => self.cfg.model_time(self.cfg.ref_budget),
                RuntimeSource::Measured => measured.max(f64::MIN_POSITIVE),
            },
        };
        self.refs.write().expect("reference cache poisoned").insert(key, r);
        Ok(r)
    }
}
