//! Procedural two-channel brain-like phantoms with exact healthy ground truth.
//!
//! Channel 0 behaves like a T1-weighted contrast (white matter brightest,
//! lesions dark) and channel 1 like FLAIR (lesions bright).

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};

pub const CHANNELS: usize = 2;

/// Mean file-space intensities per tissue, `[channel 0, channel 1]`.
const CSF: [f64; 2] = [0.15, 0.10];
const GM: [f64; 2] = [0.50, 0.55];
const WM: [f64; 2] = [0.75, 0.42];
const TISSUE_JITTER: f64 = 0.03;
/// Erosion applied to the white-matter label before it is used as `wm_mask`:
/// 2 px at the default size, less for small phantoms.
fn wm_margin(size: usize) -> usize {
    (size / 32).min(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: usize,
    /// Inclusive lesion count range.
    pub lesion_count: [usize; 2],
    /// Range of lesion semi-axes in pixels.
    pub lesion_radius: [f64; 2],
    pub ch1_delta: f64,
    pub ch2_delta: f64,
    pub texture_noise: f64,
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub smoothing: f64,
    /// Upper bound on total lesion area as a fraction of the image.
    pub max_lesion_fraction: f64,
    /// Fraction of corpus pairs generated without lesions.
    pub lesion_free_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            lesion_count: [1, 4],
            lesion_radius: [2.0, 6.0],
            ch1_delta: -0.35,
            ch2_delta: 0.40,
            texture_noise: 0.03,
            smoothing: 1.0,
            max_lesion_fraction: 0.08,
            lesion_free_fraction: 0.2,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 16 {
            return bad(format!("phantom size must be at least 16, got {}", self.size));
        }
        if self.lesion_count[0] == 0 || self.lesion_count[0] > self.lesion_count[1] {
            return bad(format!("lesion_count range {:?} must be nonempty and start at 1 or more", self.lesion_count));
        }
        let [r0, r1] = self.lesion_radius;
        if !(r0 >= 1.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!(
                "lesion_radius range {:?} must be nonempty with lower bound at least 1",
                self.lesion_radius
            ));
        }
        if !(self.ch1_delta < 0.0 && self.ch2_delta > 0.0) {
            return bad("channel 1 lesion delta must be negative and channel 2 delta positive".into());
        }
        if !(self.texture_noise >= 0.0 && self.smoothing >= 0.0) {
            return bad("texture_noise and smoothing must be nonnegative".into());
        }
        if !(self.max_lesion_fraction > 0.0 && self.max_lesion_fraction <= 1.0) {
            return bad("max_lesion_fraction must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.lesion_free_fraction) {
            return bad("lesion_free_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub healthy: ImageGrid,
    pub lesioned: ImageGrid,
    pub lesion_mask: Mask,
    pub wm_mask: Mask,
    pub seed: u64,
}

/// Closed curve `r(phi) = 1 + sum_k a_k cos(k phi + p_k)` scaled onto an ellipse.
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    rot: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, cy: f64, cx: f64, ry: f64, rx: f64, rot: f64, wobble: f64) -> Self {
        let harmonics = (2..=4).map(|k| (k as f64, rng.gen_range(0.0..wobble), rng.gen_range(0.0..TAU))).collect();
        Self { cy, cx, ry, rx, rot, harmonics }
    }

    /// Normalized radius: < 1 inside the boundary.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.rot.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let phi = v.atan2(u);
        let edge: f64 = 1.0 + self.harmonics.iter().map(|&(k, a, p)| a * (k * phi + p).cos()).sum::<f64>();
        (u * u + v * v).sqrt() / edge
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Csf,
    Gm,
    Wm,
}

fn gaussian_blur(img: &mut ImageGrid, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w, c) = img.shape();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for axis in 0..2 {
        let src = img.data().to_vec();
        let dst = img.data_mut();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (j, k) in kernel.iter().enumerate() {
                        let off = j as isize - radius;
                        let (sy, sx) =
                            if axis == 0 { (y, clamp(x as isize + off, w)) } else { (clamp(y as isize + off, h), x) };
                        acc += k * src[(sy * w + sx) * c + ch];
                    }
                    dst[(y * w + x) * c + ch] = acc;
                }
            }
        }
    }
}

fn anatomy(rng: &mut ChaCha8Rng, n: usize) -> Vec<Tissue> {
    let s = n as f64;
    let mid = (s - 1.0) / 2.0;
    let cy = mid + rng.gen_range(-0.03..0.03) * s;
    let cx = mid + rng.gen_range(-0.03..0.03) * s;
    let rot = rng.gen_range(-0.2..0.2);
    let (hy, hx) = (rng.gen_range(0.40..0.46) * s, rng.gen_range(0.36..0.42) * s);
    let head = Blob::random(rng, cy, cx, hy, hx, rot, 0.04);
    let thickness = rng.gen_range(0.16..0.24);
    let wm = Blob::random(rng, cy, cx, head.ry * (1.0 - thickness), head.rx * (1.0 - thickness), rot, 0.05);
    let gap = rng.gen_range(0.07..0.10) * s;
    let vent: Vec<Blob> = [-1.0, 1.0]
        .iter()
        .map(|side| {
            let (ry, rx) = (rng.gen_range(0.10..0.15) * s, rng.gen_range(0.035..0.06) * s);
            let tilt = rot + side * rng.gen_range(0.1..0.35);
            Blob::random(rng, cy - 0.02 * s, cx + side * gap, ry, rx, tilt, 0.06)
        })
        .collect();
    let mut labels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64, x as f64);
            let t = if head.rho(fy, fx) >= 1.0 {
                Tissue::Background
            } else if vent.iter().any(|v| v.rho(fy, fx) < 1.0) {
                Tissue::Csf
            } else if wm.rho(fy, fx) < 1.0 {
                Tissue::Wm
            } else {
                Tissue::Gm
            };
            labels.push(t);
        }
    }
    labels
}

fn draw_lesions(rng: &mut ChaCha8Rng, spec: &PhantomSpec, wm_mask: &Mask) -> (Mask, Vec<f64>) {
    let n = spec.size;
    let mut weight = vec![0.0f64; n * n];
    let candidates: Vec<usize> = wm_mask.indices().collect();
    let count = rng.gen_range(spec.lesion_count[0]..=spec.lesion_count[1]);
    let cap = (spec.max_lesion_fraction * (n * n) as f64).floor() as usize;
    let mut area = 0;
    for k in 0..count {
        let centre = *candidates.choose(rng).expect("white matter is nonempty");
        let (cy, cx) = ((centre / n) as f64, (centre % n) as f64);
        let [r0, r1] = spec.lesion_radius;
        let (mut ry, mut rx) = (rng.gen_range(r0..=r1), rng.gen_range(r0..=r1));
        let rot = rng.gen_range(0.0..PI);
        let (s, c) = rot.sin_cos();
        let mut blob = vec![0.0f64; n * n];
        // the first lesion always lands, shrunk until it fits the area cap
        loop {
            blob.iter_mut().for_each(|b| *b = 0.0);
            let reach = ry.max(rx).ceil() as isize + 1;
            for y in (cy as isize - reach).max(0)..(cy as isize + reach + 1).min(n as isize) {
                for x in (cx as isize - reach).max(0)..(cx as isize + reach + 1).min(n as isize) {
                    let p = y as usize * n + x as usize;
                    if !wm_mask.at(p) {
                        continue;
                    }
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let u = (c * dx + s * dy) / rx;
                    let v = (-s * dx + c * dy) / ry;
                    let d2 = u * u + v * v;
                    if d2 <= 1.0 {
                        blob[p] = 0.55 + 0.45 * (1.0 - d2);
                    }
                }
            }
            let added = blob.iter().zip(&weight).filter(|(b, w)| **b > 0.0 && **w == 0.0).count();
            if area + added <= cap {
                area += added;
                break;
            }
            if k > 0 || (ry <= 1.0 && rx <= 1.0) {
                blob.iter_mut().for_each(|b| *b = 0.0);
                break;
            }
            ry = (ry * 0.8).max(1.0);
            rx = (rx * 0.8).max(1.0);
        }
        for (w, b) in weight.iter_mut().zip(&blob) {
            *w = w.max(*b);
        }
    }
    let mask = Mask::from_fn(n, n, |y, x| weight[y * n + x] > 0.0);
    (mask, weight)
}

/// One phantom pair; `with_lesions = false` yields an empty lesion mask and
/// `lesioned == healthy`.
pub fn generate_phantom_with(seed: u64, spec: &PhantomSpec, with_lesions: bool) -> Result<PhantomPair> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = anatomy(&mut rng, n);
    let mut level = |base: [f64; 2]| [0, 1].map(|c| base[c] + rng.gen_range(-TISSUE_JITTER..=TISSUE_JITTER));
    let (csf, gm, wm) = (level(CSF), level(GM), level(WM));
    let noise = Normal::new(0.0, spec.texture_noise).expect("nonnegative deviation");
    let mut healthy = ImageGrid::zeros(n, n, CHANNELS);
    for (p, t) in labels.iter().enumerate() {
        let base = match t {
            Tissue::Background => [0.0, 0.0],
            Tissue::Csf => csf,
            Tissue::Gm => gm,
            Tissue::Wm => wm,
        };
        for c in 0..CHANNELS {
            let texture = if *t == Tissue::Background { 0.0 } else { noise.sample(&mut rng) };
            healthy.data_mut()[p * CHANNELS + c] = base[c] + texture;
        }
    }
    gaussian_blur(&mut healthy, spec.smoothing);
    let healthy = healthy.map(|v| v.clamp(0.0, 1.0));

    let wm_label = Mask::from_fn(n, n, |y, x| labels[y * n + x] == Tissue::Wm);
    let wm_mask = wm_label.erode(wm_margin(n));
    if wm_mask.is_empty() {
        return Err(Error::Config(format!("phantom size {n} leaves no white matter after erosion")));
    }

    let (lesion_mask, weight) =
        if with_lesions { draw_lesions(&mut rng, spec, &wm_mask) } else { (Mask::zeros(n, n), vec![0.0; n * n]) };
    let deltas = [spec.ch1_delta, spec.ch2_delta];
    let mut lesioned = healthy.clone();
    for p in lesion_mask.indices() {
        for c in 0..CHANNELS {
            let v = &mut lesioned.data_mut()[p * CHANNELS + c];
            *v = (*v + deltas[c] * weight[p]).clamp(0.0, 1.0);
        }
    }
    Ok(PhantomPair { healthy, lesioned, lesion_mask, wm_mask, seed })
}

/// One phantom pair with at least one lesion.
pub fn generate_phantom(seed: u64, spec: &PhantomSpec) -> Result<PhantomPair> {
    generate_phantom_with(seed, spec, true)
}

/// Number of lesion-free pairs in a corpus of `n`.
pub fn lesion_free_count(n: usize, spec: &PhantomSpec) -> usize {
    (spec.lesion_free_fraction * n as f64).round() as usize
}

/// `n` pairs with per-pair seeds drawn from `seed`; exactly
/// [`lesion_free_count`] of them, chosen at random, carry no lesions.
pub fn generate_corpus(n: usize, seed: u64, spec: &PhantomSpec) -> Result<Vec<PhantomPair>> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut clean = vec![false; n];
    for &i in &order[..lesion_free_count(n, spec)] {
        clean[i] = true;
    }
    seeds.iter().zip(&clean).map(|(&s, &c)| generate_phantom_with(s, spec, !c)).collect()
}

/// Restricts a lesion mask to white matter.
pub fn wm_intersect(lesion_mask: &Mask, wm_mask: &Mask) -> Result<Mask> {
    lesion_mask.and(wm_mask)
}
