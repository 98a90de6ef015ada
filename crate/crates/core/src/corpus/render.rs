//! Procedural pseudo-radiograph renderer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::findings::{validate_set, FindingKind, FindingSpec, Severity, Side};
use super::CorpusError;
use crate::seed;
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.02;
pub const BACKGROUND: f64 = 0.08;
pub const LUNG: f64 = 0.35;
pub const MEDIASTINUM: f64 = 0.55;
/// No pixel of a finding-free lung field reaches this level.
pub const NODULE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|v| v.name() == s)
    }
}

/// Fixed thoracic layout in normalised coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Anatomy {
    /// Lung centers; index 0 is the patient's right lung (image left).
    pub lung_cx: [f64; 2],
    pub lung_cy: f64,
    pub lung_rx: f64,
    pub lung_ry: f64,
    pub mediastinum_half_width: f64,
    pub mediastinum_top: f64,
    pub mediastinum_bottom: f64,
    pub heart_center: [f64; 2],
    pub heart_rx: f64,
    pub heart_ry: f64,
}

impl Default for Anatomy {
    fn default() -> Self {
        Self {
            lung_cx: [0.29, 0.71],
            lung_cy: 0.5,
            lung_rx: 0.15,
            lung_ry: 0.3,
            mediastinum_half_width: 0.06,
            mediastinum_top: 0.1,
            mediastinum_bottom: 0.9,
            heart_center: [0.5, 0.66],
            heart_rx: 0.1,
            heart_ry: 0.14,
        }
    }
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy
}

impl Anatomy {
    pub fn lung_index(side: Side) -> usize {
        match side {
            Side::Right => 0,
            _ => 1,
        }
    }

    pub fn in_lung(&self, x: f64, y: f64) -> bool {
        self.lung_cx
            .iter()
            .any(|&cx| ellipse(x, y, cx, self.lung_cy, self.lung_rx, self.lung_ry) <= 1.0)
    }

    fn in_mediastinum(&self, x: f64, y: f64, heart_rx: f64) -> bool {
        let band = (x - 0.5).abs() < self.mediastinum_half_width
            && (self.mediastinum_top..=self.mediastinum_bottom).contains(&y);
        let [hx, hy] = self.heart_center;
        band || ellipse(x, y, hx, hy, heart_rx, self.heart_ry) <= 1.0
    }

    /// Lung parenchyma of a normal-sized heart: inside a lung ellipse and not
    /// covered by the mediastinal shadow.
    pub fn in_lung_field(&self, x: f64, y: f64) -> bool {
        self.in_lung(x, y) && !self.in_mediastinum(x, y, self.heart_rx)
    }
}

/// One rendered film with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub findings: Vec<FindingSpec>,
    pub sample_seed: u64,
    pub split: Split,
    /// Set when overlapping findings pushed intensities above 1 before clamping.
    pub clamped: bool,
}

impl ImageSample {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.pixels.clone()).expect("dims match pixels")
    }
}

fn severity_level(sev: Severity, mild: f64, moderate: f64, severe: f64) -> f64 {
    match sev {
        Severity::Mild => mild,
        Severity::Moderate => moderate,
        Severity::Severe => severe,
    }
}

/// Smooth seeded texture in `[0, 1]`: a sum of three random plane waves.
struct Texture {
    waves: [(f64, f64, f64); 3],
}

impl Texture {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let mut wave = || {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq: f64 = rng.gen_range(10.0..22.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (freq * angle.cos(), freq * angle.sin(), phase)
        };
        Self { waves: [wave(), wave(), wave()] }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|&(fx, fy, p)| (fx * x + fy * y + p).sin()).sum();
        (s / 3.0 + 1.0) / 2.0
    }
}

/// Renders a film for `findings` at `height × width`.
///
/// The result is a pure function of `(sample_seed, findings, dims)`.
pub fn generate_image(
    sample_seed: u64,
    findings: &[FindingSpec],
    height: usize,
    width: usize,
    split: Split,
) -> Result<ImageSample, CorpusError> {
    if height < 16 || width < 16 {
        return Err(CorpusError::Config(format!("image dims {height}x{width} below 16x16")));
    }
    validate_set(findings)?;
    let anatomy = Anatomy::default();
    let heart_rx = findings
        .iter()
        .find(|f| f.kind == FindingKind::Cardiomegaly)
        .map_or(anatomy.heart_rx, |f| f.size);

    let mut tex_rng = seed::rng_for(sample_seed, "texture", 0);
    let textures: Vec<Texture> = findings.iter().map(|_| Texture::new(&mut tex_rng)).collect();

    let mut pixels = Vec::with_capacity(height * width);
    let mut clamped = false;
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut noise_rng = seed::rng_for(sample_seed, "noise", 0);
    for i in 0..height {
        let y = (i as f64 + 0.5) / height as f64;
        for j in 0..width {
            let x = (j as f64 + 0.5) / width as f64;
            let mut v = BACKGROUND;
            if anatomy.in_lung(x, y) {
                v = LUNG;
            }
            if anatomy.in_mediastinum(x, y, heart_rx) {
                v = MEDIASTINUM;
            }
            for (f, tex) in findings.iter().zip(&textures) {
                v += finding_intensity(f, tex, &anatomy, x, y);
            }
            v += noise.sample(&mut noise_rng);
            if v > 1.0 {
                clamped = true;
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(ImageSample {
        height,
        width,
        pixels,
        findings: findings.to_vec(),
        sample_seed,
        split,
        clamped,
    })
}

fn finding_intensity(f: &FindingSpec, tex: &Texture, anatomy: &Anatomy, x: f64, y: f64) -> f64 {
    let [cx, cy] = f.center;
    match f.kind {
        FindingKind::Nodule => {
            let amp = severity_level(f.severity, 0.35, 0.5, 0.6);
            let sigma = f.size / 2.0;
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            amp * (-r2 / (2.0 * sigma * sigma)).exp()
        }
        FindingKind::Opacity => {
            let amp = severity_level(f.severity, 0.15, 0.22, 0.3);
            let d = ellipse(x, y, cx, cy, f.size, f.size * 1.3);
            if d >= 1.0 || !anatomy.in_lung(x, y) {
                return 0.0;
            }
            let edge = (1.0 - d).min(0.3) / 0.3;
            amp * edge * (0.5 + 0.5 * tex.at(x, y))
        }
        FindingKind::Effusion => {
            let amp = severity_level(f.severity, 0.25, 0.3, 0.35);
            let lungs: &[usize] = match f.side {
                Side::Right => &[0],
                Side::Left => &[1],
                _ => &[0, 1],
            };
            let bottom = anatomy.lung_cy + anatomy.lung_ry;
            for &l in lungs {
                let lx = anatomy.lung_cx[l];
                if ellipse(x, y, lx, anatomy.lung_cy, anatomy.lung_rx, anatomy.lung_ry) > 1.0 {
                    continue;
                }
                // Fluid level rises towards the lateral chest wall.
                let lateral = if l == 0 { lx - x } else { x - lx };
                let level = bottom - 1.6 * f.size - 0.12 * (lateral / anatomy.lung_rx).max(0.0);
                if y >= level {
                    return amp;
                }
            }
            0.0
        }
        // Rendered through the enlarged cardiac silhouette.
        FindingKind::Cardiomegaly => 0.0,
    }
}

/// Draws geometry for a finding of `kind`/`side`/`severity`.
pub fn sample_geometry<R: Rng>(kind: FindingKind, side: Side, severity: Severity, rng: &mut R) -> FindingSpec {
    let anatomy = Anatomy::default();
    let lung = Anatomy::lung_index(side);
    let lx = anatomy.lung_cx[lung];
    let inside = |scale: f64, rng: &mut R| loop {
        let x = lx + rng.gen_range(-1.0..1.0) * anatomy.lung_rx * scale;
        let y = anatomy.lung_cy + rng.gen_range(-1.0..1.0) * anatomy.lung_ry * scale;
        if ellipse(x, y, lx, anatomy.lung_cy, anatomy.lung_rx * scale, anatomy.lung_ry * scale) <= 1.0 {
            return [x, y];
        }
    };
    let jitter = |rng: &mut R, lo: f64, hi: f64| rng.gen_range(lo..hi);
    let (center, size) = match kind {
        FindingKind::Nodule => {
            let size = match severity {
                Severity::Mild => jitter(rng, 0.05, 0.07),
                Severity::Moderate => jitter(rng, 0.07, 0.09),
                Severity::Severe => jitter(rng, 0.09, 0.12),
            };
            (inside(0.55, rng), size)
        }
        FindingKind::Opacity => {
            let size = match severity {
                Severity::Mild => jitter(rng, 0.08, 0.11),
                Severity::Moderate => jitter(rng, 0.11, 0.14),
                Severity::Severe => jitter(rng, 0.14, 0.17),
            };
            (inside(0.45, rng), size)
        }
        FindingKind::Effusion => {
            let size = match severity {
                Severity::Mild => jitter(rng, 0.05, 0.07),
                Severity::Moderate => jitter(rng, 0.08, 0.1),
                Severity::Severe => jitter(rng, 0.11, 0.13),
            };
            ([lx, anatomy.lung_cy + 0.7 * anatomy.lung_ry], size)
        }
        FindingKind::Cardiomegaly => {
            let size = match severity {
                Severity::Mild => jitter(rng, 0.14, 0.16),
                Severity::Moderate => jitter(rng, 0.17, 0.19),
                Severity::Severe => jitter(rng, 0.2, 0.22),
            };
            (anatomy.heart_center, size)
        }
    };
    FindingSpec { kind, side, severity, center, size }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(s: &ImageSample, x: f64, y: f64) -> f64 {
        let j = ((x * s.width as f64) as usize).min(s.width - 1);
        let i = ((y * s.height as f64) as usize).min(s.height - 1);
        s.pixels[i * s.width + j]
    }

    #[test]
    fn normal_study_stays_below_nodule_threshold() {
        let anatomy = Anatomy::default();
        for seed in 0..20 {
            let s = generate_image(seed, &[], 32, 32, Split::Train).unwrap();
            assert!(s.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
            for i in 0..32 {
                for j in 0..32 {
                    let (x, y) = ((j as f64 + 0.5) / 32.0, (i as f64 + 0.5) / 32.0);
                    if anatomy.in_lung_field(x, y) {
                        assert!(s.pixels[i * 32 + j] < NODULE_THRESHOLD);
                    }
                }
            }
        }
    }

    #[test]
    fn nodule_disc_brighter_than_lung_annulus() {
        let f = FindingSpec {
            kind: FindingKind::Nodule,
            side: Side::Right,
            severity: Severity::Moderate,
            center: [0.3, 0.4],
            size: 0.1,
        };
        let s = generate_image(11, &[f], 32, 32, Split::Train).unwrap();
        let anatomy = Anatomy::default();
        let (mut disc, mut nd, mut ring, mut nr) = (0.0, 0, 0.0, 0);
        for i in 0..32 {
            for j in 0..32 {
                let (x, y) = ((j as f64 + 0.5) / 32.0, (i as f64 + 0.5) / 32.0);
                let r = ((x - 0.3).powi(2) + (y - 0.4).powi(2)).sqrt();
                let v = s.pixels[i * 32 + j];
                if r <= 0.1 {
                    disc += v;
                    nd += 1;
                } else if r <= 0.2 && anatomy.in_lung_field(x, y) {
                    ring += v;
                    nr += 1;
                }
            }
        }
        let gap = disc / nd as f64 - ring / nr as f64;
        assert!(gap >= 0.15, "disc-annulus gap {gap}");
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = seed::rng(5);
        let f = sample_geometry(FindingKind::Opacity, Side::Left, Severity::Severe, &mut rng);
        let a = generate_image(42, &[f], 32, 32, Split::Val).unwrap();
        let b = generate_image(42, &[f], 32, 32, Split::Val).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = generate_image(43, &[f], 32, 32, Split::Val).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn cardiomegaly_widens_the_cardiac_shadow() {
        let mut rng = seed::rng(1);
        let f = sample_geometry(FindingKind::Cardiomegaly, Side::NotApplicable, Severity::Severe, &mut rng);
        let normal = generate_image(3, &[], 32, 32, Split::Train).unwrap();
        let big = generate_image(3, &[f], 32, 32, Split::Train).unwrap();
        assert!(px(&big, 0.34, 0.66) > px(&normal, 0.34, 0.66) + 0.1);
    }

    #[test]
    fn sampled_geometry_is_valid() {
        let mut rng = seed::rng(9);
        for _ in 0..200 {
            for kind in FindingKind::ALL {
                for &side in kind.allowed_sides() {
                    for sev in Severity::ALL {
                        sample_geometry(kind, side, sev, &mut rng).validate().unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn tiny_dims_rejected() {
        assert!(matches!(generate_image(0, &[], 8, 32, Split::Train), Err(CorpusError::Config(_))));
    }
}
