use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    /// Horizontal square of side `size`.
    Plane,
    /// Surface of an axis-aligned cube of side `size`.
    Box,
    /// Surface of a sphere of diameter `size`.
    Sphere,
    /// Solid ball of diameter `size`.
    Ball,
}

/// One labelled surface in a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub kind: PrimitiveKind,
    pub label: u32,
    pub count: usize,
    pub center: Point3,
    pub size: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub primitives: Vec<PrimitiveSpec>,
    /// Gaussian position noise, meters.
    pub noise: f64,
    /// Gaussian colour noise; colours are clamped to `[0, 1]`.
    pub color_noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Floor plane (class 0, grey) with a box on it (class 1, red), 2,000 points.
    pub fn two_class(seed: u64) -> Self {
        SynthSpec {
            primitives: vec![
                PrimitiveSpec {
                    kind: PrimitiveKind::Plane,
                    label: 0,
                    count: 1000,
                    center: [1.0, 1.0, 0.0],
                    size: 2.0,
                    color: [0.6, 0.6, 0.55],
                },
                PrimitiveSpec {
                    kind: PrimitiveKind::Box,
                    label: 1,
                    count: 1000,
                    center: [1.0, 1.0, 0.31],
                    size: 0.6,
                    color: [0.75, 0.25, 0.2],
                },
            ],
            noise: 0.004,
            color_noise: 0.08,
            seed,
        }
    }

    /// Same-coloured plane patches (class 0) and spheres (class 1) at random
    /// slots and heights; only local shape tells them apart.
    pub fn shapes(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a9e);
        let mut slots: Vec<(f64, f64)> = (0..6).map(|i| (0.35 + 0.7 * (i % 3) as f64, 0.35 + 0.7 * (i / 3) as f64)).collect();
        for i in (1..slots.len()).rev() {
            slots.swap(i, rng.random_range(0..=i));
        }
        let primitives = slots
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                let sphere = i % 2 == 1;
                PrimitiveSpec {
                    kind: if sphere { PrimitiveKind::Sphere } else { PrimitiveKind::Plane },
                    label: u32::from(sphere),
                    count: 150,
                    center: [x, y, rng.random_range(0.25..0.6)],
                    size: 0.5,
                    color: [0.5, 0.5, 0.5],
                }
            })
            .collect();
        SynthSpec {
            primitives,
            noise: 0.003,
            color_noise: 0.05,
            seed,
        }
    }

    /// Two small balls `A` and `B` 0.4 m apart. `B` (class 2) is red or blue at
    /// random; `A` is grey and labelled 0 when `B` is red, 1 when blue.
    pub fn long_range(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10_4a9e);
        let red = rng.random_bool(0.5);
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.01..0.01);
        let a = [0.05 + jitter(&mut rng), 0.05 + jitter(&mut rng), 0.05];
        let b = [a[0] + 0.42, a[1] + jitter(&mut rng), 0.05];
        SynthSpec {
            primitives: vec![
                PrimitiveSpec {
                    kind: PrimitiveKind::Ball,
                    label: if red { 0 } else { 1 },
                    count: 96,
                    center: a,
                    size: 0.1,
                    color: [0.5, 0.5, 0.5],
                },
                PrimitiveSpec {
                    kind: PrimitiveKind::Ball,
                    label: 2,
                    count: 96,
                    center: b,
                    size: 0.1,
                    color: if red { [0.9, 0.1, 0.1] } else { [0.1, 0.1, 0.9] },
                },
            ],
            noise: 0.0,
            color_noise: 0.03,
            seed,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "two_class" => Ok(Self::two_class(seed)),
            "shapes" => Ok(Self::shapes(seed)),
            "long_range" => Ok(Self::long_range(seed)),
            other => Err(Error::Config(format!(
                "unknown scene `{other}` (expected two_class, shapes or long_range)"
            ))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.primitives.iter().map(|p| p.label as usize + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let mut labels: Vec<u32> = self.primitives.iter().map(|p| p.label).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() < 2 {
            return Err(Error::Config("a synthetic scene needs at least two classes".into()));
        }
        if !(self.noise >= 0.0 && self.color_noise >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if let Some(p) = self
            .primitives
            .iter()
            .find(|p| !(p.size > 0.0) || p.center.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Config(format!("primitive with label {} has a bad size or centre", p.label)));
        }
        Ok(())
    }
}

fn sample_surface(kind: PrimitiveKind, center: Point3, size: f64, rng: &mut ChaCha8Rng) -> Point3 {
    let h = size / 2.0;
    match kind {
        PrimitiveKind::Plane => [center[0] + rng.random_range(-h..h), center[1] + rng.random_range(-h..h), center[2]],
        PrimitiveKind::Box => {
            let face = rng.random_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { -h } else { h };
            let mut p = [0.0; 3];
            for (a, v) in p.iter_mut().enumerate() {
                *v = center[a] + if a == axis { sign } else { rng.random_range(-h..h) };
            }
            p
        }
        PrimitiveKind::Sphere | PrimitiveKind::Ball => {
            let mut d: [f64; 3] = [0.0; 3];
            let mut norm = 0.0;
            while norm < 1e-9 {
                d = [0; 3].map(|_| StandardNormal.sample(rng));
                norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            }
            let r = if kind == PrimitiveKind::Ball {
                h * rng.random::<f64>().cbrt()
            } else {
                h
            };
            [0, 1, 2].map(|a| center[a] + d[a] / norm * r)
        }
    }
}

/// Generates the labelled cloud described by `spec`; identical seeds give
/// bitwise-identical clouds.
pub fn synth_scene(spec: &SynthSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pos_noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let col_noise = Normal::new(0.0, spec.color_noise).map_err(|e| Error::Config(e.to_string()))?;
    let total: usize = spec.primitives.iter().map(|p| p.count).sum();
    let mut positions = Vec::with_capacity(total);
    let mut features = Vec::with_capacity(total * 3);
    let mut labels = Vec::with_capacity(total);
    for prim in &spec.primitives {
        for _ in 0..prim.count {
            let p = sample_surface(prim.kind, prim.center, prim.size, &mut rng);
            positions.push(p.map(|v| v + pos_noise.sample(&mut rng)));
            features.extend(prim.color.map(|c| (c + col_noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(prim.label);
        }
    }
    PointCloud::new(positions, features, 3, Some(labels))
}
