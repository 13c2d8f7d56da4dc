use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Point3, PointCloud};

/// Training-time augmentation, applied in list order.
#[derive(Clone, Debug, PartialEq)]
pub enum Augmentation {
    /// Rotation about the z axis by a uniform angle in degrees.
    RotateZ { min_deg: f64, max_deg: f64 },
    /// Isotropic scaling by a uniform factor.
    Scale { min: f64, max: f64 },
    /// Per-coordinate Gaussian noise clipped to `±clip`.
    Jitter { sigma: f64, clip: f64 },
    /// With probability `prob`, zero the colour channels of the whole cloud.
    DropColor { prob: f64 },
}

/// Test-time perturbation used by the robustness study.
#[derive(Clone, Debug, PartialEq)]
pub enum Perturbation {
    None,
    Permute { seed: u64 },
    RotateZ { degrees: f64 },
    Shift { offset: f64 },
    Scale { factor: f64 },
    Jitter { sigma: f64, clip: f64, seed: u64 },
}

impl Perturbation {
    /// The standard row: none, permutation, z-rotations, ±0.2 m shifts, ×0.8/×1.2 scales, jitter.
    pub fn standard_suite(seed: u64) -> Vec<Perturbation> {
        vec![
            Perturbation::None,
            Perturbation::Permute { seed },
            Perturbation::RotateZ { degrees: 90.0 },
            Perturbation::RotateZ { degrees: 180.0 },
            Perturbation::RotateZ { degrees: 270.0 },
            Perturbation::Shift { offset: 0.2 },
            Perturbation::Shift { offset: -0.2 },
            Perturbation::Scale { factor: 0.8 },
            Perturbation::Scale { factor: 1.2 },
            Perturbation::Jitter {
                sigma: 0.01,
                clip: 0.05,
                seed,
            },
        ]
    }

    pub fn label(&self) -> String {
        match self {
            Perturbation::None => "None".into(),
            Perturbation::Permute { .. } => "Perm.".into(),
            Perturbation::RotateZ { degrees } => format!("{degrees}°"),
            Perturbation::Shift { offset } => format!("{offset:+}"),
            Perturbation::Scale { factor } => format!("×{factor}"),
            Perturbation::Jitter { .. } => "jitter".into(),
        }
    }
}

/// `(cos, sin)` of a z rotation; exact for multiples of 90°.
fn rotation(degrees: f64) -> (f64, f64) {
    let quarter = degrees / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = degrees.to_radians();
        (r.cos(), r.sin())
    }
}

fn rotate_z(positions: &mut [Point3], degrees: f64) {
    let (c, s) = rotation(degrees);
    for p in positions {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y;
        p[1] = s * x + c * y;
    }
}

fn jitter<R: Rng>(positions: &mut [Point3], sigma: f64, clip: f64, rng: &mut R) {
    for p in positions {
        for v in p.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += (sigma * n).clamp(-clip, clip);
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Applies `ops` in order. Point count and label alignment are preserved.
pub fn augment<R: Rng>(cloud: &PointCloud, ops: &[Augmentation], rng: &mut R) -> PointCloud {
    let mut out = cloud.clone();
    for op in ops {
        match *op {
            Augmentation::RotateZ { min_deg, max_deg } => {
                let angle = uniform(rng, min_deg, max_deg);
                rotate_z(&mut out.positions, angle);
            }
            Augmentation::Scale { min, max } => {
                let f = uniform(rng, min, max);
                out.positions.iter_mut().for_each(|p| *p = p.map(|v| v * f));
            }
            Augmentation::Jitter { sigma, clip } => jitter(&mut out.positions, sigma, clip, rng),
            Augmentation::DropColor { prob } => {
                let draw: f64 = rng.random();
                if draw < prob {
                    let c = out.channels;
                    let rgb = c.min(3);
                    for row in out.features.chunks_mut(c.max(1)) {
                        row[..rgb].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
    }
    out
}

pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// Applies one test-time perturbation.
pub fn perturb(cloud: &PointCloud, kind: &Perturbation) -> PointCloud {
    match *kind {
        Perturbation::None => cloud.clone(),
        Perturbation::Permute { seed } => cloud.permuted(&random_permutation(cloud.len(), seed)),
        Perturbation::RotateZ { degrees } => {
            let mut out = cloud.clone();
            rotate_z(&mut out.positions, degrees);
            out
        }
        Perturbation::Shift { offset } => {
            let mut out = cloud.clone();
            out.positions.iter_mut().for_each(|p| *p = p.map(|v| v + offset));
            out
        }
        Perturbation::Scale { factor } => {
            let mut out = cloud.clone();
            out.positions.iter_mut().for_each(|p| *p = p.map(|v| v * factor));
            out
        }
        Perturbation::Jitter { sigma, clip, seed } => {
            let mut out = cloud.clone();
            jitter(&mut out.positions, sigma, clip, &mut ChaCha8Rng::seed_from_u64(seed));
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud {
        PointCloud::new(
            vec![[1.0, 0.0, 0.0], [0.5, -0.25, 2.0], [0.3, 0.7, -1.0]],
            vec![0.2, 0.4, 0.6, 1.0, 1.0, 1.0, 0.0, 0.5, 0.9],
            3,
            Some(vec![0, 1, 2]),
        )
        .unwrap()
    }

    #[test]
    fn rotate_quarter_turn_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(
            &cloud(),
            &[Augmentation::RotateZ {
                min_deg: 90.0,
                max_deg: 90.0,
            }],
            &mut rng,
        );
        assert_eq!(out.positions[0], [0.0, 1.0, 0.0]);
    }

    #[test]
    fn scale_leaves_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = cloud();
        let out = augment(&c, &[Augmentation::Scale { min: 1.2, max: 1.2 }], &mut rng);
        assert_eq!(out.positions[1], [0.5 * 1.2, -0.25 * 1.2, 2.0 * 1.2]);
        assert_eq!(out.features, c.features);
        assert_eq!(out.labels, c.labels);
    }

    #[test]
    fn drop_color_always() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&cloud(), &[Augmentation::DropColor { prob: 1.0 }], &mut rng);
        assert!(out.features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jitter_is_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cloud();
        let out = augment(&c, &[Augmentation::Jitter { sigma: 1.0, clip: 0.05 }], &mut rng);
        for (a, b) in out.positions.iter().zip(&c.positions) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.05 + 1e-15);
            }
        }
    }

    #[test]
    fn permute_round_trip() {
        let c = cloud();
        let order = random_permutation(c.len(), 9);
        let p = perturb(&c, &Perturbation::Permute { seed: 9 });
        assert_eq!(p, c.permuted(&order));
        assert_eq!(p.permuted(&inverse_permutation(&order)), c);
    }

    #[test]
    fn shift_and_half_turns() {
        let c = cloud();
        let s = perturb(&c, &Perturbation::Shift { offset: 0.2 });
        for (a, b) in s.positions.iter().zip(&c.positions) {
            assert_eq!(*a, b.map(|v| v + 0.2));
        }
        let r = perturb(
            &perturb(&c, &Perturbation::RotateZ { degrees: 180.0 }),
            &Perturbation::RotateZ { degrees: 180.0 },
        );
        for (a, b) in r.positions.iter().zip(&c.positions) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-12);
            }
        }
    }
}
