//! Synthetic labelled rooms: a floor, four walls and a handful of boxes,
//! spheres and tables, with optional low-contrast colouring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::voxel::PointCloud;
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 5] = ["floor", "wall", "box", "sphere", "table"];
pub const NUM_CLASSES: usize = 5;
pub const FLOOR: i32 = 0;
pub const WALL: i32 = 1;
pub const BOX: i32 = 2;
pub const SPHERE: i32 = 3;
pub const TABLE: i32 = 4;

const BASE_COLORS: [[f32; 3]; 5] = [
    [0.55, 0.45, 0.35],
    [0.85, 0.85, 0.80],
    [0.70, 0.25, 0.20],
    [0.20, 0.45, 0.75],
    [0.40, 0.30, 0.15],
];

/// Parameters of a synthetic room.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Room size along x, y, z in meters.
    pub extent: [f64; 3],
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_points: usize,
    pub color_noise: f64,
    /// Fraction of object points recoloured with the wall colour.
    pub ambiguity_rate: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extent: [4.0, 4.0, 2.5],
            min_objects: 3,
            max_objects: 6,
            num_points: 10_000,
            color_noise: 0.05,
            ambiguity_rate: 0.2,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Parameter(format!("room extent must be positive, got {:?}", self.extent)));
        }
        if self.num_points == 0 {
            return Err(Error::Parameter("scene needs at least one point".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Parameter("min_objects > max_objects".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return Err(Error::Parameter("ambiguity rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// An axis-aligned rectangle patch: origin plus two edge vectors.
#[derive(Clone, Copy)]
struct Patch {
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    class: i32,
}

impl Patch {
    fn area(&self) -> f64 {
        let c = cross(self.u, self.v);
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        std::array::from_fn(|i| self.origin[i] + a * self.u[i] + b * self.v[i])
    }
}

#[derive(Clone, Copy)]
struct Ball {
    center: [f64; 3],
    radius: f64,
}

enum Surface {
    Patch(Patch),
    Sphere(Ball),
}

impl Surface {
    fn area(&self) -> f64 {
        match self {
            Surface::Patch(p) => p.area(),
            Surface::Sphere(b) => 4.0 * std::f64::consts::PI * b.radius * b.radius,
        }
    }

    fn class(&self) -> i32 {
        match self {
            Surface::Patch(p) => p.class,
            Surface::Sphere(_) => SPHERE,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> [f64; 3] {
        match self {
            Surface::Patch(p) => p.sample(rng),
            Surface::Sphere(b) => {
                let d: [f64; 3] = std::array::from_fn(|_| normal.sample(rng));
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
                std::array::from_fn(|i| b.center[i] + b.radius * d[i] / n)
            }
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// The five visible faces of a box resting at `min` (bottom face omitted).
fn box_faces(min: [f64; 3], size: [f64; 3], class: i32, out: &mut Vec<Surface>) {
    let [sx, sy, sz] = size;
    let top = [min[0], min[1], min[2] + sz];
    let faces = [
        (top, [sx, 0.0, 0.0], [0.0, sy, 0.0]),
        (min, [sx, 0.0, 0.0], [0.0, 0.0, sz]),
        ([min[0], min[1] + sy, min[2]], [sx, 0.0, 0.0], [0.0, 0.0, sz]),
        (min, [0.0, sy, 0.0], [0.0, 0.0, sz]),
        ([min[0] + sx, min[1], min[2]], [0.0, sy, 0.0], [0.0, 0.0, sz]),
    ];
    for (origin, u, v) in faces {
        out.push(Surface::Patch(Patch { origin, u, v, class }));
    }
}

fn room_surfaces(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let [ex, ey, ez] = spec.extent;
    let mut s = vec![Surface::Patch(Patch {
        origin: [0.0; 3],
        u: [ex, 0.0, 0.0],
        v: [0.0, ey, 0.0],
        class: FLOOR,
    })];
    for (origin, u) in [
        ([0.0, 0.0, 0.0], [ex, 0.0, 0.0]),
        ([0.0, ey, 0.0], [ex, 0.0, 0.0]),
        ([0.0, 0.0, 0.0], [0.0, ey, 0.0]),
        ([ex, 0.0, 0.0], [0.0, ey, 0.0]),
    ] {
        s.push(Surface::Patch(Patch {
            origin,
            u,
            v: [0.0, 0.0, ez],
            class: WALL,
        }));
    }

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let first: usize = rng.random_range(0..3);
    let scale = ex.min(ey).min(ez * 1.6) / 4.0;
    for i in 0..count {
        let kind = [BOX, SPHERE, TABLE][(first + i) % 3];
        let margin = 0.15 * scale;
        let place = |rng: &mut ChaCha8Rng, half: f64| -> [f64; 2] {
            let lo = margin + half;
            [
                rng.random_range(lo..(ex - lo).max(lo + 1e-6)),
                rng.random_range(lo..(ey - lo).max(lo + 1e-6)),
            ]
        };
        match kind {
            BOX => {
                let size = [
                    rng.random_range(0.3..0.8) * scale,
                    rng.random_range(0.3..0.8) * scale,
                    rng.random_range(0.3..0.9) * scale,
                ];
                let c = place(rng, size[0].max(size[1]) / 2.0);
                box_faces([c[0] - size[0] / 2.0, c[1] - size[1] / 2.0, 0.0], size, BOX, &mut s);
            }
            SPHERE => {
                let radius = rng.random_range(0.2..0.4) * scale;
                let c = place(rng, radius);
                s.push(Surface::Sphere(Ball {
                    center: [c[0], c[1], radius],
                    radius,
                }));
            }
            _ => {
                let (w, d) = (rng.random_range(0.8..1.2) * scale, rng.random_range(0.5..0.8) * scale);
                let height = 0.7 * scale;
                let slab = 0.05 * scale;
                let leg = 0.06 * scale;
                let c = place(rng, w.max(d) / 2.0);
                let min = [c[0] - w / 2.0, c[1] - d / 2.0];
                box_faces([min[0], min[1], height - slab], [w, d, slab], TABLE, &mut s);
                for (lx, ly) in [(0.0, 0.0), (w - leg, 0.0), (0.0, d - leg), (w - leg, d - leg)] {
                    box_faces([min[0] + lx, min[1] + ly, 0.0], [leg, leg, height - slab], TABLE, &mut s);
                }
            }
        }
    }
    s
}

/// Deterministic synthetic scene for `seed`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surfaces = room_surfaces(spec, &mut rng);
    let areas: Vec<f64> = surfaces.iter().map(Surface::area).collect();
    let total: f64 = areas.iter().sum();

    // Quotas follow area; the rounding remainder goes to the smallest surfaces first.
    let n = spec.num_points;
    let mut quota: Vec<usize> = areas.iter().map(|a| ((a / total) * n as f64).floor() as usize).collect();
    let mut by_area: Vec<usize> = (0..areas.len()).collect();
    by_area.sort_by(|&a, &b| areas[a].total_cmp(&areas[b]));
    let assigned: usize = quota.iter().sum();
    for k in 0..n - assigned {
        quota[by_area[k % by_area.len()]] += 1;
    }

    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, spec.color_noise.max(0.0)).expect("valid normal");
    let mut positions = Vec::with_capacity(3 * n);
    let mut features = Vec::with_capacity(3 * n);
    let mut labels = Vec::with_capacity(n);
    for (surface, &q) in surfaces.iter().zip(&quota) {
        let class = surface.class();
        for _ in 0..q {
            let p = surface.sample(&mut rng, &unit);
            positions.extend(p.iter().map(|&v| v as f32));
            let ambiguous = class >= BOX && rng.random::<f64>() < spec.ambiguity_rate;
            let base = if ambiguous {
                BASE_COLORS[WALL as usize]
            } else {
                BASE_COLORS[class as usize]
            };
            for b in base {
                features.push((b as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
            }
            labels.push(class);
        }
    }
    PointCloud::new(positions, features, 3, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec {
            num_points: 2000,
            ..SceneSpec::default()
        };
        let a = generate_scene(7, &spec).unwrap();
        let b = generate_scene(7, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, &spec).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn empty_room_has_two_classes() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            num_points: 1000,
            ..SceneSpec::default()
        };
        let pc = generate_scene(1, &spec).unwrap();
        let mut seen: Vec<i32> = pc.labels.unwrap();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![FLOOR, WALL]);
    }

    #[test]
    fn all_classes_covered() {
        let spec = SceneSpec {
            num_points: 10_000,
            ..SceneSpec::default()
        };
        for seed in 0..5 {
            let pc = generate_scene(seed, &spec).unwrap();
            let mut hist = [0usize; NUM_CLASSES];
            for &l in pc.labels.as_ref().unwrap() {
                hist[l as usize] += 1;
            }
            assert!(hist.iter().all(|&h| h > 0), "seed {seed}: {hist:?}");
            assert_eq!(hist.iter().sum::<usize>(), 10_000);
        }
    }

    #[test]
    fn colours_stay_in_unit_range() {
        let pc = generate_scene(3, &SceneSpec::default()).unwrap();
        assert!(pc.features.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn impossible_spec_rejected() {
        let spec = SceneSpec {
            extent: [0.0, 1.0, 1.0],
            ..SceneSpec::default()
        };
        assert!(generate_scene(0, &spec).is_err());
    }
}
