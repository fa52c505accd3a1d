//! Procedural scenes: a noisy ground disc plus object instances whose
//! geometry and reflectance depend on their class.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassId, LabelArray, Point, PointCloud};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Vehicle-sized box, surface-sampled on the four sides and the top.
    Box,
    /// Thin vertical pole.
    Cylinder,
    /// Long thin vertical slab.
    Wall,
    /// Sphere resting on the ground.
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecipe {
    pub class_id: ClassId,
    pub shape: Shape,
    /// Instances placed per scene.
    pub instances: usize,
    /// Uniform intensity range `[lo, hi]`.
    pub intensity: [f32; 2],
}

/// Everything that determines a generated scene. Equal configs produce
/// byte-identical scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// Outer radius of the ground disc, meters.
    pub extent: f64,
    /// Inner radius kept free around the sensor, meters.
    pub min_range: f64,
    pub ground_class: ClassId,
    pub ground_points: usize,
    pub ground_z: f64,
    pub ground_intensity: [f32; 2],
    pub known: Vec<ObjectRecipe>,
    pub unknown: ObjectRecipe,
    /// Inclusive range of points sampled per object instance.
    pub points_per_object: [usize; 2],
    /// Gap between the ground surface and the lowest object return, meters.
    pub object_clearance: f64,
    /// Gaussian position noise, meters.
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 1,
            extent: 20.0,
            min_range: 3.0,
            ground_class: 40,
            ground_points: 500,
            ground_z: -1.85,
            ground_intensity: [0.05, 0.25],
            known: vec![
                ObjectRecipe {
                    class_id: 10,
                    shape: Shape::Box,
                    instances: 2,
                    intensity: [0.3, 0.6],
                },
                ObjectRecipe {
                    class_id: 50,
                    shape: Shape::Wall,
                    instances: 2,
                    intensity: [0.15, 0.45],
                },
                ObjectRecipe {
                    class_id: 80,
                    shape: Shape::Cylinder,
                    instances: 2,
                    intensity: [0.55, 0.85],
                },
            ],
            unknown: ObjectRecipe {
                class_id: 20,
                shape: Shape::Sphere,
                instances: 1,
                intensity: [0.7, 1.0],
            },
            points_per_object: [80, 160],
            object_clearance: 0.1,
            noise_sigma: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) {
            return Err(Error::Config(format!("extent must be > 0, got {}", self.extent)));
        }
        if !(self.min_range >= 0.0 && self.min_range < self.extent) {
            return Err(Error::Config(format!(
                "min_range must lie in [0, extent), got {}",
                self.min_range
            )));
        }
        if self.known.is_empty() {
            return Err(Error::Config(
                "at least 2 known classes are required (ground plus one object recipe)".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        let [lo, hi] = self.points_per_object;
        if lo > hi {
            return Err(Error::Config("points_per_object must be [min, max]".into()));
        }
        let ids = self.known_class_ids();
        for (i, a) in ids.iter().enumerate() {
            if ids[i + 1..].contains(a) {
                return Err(Error::Config(format!("duplicate known class id {a}")));
            }
        }
        if ids.contains(&self.unknown.class_id) {
            return Err(Error::Config(format!(
                "unknown class id {} collides with a known class",
                self.unknown.class_id
            )));
        }
        for r in self.known.iter().chain(std::iter::once(&self.unknown)) {
            if !(r.intensity[0] <= r.intensity[1]) {
                return Err(Error::Config(format!(
                    "intensity range of class {} is not [lo, hi]",
                    r.class_id
                )));
            }
        }
        Ok(())
    }

    /// Ground class followed by the object recipes, in declaration order.
    pub fn known_class_ids(&self) -> Vec<ClassId> {
        std::iter::once(self.ground_class)
            .chain(self.known.iter().map(|r| r.class_id))
            .collect()
    }

    /// The same config with a seed derived from `index`, for datasets.
    pub fn with_scene_index(&self, index: u64) -> SceneConfig {
        let mut cfg = self.clone();
        cfg.seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            ^ 0x94D0_49BB_1331_11EB;
        cfg
    }
}

struct Placed {
    x: f64,
    y: f64,
    radius: f64,
}

/// Generates one labeled scene.
pub fn generate_scene(cfg: &SceneConfig) -> Result<(PointCloud, LabelArray)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut points = Vec::new();
    let mut labels = Vec::new();

    let (r2_lo, r2_hi) = (cfg.min_range.powi(2), cfg.extent.powi(2));
    for _ in 0..cfg.ground_points {
        let rho = rng.random_range(r2_lo..r2_hi).sqrt();
        let phi = rng.random_range(-PI..PI);
        let z = cfg.ground_z + noise.sample(&mut rng);
        let intensity = sample_intensity(&mut rng, cfg.ground_intensity);
        points.push(Point::new(
            (rho * phi.cos()) as f32,
            (rho * phi.sin()) as f32,
            z as f32,
            intensity,
        ));
        labels.push(cfg.ground_class);
    }

    let mut placed: Vec<Placed> = Vec::new();
    let base_z = cfg.ground_z + cfg.object_clearance;
    for recipe in cfg.known.iter().chain(std::iter::once(&cfg.unknown)) {
        for _ in 0..recipe.instances {
            let footprint = footprint_radius(recipe.shape);
            let Some((cx, cy)) = place(&mut rng, cfg, footprint, &placed) else {
                continue;
            };
            placed.push(Placed {
                x: cx,
                y: cy,
                radius: footprint,
            });
            let [lo, hi] = cfg.points_per_object;
            let n = rng.random_range(lo..=hi);
            let yaw = rng.random_range(-PI..PI);
            let local = sample_shape(&mut rng, recipe.shape, n);
            let (s, c) = yaw.sin_cos();
            for [lx, ly, lz] in local {
                let x = cx + c * lx - s * ly + noise.sample(&mut rng);
                let y = cy + s * lx + c * ly + noise.sample(&mut rng);
                let z = base_z + lz + noise.sample(&mut rng);
                let intensity = sample_intensity(&mut rng, recipe.intensity);
                points.push(Point::new(x as f32, y as f32, z as f32, intensity));
                labels.push(recipe.class_id);
            }
        }
    }
    Ok((PointCloud::new(points), LabelArray::new(labels)))
}

fn sample_intensity(rng: &mut ChaCha8Rng, [lo, hi]: [f32; 2]) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn footprint_radius(shape: Shape) -> f64 {
    match shape {
        Shape::Box => 2.6,
        Shape::Cylinder => 0.6,
        Shape::Wall => 3.6,
        Shape::Sphere => 1.2,
    }
}

/// Rejection-samples a non-overlapping object center; gives up after a
/// bounded number of tries so crowded configs still terminate.
fn place(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    footprint: f64,
    placed: &[Placed],
) -> Option<(f64, f64)> {
    let lo = cfg.min_range + footprint;
    let hi = cfg.extent - footprint;
    if lo >= hi {
        return None;
    }
    for _ in 0..64 {
        let rho = rng.random_range(lo..hi);
        let phi = rng.random_range(-PI..PI);
        let (x, y) = (rho * phi.cos(), rho * phi.sin());
        let clear = placed
            .iter()
            .all(|p| ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt() > p.radius + footprint + 0.5);
        if clear {
            return Some((x, y));
        }
    }
    None
}

/// Surface samples in the object frame; z measured from the object base.
fn sample_shape(rng: &mut ChaCha8Rng, shape: Shape, n: usize) -> Vec<[f64; 3]> {
    match shape {
        Shape::Box => {
            let l = rng.random_range(3.5..4.8);
            let w = rng.random_range(1.6..2.0);
            let h = rng.random_range(1.2..1.7);
            sample_cuboid(rng, l, w, h, n)
        }
        Shape::Wall => {
            let l = rng.random_range(4.0..6.5);
            let h = rng.random_range(2.5..3.5);
            sample_cuboid(rng, l, 0.3, h, n)
        }
        Shape::Cylinder => {
            let r = rng.random_range(0.1..0.2);
            let h = rng.random_range(3.0..3.8);
            (0..n)
                .map(|_| {
                    let a = rng.random_range(-PI..PI);
                    [r * a.cos(), r * a.sin(), rng.random_range(0.0..h)]
                })
                .collect()
        }
        Shape::Sphere => {
            let r = rng.random_range(0.6..1.0);
            (0..n)
                .map(|_| {
                    let v: [f64; 3] = [
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    ];
                    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                    [r * v[0] / norm, r * v[1] / norm, r + r * v[2] / norm]
                })
                .collect()
        }
    }
}

/// Area-weighted samples on four sides and the top of an axis-aligned box
/// centered on the origin footprint.
fn sample_cuboid(rng: &mut ChaCha8Rng, l: f64, w: f64, h: f64, n: usize) -> Vec<[f64; 3]> {
    let faces = [l * h, l * h, w * h, w * h, l * w];
    let total: f64 = faces.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut face = faces.len() - 1;
            for (i, a) in faces.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.random_range(-0.5..0.5);
            let v = rng.random_range(0.0..1.0);
            match face {
                0 => [u * l, -w / 2.0, v * h],
                1 => [u * l, w / 2.0, v * h],
                2 => [-l / 2.0, u * w, v * h],
                3 => [l / 2.0, u * w, v * h],
                _ => [u * l, rng.random_range(-0.5..0.5) * w, h],
            }
        })
        .collect()
}
