//! Synthetic voxel sequences: hollow shapes that translate and spin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Coord3, SparseTensor3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Torus,
}

/// One moving shape. Positions are in voxels of the target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeMotion {
    pub kind: ShapeKind,
    pub radius: f64,
    pub center: [f64; 3],
    pub velocity: [f64; 3],
    /// Spin about the z axis, radians per frame.
    pub spin: f64,
}

impl ShapeMotion {
    /// Random shape whose whole trajectory over `frames` stays in the grid.
    pub fn random(rng: &mut ChaCha8Rng, bit_depth: u8, frames: usize) -> Self {
        let side = (1u32 << bit_depth) as f64;
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Sphere,
            1 => ShapeKind::Box,
            _ => ShapeKind::Torus,
        };
        let radius = rng.gen_range(0.14..0.24) * side;
        let vmax = (side / 64.0).max(0.5);
        let velocity = [rng.gen_range(-vmax..vmax), rng.gen_range(-vmax..vmax), rng.gen_range(-vmax..vmax)];
        let travel = frames.saturating_sub(1) as f64;
        let mut center = [0.0; 3];
        for (c, v) in center.iter_mut().zip(velocity) {
            let lo = radius + 1.5 + (-v * travel).max(0.0);
            let hi = side - radius - 1.5 - (v * travel).max(0.0);
            *c = if hi > lo { rng.gen_range(lo..hi) } else { side / 2.0 };
        }
        Self { kind, radius, center, velocity, spin: rng.gen_range(-0.05..0.05) }
    }

    /// Surface voxels at frame `t`.
    pub fn voxelize(&self, t: usize, bit_depth: u8) -> SparseTensor3 {
        let side = 1i64 << bit_depth;
        let t = t as f64;
        let c = [
            self.center[0] + self.velocity[0] * t,
            self.center[1] + self.velocity[1] * t,
            self.center[2] + self.velocity[2] * t,
        ];
        let (sin, cos) = (-self.spin * t).sin_cos();
        let reach = self.radius * 1.5 + 2.0;
        let lo = |v: f64| ((v - reach).floor() as i64).clamp(0, side - 1);
        let hi = |v: f64| ((v + reach).ceil() as i64).clamp(0, side - 1);
        let mut pts = Vec::new();
        for x in lo(c[0])..=hi(c[0]) {
            for y in lo(c[1])..=hi(c[1]) {
                for z in lo(c[2])..=hi(c[2]) {
                    let (dx, dy, dz) = (x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]);
                    let (rx, ry) = (cos * dx - sin * dy, sin * dx + cos * dy);
                    if self.distance(rx, ry, dz).abs() <= 0.5 {
                        pts.push(Coord3::new(x as u32, y as u32, z as u32));
                    }
                }
            }
        }
        SparseTensor3::from_coords(pts, bit_depth).expect("voxels lie on the grid")
    }

    fn distance(&self, x: f64, y: f64, z: f64) -> f64 {
        let r = self.radius;
        match self.kind {
            ShapeKind::Sphere => (x * x + y * y + z * z).sqrt() - r,
            ShapeKind::Box => {
                let h = [r, 0.7 * r, 0.5 * r];
                let q = [x.abs() - h[0], y.abs() - h[1], z.abs() - h[2]];
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            ShapeKind::Torus => {
                let ring = (x * x + y * y).sqrt() - 0.7 * r;
                (ring * ring + z * z).sqrt() - 0.3 * r
            }
        }
    }
}

/// `frames` consecutive frames of one random moving shape.
pub fn synthetic_sequence(seed: u64, bit_depth: u8, frames: usize) -> Vec<SparseTensor3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = ShapeMotion::random(&mut rng, bit_depth, frames);
    (0..frames).map(|t| motion.voxelize(t, bit_depth)).collect()
}

/// Hollow axis-aligned cube with the given side, anchored at `offset`.
pub fn hollow_cube(bit_depth: u8, offset: u32, side: u32) -> SparseTensor3 {
    let mut pts = Vec::new();
    let last = side - 1;
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                if x == 0 || y == 0 || z == 0 || x == last || y == last || z == last {
                    pts.push(Coord3::new(x + offset, y + offset, z + offset));
                }
            }
        }
    }
    SparseTensor3::from_coords(pts, bit_depth).expect("cube fits the grid")
}
