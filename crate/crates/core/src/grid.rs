//! Axis-aligned voxel lattices and exact ray traversal (Amanatides-Woo).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Ray;
use crate::error::{Error, Result};

/// Voxel lattice geometry. Linear indices are x-fastest:
/// `index = x + nx * (y + ny * z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], bbox_min: Vector3<f64>, bbox_max: Vector3<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d < 1) {
            return Err(Error::InvalidParameter(format!("grid dims {dims:?}")));
        }
        if !(0..3).all(|a| bbox_min[a] < bbox_max[a]) {
            return Err(Error::InvalidParameter(format!(
                "bbox min {bbox_min:?} not below max {bbox_max:?}"
            )));
        }
        Ok(Self {
            dims,
            bbox_min,
            bbox_max,
        })
    }

    /// Cube of the given side centered at `center` with `n` voxels per axis.
    pub fn cube(center: Vector3<f64>, side: f64, n: usize) -> Result<Self> {
        let half = Vector3::repeat(side / 2.0);
        Self::new([n, n, n], center - half, center + half)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_size(&self) -> Vector3<f64> {
        let e = self.bbox_max - self.bbox_min;
        Vector3::new(
            e.x / self.dims[0] as f64,
            e.y / self.dims[1] as f64,
            e.z / self.dims[2] as f64,
        )
    }

    pub fn side(&self) -> Vector3<f64> {
        self.bbox_max - self.bbox_min
    }

    pub fn diagonal(&self) -> f64 {
        self.side().norm()
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let yz = index / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    pub fn voxel_center(&self, c: [usize; 3]) -> Vector3<f64> {
        let s = self.voxel_size();
        Vector3::new(
            self.bbox_min.x + (c[0] as f64 + 0.5) * s.x,
            self.bbox_min.y + (c[1] as f64 + 0.5) * s.y,
            self.bbox_min.z + (c[2] as f64 + 0.5) * s.z,
        )
    }

    pub fn voxel_of_point(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let s = self.voxel_size();
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.bbox_min[a]) / s[a]).floor();
            if f < 0.0 || f >= self.dims[a] as f64 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.bbox_min[a] && p[a] <= self.bbox_max[a])
    }

    /// Parametric interval `[t0, t1]` (with `t0 >= 0`) where the ray is inside
    /// the box, by slab clipping.
    pub fn clip_ray(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = ray.origin[a];
            let d = ray.direction[a];
            if d == 0.0 {
                if o < self.bbox_min[a] || o > self.bbox_max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut ta = (self.bbox_min[a] - o) * inv;
            let mut tb = (self.bbox_max[a] - o) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }

    /// Visits every voxel the ray passes through, in order, with the
    /// parametric entry and exit of each. Zero-length touches are skipped.
    pub fn traverse(&self, ray: &Ray, mut visit: impl FnMut(usize, f64, f64)) {
        let Some((t_start, t_end)) = self.clip_ray(ray) else {
            return;
        };
        let size = self.voxel_size();
        let entry = ray.at(t_start);
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let n = self.dims[a] as i64;
            // entry on a face may round to the outside neighbor
            let f = ((entry[a] - self.bbox_min[a]) / size[a]).floor() as i64;
            cell[a] = f.clamp(0, n - 1);
            let d = ray.direction[a];
            if d > 0.0 {
                step[a] = 1;
                let boundary = self.bbox_min[a] + (cell[a] + 1) as f64 * size[a];
                t_max[a] = (boundary - ray.origin[a]) / d;
                t_delta[a] = size[a] / d;
            } else if d < 0.0 {
                step[a] = -1;
                let boundary = self.bbox_min[a] + cell[a] as f64 * size[a];
                t_max[a] = (boundary - ray.origin[a]) / d;
                t_delta[a] = -size[a] / d;
            }
        }
        let mut t = t_start;
        loop {
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            let t_exit = t_max[axis].min(t_end);
            if t_exit > t {
                let idx = self.index([cell[0] as usize, cell[1] as usize, cell[2] as usize]);
                visit(idx, t, t_exit);
                t = t_exit;
            }
            if t >= t_end {
                break;
            }
            cell[axis] += step[axis];
            if cell[axis] < 0 || cell[axis] >= self.dims[axis] as i64 {
                break;
            }
            t_max[axis] += t_delta[axis];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(n: usize) -> GridSpec {
        GridSpec::new([n, n, n], Vector3::zeros(), Vector3::repeat(1.0)).unwrap()
    }

    #[test]
    fn index_round_trip() {
        let g = GridSpec::new([3, 4, 5], Vector3::zeros(), Vector3::repeat(1.0)).unwrap();
        for i in 0..g.voxel_count() {
            assert_eq!(g.index(g.coords(i)), i);
        }
        assert_eq!(g.index([1, 0, 0]), 1);
        assert_eq!(g.index([0, 1, 0]), 3);
        assert_eq!(g.index([0, 0, 1]), 12);
    }

    #[test]
    fn axis_aligned_ray_visits_a_column() {
        let g = unit_grid(4);
        let ray = Ray::new(Vector3::new(-1.0, 0.4, 0.6), Vector3::x());
        let mut seen = Vec::new();
        g.traverse(&ray, |i, a, b| seen.push((g.coords(i), b - a)));
        assert_eq!(seen.len(), 4);
        for (k, (c, len)) in seen.iter().enumerate() {
            assert_eq!(*c, [k, 1, 2]);
            assert_relative_eq!(*len, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn missing_ray_visits_nothing() {
        let g = unit_grid(4);
        let ray = Ray::new(Vector3::new(-1.0, 2.0, 0.5), Vector3::x());
        let mut n = 0;
        g.traverse(&ray, |_, _, _| n += 1);
        assert_eq!(n, 0);
        assert!(g.clip_ray(&ray).is_none());
    }

    #[test]
    fn segments_are_contiguous_and_sum_to_chord() {
        let g = GridSpec::new([7, 5, 9], Vector3::new(-0.3, -0.2, -0.5), Vector3::new(0.4, 0.6, 0.1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let origin = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let target = Vector3::new(
                rng.random_range(-0.3..0.4),
                rng.random_range(-0.2..0.6),
                rng.random_range(-0.5..0.1),
            );
            let ray = Ray::new(origin, target - origin);
            let (t0, t1) = g.clip_ray(&ray).unwrap();
            let mut total = 0.0;
            let mut last = t0;
            let mut prev: Option<[usize; 3]> = None;
            g.traverse(&ray, |i, a, b| {
                assert_relative_eq!(a, last, epsilon = 1e-12);
                assert!(b > a);
                let c = g.coords(i);
                if let Some(p) = prev {
                    let manhattan: usize = (0..3).map(|k| p[k].abs_diff(c[k])).sum();
                    assert_eq!(manhattan, 1, "non-adjacent step {p:?} -> {c:?}");
                }
                prev = Some(c);
                // midpoint of the segment lies in the reported voxel
                let m = ray.at(0.5 * (a + b));
                let s = g.voxel_size();
                for k in 0..3 {
                    let lo = g.bbox_min[k] + c[k] as f64 * s[k] - 1e-9;
                    let hi = lo + s[k] + 2e-9;
                    assert!(m[k] >= lo && m[k] <= hi);
                }
                total += b - a;
                last = b;
            });
            assert_relative_eq!(total, t1 - t0, max_relative = 1e-9);
        }
    }

    #[test]
    fn ray_starting_inside_box() {
        let g = unit_grid(10);
        let ray = Ray::new(Vector3::new(0.55, 0.55, 0.55), Vector3::new(1.0, 0.3, -0.2));
        let mut first = None;
        g.traverse(&ray, |i, a, _| {
            if first.is_none() {
                first = Some((g.coords(i), a));
            }
        });
        let (c, a) = first.unwrap();
        assert_eq!(c, [5, 5, 5]);
        assert_eq!(a, 0.0);
    }
}
