//! Exact Euclidean distance transform (separable lower-envelope method).

use alloc::vec;
use alloc::vec::Vec;

use super::Mask;
use crate::math;

/// Per-pixel Euclidean distance to the nearest foreground pixel.
/// Every entry is `f64::INFINITY` when the mask has no foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DistanceMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Squared distances; entries are exact integers or `INFINITY`.
pub fn squared_distance_transform(mask: &Mask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut grid: Vec<f64> = mask
        .data()
        .iter()
        .map(|&fg| if fg { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            line[y] = grid[y * w + x];
        }
        lower_envelope(&line[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        line[..w].copy_from_slice(row);
        lower_envelope(&line[..w], &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }
    grid
}

pub fn distance_transform(mask: &Mask) -> DistanceMap {
    DistanceMap {
        height: mask.height(),
        width: mask.width(),
        data: squared_distance_transform(mask)
            .into_iter()
            .map(math::sqrt)
            .collect(),
    }
}

// out[q] = min_p (q - p)^2 + f[p] over finite f[p].
fn lower_envelope(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
            continue;
        }
        // z[0] is -inf, so the first parabola is never popped.
        loop {
            let p = *v.last().expect("nonempty");
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= *z.last().expect("nonempty") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q.abs_diff(v[k]);
        *o = (d * d) as f64 + f[v[k]];
    }
}

/// Largest distance from a foreground pixel to the nearest background
/// pixel, with everything outside the image counted as background.
pub fn max_inscribed_radius(mask: &Mask) -> f64 {
    let (h, w) = (mask.height(), mask.width());
    let padded = Mask::from_fn(h + 2, w + 2, |y, x| {
        y == 0 || x == 0 || y == h + 1 || x == w + 1 || !mask.get(y - 1, x - 1)
    });
    let d = squared_distance_transform(&padded);
    let mut best: f64 = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                best = best.max(d[(y + 1) * (w + 2) + x + 1]);
            }
        }
    }
    math::sqrt(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(mask: &Mask) -> Vec<f64> {
        let (h, w) = (mask.height(), mask.width());
        let fg: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| mask.get(y, x))
            .collect();
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                fg.iter()
                    .map(|&(fy, fx)| {
                        let (dy, dx) = (y.abs_diff(fy), x.abs_diff(fx));
                        (dy * dy + dx * dx) as f64
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .map(math::sqrt)
            .collect()
    }

    #[test]
    fn examples() {
        let m = Mask::from_fn(5, 6, |y, x| y == 0 && x == 0);
        let d = distance_transform(&m);
        assert_eq!(d.get(3, 4), 5.0);
        assert_eq!(d.get(0, 0), 0.0);
        let empty = Mask::from_fn(3, 3, |_, _| false);
        assert!(distance_transform(&empty).data().iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let h = rng.random_range(1..=16);
            let w = rng.random_range(1..=16);
            let p: f64 = rng.random_range(0.0..0.5);
            let m = Mask::from_fn(h, w, |_, _| rng.random_bool(p));
            assert_eq!(distance_transform(&m).data(), brute_force(&m).as_slice());
        }
    }

    #[test]
    fn inscribed_radius() {
        let line = Mask::from_fn(5, 7, |y, _| y == 2);
        assert_eq!(max_inscribed_radius(&line), 1.0);
        let block = Mask::from_fn(7, 7, |_, _| true);
        assert_eq!(max_inscribed_radius(&block), 4.0);
        assert_eq!(max_inscribed_radius(&Mask::from_fn(3, 3, |_, _| false)), 0.0);
    }
}
