//! Brute-force reference implementations used as test oracles. Each one is
//! written from the defining formula, without sharing code with the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;
use uncmap::volume::{ProbVolume, SampleStack, Shape};

pub fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Bin of `x` by scanning the edges `j/K` from the top.
pub fn bin_by_scan(x: f64, k: usize) -> usize {
    if x >= 1.0 {
        return k - 1;
    }
    (0..k).rev().find(|&j| x >= j as f64 / k as f64).unwrap_or(0)
}

/// Integer counts `[class][bin]` at one voxel.
pub fn count_histograms(stack: &SampleStack, k: usize, voxel: usize) -> Vec<Vec<u64>> {
    let c = stack.classes();
    let mut counts = vec![vec![0u64; k]; c];
    for pass in stack.passes() {
        for class in 0..c {
            counts[class][bin_by_scan(pass.values()[voxel * c + class], k)] += 1;
        }
    }
    counts
}

/// Sample means per class at one voxel, summed pass by pass.
pub fn class_means(stack: &SampleStack, voxel: usize) -> Vec<f64> {
    let c = stack.classes();
    let t = stack.pass_count() as f64;
    let mut m = vec![0.0; c];
    for pass in stack.passes() {
        for class in 0..c {
            m[class] += pass.values()[voxel * c + class];
        }
    }
    m.iter().map(|x| x / t).collect()
}

/// Class indices by ascending mean, ties by index (insertion sort).
pub fn ascending(means: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::new();
    for c in 0..means.len() {
        let pos = order
            .iter()
            .position(|&o| means[o] > means[c])
            .unwrap_or(order.len());
        order.insert(pos, c);
    }
    order
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        comp += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + comp
}

pub fn bhattacharyya_ref(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let bc = compensated_sum(p.iter().zip(q).map(|(a, b)| (a * b).sqrt()));
    -(if bc > eps { bc } else { eps }).ln()
}

pub fn kl_ref(p: &[f64], q: &[f64]) -> f64 {
    compensated_sum(
        p.iter()
            .zip(q)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| a * (a.ln() - b.ln())),
    )
}

/// Face-connected boundary voxels of a mask, by explicit neighbour lookup.
pub fn boundary(dims: &[usize], mask: &[bool]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for (idx, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let coords = unravel(dims, idx);
        let mut edge = false;
        for axis in 0..dims.len() {
            for delta in [-1i64, 1] {
                let n = coords[axis] as i64 + delta;
                if n < 0 || n >= dims[axis] as i64 {
                    edge = true;
                } else {
                    let mut nc = coords.clone();
                    nc[axis] = n as usize;
                    if !mask[ravel(dims, &nc)] {
                        edge = true;
                    }
                }
            }
        }
        if edge {
            out.push(coords);
        }
    }
    out
}

pub fn unravel(dims: &[usize], mut idx: usize) -> Vec<usize> {
    let mut c = vec![0; dims.len()];
    for axis in (0..dims.len()).rev() {
        c[axis] = idx % dims[axis];
        idx /= dims[axis];
    }
    c
}

pub fn ravel(dims: &[usize], coords: &[usize]) -> usize {
    coords.iter().zip(dims).fold(0, |acc, (&c, &d)| acc * d + c)
}

fn nearest(a: &[usize], set: &[Vec<usize>]) -> f64 {
    set.iter()
        .map(|b| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// `(hd95, asd)` from all pairs of surface voxels; `None` if a mask is empty.
pub fn surface_distances_ref(dims: &[usize], a: &[bool], b: &[bool]) -> Option<(f64, f64)> {
    let sa = boundary(dims, a);
    let sb = boundary(dims, b);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let mut d: Vec<f64> = sa.iter().map(|x| nearest(x, &sb)).collect();
    d.extend(sb.iter().map(|x| nearest(x, &sa)));
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    let hd95 = d[lo] * (1.0 - (rank - lo as f64)) + d[hi] * (rank - lo as f64);
    let asd = compensated_sum(d.iter().copied()) / d.len() as f64;
    Some((hd95, asd))
}

/// A random point on the simplex. Half the time it is assembled from
/// multiples of 1/20 so samples land exactly on histogram edges.
pub fn random_simplex(rng: &mut Xoshiro256StarStar, c: usize) -> Vec<f64> {
    if rng.random_bool(0.5) {
        let mut units = vec![0u32; c];
        for _ in 0..20 {
            units[rng.random_range(0..c)] += 1;
        }
        units.iter().map(|&u| u as f64 / 20.0).collect()
    } else {
        let w: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }
}

/// Random dims: rank 2 or 3, each extent in `1..=max`.
pub fn random_dims(rng: &mut Xoshiro256StarStar, max: usize) -> Vec<usize> {
    let rank = rng.random_range(2..=3);
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

pub fn random_stack(
    rng: &mut Xoshiro256StarStar,
    dims: &[usize],
    classes: usize,
    passes: usize,
) -> SampleStack {
    let shape = Shape::new(dims).unwrap();
    let n = shape.voxel_count();
    let volumes = (0..passes)
        .map(|_| {
            let values = (0..n).flat_map(|_| random_simplex(rng, classes)).collect();
            ProbVolume::new(shape.clone(), classes, values).unwrap()
        })
        .collect();
    SampleStack::new(volumes).unwrap()
}

/// A random blob mask: union of a few axis-aligned boxes.
pub fn random_mask(rng: &mut Xoshiro256StarStar, dims: &[usize]) -> Vec<bool> {
    let n: usize = dims.iter().product();
    let mut mask = vec![false; n];
    for _ in 0..rng.random_range(0..=3) {
        let lo: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
        let hi: Vec<usize> = lo
            .iter()
            .zip(dims)
            .map(|(&l, &d)| rng.random_range(l..d) + 1)
            .collect();
        for (idx, m) in mask.iter_mut().enumerate() {
            let c = unravel(dims, idx);
            if c.iter().zip(&lo).zip(&hi).all(|((&x, &l), &h)| x >= l && x < h) {
                *m = true;
            }
        }
    }
    // Sprinkle isolated voxels so surfaces are irregular.
    for _ in 0..rng.random_range(0..4) {
        let i = rng.random_range(0..n);
        mask[i] = !mask[i];
    }
    mask
}

/// `|a − b| ≤ tol · max(|a|, |b|, floor)`.
pub fn rel_close(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(floor)
}

/// Central-difference step and the relative tolerance for gradient checks.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn normals(rng: &mut Xoshiro256StarStar, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}
