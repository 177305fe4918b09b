//! Point-set geometry kernels: Chamfer distance, fidelity error, farthest
//! point sampling, mirroring and folding grids.
//!
//! Nearest neighbours are found by exact O(n·m) search. The lowest index
//! wins every tie, so results are reproducible and match brute force.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// An ordered set of 3D points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }

    /// Flat `[n * 3]` coordinates in the requested precision.
    pub fn flat<T: Real>(&self) -> Vec<T> {
        self.points.iter().flatten().map(|&v| T::of(v)).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[self.len(), 3], self.flat()).expect("n x 3 layout")
    }

    /// Stacks equally sized clouds into a `[b, n, 3]` tensor.
    pub fn batch_tensor<T: Real>(clouds: &[&PointCloud]) -> Result<Tensor<T>> {
        let n = clouds.first().map_or(0, |c| c.len());
        if let Some(c) = clouds.iter().find(|c| c.len() != n) {
            return Err(Error::dim(
                "batch",
                format!("clouds of {} and {n} points in one batch", c.len()),
            ));
        }
        let data = clouds.iter().flat_map(|c| c.flat::<T>()).collect();
        Tensor::new(&[clouds.len(), n, 3], data)
    }

    /// Splits a `[b, n, 3]` (or `[n, 3]`) tensor into clouds.
    pub fn unbatch<T: Real>(t: &Tensor<T>) -> Result<Vec<PointCloud>> {
        let s = t.shape();
        let (b, n) = match s {
            [n, 3] => (1, *n),
            [b, n, 3] => (*b, *n),
            _ => return Err(Error::dim("unbatch", format!("not a point tensor: {s:?}"))),
        };
        let d = t.data();
        Ok((0..b)
            .map(|bi| {
                PointCloud::new(
                    (0..n)
                        .map(|i| {
                            let at = (bi * n + i) * 3;
                            [d[at].as_f64(), d[at + 1].as_f64(), d[at + 2].as_f64()]
                        })
                        .collect(),
                )
            })
            .collect())
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

/// Chamfer distance convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChamferVariant {
    /// Sum of the two directional means of squared nearest distances.
    CdT,
    /// Half the sum of the two directional means of Euclidean nearest
    /// distances.
    CdP,
}

impl ChamferVariant {
    pub fn squared(self) -> bool {
        matches!(self, ChamferVariant::CdT)
    }

    /// Combines the two directional means into the total.
    pub fn combine<T: Real>(self, forward: T, backward: T) -> T {
        match self {
            ChamferVariant::CdT => forward + backward,
            ChamferVariant::CdP => (forward + backward) * T::of(0.5),
        }
    }
}

impl fmt::Display for ChamferVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChamferVariant::CdT => "cd-t",
            ChamferVariant::CdP => "cd-p",
        })
    }
}

impl FromStr for ChamferVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cd-t" | "cdt" => Ok(ChamferVariant::CdT),
            "cd-p" | "cdp" => Ok(ChamferVariant::CdP),
            other => Err(Error::config(format!(
                "unknown chamfer variant {other:?} (expected cd-t or cd-p)"
            ))),
        }
    }
}

/// Chamfer distance with its two directional terms. `forward` is the mean
/// over `s1` of the (squared for CD-T) distance to the nearest point of
/// `s2`; `backward` is the reverse direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChamferTerms {
    pub total: f64,
    pub forward: f64,
    pub backward: f64,
}

pub fn chamfer(s1: &PointCloud, s2: &PointCloud, variant: ChamferVariant) -> Result<ChamferTerms> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::EmptyInput("chamfer"));
    }
    let (d1, d2) = nearest_sq(s1, s2);
    let dist = |d: f64| if variant.squared() { d } else { d.sqrt() };
    let forward = d1.iter().map(|&d| dist(d)).sum::<f64>() / d1.len() as f64;
    let backward = d2.iter().map(|&d| dist(d)).sum::<f64>() / d2.len() as f64;
    Ok(ChamferTerms {
        total: variant.combine(forward, backward),
        forward,
        backward,
    })
}

/// Mean distance from each input point to its nearest output point.
pub fn fidelity_error(input: &PointCloud, output: &PointCloud) -> Result<f64> {
    if input.is_empty() || output.is_empty() {
        return Err(Error::EmptyInput("fidelity_error"));
    }
    let (d, _) = nearest_sq(input, output);
    Ok(d.iter().map(|v| v.sqrt()).sum::<f64>() / d.len() as f64)
}

fn nearest_sq(a: &PointCloud, b: &PointCloud) -> (Vec<f64>, Vec<f64>) {
    let fa = a.flat::<f64>();
    let fb = b.flat::<f64>();
    let mut best_a = vec![0.0; a.len()];
    let mut best_b = vec![0.0; b.len()];
    let mut arg_a = vec![0u32; a.len()];
    let mut arg_b = vec![0u32; b.len()];
    crate::tensor::nearest_both(&fa, &fb, &mut best_a, &mut arg_a, &mut best_b, &mut arg_b);
    (best_a, best_b)
}

/// Batch-mean Chamfer distance between `[b, n, 3]` and `[b, m, 3]` point
/// tensors on the tape, differentiable in both.
pub fn chamfer_on_tape<T: Real>(
    tape: &mut Tape<T>,
    s1: Var,
    s2: Var,
    variant: ChamferVariant,
) -> Result<Var> {
    let terms = tape.nn_dist(s1, s2, variant.squared())?;
    let per_sample_sum = tape.mean(terms);
    // mean over [b, 2] is (Σ fwd + Σ bwd) / 2b
    let factor = match variant {
        ChamferVariant::CdT => 2.0,
        ChamferVariant::CdP => 1.0,
    };
    Ok(tape.scale(per_sample_sum, T::of(factor)))
}

/// Greedy farthest point sampling over flat xyz coordinates.
///
/// Starts at `seed_index`; every further pick maximizes the distance to the
/// nearest already selected point, lowest index first on ties.
pub fn fps_flat<T: Real>(xyz: &[T], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = xyz.len() / 3;
    if k > n {
        return Err(Error::Bounds {
            op: "fps",
            detail: format!("cannot select {k} of {n} points"),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if seed_index >= n {
        return Err(Error::Bounds {
            op: "fps",
            detail: format!("seed index {seed_index} with {n} points"),
        });
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d = vec![T::infinity(); n];
    let mut current = seed_index;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            break;
        }
        let (cx, cy, cz) = (xyz[current * 3], xyz[current * 3 + 1], xyz[current * 3 + 2]);
        let mut best = -T::one();
        let mut next = 0;
        for i in 0..n {
            let dx = xyz[i * 3] - cx;
            let dy = xyz[i * 3 + 1] - cy;
            let dz = xyz[i * 3 + 2] - cz;
            let d = dx * dx + dy * dy + dz * dz;
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        current = next;
    }
    Ok(selected)
}

pub fn fps(cloud: &PointCloud, k: usize, seed_index: usize) -> Result<Vec<usize>> {
    fps_flat(&cloud.flat::<f64>(), k, seed_index)
}

/// The cloud followed by its reflection through the x-y plane.
pub fn mirror_xy(cloud: &PointCloud) -> PointCloud {
    let mut points = cloud.points.clone();
    points.extend(cloud.points.iter().map(|&[x, y, z]| [x, y, -z]));
    PointCloud::new(points)
}

/// Flat-coordinate version of [`mirror_xy`].
pub fn mirror_xy_flat<T: Real>(xyz: &[T]) -> Vec<T> {
    let mut out = xyz.to_vec();
    out.extend(xyz.chunks(3).flat_map(|p| [p[0], p[1], -p[2]]));
    out
}

/// The `√ratio × √ratio` uniform grid over `[-extent, extent]²` as a
/// `[ratio, 2]` tensor in row-major order. A single sample sits at the
/// origin.
pub fn grid_coords<T: Real>(ratio: usize, extent: f64) -> Result<Tensor<T>> {
    let side = perfect_sqrt(ratio).ok_or_else(|| {
        Error::config(format!("grid ratio {ratio} is not a positive perfect square"))
    })?;
    Ok(grid_rect(side, side, extent))
}

/// A `rows × cols` uniform grid over `[-extent, extent]²`, row-major. An
/// axis with a single sample sits at 0.
pub fn grid_rect<T: Real>(rows: usize, cols: usize, extent: f64) -> Tensor<T> {
    let coord = |i: usize, count: usize| {
        if count == 1 {
            0.0
        } else {
            -extent + 2.0 * extent * i as f64 / (count - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(rows * cols * 2);
    for i in 0..rows {
        for j in 0..cols {
            data.push(T::of(coord(i, rows)));
            data.push(T::of(coord(j, cols)));
        }
    }
    Tensor::new(&[rows * cols, 2], data).expect("rows x cols x 2 layout")
}

/// Folding grid for `ratio` points per seed: square when `ratio` is a
/// perfect square, otherwise the most square `rows × cols` factorization
/// (2 → 1×2, 8 → 2×4).
pub fn folding_grid<T: Real>(ratio: usize, extent: f64) -> Result<Tensor<T>> {
    if ratio == 0 {
        return Err(Error::config("folding ratio must be positive"));
    }
    let rows = (1..=ratio)
        .take_while(|r| r * r <= ratio)
        .filter(|r| ratio % r == 0)
        .last()
        .unwrap_or(1);
    Ok(grid_rect(rows, ratio / rows, extent))
}

pub(crate) fn perfect_sqrt(v: usize) -> Option<usize> {
    if v == 0 {
        return None;
    }
    let r = (v as f64).sqrt().round() as usize;
    (r * r == v).then_some(r)
}
