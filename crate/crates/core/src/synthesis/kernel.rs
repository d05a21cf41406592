use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::io::{read_npy, write_npy};
use crate::rng::rng;

/// Parameters of the projected camera-shake random walk.
///
/// Velocity follows `v[t+1] = inertia·v[t] + jitter·N(0, I)`, starting from
/// `v[0] = jitter·N(0, I)`, and positions integrate the velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryParams {
    pub steps: usize,
    pub inertia: f64,
    pub jitter: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            steps: 64,
            inertia: 0.85,
            jitter: 1.0,
        }
    }
}

/// Inclusive range of admissible odd kernel sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSizeRange {
    pub min: usize,
    pub max: usize,
}

impl Default for KernelSizeRange {
    fn default() -> Self {
        Self { min: 13, max: 29 }
    }
}

impl KernelSizeRange {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.min % 2 == 1 && self.max % 2 == 1 && self.min <= self.max,
            "kernel side range must have odd bounds with min <= max, got [{}, {}]",
            self.min,
            self.max
        );
        Ok(())
    }

    pub fn contains(&self, side: usize) -> bool {
        side % 2 == 1 && (self.min..=self.max).contains(&side)
    }

    /// Number of odd sides in the range.
    pub fn choices(&self) -> usize {
        (self.max - self.min) / 2 + 1
    }

    pub fn nth(&self, k: usize) -> usize {
        self.min + 2 * (k % self.choices())
    }
}

/// Sub-pixel camera path in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraTrajectory {
    pub positions: Vec<[f64; 2]>,
    pub seed: u64,
}

impl CameraTrajectory {
    pub fn simulate(seed: u64, params: &TrajectoryParams) -> Result<Self> {
        ensure!(params.steps >= 1, "trajectory needs at least one step");
        ensure!(
            params.inertia.is_finite() && params.jitter.is_finite() && params.jitter >= 0.0,
            "trajectory inertia and jitter must be finite, jitter non-negative"
        );
        let mut r = rng(seed);
        let mut normal = || -> [f64; 2] {
            [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)]
        };
        let n0 = normal();
        let mut v = [params.jitter * n0[0], params.jitter * n0[1]];
        let mut p = [0.0, 0.0];
        let mut positions = Vec::with_capacity(params.steps);
        positions.push(p);
        for _ in 1..params.steps {
            let z = normal();
            p = [p[0] + v[0], p[1] + v[1]];
            positions.push(p);
            v = [
                params.inertia * v[0] + params.jitter * z[0],
                params.inertia * v[1] + params.jitter * z[1],
            ];
        }
        Ok(Self { positions, seed })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Odd-sized, non-negative, unit-sum point-spread function.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    side: usize,
    weights: Vec<f64>,
}

const UNIT_SUM_TOL: f64 = 1e-6;

impl BlurKernel {
    pub fn new(side: usize, weights: Vec<f64>) -> Result<Self> {
        ensure!(side % 2 == 1, "kernel side must be odd, got {side}");
        ensure!(
            weights.len() == side * side,
            "kernel of side {side} needs {} weights, got {}",
            side * side,
            weights.len()
        );
        ensure!(
            weights.iter().all(|&w| w >= 0.0 && w.is_finite()),
            "kernel weights must be finite and non-negative"
        );
        let sum: f64 = weights.iter().sum();
        ensure!(
            (sum - 1.0).abs() <= UNIT_SUM_TOL,
            "kernel weights sum to {sum}, expected 1"
        );
        Ok(Self { side, weights })
    }

    pub fn delta(side: usize) -> Result<Self> {
        ensure!(side % 2 == 1, "kernel side must be odd, got {side}");
        let mut weights = vec![0.0; side * side];
        weights[side * side / 2] = 1.0;
        Ok(Self { side, weights })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.side + x]
    }

    pub fn save_npy(&self, path: &Path) -> Result<()> {
        write_npy(path, &[self.side, self.side], &self.weights)
    }

    pub fn load_npy(path: &Path) -> Result<Self> {
        let (shape, data) = read_npy(path)?;
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::format(path, "kernel must be a square 2-D grid"));
        }
        BlurKernel::new(shape[0], data).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Rasterizes a simulated trajectory into a kernel of the given side.
///
/// The path is centered on its centroid, scaled so its largest excursion
/// reaches the kernel border, splatted bilinearly and normalized.
pub fn generate_kernel_in_range(
    seed: u64,
    side: usize,
    params: &TrajectoryParams,
    range: &KernelSizeRange,
) -> Result<BlurKernel> {
    range.validate()?;
    ensure!(
        range.contains(side),
        "kernel side {side} must be odd and within [{}, {}]",
        range.min,
        range.max
    );
    let trajectory = CameraTrajectory::simulate(seed, params)?;
    rasterize(&trajectory, side)
}

/// [`generate_kernel_in_range`] with the default 13..=29 range.
pub fn generate_kernel(seed: u64, side: usize, params: &TrajectoryParams) -> Result<BlurKernel> {
    generate_kernel_in_range(seed, side, params, &KernelSizeRange::default())
}

pub fn rasterize(trajectory: &CameraTrajectory, side: usize) -> Result<BlurKernel> {
    ensure!(side % 2 == 1, "kernel side must be odd, got {side}");
    ensure!(!trajectory.is_empty(), "empty trajectory");
    ensure!(
        trajectory
            .positions
            .iter()
            .all(|p| p[0].is_finite() && p[1].is_finite()),
        "trajectory has non-finite coordinates"
    );
    let n = trajectory.len() as f64;
    let cx = trajectory.positions.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = trajectory.positions.iter().map(|p| p[1]).sum::<f64>() / n;
    let extent = trajectory
        .positions
        .iter()
        .map(|p| (p[0] - cx).abs().max((p[1] - cy).abs()))
        .fold(0.0, f64::max);
    let radius = (side / 2) as f64;
    let scale = if extent > 1e-12 { radius / extent } else { 0.0 };

    let mut weights = vec![0.0; side * side];
    for p in &trajectory.positions {
        let x = radius + (p[0] - cx) * scale;
        let y = radius + (p[1] - cy) * scale;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w <= 0.0 {
                    continue;
                }
                let (xi, yi) = (x0 as isize + dx, y0 as isize + dy);
                if xi >= 0 && yi >= 0 && (xi as usize) < side && (yi as usize) < side {
                    weights[yi as usize * side + xi as usize] += w;
                }
            }
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    BlurKernel::new(side, weights)
}
