//! Discretisation grid, the deterministic set-convolution channels, the
//! random functional representation, and smoothing back to target inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{approx_random_representation, sample_rff_prior, PathwiseSample};
use crate::kernels::{KernelBank, StationaryKernel};
use crate::latent::gumbel_softmax_sample;
use crate::scalar::Scalar;

/// Floor on the density in the Nadaraya–Watson ratio.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Uniform grid `t_m = start + m·spacing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<F> {
    pub start: F,
    pub spacing: F,
    pub len: usize,
    pub margin: F,
}

impl<F: Scalar> Grid<F> {
    pub fn point(&self, m: usize) -> F {
        self.start + self.spacing * F::from_usize_lossy(m)
    }

    pub fn points(&self) -> Vec<F> {
        (0..self.len).map(|m| self.point(m)).collect()
    }

    pub fn end(&self) -> F {
        self.point(self.len - 1)
    }

    /// Index of the grid node closest to `x`, clamped to the grid.
    pub fn nearest(&self, x: F) -> usize {
        let r = ((x - self.start) / self.spacing).round();
        if r < F::zero() {
            0
        } else {
            r.to_usize().unwrap_or(usize::MAX).min(self.len - 1)
        }
    }
}

/// Grid covering `[x_min − margin, x_max + margin]` with
/// `⌈(x_max − x_min + 2·margin)·ppu⌉ + 1` points.
pub fn make_grid<F: Scalar>(x_min: F, x_max: F, points_per_unit: F, margin: F) -> Result<Grid<F>> {
    if !(x_max >= x_min) || !x_min.is_finite() || !x_max.is_finite() {
        return Err(Error::domain("make_grid", format!("invalid range [{x_min}, {x_max}]")));
    }
    if !(points_per_unit >= F::one()) || margin < F::zero() {
        return Err(Error::domain("make_grid", "points_per_unit must be ≥ 1 and margin ≥ 0"));
    }
    let width = x_max - x_min + margin + margin;
    let cells = (width * points_per_unit).ceil().to_usize().ok_or_else(|| Error::domain("make_grid", "grid too large"))?;
    if cells == 0 {
        return Err(Error::invalid("make_grid: degenerate range gives a single-point grid"));
    }
    Ok(Grid { start: x_min - margin, spacing: F::one() / points_per_unit, len: cells + 1, margin })
}

/// Grid covering every input of the given sets.
pub fn grid_for<F: Scalar>(sets: &[&[F]], points_per_unit: F, margin: F) -> Result<Grid<F>> {
    let mut lo = F::infinity();
    let mut hi = F::neg_infinity();
    for s in sets {
        for &x in *s {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    if !lo.is_finite() {
        return Err(Error::invalid("grid_for: no inputs"));
    }
    make_grid(lo, hi, points_per_unit, margin)
}

/// `d(t_m) = Σ_n k(t_m − x_n)`.
pub fn density_channel<F: Scalar, K: StationaryKernel<F> + ?Sized>(xc: &[F], grid: &Grid<F>, kernel: &K) -> Vec<F> {
    (0..grid.len)
        .map(|m| {
            let t = grid.point(m);
            xc.iter().map(|&x| kernel.k(t - x)).sum()
        })
        .collect()
}

/// Nadaraya–Watson channel `Σ_n y_n k(t − x_n) / max(Σ_n k(t − x_n), 1e-12)`.
pub fn deterministic_data_channel<F: Scalar, K: StationaryKernel<F> + ?Sized>(
    xc: &[F],
    yc: &[F],
    grid: &Grid<F>,
    kernel: &K,
) -> Vec<F> {
    let floor = F::lit(DENSITY_FLOOR);
    (0..grid.len)
        .map(|m| {
            let t = grid.point(m);
            let mut num = F::zero();
            let mut den = F::zero();
            for (&x, &y) in xc.iter().zip(yc) {
                let k = kernel.k(t - x);
                num += y * k;
                den += k;
            }
            num / den.max(floor)
        })
        .collect()
}

/// Context values placed on their nearest grid nodes (summed on collisions).
pub fn data_delta_channel<F: Scalar>(xc: &[F], yc: &[F], grid: &Grid<F>) -> Vec<F> {
    let mut out = vec![F::zero(); grid.len];
    for (&x, &y) in xc.iter().zip(yc) {
        out[grid.nearest(x)] += y;
    }
    out
}

/// Default filter half-width in cells: `⌈3/(spacing·2π·σ_min)⌉`, where
/// `σ_min` is the narrowest spectral standard deviation of the bank, capped
/// so the filter fits in the grid.
pub fn default_filter_half_width<F: Scalar>(bank: &KernelBank<F>, grid: &Grid<F>) -> usize {
    let smin = bank
        .densities()
        .iter()
        .map(|d| d.sigma2[0].sqrt())
        .fold(F::infinity(), F::min);
    let cells = (F::lit(3.0) / (grid.spacing * F::two_pi() * smin)).ceil();
    let h = cells.to_usize().unwrap_or(usize::MAX);
    h.min(grid.len.saturating_sub(1) / 2)
}

/// The kernel sampled at `j·spacing` for `j = −half..=half`.
pub fn truncated_filter<F: Scalar, K: StationaryKernel<F> + ?Sized>(kernel: &K, spacing: F, half: usize) -> Vec<F> {
    let h = half as isize;
    (-h..=h).map(|j| kernel.k(spacing * F::lit(j as f64))).collect()
}

/// How data channels are built from the path-wise posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RepresentationMode {
    Exact,
    Approx { alpha: f64 },
}

/// Density channel plus one or more data channels on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalRepresentation<F> {
    pub density: Vec<F>,
    pub data_channels: Vec<Vec<F>>,
    pub grid: Grid<F>,
}

impl<F: Scalar> FunctionalRepresentation<F> {
    pub fn all_finite(&self) -> bool {
        self.density.iter().chain(self.data_channels.iter().flatten()).all(|v| v.is_finite())
    }
}

/// Settings for [`random_functional_representation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomRepresentationConfig {
    pub samples: usize,
    pub l_spec: usize,
    pub temperature: f64,
    pub hard: bool,
    pub mode: RepresentationMode,
}

/// Deterministic ConvDeepsets representation with a single data channel.
pub fn deterministic_representation<F: Scalar, K: StationaryKernel<F> + ?Sized>(
    xc: &[F],
    yc: &[F],
    grid: &Grid<F>,
    kernel: &K,
) -> FunctionalRepresentation<F> {
    FunctionalRepresentation {
        density: density_channel(xc, grid, kernel),
        data_channels: vec![deterministic_data_channel(xc, yc, grid, kernel)],
        grid: grid.clone(),
    }
}

/// Expected-kernel density plus `samples` path-wise data channels, each from
/// a fresh Gumbel-softmax weight and random feature prior.
pub fn random_functional_representation<F: Scalar, R: Rng + ?Sized>(
    xc: &[F],
    yc: &[F],
    grid: &Grid<F>,
    bank: &KernelBank<F>,
    probs: &[F],
    config: &RandomRepresentationConfig,
    rng: &mut R,
) -> Result<FunctionalRepresentation<F>> {
    if config.samples == 0 {
        return Err(Error::invalid("random_functional_representation needs at least one sample"));
    }
    let kbar = bank.mixture(probs)?;
    let density = density_channel(xc, grid, &kbar);
    let t = grid.points();
    let mut data_channels = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let z = gumbel_softmax_sample(probs, config.temperature, config.hard, rng)?;
        let prior = sample_rff_prior(bank, config.l_spec, rng)?;
        let channel = match config.mode {
            RepresentationMode::Exact => PathwiseSample::fit(xc, yc, bank, probs, &prior, &z)?.eval(&t)?,
            RepresentationMode::Approx { alpha } => {
                let prior_grid = prior.eval_many(bank, &z, &t)?;
                let delta = data_delta_channel(xc, yc, grid);
                let filter = truncated_filter(&kbar, grid.spacing, default_filter_half_width(bank, grid));
                approx_random_representation(&delta, &prior_grid, F::lit(alpha), &filter)?
            }
        };
        data_channels.push(channel);
    }
    Ok(FunctionalRepresentation { density, data_channels, grid: grid.clone() })
}

/// `out[c][j] = Σ_m values[c][m]·k(x_j − t_m)`.
pub fn smooth_to_targets<F: Scalar, K: StationaryKernel<F> + ?Sized>(
    values: &[Vec<F>],
    grid: &Grid<F>,
    xt: &[F],
    kernel: &K,
) -> Result<Vec<Vec<F>>> {
    if values.iter().any(|c| c.len() != grid.len) {
        return Err(Error::shape("smooth_to_targets", format!("channels must have {} grid values", grid.len)));
    }
    let t = grid.points();
    let weights: Vec<Vec<F>> = xt.iter().map(|&x| t.iter().map(|&tm| kernel.k(x - tm)).collect()).collect();
    Ok(values
        .iter()
        .map(|c| weights.iter().map(|w| w.iter().zip(c).map(|(&a, &b)| a * b).sum()).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram_matrix, make_kernel_bank, Rbf};
    use crate::random::{normal, rng_from_seed};

    #[test]
    fn grid_formula() {
        let g = make_grid(0.0f64, 1.0, 64.0, 0.0).unwrap();
        assert_eq!(g.len, 65);
        assert_eq!(g.spacing, 1.0 / 64.0);
        let g = make_grid(0.0f64, 4.0, 64.0, 0.1).unwrap();
        assert!(g.start <= -0.1 && g.end() >= 4.1 - 1e-12);
        let h = make_grid(2.5, 6.5, 64.0, 0.1).unwrap();
        for m in 0..g.len {
            assert!((h.point(m) - (g.point(m) + 2.5)).abs() < 1e-12);
        }
        assert!(make_grid(1.0, 1.0, 64.0, 0.0).is_err());
        assert!(make_grid(2.0, 1.0, 64.0, 0.0).is_err());
    }

    #[test]
    fn density_cases() {
        let g = make_grid(0.0f64, 1.0, 8.0, 0.0).unwrap();
        let k = Rbf { lengthscale: 0.1 };
        assert!(density_channel(&[], &g, &k).iter().all(|&v| v == 0.0));
        let d = density_channel(&[0.25], &g, &k);
        assert_eq!(d[2], 1.0);
        let a = [0.1, 0.7];
        let b = [0.33];
        let ab = [0.1, 0.7, 0.33];
        let (da, db, dab) = (density_channel(&a, &g, &k), density_channel(&b, &g, &k), density_channel(&ab, &g, &k));
        for m in 0..g.len {
            assert!((da[m] + db[m] - dab[m]).abs() < 1e-15);
        }
    }

    #[test]
    fn data_channel_cases() {
        let g = make_grid(0.0f64, 1.0, 8.0, 0.0).unwrap();
        let k = Rbf { lengthscale: 0.1 };
        assert_eq!(deterministic_data_channel(&[0.25], &[1.7], &g, &k)[2], 1.7);
        let x = [0.1, 0.45, 0.8];
        let c = deterministic_data_channel(&x, &[0.3; 3], &g, &k);
        assert!(c.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn data_channel_equals_rescaled_gp_mean() {
        let mut rng = rng_from_seed(31);
        let g = make_grid(-1.0, 2.0, 16.0, 0.1).unwrap();
        let k = Rbf { lengthscale: 0.3 };
        let x: Vec<f64> = (0..6).map(|_| normal::<f64, _>(&mut rng)).collect();
        let y: Vec<f64> = (0..6).map(|_| normal::<f64, _>(&mut rng)).collect();
        let ktx = gram_matrix(&k, &g.points(), &x, 0.0);
        let mean = ktx.matvec(&y).unwrap();
        let dens = density_channel(&x, &g, &k);
        let ch = deterministic_data_channel(&x, &y, &g, &k);
        for m in 0..g.len {
            assert!((ch[m] - mean[m] / dens[m].max(DENSITY_FLOOR)).abs() <= 1e-10);
        }
    }

    #[test]
    fn smoothing_cases() {
        let g = make_grid(0.0, 1.0, 8.0, 0.0).unwrap();
        let vals = vec![(0..g.len).map(|m| m as f64).collect::<Vec<_>>()];
        let near_delta = Rbf { lengthscale: 1e-3 };
        let out = smooth_to_targets(&vals, &g, &[0.5], &near_delta).unwrap();
        assert!((out[0][0] - 4.0).abs() < 1e-12);
        let zero = vec![vec![0.0; g.len]];
        assert_eq!(smooth_to_targets(&zero, &g, &[0.1, 0.2], &near_delta).unwrap()[0], vec![0.0, 0.0]);
        let k = Rbf { lengthscale: 0.2 };
        let xt = [0.13, 0.77, 1.4];
        let out = smooth_to_targets(&vals, &g, &xt, &k).unwrap();
        for (j, &x) in xt.iter().enumerate() {
            let mut acc = 0.0;
            for m in 0..g.len {
                let d = x - g.point(m);
                acc += vals[0][m] * (-0.5 * d * d / 0.04).exp();
            }
            assert!((out[0][j] - acc).abs() <= 1e-12);
        }
    }

    #[test]
    fn random_representation_shapes_and_determinism() {
        let bank = make_kernel_bank::<f64>(3, 3.0).unwrap();
        let g = make_grid(0.0, 2.0, 16.0, 0.1).unwrap();
        let cfg = RandomRepresentationConfig { samples: 5, l_spec: 10, temperature: 0.5, hard: false, mode: RepresentationMode::Exact };
        let probs = [0.2, 0.5, 0.3];
        let a = random_functional_representation(&[0.3, 1.1], &[0.5, -0.2], &g, &bank, &probs, &cfg, &mut rng_from_seed(3)).unwrap();
        let b = random_functional_representation(&[0.3, 1.1], &[0.5, -0.2], &g, &bank, &probs, &cfg, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data_channels.len(), 5);
        assert!(a.all_finite());
        let approx = RandomRepresentationConfig { mode: RepresentationMode::Approx { alpha: 0.1 }, ..cfg };
        let c = random_functional_representation(&[0.3, 1.1], &[0.5, -0.2], &g, &bank, &probs, &approx, &mut rng_from_seed(3)).unwrap();
        assert!(c.all_finite());
    }

    #[test]
    fn prior_only_channels_have_unit_variance() {
        let bank = make_kernel_bank::<f64>(3, 3.0).unwrap();
        let g = make_grid(0.0, 1.0, 4.0, 0.0).unwrap();
        let cfg = RandomRepresentationConfig { samples: 2000, l_spec: 10, temperature: 0.5, hard: false, mode: RepresentationMode::Exact };
        let rep = random_functional_representation(&[], &[], &g, &bank, &[0.0, 1.0, 0.0], &cfg, &mut rng_from_seed(5)).unwrap();
        for m in 0..g.len {
            let var = rep.data_channels.iter().map(|c| c[m] * c[m]).sum::<f64>() / 2000.0;
            assert!((var - 1.0).abs() < 0.1, "{var}");
        }
    }
}
