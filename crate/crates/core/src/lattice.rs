//! Grids and discounted transition operators.
//!
//! Operators map next-date values on the grid to continuation values at the
//! current date. Entries are cell transfer weights: entry `(i, j)` is the
//! discounted probability mass that lands in cell `j` starting from node `i`
//! (the orthonormal-basis kernel multiplied by `sqrt(dy)` per axis).

use crate::error::{Error, Result};
use crate::math::{sinc, C64};
use crate::model::{AffineKernel, MarketEnv, ModelSpec, TransitionDensity};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

/// Default number of standard deviations on each side of the strike.
pub const DEFAULT_WIDTH_MULT: f64 = 10.0;
/// Default variance-axis resolution level.
pub const DEFAULT_JW: u32 = 4;
/// Default variance bounds.
pub const DEFAULT_VAR_BOUNDS: (f64, f64) = (0.0, 0.3);
/// Default widening of the variance-frequency range beyond `pi/dw`.
pub const DEFAULT_KAPPA_EXTENT: usize = 16;
/// Default tolerated share of a row's mass lost to clipping negative weights.
pub const DEFAULT_RING_TOL: f64 = 1e-6;

/// Shape of the functions that carry values along the variance axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarBasis {
    /// Cell indicators: values are constant across each variance cell.
    #[default]
    Indicator,
    /// Hat functions: values are linear between nodes and constant on the
    /// half cells at the two bounds.
    Hat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceGrid {
    pub level: u32,
    pub w: usize,
    pub lo: f64,
    pub dw: f64,
    #[serde(default)]
    pub basis: VarBasis,
}

impl VarianceGrid {
    pub fn new(level: u32, lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && hi > lo) {
            return Err(Error::domain(format!("invalid variance bounds [{lo}, {hi}]")));
        }
        if !(1..=10).contains(&level) {
            return Err(Error::domain(format!("variance level {level} outside [1, 10]")));
        }
        let w = 1usize << level;
        Ok(VarianceGrid {
            level,
            w,
            lo,
            dw: (hi - lo) / w as f64,
            basis: VarBasis::default(),
        })
    }

    pub fn with_basis(self, basis: VarBasis) -> Self {
        VarianceGrid { basis, ..self }
    }

    /// `(1/dw) int phi_q(w) e^{-i kappa w} dw` for the basis function of
    /// node `q`.
    pub fn transform(&self, q: usize, kappa: f64) -> C64 {
        let h = self.dw;
        let wq = self.node(q);
        let phase = |x: f64| C64::from_polar(1.0, -kappa * x);
        match self.basis {
            VarBasis::Indicator => phase(wq) * sinc(0.5 * kappa * h),
            VarBasis::Hat => {
                // int_0^h (1 - u/h) e^{a u} du with a = -i kappa (right
                // half) and a = +i kappa (left half)
                let half_hat = |a: C64| -> C64 {
                    let ah = a * h;
                    if ah.norm() < 1e-3 {
                        h * (0.5 + ah / 6.0 + ah * ah / 24.0 + ah * ah * ah / 120.0)
                    } else {
                        (ah.exp() - 1.0 - ah) / (a * a * h)
                    }
                };
                let edge = |centre: f64| phase(centre) * (0.5 * h) * sinc(0.25 * kappa * h);
                let a = C64::new(0.0, -kappa);
                let left = if q == 0 { edge(wq - 0.25 * h) } else { phase(wq) * half_hat(-a) };
                let right = if q + 1 == self.w { edge(wq + 0.25 * h) } else { phase(wq) * half_hat(a) };
                (left + right) / h
            }
        }
    }

    pub fn node(&self, q: usize) -> f64 {
        self.lo + (q as f64 + 0.5) * self.dw
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.w).map(|q| self.node(q)).collect()
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.w as f64 * self.dw
    }
}

/// Equally spaced log-price nodes at cell midpoints, with an optional
/// variance axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeGrid {
    pub level: u32,
    pub n: usize,
    /// Lower edge of the first cell.
    pub y_lo: f64,
    pub dy: f64,
    pub strike: Option<f64>,
    pub var: Option<VarianceGrid>,
}

/// Grid centred on `log strike` spanning `width_mult` standard deviations
/// `sigma_ref * sqrt(horizon)` on each side, with `2^level` nodes.
///
/// The strike sits on a cell edge, halfway between two nodes.
pub fn build_grid(
    strike: f64,
    sigma_ref: f64,
    horizon: f64,
    level: u32,
    width_mult: f64,
) -> Result<LatticeGrid> {
    if !(strike > 0.0 && sigma_ref > 0.0 && horizon > 0.0 && width_mult > 0.0) {
        return Err(Error::domain(
            "grid needs positive strike, reference volatility, horizon and width",
        ));
    }
    if !(4..=16).contains(&level) {
        return Err(Error::domain(format!("resolution level {level} outside [4, 16]")));
    }
    let n = 1usize << level;
    let half = width_mult * sigma_ref * horizon.sqrt();
    let span = 2.0 * half;
    Ok(LatticeGrid {
        level,
        n,
        y_lo: strike.ln() - half,
        dy: span / n as f64,
        strike: Some(strike),
        var: None,
    })
}

impl LatticeGrid {
    pub fn with_variance(mut self, level: u32, lo: f64, hi: f64) -> Result<Self> {
        self.var = Some(VarianceGrid::new(level, lo, hi)?);
        Ok(self)
    }

    pub fn node(&self, j: usize) -> f64 {
        self.y_lo + (j as f64 + 0.5) * self.dy
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    pub fn y_hi(&self) -> f64 {
        self.y_lo + self.n as f64 * self.dy
    }

    pub fn span(&self) -> f64 {
        self.n as f64 * self.dy
    }

    /// Number of variance nodes, 1 for a price-only grid.
    pub fn w(&self) -> usize {
        self.var.map_or(1, |v| v.w)
    }

    /// Checks the strike is not on a node.
    pub fn check_strike(&self, strike: f64) -> Result<()> {
        let pos = (strike.ln() - self.y_lo) / self.dy - 0.5;
        let frac = (pos - pos.round()).abs();
        if frac < 0.25 {
            return Err(Error::StrikeOnNode(strike));
        }
        Ok(())
    }

    /// Rejects cash dividends that would push the lowest node to a
    /// non-positive price.
    pub fn check_dividend(&self, d: f64) -> Result<()> {
        let lowest = self.node(0).exp();
        if d >= lowest {
            return Err(Error::DividendTooLarge {
                dividend: d,
                price: lowest,
            });
        }
        Ok(())
    }

    /// Requires `spot` to lie at least `margin` cells inside the grid.
    pub fn check_interior(&self, spot: f64, margin: usize) -> Result<()> {
        let lo = self.y_lo + margin as f64 * self.dy;
        let hi = self.y_hi() - margin as f64 * self.dy;
        let x = spot.ln();
        if !(x >= lo && x <= hi) {
            return Err(Error::OutsideGrid {
                spot,
                lo: lo.exp(),
                hi: hi.exp(),
            });
        }
        Ok(())
    }

    /// Post-dividend conditioning log-prices `log(e^{y_i} - d)`.
    pub fn shifted_nodes(&self, d: f64) -> Result<Vec<f64>> {
        if d == 0.0 {
            return Ok(self.nodes());
        }
        self.check_dividend(d)?;
        Ok(self.nodes().iter().map(|y| (y.exp() - d).ln()).collect())
    }
}

/// Transform-variable nodes for Fourier inversion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierGrid {
    pub r: usize,
    pub dlambda: f64,
    pub z: usize,
    pub dkappa: f64,
}

impl FourierGrid {
    /// `R = oversample * N` and `Z = oversample * W` nodes, reaching
    /// `pi/dy` and `pi/dw` at the edges.
    pub fn for_grid(grid: &LatticeGrid, oversample: usize) -> Result<Self> {
        Self::with_extent(grid, oversample, 1)
    }

    /// As [`FourierGrid::for_grid`] with the variance-frequency range widened
    /// to `kappa_extent * pi/dw` at the same spacing. Concentrated variance
    /// transitions need the wider range to keep the kernel free of ringing.
    pub fn with_extent(grid: &LatticeGrid, oversample: usize, kappa_extent: usize) -> Result<Self> {
        if oversample < 2 || kappa_extent < 1 {
            return Err(Error::Nyquist {
                step: 2.0 * PI / (oversample as f64 * grid.span()),
                bound: PI / grid.span(),
            });
        }
        let r = oversample * grid.n;
        let (z, dkappa) = match grid.var {
            Some(v) => {
                let z = oversample * v.w;
                (z * kappa_extent, 2.0 * PI / (z as f64 * v.dw))
            }
            None => (1, 0.0),
        };
        let f = FourierGrid {
            r,
            dlambda: 2.0 * PI / (r as f64 * grid.dy),
            z,
            dkappa,
        };
        f.check(grid)?;
        Ok(f)
    }

    /// The transform grid must not reach past the cell resolution and its
    /// period must cover every node offset without wrap-around.
    pub fn check(&self, grid: &LatticeGrid) -> Result<()> {
        let lmax = 0.5 * self.r as f64 * self.dlambda;
        if lmax > PI / grid.dy * (1.0 + 1e-12) || self.dlambda > PI / grid.span() * (1.0 + 1e-12) {
            return Err(Error::Nyquist {
                step: self.dlambda,
                bound: PI / grid.span(),
            });
        }
        if let Some(v) = grid.var {
            let span = v.w as f64 * v.dw;
            if self.dkappa > PI / span * (1.0 + 1e-12) {
                return Err(Error::Nyquist {
                    step: self.dkappa,
                    bound: PI / span,
                });
            }
        }
        Ok(())
    }

    /// Quadrature weight `dkappa * dw / 2 pi` of one variance-frequency node.
    pub fn kappa_weight(&self, dw: f64) -> f64 {
        self.dkappa * dw / (2.0 * PI)
    }

    pub fn lambda(&self, r: usize) -> f64 {
        (r as f64 - 0.5 * self.r as f64) * self.dlambda
    }

    pub fn kappa(&self, z: usize) -> f64 {
        (z as f64 - 0.5 * self.z as f64) * self.dkappa
    }
}

/// Characteristic-function exponents on the Fourier grid for one time step,
/// shared by every operator built for that step.
#[derive(Clone, Debug)]
pub struct SpectralFactors {
    pub tau: f64,
    pub r: usize,
    pub z: usize,
    /// `A` at `(r, z)`, row-major in `r`.
    pub a: Vec<C64>,
    pub b: Vec<C64>,
    /// Exponents at `kappa = 0`, one per `r`.
    pub a0: Vec<C64>,
    pub b0: Vec<C64>,
    /// `sinc(lambda_r dy / 2)`.
    pub s: Vec<f64>,
    /// Variance basis transforms `(1/dw) phi_q^(-kappa_z)`, indexed
    /// `z * W + q`.
    pub var_basis: Vec<C64>,
    /// Quadrature weight of one variance-frequency node.
    pub kappa_weight: f64,
    /// Per `r`, the range of `z` whose terms are not negligible for any
    /// conditioning variance in the grid bounds.
    pub zrange: Vec<(usize, usize)>,
}

/// Exponent below which a Fourier term is dropped (`e^-46 ~ 1e-20`).
const LOG_NEGLIGIBLE: f64 = -46.0;

impl SpectralFactors {
    /// Factors for the price marginal only (`kappa = 0`); the joint table is
    /// left empty.
    pub fn marginal(
        model: &ModelSpec,
        env: &MarketEnv,
        grid: &LatticeGrid,
        fgrid: &FourierGrid,
        tau: f64,
    ) -> Result<Self> {
        fgrid.check(grid)?;
        let kernel = AffineKernel::new(model, env, tau)?;
        let rn = fgrid.r;
        let ab: Vec<(C64, C64)> = (0..rn)
            .into_par_iter()
            .map(|r| kernel.exponent(fgrid.lambda(r), 0.0).map(|e| (e.a, e.b)))
            .collect::<Result<_>>()?;
        Ok(SpectralFactors {
            tau,
            r: rn,
            z: 0,
            a: vec![],
            b: vec![],
            a0: ab.iter().map(|x| x.0).collect(),
            b0: ab.iter().map(|x| x.1).collect(),
            s: (0..rn).map(|r| sinc(0.5 * fgrid.lambda(r) * grid.dy)).collect(),
            var_basis: vec![],
            kappa_weight: 0.0,
            zrange: vec![(0, 0); rn],
        })
    }

    /// Whether the joint `(lambda, kappa)` table is present.
    pub fn is_joint(&self) -> bool {
        !self.a.is_empty()
    }

    pub fn new(
        model: &ModelSpec,
        env: &MarketEnv,
        grid: &LatticeGrid,
        fgrid: &FourierGrid,
        tau: f64,
    ) -> Result<Self> {
        let var = grid
            .var
            .ok_or_else(|| Error::domain("a two-dimensional operator needs a variance grid"))?;
        fgrid.check(grid)?;
        let kernel = AffineKernel::new(model, env, tau)?;
        let (rn, zn) = (fgrid.r, fgrid.z);
        // exponents at (-lambda, -kappa) are conjugates, so only the
        // non-negative half of the lambda axis is solved; the edge rows and
        // columns without a mirror are solved directly
        let half = rn / 2;
        let solved: Vec<Result<Vec<(C64, C64)>>> = (half..rn)
            .into_par_iter()
            .map(|r| {
                let l = fgrid.lambda(r);
                (0..zn)
                    .map(|z| kernel.exponent(l, fgrid.kappa(z)).map(|e| (e.a, e.b)))
                    .collect()
            })
            .collect();
        let solved: Vec<Vec<(C64, C64)>> = solved.into_iter().collect::<Result<_>>()?;
        let mut a = vec![C64::new(0.0, 0.0); rn * zn];
        let mut b = vec![C64::new(0.0, 0.0); rn * zn];
        for (k, row) in solved.iter().enumerate() {
            let r = half + k;
            for (z, &(x, y)) in row.iter().enumerate() {
                a[r * zn + z] = x;
                b[r * zn + z] = y;
            }
        }
        for r in 0..half {
            let l = fgrid.lambda(r);
            for z in 0..zn {
                let (x, y) = if r > 0 && z > 0 {
                    let (x, y) = solved[rn - r - half][zn - z];
                    (x.conj(), y.conj())
                } else {
                    let e = kernel.exponent(l, fgrid.kappa(z))?;
                    (e.a, e.b)
                };
                a[r * zn + z] = x;
                b[r * zn + z] = y;
            }
        }
        let mut a0 = Vec::with_capacity(rn);
        let mut b0 = Vec::with_capacity(rn);
        for r in 0..rn {
            let e = kernel.exponent(fgrid.lambda(r), 0.0)?;
            a0.push(e.a);
            b0.push(e.b);
        }
        let w_hi = var.hi();
        let zrange = (0..rn)
            .map(|r| {
                let live = |z: &usize| {
                    let i = r * zn + z;
                    a[i].re + b[i].re.max(0.0) * w_hi > LOG_NEGLIGIBLE
                };
                match (0..zn).position(|z| live(&z)) {
                    Some(lo) => (lo, (0..zn).rposition(|z| live(&z)).unwrap() + 1),
                    None => (0, 0),
                }
            })
            .collect();
        Ok(SpectralFactors {
            tau,
            r: rn,
            z: zn,
            a,
            b,
            a0,
            b0,
            s: (0..rn).map(|r| sinc(0.5 * fgrid.lambda(r) * grid.dy)).collect(),
            var_basis: (0..zn)
                .flat_map(|z| (0..var.w).map(move |q| var.transform(q, fgrid.kappa(z))))
                .collect(),
            kappa_weight: fgrid.kappa_weight(var.dw),
            zrange,
        })
    }
}

/// Precomputed FFT convolution with an unshifted Toeplitz kernel:
/// `c_i = sum_j K(j - i) v_j`.
#[derive(Clone)]
pub struct ToeplitzConv {
    n: usize,
    len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ToeplitzConv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ToeplitzConv(n={}, len={})", self.n, self.len)
    }
}

impl ToeplitzConv {
    pub fn new(n: usize) -> Self {
        let len = (3 * n).next_power_of_two();
        let mut planner = FftPlanner::new();
        ToeplitzConv {
            n,
            len,
            fwd: planner.plan_fft_forward(len),
            inv: planner.plan_fft_inverse(len),
        }
    }

    /// Transform of a kernel stored by offset, `kernel[k + n - 1] = K(k)`.
    pub fn kernel_hat(&self, kernel: &[f64]) -> Vec<C64> {
        debug_assert_eq!(kernel.len(), 2 * self.n - 1);
        let mut buf = vec![C64::new(0.0, 0.0); self.len];
        // reversed kernel: g[m] = K(n - 1 - m)
        for (m, slot) in buf.iter_mut().take(2 * self.n - 1).enumerate() {
            *slot = C64::new(kernel[2 * self.n - 2 - m], 0.0);
        }
        self.fwd.process(&mut buf);
        buf
    }

    pub fn values_hat(&self, v: &[f64]) -> Vec<C64> {
        let mut buf = vec![C64::new(0.0, 0.0); self.len];
        for (slot, &x) in buf.iter_mut().zip(v) {
            *slot = C64::new(x, 0.0);
        }
        self.fwd.process(&mut buf);
        buf
    }

    /// Back-transforms a product spectrum into the `n` outputs.
    pub fn finish(&self, mut buf: Vec<C64>) -> Vec<f64> {
        self.inv.process(&mut buf);
        let scale = 1.0 / self.len as f64;
        (0..self.n).map(|i| buf[i + self.n - 1].re * scale).collect()
    }

    pub fn apply(&self, kernel_hat: &[C64], v: &[f64]) -> Vec<f64> {
        let mut buf = self.values_hat(v);
        for (x, k) in buf.iter_mut().zip(kernel_hat) {
            *x *= k;
        }
        self.finish(buf)
    }
}

/// One-dimensional Toeplitz operator for an unshifted step.
#[derive(Clone, Debug)]
pub struct Toeplitz1D {
    pub n: usize,
    /// `K(k)` at index `k + n - 1`.
    pub kernel: Vec<f64>,
    conv: ToeplitzConv,
    hat: Vec<C64>,
}

impl Toeplitz1D {
    pub fn from_kernel(n: usize, kernel: Vec<f64>) -> Self {
        let conv = ToeplitzConv::new(n);
        let hat = conv.kernel_hat(&kernel);
        Toeplitz1D {
            n,
            kernel,
            conv,
            hat,
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.kernel[j + self.n - 1 - i]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.conv.apply(&self.hat, v)
    }
}

/// Banded dense rows for a dividend-shifted step.
#[derive(Clone, Debug)]
pub struct Dense1D {
    pub n: usize,
    /// Per row: first column and the weights from there on.
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl Dense1D {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let (start, ref w) = self.rows[i];
        if j < start || j >= start + w.len() {
            0.0
        } else {
            w[j - start]
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.rows
            .par_iter()
            .map(|(start, w)| w.iter().zip(&v[*start..]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub enum TransitionOperator {
    Toeplitz1D(Toeplitz1D),
    Dense1D(Dense1D),
    Kernel2D(Kernel2D),
}

impl TransitionOperator {
    /// Applies the operator to values laid out variance-major (`q * N + j`).
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            TransitionOperator::Toeplitz1D(t) => t.apply(v),
            TransitionOperator::Dense1D(d) => d.apply(v),
            TransitionOperator::Kernel2D(k) => k.apply(v),
        }
    }
}

/// Number of standard deviations beyond which sampled density weights are
/// treated as zero in banded rows.
const BAND_SDS: f64 = 14.0;

/// `dy * G(x_i, y_j)` for the closed-form models. Unshifted steps are
/// Toeplitz; a cash dividend `d > 0` conditions row `i` on
/// `log(e^{y_i} - d)`.
pub fn build_transition_1d(
    model: &ModelSpec,
    env: &MarketEnv,
    grid: &LatticeGrid,
    tau: f64,
    dividend: f64,
) -> Result<TransitionOperator> {
    let dens = TransitionDensity::new(model, env, tau)?;
    let n = grid.n;
    if dividend == 0.0 {
        let kernel = (0..2 * n - 1)
            .map(|idx| {
                let k = idx as f64 - (n as f64 - 1.0);
                grid.dy * dens.eval_offset(k * grid.dy)
            })
            .collect();
        return Ok(TransitionOperator::Toeplitz1D(Toeplitz1D::from_kernel(n, kernel)));
    }
    if dividend < 0.0 {
        return Err(Error::domain("cash dividend must be non-negative"));
    }
    let xs = grid.shifted_nodes(dividend)?;
    let (mean, sd) = dens.spread();
    let rows = xs
        .par_iter()
        .map(|&x| {
            let lo = x + mean - BAND_SDS * sd;
            let hi = x + mean + BAND_SDS * sd;
            let start = (((lo - grid.y_lo) / grid.dy).floor().max(0.0) as usize).min(n);
            let end = (((hi - grid.y_lo) / grid.dy).ceil().max(0.0) as usize).min(n);
            let w = (start..end)
                .map(|j| grid.dy * dens.eval(x, grid.node(j)))
                .collect();
            (start, w)
        })
        .collect();
    Ok(TransitionOperator::Dense1D(Dense1D { n, rows }))
}

/// Which summation realizes the price-axis inversion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelPath {
    Fft,
    Direct,
}

/// Bivariate transition weights `K_pq(k)` between node `(y_i, w_p)` and
/// cell `(y_{i+k}, w_q)`.
#[derive(Clone, Debug)]
pub struct Kernel2D {
    pub n: usize,
    pub w: usize,
    /// Index `(p * w + q) * (2n - 1) + k + n - 1`.
    pub entries: Vec<f64>,
    /// Mass removed by clipping negative weights, per conditioning variance.
    pub clipped: Vec<f64>,
    conv: Option<(ToeplitzConv, Vec<Vec<C64>>)>,
}

impl Kernel2D {
    pub fn entry(&self, p: usize, q: usize, k: isize) -> f64 {
        self.entries[(p * self.w + q) * (2 * self.n - 1) + (k + self.n as isize - 1) as usize]
    }

    fn offsets(&self) -> usize {
        2 * self.n - 1
    }

    /// Mass of the interior row at the middle price node for each `p`.
    pub fn row_masses(&self) -> Vec<f64> {
        let n = self.n as isize;
        let i = n / 2;
        (0..self.w)
            .map(|p| {
                (0..self.w)
                    .map(|q| (-i..n - i).map(|k| self.entry(p, q, k)).sum::<f64>())
                    .sum()
            })
            .collect()
    }

    /// Largest negative weight, zero if none.
    pub fn min_entry(&self) -> f64 {
        self.entries.iter().cloned().fold(0.0, f64::min)
    }

    /// Clips negative weights to zero, failing when a row loses more than
    /// `ring_tol` of its mass.
    pub fn clip(&mut self, ring_tol: f64) -> Result<()> {
        let m = self.offsets();
        let masses = self.row_masses();
        for p in 0..self.w {
            let mut lost = 0.0;
            for q in 0..self.w {
                for e in &mut self.entries[(p * self.w + q) * m..(p * self.w + q + 1) * m] {
                    if *e < 0.0 {
                        lost -= *e;
                        *e = 0.0;
                    }
                }
            }
            self.clipped[p] = lost;
            let rel = lost / masses[p].abs().max(f64::MIN_POSITIVE);
            if rel > ring_tol {
                return Err(Error::Ringing {
                    clipped: rel,
                    limit: ring_tol,
                });
            }
        }
        let total: f64 = self.clipped.iter().sum();
        if total > 0.0 {
            log::debug!("clipped {total:e} of negative kernel mass");
        }
        self.conv = None;
        Ok(())
    }

    /// Prepares the FFT convolution spectra.
    pub fn prepare(&mut self) {
        if self.conv.is_some() {
            return;
        }
        let conv = ToeplitzConv::new(self.n);
        let m = self.offsets();
        let hats = (0..self.w * self.w)
            .into_par_iter()
            .map(|pq| conv.kernel_hat(&self.entries[pq * m..(pq + 1) * m]))
            .collect();
        self.conv = Some((conv, hats));
    }

    /// `c_{i,p} = sum_{j,q} K_pq(j - i) v_{j,q}`, variance-major layout.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (n, w) = (self.n, self.w);
        match &self.conv {
            Some((conv, hats)) => {
                let vh: Vec<Vec<C64>> = (0..w)
                    .into_par_iter()
                    .map(|q| conv.values_hat(&v[q * n..(q + 1) * n]))
                    .collect();
                let outs: Vec<Vec<f64>> = (0..w)
                    .into_par_iter()
                    .map(|p| {
                        let mut acc = vec![C64::new(0.0, 0.0); vh[0].len()];
                        for q in 0..w {
                            for ((a, k), x) in acc.iter_mut().zip(&hats[p * w + q]).zip(&vh[q]) {
                                *a += k * x;
                            }
                        }
                        conv.finish(acc)
                    })
                    .collect();
                outs.concat()
            }
            None => {
                let mut out = vec![0.0; n * w];
                for p in 0..w {
                    for i in 0..n {
                        let mut s = 0.0;
                        for q in 0..w {
                            for j in 0..n {
                                s += self.entry(p, q, j as isize - i as isize) * v[q * n + j];
                            }
                        }
                        out[p * n + i] = s;
                    }
                }
                out
            }
        }
    }

    /// Serializes as a header of dimensions followed by row-major
    /// little-endian doubles.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(b"RPK2")?;
        for d in [self.w as u64, self.w as u64, self.offsets() as u64] {
            out.write_all(&d.to_le_bytes())?;
        }
        for e in &self.entries {
            out.write_all(&e.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"RPK2" {
            return Err(Error::Schema("not an operator cache file".into()));
        }
        let mut dims = [0u64; 3];
        for d in &mut dims {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            *d = u64::from_le_bytes(b);
        }
        if dims[0] != dims[1] || dims[2] % 2 == 0 {
            return Err(Error::Schema(format!("inconsistent operator dimensions {dims:?}")));
        }
        let (w, m) = (dims[0] as usize, dims[2] as usize);
        let mut entries = Vec::with_capacity(w * w * m);
        let mut b = [0u8; 8];
        for _ in 0..w * w * m {
            input.read_exact(&mut b)?;
            entries.push(f64::from_le_bytes(b));
        }
        Ok(Kernel2D {
            n: (m + 1) / 2,
            w,
            entries,
            clipped: vec![0.0; w],
            conv: None,
        })
    }
}

/// `e^{A_rz + B_rz w_p}` for all `p`, using the geometric recurrence in `p`.
fn affine_powers(a: C64, b: C64, var: &VarianceGrid) -> impl Iterator<Item = C64> {
    let mut cur = (a + b * var.node(0)).exp();
    let step = (b * var.dw).exp();
    (0..var.w).map(move |_| {
        let out = cur;
        cur *= step;
        out
    })
}

/// Builds `K_pq(k)` from the spectral factors.
pub fn build_gamma2(
    grid: &LatticeGrid,
    fgrid: &FourierGrid,
    factors: &SpectralFactors,
    path: KernelPath,
) -> Result<Kernel2D> {
    let var = grid
        .var
        .ok_or_else(|| Error::domain("a two-dimensional operator needs a variance grid"))?;
    fgrid.check(grid)?;
    let (n, w, rn, zn) = (grid.n, var.w, fgrid.r, fgrid.z);
    if factors.r != rn || factors.z != zn {
        return Err(Error::domain("spectral factors do not match the Fourier grid"));
    }
    let norm = fgrid.kappa_weight(var.dw) / rn as f64;
    let var_basis = &factors.var_basis;
    // Phi_pq(r) = s_r sum_z e^{A_rz + B_rz w_p} phi_q^(-kappa_z),
    // stored as (p * w + q) * rn + r
    let rows: Vec<Vec<C64>> = (0..rn)
        .into_par_iter()
        .map(|r| {
            let (zlo, zhi) = factors.zrange[r];
            let mut phi = vec![C64::new(0.0, 0.0); w * w];
            let mut e = vec![C64::new(0.0, 0.0); w];
            for z in zlo..zhi {
                for (slot, v) in e.iter_mut().zip(affine_powers(factors.a[r * zn + z], factors.b[r * zn + z], &var)) {
                    *slot = v * factors.s[r];
                }
                for q in 0..w {
                    let bz = var_basis[z * w + q];
                    for p in 0..w {
                        phi[p * w + q] += e[p] * bz;
                    }
                }
            }
            phi
        })
        .collect();
    let phi = |pq: usize, r: usize| rows[r][pq];
    let m = 2 * n - 1;
    let blocks: Vec<Vec<f64>> = match path {
        KernelPath::Fft => {
            let fft = FftPlanner::new().plan_fft_forward(rn);
            (0..w * w)
                .into_par_iter()
                .map(|pq| {
                    let mut buf: Vec<C64> = (0..rn).map(|r| phi(pq, r)).collect();
                    fft.process(&mut buf);
                    (0..m)
                        .map(|idx| {
                            let k = idx as isize - (n as isize - 1);
                            let sign = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                            sign * buf[k.rem_euclid(rn as isize) as usize].re * norm
                        })
                        .collect()
                })
                .collect()
        }
        KernelPath::Direct => (0..w * w)
            .into_par_iter()
            .map(|pq| {
                (0..m)
                    .map(|idx| {
                        let k = idx as f64 - (n as f64 - 1.0);
                        let acc: C64 = (0..rn)
                            .map(|r| C64::from_polar(1.0, -fgrid.lambda(r) * k * grid.dy) * phi(pq, r))
                            .sum();
                        acc.re * norm
                    })
                    .collect()
            })
            .collect(),
    };
    Ok(Kernel2D {
        n,
        w,
        entries: blocks.concat(),
        clipped: vec![0.0; w],
        conv: None,
    })
}

/// Price-marginal weights: `K_p(k)` from node `(y_i, w_p)` to price cell
/// `i + k`, whatever the terminal variance.
#[derive(Clone, Debug)]
pub struct Gamma1 {
    pub n: usize,
    pub w: usize,
    /// Index `p * (2n - 1) + k + n - 1`.
    pub entries: Vec<f64>,
    conv: ToeplitzConv,
    hats: Vec<Vec<C64>>,
}

impl Gamma1 {
    fn from_entries(n: usize, w: usize, entries: Vec<f64>) -> Self {
        let conv = ToeplitzConv::new(n);
        let m = 2 * n - 1;
        let hats = (0..w)
            .map(|p| conv.kernel_hat(&entries[p * m..(p + 1) * m]))
            .collect();
        Gamma1 {
            n,
            w,
            entries,
            conv,
            hats,
        }
    }

    pub fn entry(&self, p: usize, k: isize) -> f64 {
        self.entries[p * (2 * self.n - 1) + (k + self.n as isize - 1) as usize]
    }

    /// Continuation values `c_{i,p}` for a payoff that depends on price only.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let vh = self.conv.values_hat(v);
        (0..self.w)
            .flat_map(|p| {
                let buf = vh.iter().zip(&self.hats[p]).map(|(a, b)| a * b).collect();
                self.conv.finish(buf)
            })
            .collect()
    }
}

/// Marginal weights by summing the bivariate kernel over terminal variance.
pub fn build_gamma1_sum(kernel: &Kernel2D) -> Gamma1 {
    let m = 2 * kernel.n - 1;
    let mut entries = vec![0.0; kernel.w * m];
    for p in 0..kernel.w {
        for q in 0..kernel.w {
            let block = &kernel.entries[(p * kernel.w + q) * m..(p * kernel.w + q + 1) * m];
            for (e, b) in entries[p * m..(p + 1) * m].iter_mut().zip(block) {
                *e += b;
            }
        }
    }
    Gamma1::from_entries(kernel.n, kernel.w, entries)
}

/// Marginal weights from the characteristic function at `kappa = 0`.
pub fn build_gamma1_marginal(
    grid: &LatticeGrid,
    fgrid: &FourierGrid,
    factors: &SpectralFactors,
) -> Result<Gamma1> {
    let var = grid
        .var
        .ok_or_else(|| Error::domain("a two-dimensional operator needs a variance grid"))?;
    let (n, rn) = (grid.n, fgrid.r);
    let fft = FftPlanner::new().plan_fft_forward(rn);
    let m = 2 * n - 1;
    let pow: Vec<Vec<C64>> = (0..rn)
        .map(|r| affine_powers(factors.a0[r], factors.b0[r], &var).collect())
        .collect();
    let entries: Vec<f64> = (0..var.w)
        .into_par_iter()
        .flat_map_iter(|p| {
            let mut buf: Vec<C64> = (0..rn).map(|r| pow[r][p] * factors.s[r]).collect();
            fft.process(&mut buf);
            (0..m)
                .map(|idx| {
                    let k = idx as isize - (n as isize - 1);
                    let sign = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                    sign * buf[k.rem_euclid(rn as isize) as usize].re / rn as f64
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Gamma1::from_entries(n, var.w, entries))
}

/// Values on a 2-D grid transformed to the Fourier grid, ready to be
/// contracted against the characteristic function at arbitrary conditioning
/// points. This realizes the dividend-shifted rows without materializing
/// them.
#[derive(Clone, Debug)]
pub struct SpectralValues {
    /// `sum_{j,q} e^{-i lambda_r y_j} phi_q^(-kappa_z) v_{j,q}`, row-major in `r`;
    /// a single column when the values carry no variance dependence.
    pub hat: Vec<C64>,
    pub marginal: bool,
}

impl SpectralValues {
    /// Transforms variance-major values `v[q * N + j]`.
    pub fn new(grid: &LatticeGrid, fgrid: &FourierGrid, v: &[f64]) -> Result<Self> {
        let var = grid
            .var
            .ok_or_else(|| Error::domain("a two-dimensional operator needs a variance grid"))?;
        let (n, rn, zn) = (grid.n, fgrid.r, fgrid.z);
        // U(j, z) = sum_q phi_q^(-kappa_z) v_{j,q}
        let basis: Vec<C64> = (0..zn)
            .flat_map(|z| (0..var.w).map(move |q| var.transform(q, fgrid.kappa(z))))
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(rn);
        let cols: Vec<Vec<C64>> = (0..zn)
            .into_par_iter()
            .map(|z| {
                let mut buf = vec![C64::new(0.0, 0.0); rn];
                for j in 0..n {
                    let u: C64 = (0..var.w).map(|q| basis[z * var.w + q] * v[q * n + j]).sum();
                    buf[j] = if j % 2 == 0 { u } else { -u };
                }
                fft.process(&mut buf);
                for (r, x) in buf.iter_mut().enumerate() {
                    *x *= C64::from_polar(1.0, -fgrid.lambda(r) * grid.node(0));
                }
                buf
            })
            .collect();
        let mut hat = vec![C64::new(0.0, 0.0); rn * zn];
        for (z, col) in cols.iter().enumerate() {
            for r in 0..rn {
                hat[r * zn + z] = col[r];
            }
        }
        Ok(SpectralValues {
            hat,
            marginal: false,
        })
    }

    /// Transforms a price-only vector for contraction with the marginal.
    pub fn new_marginal(grid: &LatticeGrid, fgrid: &FourierGrid, v: &[f64]) -> Self {
        let rn = fgrid.r;
        let fft = FftPlanner::new().plan_fft_forward(rn);
        let mut buf = vec![C64::new(0.0, 0.0); rn];
        for (j, &x) in v.iter().enumerate() {
            buf[j] = C64::new(if j % 2 == 0 { x } else { -x }, 0.0);
        }
        fft.process(&mut buf);
        for (r, x) in buf.iter_mut().enumerate() {
            *x *= C64::from_polar(1.0, -fgrid.lambda(r) * grid.node(0));
        }
        SpectralValues {
            hat: buf,
            marginal: true,
        }
    }

    /// Price-frequency profile `Phi(r)` for conditioning variance `xi`.
    fn profile(&self, factors: &SpectralFactors, xi: f64) -> Vec<C64> {
        let kw = factors.kappa_weight;
        let (rn, zn) = (factors.r, factors.z);
        if self.marginal {
            let norm = 1.0 / rn as f64;
            (0..rn)
                .map(|r| (factors.a0[r] + factors.b0[r] * xi).exp() * factors.s[r] * self.hat[r] * norm)
                .collect()
        } else {
            let norm = kw / rn as f64;
            (0..rn)
                .map(|r| {
                    let mut acc = C64::new(0.0, 0.0);
                    let (zlo, zhi) = factors.zrange[r];
                    for z in zlo..zhi {
                        let i = r * zn + z;
                        acc += (factors.a[i] + factors.b[i] * xi).exp() * self.hat[i];
                    }
                    acc * factors.s[r] * norm
                })
                .collect()
        }
    }

    /// Continuation values at conditioning points `(x_k, xi)` sharing one
    /// variance.
    pub fn contract(
        &self,
        fgrid: &FourierGrid,
        factors: &SpectralFactors,
        xs: &[f64],
        xi: f64,
    ) -> Vec<f64> {
        let phi = self.profile(factors, xi);
        let peak = phi.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let cut = peak * 1e-17;
        let lo = phi.iter().position(|c| c.norm() > cut).unwrap_or(0);
        let hi = phi.iter().rposition(|c| c.norm() > cut).map_or(0, |i| i + 1);
        xs.par_iter()
            .map(|&x| {
                let mut e = C64::from_polar(1.0, fgrid.lambda(lo) * x);
                let step = C64::from_polar(1.0, fgrid.dlambda * x);
                let mut acc = 0.0;
                for c in &phi[lo..hi] {
                    acc += (e * c).re;
                    e *= step;
                }
                acc
            })
            .collect()
    }
}
