//! Backward induction over monitoring dates.
//!
//! Values are propagated from maturity to the valuation date by applying
//! transition operators; on exercise dates they are floored at the exercise
//! value, and a step that starts on an ex-dividend date conditions on the
//! post-dividend price `S - d`.

use crate::error::{Error, Result};
use crate::lattice::{
    build_gamma1_marginal, build_gamma2, build_grid, build_transition_1d, FourierGrid, Gamma1,
    Kernel2D, KernelPath, LatticeGrid, SpectralFactors, SpectralValues, TransitionOperator, VarBasis,
    DEFAULT_JW, DEFAULT_KAPPA_EXTENT, DEFAULT_RING_TOL, DEFAULT_VAR_BOUNDS, DEFAULT_WIDTH_MULT,
};
use crate::math::linear_fit;
use crate::model::{MarketEnv, ModelSpec, TransitionDensity};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

/// Dates closer than this are merged.
const DATE_TOL: f64 = 1e-10;
/// Cells kept between the valuation spot and the grid edge.
const INTERIOR_MARGIN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payoff {
    Call { strike: f64 },
    Put { strike: f64 },
    DigitalCall { strike: f64 },
    DownAndOutDigitalCall { strike: f64, barrier: f64 },
}

impl Payoff {
    pub fn value(&self, s: f64) -> f64 {
        match *self {
            Payoff::Call { strike } => (s - strike).max(0.0),
            Payoff::Put { strike } => (strike - s).max(0.0),
            Payoff::DigitalCall { strike } | Payoff::DownAndOutDigitalCall { strike, .. } => {
                if s > strike {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn strike(&self) -> f64 {
        match *self {
            Payoff::Call { strike }
            | Payoff::Put { strike }
            | Payoff::DigitalCall { strike }
            | Payoff::DownAndOutDigitalCall { strike, .. } => strike,
        }
    }

    pub fn barrier(&self) -> Option<f64> {
        match *self {
            Payoff::DownAndOutDigitalCall { barrier, .. } => Some(barrier),
            _ => None,
        }
    }

    pub fn with_strike(&self, strike: f64) -> Payoff {
        match *self {
            Payoff::Call { .. } => Payoff::Call { strike },
            Payoff::Put { .. } => Payoff::Put { strike },
            Payoff::DigitalCall { .. } => Payoff::DigitalCall { strike },
            Payoff::DownAndOutDigitalCall { barrier, .. } => {
                Payoff::DownAndOutDigitalCall { strike, barrier }
            }
        }
    }
}

fn default_american_dates() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExerciseStyle {
    European,
    /// Exercise on the listed dates; the last must be the maturity.
    Bermudan { dates: Vec<f64> },
    /// Exercise just before each ex-dividend date and at maturity.
    AmericanCallOnDivDates,
    /// Exercise now, on `n_dates` equally spaced dates and before every
    /// ex-dividend date.
    American {
        #[serde(default = "default_american_dates")]
        n_dates: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    pub payoff: Payoff,
    pub maturity: f64,
    pub style: ExerciseStyle,
}

impl Contract {
    pub fn new(payoff: Payoff, maturity: f64, style: ExerciseStyle) -> Self {
        Contract {
            payoff,
            maturity,
            style,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(Error::domain(format!("maturity must be positive, got {}", self.maturity)));
        }
        let k = self.payoff.strike();
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::domain(format!("strike must be positive, got {k}")));
        }
        if let Some(b) = self.payoff.barrier() {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::domain(format!("barrier must be positive, got {b}")));
            }
        }
        match &self.style {
            ExerciseStyle::Bermudan { dates } => {
                if dates.is_empty() {
                    return Err(Error::domain("Bermudan contract needs exercise dates"));
                }
                if dates.windows(2).any(|w| w[1] <= w[0]) || dates[0] < 0.0 {
                    return Err(Error::domain("exercise dates must be non-negative and increasing"));
                }
                if (dates[dates.len() - 1] - self.maturity).abs() > DATE_TOL {
                    return Err(Error::domain("last exercise date must equal the maturity"));
                }
            }
            ExerciseStyle::American { n_dates } if *n_dates == 0 => {
                return Err(Error::domain("American approximation needs at least one date"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Whether the holder may exercise at all before maturity.
    pub fn is_early_exercisable(&self) -> bool {
        !matches!(self.style, ExerciseStyle::European)
    }
}

/// Monitoring dates `0 = t_0 < t_1 < ... < t_M = T` with their events.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub times: Vec<f64>,
    pub exercise: Vec<bool>,
    /// Cash dividend paid at each date (zero for none).
    pub dividend: Vec<f64>,
}

impl Schedule {
    pub fn build(contract: &Contract, env: &MarketEnv) -> Result<Schedule> {
        contract.validate()?;
        env.validate()?;
        let t_end = contract.maturity;
        // dividends at or after maturity do not affect a payoff taken
        // before the payment
        let divs: Vec<(f64, f64)> = env
            .cash_dividends()
            .iter()
            .filter(|d| d.time < t_end - DATE_TOL && d.amount > 0.0)
            .map(|d| (d.time, d.amount))
            .collect();
        let mut ex: Vec<f64> = match &contract.style {
            ExerciseStyle::European => vec![],
            ExerciseStyle::Bermudan { dates } => dates.clone(),
            ExerciseStyle::AmericanCallOnDivDates => divs.iter().map(|d| d.0).collect(),
            ExerciseStyle::American { n_dates } => {
                let mut v: Vec<f64> = (0..=*n_dates)
                    .map(|k| t_end * k as f64 / *n_dates as f64)
                    .collect();
                v.extend(divs.iter().map(|d| d.0));
                v
            }
        };
        ex.push(t_end);
        let mut times: Vec<f64> = ex.iter().cloned().chain(divs.iter().map(|d| d.0)).collect();
        times.push(0.0);
        times.sort_by(f64::total_cmp);
        times.dedup_by(|a, b| (*a - *b).abs() <= DATE_TOL);
        let exercise = times
            .iter()
            .map(|t| ex.iter().any(|e| (e - t).abs() <= DATE_TOL))
            .collect();
        let dividend = times
            .iter()
            .map(|t| {
                divs.iter()
                    .filter(|d| (d.0 - t).abs() <= DATE_TOL)
                    .map(|d| d.1)
                    .sum()
            })
            .collect();
        Ok(Schedule {
            times,
            exercise,
            dividend,
        })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn tau(&self, l: usize) -> f64 {
        self.times[l + 1] - self.times[l]
    }

    pub fn max_dividend(&self) -> f64 {
        self.dividend.iter().cloned().fold(0.0, f64::max)
    }
}

/// Lowest grid node over largest cash dividend when the grid is narrowed.
pub const DIVIDEND_CLEARANCE: f64 = 1.5;

/// How the price at an off-node spot is read from the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Apply the first step's kernel conditioned exactly at the spot.
    Exact,
    /// Linear interpolation in price between bracketing nodes of the
    /// valuation-date surface.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatticeConfig {
    /// Price-axis resolution level `J`.
    pub level: u32,
    pub width_mult: f64,
    /// Overrides the model's matched volatility for sizing the grid.
    pub sigma_ref: Option<f64>,
    pub var_level: u32,
    pub var_bounds: (f64, f64),
    pub var_basis: VarBasis,
    pub oversample: usize,
    pub kappa_extent: usize,
    pub ring_tol: f64,
    pub readout: Readout,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig {
            level: 10,
            width_mult: DEFAULT_WIDTH_MULT,
            sigma_ref: None,
            var_level: DEFAULT_JW,
            var_bounds: DEFAULT_VAR_BOUNDS,
            var_basis: VarBasis::default(),
            oversample: 4,
            kappa_extent: DEFAULT_KAPPA_EXTENT,
            ring_tol: DEFAULT_RING_TOL,
            readout: Readout::Exact,
        }
    }
}

impl LatticeConfig {
    pub fn with_level(&self, level: u32) -> Self {
        LatticeConfig {
            level,
            ..self.clone()
        }
    }

    /// Narrows the grid, if needed, so its lowest node stays
    /// `DIVIDEND_CLEARANCE` times above the largest cash dividend.
    pub fn clear_of_dividend(&self, contract: &Contract, model: &ModelSpec, max_dividend: f64) -> Self {
        if !(max_dividend > 0.0) {
            return self.clone();
        }
        let sigma = self
            .sigma_ref
            .unwrap_or_else(|| model.reference_vol(contract.maturity));
        let sd = sigma * contract.maturity.sqrt();
        let cap = (contract.payoff.strike() / (DIVIDEND_CLEARANCE * max_dividend)).ln() / sd;
        if cap >= self.width_mult || !(cap > 0.0) {
            return self.clone();
        }
        log::debug!("grid width narrowed from {} to {cap} sd to clear a dividend of {max_dividend}", self.width_mult);
        LatticeConfig {
            width_mult: cap,
            ..self.clone()
        }
    }

    /// Grid for `contract` under `model`, sized by the model's matched
    /// volatility over the contract's life.
    pub fn grid(&self, contract: &Contract, model: &ModelSpec) -> Result<LatticeGrid> {
        let sigma = self
            .sigma_ref
            .unwrap_or_else(|| model.reference_vol(contract.maturity));
        let g = build_grid(
            contract.payoff.strike(),
            sigma,
            contract.maturity,
            self.level,
            self.width_mult,
        )?;
        if model.is_stochastic_vol() {
            let mut g = g.with_variance(self.var_level, self.var_bounds.0, self.var_bounds.1)?;
            g.var = g.var.map(|v| v.with_basis(self.var_basis));
            Ok(g)
        } else {
            Ok(g)
        }
    }
}

/// Option values on the grid at one monitoring date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueSurface {
    pub t: f64,
    pub n: usize,
    /// Number of variance nodes, 1 for price-only surfaces.
    pub w: usize,
    /// Variance-major values, index `q * n + j`.
    pub values: Vec<f64>,
    pub exercised: Vec<bool>,
}

impl ValueSurface {
    pub fn at(&self, j: usize, q: usize) -> f64 {
        self.values[q * self.n + j]
    }

    /// Price-axis slice at variance node `q`.
    pub fn row(&self, q: usize) -> &[f64] {
        &self.values[q * self.n..(q + 1) * self.n]
    }
}

/// Payoff sampled at the price nodes.
pub fn project_payoff(contract: &Contract, grid: &LatticeGrid, t: f64) -> Result<ValueSurface> {
    grid.check_strike(contract.payoff.strike())?;
    let row: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|y| {
            let s = y.exp();
            match contract.payoff.barrier() {
                Some(b) if s <= b => 0.0,
                _ => contract.payoff.value(s),
            }
        })
        .collect();
    let w = grid.w();
    let values: Vec<f64> = (0..w).flat_map(|_| row.iter().cloned()).collect();
    Ok(ValueSurface {
        t,
        n: grid.n,
        w,
        exercised: vec![true; values.len()],
        values,
    })
}

/// Exercise value and knock-out at a monitoring date.
fn exercise_step(
    contract: &Contract,
    grid: &LatticeGrid,
    cont: Vec<f64>,
    exercisable: bool,
) -> (Vec<f64>, Vec<bool>) {
    let n = grid.n;
    let barrier = contract.payoff.barrier();
    let intrinsic: Vec<(f64, bool)> = grid
        .nodes()
        .iter()
        .map(|y| {
            let s = y.exp();
            (contract.payoff.value(s), barrier.is_some_and(|b| s <= b))
        })
        .collect();
    let mut exercised = vec![false; cont.len()];
    let mut values = cont;
    for (idx, v) in values.iter_mut().enumerate() {
        let (h, knocked) = intrinsic[idx % n];
        // transforms leave round-off of either sign in the far tails
        *v = v.max(0.0);
        if knocked {
            *v = 0.0;
        } else if exercisable && h >= *v && h > 0.0 {
            *v = h;
            exercised[idx] = true;
        }
    }
    (values, exercised)
}

fn tau_key(tau: f64) -> i64 {
    (tau * 1e10).round() as i64
}

/// Continuation from the valuation date, kept so that the price can be read
/// at any spot (and initial variance).
#[derive(Clone, Debug)]
enum FirstStep {
    Closed {
        density: TransitionDensity,
        values: Vec<f64>,
    },
    Spectral {
        fgrid: FourierGrid,
        factors: Arc<SpectralFactors>,
        values: SpectralValues,
    },
}

/// A solved pricing problem: the valuation-date surface and what is needed
/// to read values off the grid.
#[derive(Clone, Debug)]
pub struct Solution {
    pub grid: LatticeGrid,
    pub contract: Contract,
    pub schedule: Schedule,
    /// Values on the grid at the valuation date.
    pub surface: ValueSurface,
    /// Values at the first monitoring date after the valuation date.
    pub next: ValueSurface,
    first: FirstStep,
    readout: Readout,
}

impl Solution {
    /// Value of continuing at spot `s` (before any exercise decision at the
    /// valuation date), with `xi` the variance for stochastic-volatility
    /// models.
    pub fn continuation_at(&self, s: f64, xi: Option<f64>) -> Result<f64> {
        let d = self.schedule.dividend[0];
        if s - d <= 0.0 {
            return Err(Error::DividendTooLarge {
                dividend: d,
                price: s,
            });
        }
        let x = (s - d).ln();
        let grid = &self.grid;
        Ok(match &self.first {
            FirstStep::Closed { density, values } => values
                .iter()
                .enumerate()
                .map(|(j, v)| grid.dy * density.eval(x, grid.node(j)) * v)
                .sum(),
            FirstStep::Spectral {
                fgrid,
                factors,
                values,
            } => {
                let xi = xi.ok_or_else(|| Error::domain("variance state required"))?;
                values.contract(fgrid, factors, &[x], xi)[0]
            }
        })
    }

    /// Option value at spot `s` on the valuation date.
    pub fn value_at(&self, s: f64, xi: Option<f64>) -> Result<f64> {
        self.grid.check_interior(s, INTERIOR_MARGIN)?;
        if let Some(b) = self.contract.payoff.barrier() {
            if s <= b {
                return Ok(0.0);
            }
        }
        let v = match self.readout {
            Readout::Exact => self.continuation_at(s, xi)?,
            Readout::Linear => return self.interpolate(s, xi),
        };
        Ok(if self.schedule.exercise[0] {
            v.max(self.contract.payoff.value(s))
        } else {
            v
        })
    }

    /// Linear interpolation in price on the valuation-date surface; in the
    /// variance direction the nearest node is used.
    pub fn interpolate(&self, s: f64, xi: Option<f64>) -> Result<f64> {
        self.grid.check_interior(s, INTERIOR_MARGIN)?;
        let g = &self.grid;
        let q = match (g.var, xi) {
            (Some(v), Some(xi)) => (((xi - v.lo) / v.dw - 0.5).round().max(0.0) as usize).min(v.w - 1),
            (Some(_), None) => return Err(Error::domain("variance state required")),
            _ => 0,
        };
        let pos = (s.ln() - g.y_lo) / g.dy - 0.5;
        let j = (pos.floor() as usize).min(g.n - 2);
        let (s0, s1) = (g.node(j).exp(), g.node(j + 1).exp());
        let row = self.surface.row(q);
        let t = (s - s0) / (s1 - s0);
        Ok(row[j] * (1.0 - t) + row[j + 1] * t)
    }

    /// Delta and gamma by central differences of the valuation-date value
    /// in price, with a step of one grid cell.
    pub fn greeks(&self, s: f64, xi: Option<f64>) -> Result<(f64, f64)> {
        let h = s * (self.grid.dy.exp() - 1.0);
        let up = self.value_at(s + h, xi)?;
        let mid = self.value_at(s, xi)?;
        let dn = self.value_at(s - h, xi)?;
        Ok(((up - dn) / (2.0 * h), (up - 2.0 * mid + dn) / (h * h)))
    }
}

/// Closed-form-density models on a price grid.
pub fn price_bermudan_1d(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    grid: &LatticeGrid,
    readout: Readout,
) -> Result<Solution> {
    if model.is_stochastic_vol() {
        return Err(Error::Unsupported(format!(
            "{} needs the two-dimensional lattice",
            model.name()
        )));
    }
    let schedule = Schedule::build(contract, env)?;
    grid.check_dividend(schedule.max_dividend())?;
    let mut v = project_payoff(contract, grid, contract.maturity)?;
    let mut ops: HashMap<(i64, u64), TransitionOperator> = HashMap::new();
    let m = schedule.steps();
    for l in (1..m).rev() {
        let tau = schedule.tau(l);
        let d = schedule.dividend[l];
        let key = (tau_key(tau), d.to_bits());
        if !ops.contains_key(&key) {
            ops.insert(key, build_transition_1d(model, env, grid, tau, d)?);
        }
        let cont = ops[&key].apply(&v.values);
        let (values, exercised) = exercise_step(contract, grid, cont, schedule.exercise[l]);
        v = ValueSurface {
            t: schedule.times[l],
            n: grid.n,
            w: 1,
            values,
            exercised,
        };
    }
    let tau0 = schedule.tau(0);
    let d0 = schedule.dividend[0];
    let op0 = build_transition_1d(model, env, grid, tau0, d0)?;
    let cont0 = op0.apply(&v.values);
    let (values0, exercised0) = exercise_step(contract, grid, cont0, schedule.exercise[0]);
    let density = TransitionDensity::new(model, env, tau0)?;
    Ok(Solution {
        grid: grid.clone(),
        contract: contract.clone(),
        surface: ValueSurface {
            t: 0.0,
            n: grid.n,
            w: 1,
            values: values0,
            exercised: exercised0,
        },
        next: v.clone(),
        first: FirstStep::Closed {
            density,
            values: v.values,
        },
        schedule,
        readout,
    })
}

/// Per-step-length operators for the two-dimensional recursion.
struct StepOperators {
    factors: Arc<SpectralFactors>,
    kernel: Option<Kernel2D>,
    gamma1: Option<Gamma1>,
}

/// Stochastic-volatility models on a price-variance grid.
pub fn price_bermudan_2d(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    grid: &LatticeGrid,
    fgrid: &FourierGrid,
    ring_tol: f64,
    readout: Readout,
) -> Result<Solution> {
    let var = grid
        .var
        .ok_or_else(|| Error::domain("stochastic volatility needs a variance grid"))?;
    if !model.is_stochastic_vol() {
        return Err(Error::Unsupported(format!("{} has no variance state", model.name())));
    }
    fgrid.check(grid)?;
    let schedule = Schedule::build(contract, env)?;
    grid.check_dividend(schedule.max_dividend())?;
    let (n, w) = (grid.n, var.w);
    let payoff = project_payoff(contract, grid, contract.maturity)?;
    let mut cache: HashMap<i64, StepOperators> = HashMap::new();
    let ops = |cache: &mut HashMap<i64, StepOperators>, tau: f64, joint: bool| -> Result<i64> {
        let key = tau_key(tau);
        let stale = cache.get(&key).is_none_or(|o| joint && !o.factors.is_joint());
        if stale {
            let factors = if joint {
                SpectralFactors::new(model, env, grid, fgrid, tau)?
            } else {
                SpectralFactors::marginal(model, env, grid, fgrid, tau)?
            };
            let gamma1 = cache.remove(&key).and_then(|o| o.gamma1);
            cache.insert(
                key,
                StepOperators {
                    factors: Arc::new(factors),
                    kernel: None,
                    gamma1,
                },
            );
        }
        Ok(key)
    };
    let m = schedule.steps();
    // continuation into maturity depends on price only
    let marginal_step = |ops: &mut StepOperators, d: f64| -> Result<Vec<f64>> {
        let h = payoff.row(0);
        if d == 0.0 {
            if ops.gamma1.is_none() {
                ops.gamma1 = Some(build_gamma1_marginal(grid, fgrid, &ops.factors)?);
            }
            Ok(ops.gamma1.as_ref().unwrap().apply(h))
        } else {
            let xs = grid.shifted_nodes(d)?;
            let sv = SpectralValues::new_marginal(grid, fgrid, h);
            Ok((0..w)
                .flat_map(|p| sv.contract(fgrid, &ops.factors, &xs, var.node(p)))
                .collect())
        }
    };
    let full_step = |ops: &mut StepOperators, v: &[f64], d: f64| -> Result<Vec<f64>> {
        if d == 0.0 {
            if ops.kernel.is_none() {
                let mut k = build_gamma2(grid, fgrid, &ops.factors, KernelPath::Fft)?;
                k.clip(ring_tol)?;
                k.prepare();
                ops.kernel = Some(k);
            }
            Ok(ops.kernel.as_ref().unwrap().apply(v))
        } else {
            let xs = grid.shifted_nodes(d)?;
            let sv = SpectralValues::new(grid, fgrid, v)?;
            Ok((0..w)
                .flat_map(|p| sv.contract(fgrid, &ops.factors, &xs, var.node(p)))
                .collect())
        }
    };
    let mut v = payoff.clone();
    for l in (1..m).rev() {
        let tau = schedule.tau(l);
        let d = schedule.dividend[l];
        let key = ops(&mut cache, tau, l != m - 1)?;
        let o = cache.get_mut(&key).unwrap();
        let cont = if l == m - 1 {
            marginal_step(o, d)?
        } else {
            full_step(o, &v.values, d)?
        };
        let (values, exercised) = exercise_step(contract, grid, cont, schedule.exercise[l]);
        v = ValueSurface {
            t: schedule.times[l],
            n,
            w,
            values,
            exercised,
        };
    }
    let tau0 = schedule.tau(0);
    let d0 = schedule.dividend[0];
    let key = ops(&mut cache, tau0, m > 1)?;
    let o = cache.get_mut(&key).unwrap();
    let (cont0, spectral) = if m == 1 {
        let c = marginal_step(o, d0)?;
        (c, SpectralValues::new_marginal(grid, fgrid, payoff.row(0)))
    } else {
        let sv = SpectralValues::new(grid, fgrid, &v.values)?;
        let xs = grid.shifted_nodes(d0)?;
        let c = (0..w)
            .flat_map(|p| sv.contract(fgrid, &o.factors, &xs, var.node(p)))
            .collect();
        (c, sv)
    };
    let factors = o.factors.clone();
    let (values0, exercised0) = exercise_step(contract, grid, cont0, schedule.exercise[0]);
    Ok(Solution {
        grid: grid.clone(),
        contract: contract.clone(),
        surface: ValueSurface {
            t: 0.0,
            n,
            w,
            values: values0,
            exercised: exercised0,
        },
        next: v,
        first: FirstStep::Spectral {
            fgrid: *fgrid,
            factors,
            values: spectral,
        },
        schedule,
        readout,
    })
}

/// Builds the grid from `cfg` and solves with the lattice suited to the
/// model.
pub fn solve(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    cfg: &LatticeConfig,
) -> Result<Solution> {
    model.validate()?;
    let max_d = Schedule::build(contract, env)?.max_dividend();
    let grid = cfg.clear_of_dividend(contract, model, max_d).grid(contract, model)?;
    if model.is_stochastic_vol() {
        let fgrid = FourierGrid::with_extent(&grid, cfg.oversample, cfg.kappa_extent)?;
        price_bermudan_2d(contract, model, env, &grid, &fgrid, cfg.ring_tol, cfg.readout)
    } else {
        price_bermudan_1d(contract, model, env, &grid, cfg.readout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceRecord {
    pub contract: Contract,
    pub model: ModelSpec,
    pub env: MarketEnv,
    pub spot: f64,
    pub level: u32,
    pub grid_bounds: (f64, f64),
    pub price: f64,
    pub delta: f64,
    pub gamma: f64,
    pub wall_time_ms: f64,
}

/// Prices at `spot` (and the model's initial variance) with Greeks.
pub fn price(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    spot: f64,
    cfg: &LatticeConfig,
) -> Result<PriceRecord> {
    let start = Instant::now();
    let sol = solve(contract, model, env, cfg)?;
    let xi = model.initial_variance();
    let p = sol.value_at(spot, xi)?;
    let (delta, gamma) = sol.greeks(spot, xi)?;
    Ok(PriceRecord {
        contract: contract.clone(),
        model: *model,
        env: env.clone(),
        spot,
        level: cfg.level,
        grid_bounds: (sol.grid.y_lo.exp(), sol.grid.y_hi().exp()),
        price: p,
        delta,
        gamma,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Price at `spot` only.
pub fn price_value(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    spot: f64,
    cfg: &LatticeConfig,
) -> Result<f64> {
    solve(contract, model, env, cfg)?.value_at(spot, model.initial_variance())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub level: u32,
    pub price: f64,
    pub error: f64,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Reference price, computed two levels above the finest level studied.
    pub reference: f64,
    pub reference_level: u32,
    /// Least-squares fit of `log2 |error|` against the level.
    pub slope: f64,
    pub intercept: f64,
}

impl ConvergenceTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?)
            .map_err(|e| Error::Io(e.to_string()))
    }
}

/// Prices across resolution levels and fits the error decay rate.
pub fn convergence_study(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    spot: f64,
    levels: &[u32],
    cfg: &LatticeConfig,
) -> Result<ConvergenceTable> {
    if levels.len() < 4 || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("need at least four increasing resolution levels"));
    }
    let reference_level = levels[levels.len() - 1] + 2;
    let reference = price_value(contract, model, env, spot, &cfg.with_level(reference_level))?;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let start = Instant::now();
        let p = price_value(contract, model, env, spot, &cfg.with_level(level))?;
        rows.push(ConvergenceRow {
            level,
            price: p,
            error: p - reference,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.level as f64).collect();
    let ys: Vec<f64> = rows
        .iter()
        .map(|r| r.error.abs().max(f64::MIN_POSITIVE).log2())
        .collect();
    let (slope, intercept) = linear_fit(&xs, &ys);
    Ok(ConvergenceTable {
        rows,
        reference,
        reference_level,
        slope,
        intercept,
    })
}
