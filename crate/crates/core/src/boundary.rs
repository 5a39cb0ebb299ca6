//! Early-exercise boundaries of American calls and the early-exercise
//! premium decomposition.

use crate::error::{Error, Result};
use crate::math::norm_cdf;
use crate::model::{MarketEnv, ModelSpec};
use crate::pricer::{self, Contract, ExerciseStyle, LatticeConfig, Payoff, Solution, DIVIDEND_CLEARANCE};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Weekly monitoring dates per year used to approximate continuous
/// exercise.
pub const YIELD_DATES_PER_YEAR: f64 = 365.0 / 7.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    DiscreteDividend,
    Yield,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::DiscreteDividend => "discrete_dividend",
            Regime::Yield => "yield",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    /// Calendar date of the exercise decision.
    pub t: f64,
    pub ttm: f64,
    /// Critical price; `None` when exercise is never optimal on the grid.
    pub s_star: Option<f64>,
    pub regime: Regime,
    /// Width in price of the bracketing node interval.
    pub bracket: f64,
}

/// Lowest spot up to `s_max` at which exercising beats continuing for the
/// solved problem, found by bisection over grid nodes and one linear
/// interpolation.
pub fn critical_price(sol: &Solution, xi: Option<f64>, s_max: f64) -> Result<Option<(f64, f64)>> {
    let grid = &sol.grid;
    let k = sol.contract.payoff.strike();
    let margin = 5;
    let d = sol.schedule.dividend[0];
    let f = |j: usize| -> Result<f64> {
        let s = grid.node(j).exp();
        Ok(sol.contract.payoff.value(s) - sol.continuation_at(s, xi)?)
    };
    let first = (0..grid.n)
        .find(|&j| grid.node(j).exp() > k.max(d * (1.0 + 1e-9)))
        .ok_or_else(|| Error::NoSolution("strike lies above the grid".into()))?
        .max(margin);
    let cap = s_max.ln();
    let last = (0..grid.n).rposition(|j| grid.node(j) <= cap).unwrap_or(0).min(grid.n - 1 - margin);
    if first >= last || f(last)? < 0.0 {
        return Ok(None);
    }
    let (mut lo, mut hi) = (first, last);
    let f_first = f(first)?;
    if f_first >= 0.0 {
        let s = grid.node(first).exp();
        return Ok(Some((s, s - grid.node(first - 1).exp())));
    }
    let (mut f_lo, mut f_hi) = (f_first, f(last)?);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let fm = f(mid)?;
        if fm >= 0.0 {
            hi = mid;
            f_hi = fm;
        } else {
            lo = mid;
            f_lo = fm;
        }
    }
    let (s_lo, s_hi) = (grid.node(lo).exp(), grid.node(hi).exp());
    let s = s_lo + (s_hi - s_lo) * (-f_lo) / (f_hi - f_lo);
    Ok(Some((s, s_hi - s_lo)))
}

fn american_call(contract: &Contract) -> Result<f64> {
    match contract.payoff {
        Payoff::Call { strike } => Ok(strike),
        _ => Err(Error::Unsupported("boundaries are defined for calls".into())),
    }
}

/// Standard deviations of the remaining life kept between the scanned
/// region and the top of the grid, where transition mass leaks off.
const LEAK_SDS: f64 = 8.0;

/// Widens the price grid so the scan reaches twice the immediate-exercise
/// threshold `K max(1, r/q)`, and returns the scan limit. The grid is
/// symmetric in log price, so widening is capped where the lowest node would
/// fall below the largest dividend and the leak margin gives way instead.
fn boundary_config(
    cfg: &LatticeConfig,
    model: &ModelSpec,
    env: &MarketEnv,
    strike: f64,
    ttm: f64,
) -> (LatticeConfig, f64) {
    let q = env.yield_rate();
    let m = if q > 0.0 { (env.r / q).max(1.0) } else { 1.0 };
    let sd = cfg.sigma_ref.unwrap_or_else(|| model.reference_vol(ttm)) * ttm.sqrt();
    let reach = (2.0 * m).ln() / sd;
    let mut width_mult = cfg.width_mult.max(reach + LEAK_SDS);
    let d_max = env
        .cash_dividends()
        .iter()
        .filter(|d| d.time < ttm)
        .fold(0.0, |a, d| f64::max(a, d.amount));
    if d_max > 0.0 {
        let cap = (strike / (DIVIDEND_CLEARANCE * d_max)).ln() / sd;
        width_mult = width_mult.min(cap.max(cfg.width_mult));
    }
    let leak = LEAK_SDS.min(width_mult - reach).max(0.0);
    let s_max = strike * ((width_mult - leak) * sd).exp();
    (
        LatticeConfig {
            width_mult,
            ..cfg.clone()
        },
        s_max,
    )
}

fn dividend_dates(contract: &Contract, env: &MarketEnv) -> Result<Vec<f64>> {
    let dates: Vec<f64> = env
        .cash_dividends()
        .iter()
        .filter(|d| d.time < contract.maturity - 1e-12 && d.amount > 0.0)
        .map(|d| d.time)
        .collect();
    if dates.is_empty() {
        return Err(Error::domain("no dividend before maturity"));
    }
    Ok(dates)
}

fn discrete_with<F>(contract: &Contract, env: &MarketEnv, cfg: &LatticeConfig, model_at: F) -> Result<Vec<BoundaryPoint>>
where
    F: Fn(f64) -> ModelSpec + Sync,
{
    let strike = american_call(contract)?;
    dividend_dates(contract, env)?
        .par_iter()
        .map(|&t| {
            let ttm = contract.maturity - t;
            let model = model_at(ttm);
            let sub = Contract::new(Payoff::Call { strike }, ttm, ExerciseStyle::AmericanCallOnDivDates);
            let env_t = env.shifted(t);
            let (cfg_t, s_max) = boundary_config(cfg, &model, &env_t, strike, ttm);
            let sol = pricer::solve(&sub, &model, &env_t, &cfg_t)?;
            let found = critical_price(&sol, model.initial_variance(), s_max)?;
            Ok(BoundaryPoint {
                t,
                ttm,
                s_star: found.map(|f| f.0),
                regime: Regime::DiscreteDividend,
                bracket: found.map_or(f64::NAN, |f| f.1),
            })
        })
        .collect()
}

fn yield_with<F>(
    contract: &Contract,
    env: &MarketEnv,
    dates: &[f64],
    dates_per_year: f64,
    cfg: &LatticeConfig,
    model_at: F,
) -> Result<Vec<BoundaryPoint>>
where
    F: Fn(f64) -> ModelSpec + Sync,
{
    let strike = american_call(contract)?;
    if env.yield_rate() <= 0.0 {
        return Err(Error::domain("yield boundary needs a positive dividend yield"));
    }
    if !(dates_per_year > 0.0) {
        return Err(Error::domain("monitoring frequency must be positive"));
    }
    dates
        .par_iter()
        .map(|&t| {
            let ttm = contract.maturity - t;
            if ttm <= 0.0 {
                return Err(Error::domain("boundary date must precede maturity"));
            }
            let model = model_at(ttm);
            let n_dates = ((ttm * dates_per_year).round() as usize).max(1);
            let sub = Contract::new(Payoff::Call { strike }, ttm, ExerciseStyle::American { n_dates });
            let (cfg_t, s_max) = boundary_config(cfg, &model, env, strike, ttm);
            let sol = pricer::solve(&sub, &model, env, &cfg_t)?;
            let found = critical_price(&sol, model.initial_variance(), s_max)?;
            Ok(BoundaryPoint {
                t,
                ttm,
                s_star: found.map(|f| f.0),
                regime: Regime::Yield,
                bracket: found.map_or(f64::NAN, |f| f.1),
            })
        })
        .collect()
}

/// Critical price on each ex-dividend date before maturity. Stochastic
/// volatility models are read at their initial variance.
pub fn exercise_boundary_discrete(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    cfg: &LatticeConfig,
) -> Result<Vec<BoundaryPoint>> {
    model.validate()?;
    discrete_with(contract, env, cfg, |_| model.clone())
}

/// Critical price at each date in `dates` under a continuous yield, with
/// exercise monitored `dates_per_year` times a year.
pub fn exercise_boundary_yield(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    dates: &[f64],
    dates_per_year: f64,
    cfg: &LatticeConfig,
) -> Result<Vec<BoundaryPoint>> {
    model.validate()?;
    yield_with(contract, env, dates, dates_per_year, cfg, |_| model.clone())
}

/// Discrete-dividend boundary of the Black–Scholes comparator whose
/// volatility matches `model`'s return variance over each date's remaining
/// life.
pub fn matched_bs_boundary_discrete(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    cfg: &LatticeConfig,
) -> Result<Vec<BoundaryPoint>> {
    model.validate()?;
    discrete_with(contract, env, cfg, |ttm| matched_bs(model, ttm))
}

/// Yield boundary of the matched Black–Scholes comparator.
pub fn matched_bs_boundary_yield(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    dates: &[f64],
    dates_per_year: f64,
    cfg: &LatticeConfig,
) -> Result<Vec<BoundaryPoint>> {
    model.validate()?;
    yield_with(contract, env, dates, dates_per_year, cfg, |ttm| matched_bs(model, ttm))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Premium {
    pub european: f64,
    pub premium: f64,
}

impl Premium {
    pub fn total(&self) -> f64 {
        self.european + self.premium
    }
}

/// Splits an American call under Black–Scholes with a yield into its
/// European value and the discounted premium collected above the boundary.
/// `boundary` must cover `[0, T]` and is integrated by the trapezoid rule.
pub fn premium_decomposition(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    spot: f64,
    boundary: &[BoundaryPoint],
) -> Result<Premium> {
    let strike = american_call(contract)?;
    let sigma = match model {
        ModelSpec::Bs { sigma } => *sigma,
        _ => return Err(Error::Unsupported("premium decomposition needs Black-Scholes".into())),
    };
    if !env.cash_dividends().is_empty() {
        return Err(Error::Unsupported("premium decomposition needs a yield".into()));
    }
    let (r, q, t_end) = (env.r, env.yield_rate(), contract.maturity);
    let european = crate::oracles::bs_price(true, spot, strike, t_end, r, q, sigma);
    if boundary.len() < 2 {
        return Err(Error::domain("boundary mesh needs at least two dates"));
    }
    let mut pts: Vec<(f64, f64)> = boundary
        .iter()
        .map(|b| (b.t, b.s_star.unwrap_or(f64::INFINITY)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let density = |s: f64, b: f64| -> f64 {
        if s <= 0.0 {
            // immediate exercise region at the valuation date
            return if spot >= b { q * spot - r * strike } else { 0.0 };
        }
        if !b.is_finite() {
            return 0.0;
        }
        let sd = sigma * s.sqrt();
        let d1 = ((spot / b).ln() + (r - q + 0.5 * sigma * sigma) * s) / sd;
        let d2 = d1 - sd;
        q * spot * (-q * s).exp() * norm_cdf(d1) - r * strike * (-r * s).exp() * norm_cdf(d2)
    };
    let mut premium = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        premium += 0.5 * (b.0 - a.0) * (density(a.0, a.1) + density(b.0, b.1));
    }
    if (pts[0].0).abs() > 1e-12 || (pts[pts.len() - 1].0 - t_end).abs() > 1e-9 {
        return Err(Error::domain("boundary mesh must span the option's life"));
    }
    Ok(Premium {
        european,
        premium: premium.max(0.0),
    })
}

/// Black–Scholes critical price at expiry for a call with a yield.
pub fn terminal_boundary(strike: f64, r: f64, q: f64) -> f64 {
    if q <= 0.0 {
        f64::INFINITY
    } else {
        strike * (r / q).max(1.0)
    }
}

/// The Black–Scholes comparator carrying the same return variance as
/// `model` over `[0, t]`.
pub fn matched_bs(model: &ModelSpec, t: f64) -> ModelSpec {
    ModelSpec::Bs {
        sigma: model.matched_variance(t).sqrt(),
    }
}

/// CSV with columns `ttm,S_star,regime,model`.
pub fn boundary_csv(points: &[BoundaryPoint], model: &str) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["ttm", "S_star", "regime", "model"])?;
    for p in points {
        let s = p.s_star.map_or_else(|| "above_grid".to_string(), |s| format!("{s:.6}"));
        w.write_record([format!("{:.6}", p.ttm), s, p.regime.as_str().to_string(), model.to_string()])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?)
        .map_err(|e| Error::Io(e.to_string()))
}
