//! Implied volatilities and model fitting by implied-volatility MSE.

use std::io::Read;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MarketEnv, ModelSpec};
use crate::oracles::bs_price;
use crate::pricer::{price_value, Contract, ExerciseStyle, LatticeConfig, Payoff};

/// Delta below which a call counts as out of the money.
pub const OTM_DELTA: f64 = 0.375;
/// Delta above which a call counts as in the money.
pub const ITM_DELTA: f64 = 0.625;

/// Squared implied-vol error charged to a quote whose model price has no
/// implied volatility.
pub const NO_SOLUTION_PENALTY: f64 = 1.0;

const VOL_LO: f64 = 1e-6;
const VOL_HI: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuoteRecord {
    pub date: String,
    pub underlying: String,
    pub spot: f64,
    pub strike: f64,
    /// Years to expiry.
    pub maturity: f64,
    pub mid: f64,
    pub bid: f64,
    pub ask: f64,
    pub open_interest: f64,
    pub delta: Option<f64>,
    pub dividend_ref: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Moneyness {
    Otm,
    Atm,
    Itm,
}

/// Bucket for a call delta.
pub fn moneyness(delta: f64) -> Moneyness {
    if delta < OTM_DELTA {
        Moneyness::Otm
    } else if delta > ITM_DELTA {
        Moneyness::Itm
    } else {
        Moneyness::Atm
    }
}

impl QuoteRecord {
    /// Noise-free quote with a zero spread.
    pub fn synthetic(spot: f64, strike: f64, maturity: f64, mid: f64) -> Self {
        QuoteRecord {
            date: "synthetic".into(),
            underlying: "SYN".into(),
            spot,
            strike,
            maturity,
            mid,
            bid: mid,
            ask: mid,
            open_interest: 0.0,
            delta: None,
            dividend_ref: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !(pos(self.spot) && pos(self.strike) && pos(self.maturity)) {
            return Err(Error::domain("spot, strike and maturity must be positive"));
        }
        if !(self.bid <= self.mid && self.mid <= self.ask) {
            return Err(Error::domain(format!(
                "quote violates bid <= mid <= ask ({} / {} / {})",
                self.bid, self.mid, self.ask
            )));
        }
        if !(self.open_interest >= 0.0) {
            return Err(Error::domain("open interest must be non-negative"));
        }
        if let Some(d) = self.delta {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::domain(format!("call delta {d} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn moneyness(&self) -> Option<Moneyness> {
        self.delta.map(moneyness)
    }
}

/// A CSV row that failed parsing or validation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reject {
    /// One-based data row number.
    pub row: usize,
    pub reason: String,
}

/// Reads quotes from CSV with header
/// `date,underlying,spot,strike,maturity,mid,bid,ask,open_interest,delta,dividend_ref`.
/// Bad rows are returned with a reason rather than aborting the read.
pub fn read_quotes<R: Read>(reader: R) -> Result<(Vec<QuoteRecord>, Vec<Reject>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for (i, rec) in rdr.deserialize::<QuoteRecord>().enumerate() {
        match rec.map_err(Error::from).and_then(|q| q.validate().map(|_| q)) {
            Ok(q) => good.push(q),
            Err(e) => {
                log::warn!("rejecting quote row {}: {e}", i + 1);
                bad.push(Reject {
                    row: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok((good, bad))
}

pub fn write_quotes(quotes: &[QuoteRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for q in quotes {
        w.serialize(q)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?)
        .map_err(|e| Error::Io(e.to_string()))
}

/// Spot net of the present value of cash dividends paid before `maturity`.
fn escrowed_spot(spot: f64, maturity: f64, env: &MarketEnv) -> f64 {
    spot - env
        .cash_dividends()
        .iter()
        .filter(|d| d.time < maturity)
        .map(|d| d.amount * (-env.r * d.time).exp())
        .sum::<f64>()
}

/// Black-Scholes volatility of a call price, with cash dividends escrowed
/// out of the spot and any yield taken from `env`.
pub fn implied_vol(price: f64, spot: f64, strike: f64, maturity: f64, env: &MarketEnv) -> Result<f64> {
    if !(spot > 0.0 && strike > 0.0 && maturity > 0.0 && price.is_finite()) {
        return Err(Error::domain("implied vol needs positive spot, strike and maturity"));
    }
    let (r, q) = (env.r, env.yield_rate());
    let s = escrowed_spot(spot, maturity, env);
    if s <= 0.0 {
        return Err(Error::NoSolution("dividends exceed the spot".into()));
    }
    let fwd_s = s * (-q * maturity).exp();
    let lower = (fwd_s - strike * (-r * maturity).exp()).max(0.0);
    let upper = fwd_s;
    let f = |v: f64| bs_price(true, s, strike, maturity, r, q, v) - price;
    let tol = 1e-10 * spot;
    if price <= lower || price >= upper {
        return Err(Error::NoSolution(format!(
            "price {price} outside no-arbitrage bounds ({lower}, {upper})"
        )));
    }
    let (mut lo, mut hi) = (VOL_LO, VOL_HI);
    if f(lo) >= 0.0 || f(hi) <= 0.0 {
        return Err(Error::NoSolution(format!(
            "price {price} not attained for volatility in [{VOL_LO}, {VOL_HI}]"
        )));
    }
    let sqrt_t = maturity.sqrt();
    let mut v = 0.3f64.clamp(lo, hi);
    for _ in 0..200 {
        let fv = f(v);
        if fv.abs() <= tol {
            return Ok(v);
        }
        if fv > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        if hi - lo < 1e-15 * hi {
            return Ok(v);
        }
        let d1 = ((s / strike).ln() + (r - q + 0.5 * v * v) * maturity) / (v * sqrt_t);
        let vega = fwd_s * crate::math::norm_pdf(d1) * sqrt_t;
        let newton = v - fv / vega;
        // fall back to bisection when Newton leaves the bracket
        v = if vega > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(Error::NoSolution(format!("no convergence for price {price}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub lattice: LatticeConfig,
    /// Objective evaluations allowed across all restarts.
    pub max_evals: usize,
    pub max_restarts: usize,
    /// Stop when the simplex objective spread falls below this.
    pub f_tol: f64,
    /// Stop when the simplex diameter, in unit-box coordinates, falls below this.
    pub x_tol: f64,
    /// Initial simplex edge in unit-box coordinates.
    pub step: f64,
    /// Exercise dates per year when the dividend is a continuous yield.
    pub yield_dates_per_year: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            lattice: LatticeConfig::default().with_level(8),
            max_evals: 4000,
            max_restarts: 3,
            f_tol: 1e-14,
            x_tol: 1e-7,
            step: 0.1,
            yield_dates_per_year: 52.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub model: ModelSpec,
    /// Mean squared implied-volatility error at `model`.
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each iteration. Values can step between
    /// restarts, where the grid is rescaled.
    pub history: Vec<f64>,
}

/// Box constraints for each calibrated parameter, in `ModelSpec::to_vec` order.
pub fn param_bounds(model: &ModelSpec) -> Vec<(f64, f64)> {
    let vol = (0.01, 0.54);
    let heston = [vol, (0.05, 10.0), vol, (0.05, 3.0), (-0.95, 0.95)];
    let jumps = [(0.0, 3.0), (-0.6, 0.6), (0.01, 0.6)];
    match model {
        ModelSpec::Bs { .. } => vec![(0.01, 2.0)],
        ModelSpec::Merton { .. } => [(0.01, 2.0)].iter().chain(&jumps).copied().collect(),
        ModelSpec::Heston(_) => heston.to_vec(),
        ModelSpec::Bates { .. } => heston.iter().chain(&jumps).copied().collect(),
    }
}

/// The American call each quote stands for, with exercise before every
/// ex-dividend date. Without dividends this is the European call.
pub fn quote_contract(q: &QuoteRecord, env: &MarketEnv, settings: &CalibrationSettings) -> Contract {
    let style = match env.dividend {
        crate::model::DividendSpec::Yield { .. } => ExerciseStyle::American {
            n_dates: ((q.maturity * settings.yield_dates_per_year).round() as usize).max(1),
        },
        _ => ExerciseStyle::AmericanCallOnDivDates,
    };
    Contract::new(Payoff::Call { strike: q.strike }, q.maturity, style)
}

/// Lattice settings with the grid scale pinned to `anchor`, so that the
/// grid does not move as parameters change.
fn pinned(settings: &CalibrationSettings, anchor: &ModelSpec, t: f64) -> LatticeConfig {
    let mut cfg = settings.lattice.clone();
    if cfg.sigma_ref.is_none() {
        cfg.sigma_ref = Some(anchor.reference_vol(t));
    }
    cfg
}

/// Model prices of every quote. The grid is scaled by `anchor`.
pub fn model_prices(
    model: &ModelSpec,
    anchor: &ModelSpec,
    quotes: &[QuoteRecord],
    env: &MarketEnv,
    settings: &CalibrationSettings,
) -> Vec<Result<f64>> {
    quotes
        .par_iter()
        .map(|q| {
            let c = quote_contract(q, env, settings);
            price_value(&c, model, env, q.spot, &pinned(settings, anchor, q.maturity))
        })
        .collect()
}

/// Synthetic noise-free quotes priced by `model` on `strikes x maturities`.
pub fn synthetic_quotes(
    model: &ModelSpec,
    env: &MarketEnv,
    spot: f64,
    strikes: &[f64],
    maturities: &[f64],
    settings: &CalibrationSettings,
) -> Result<Vec<QuoteRecord>> {
    let mut quotes: Vec<QuoteRecord> = maturities
        .iter()
        .flat_map(|&t| strikes.iter().map(move |&k| QuoteRecord::synthetic(spot, k, t, 0.0)))
        .collect();
    let prices = model_prices(model, model, &quotes, env, settings);
    for (q, p) in quotes.iter_mut().zip(prices) {
        let p = p?;
        q.mid = p;
        q.bid = p;
        q.ask = p;
    }
    Ok(quotes)
}

/// Market implied vols of the quote mids.
pub fn market_vols(quotes: &[QuoteRecord], env: &MarketEnv) -> Result<Vec<f64>> {
    quotes
        .iter()
        .map(|q| implied_vol(q.mid, q.spot, q.strike, q.maturity, env))
        .collect()
}

/// Per-quote implied-vol errors; a model price without an implied vol counts
/// as an error whose square is the penalty.
fn vol_errors(
    model: &ModelSpec,
    anchor: &ModelSpec,
    quotes: &[QuoteRecord],
    market: &[f64],
    env: &MarketEnv,
    settings: &CalibrationSettings,
) -> Vec<f64> {
    let prices = model_prices(model, anchor, quotes, env, settings);
    prices
        .into_iter()
        .zip(quotes)
        .zip(market)
        .map(|((p, q), &m)| {
            match p.and_then(|p| implied_vol(p, q.spot, q.strike, q.maturity, env)) {
                Ok(v) => v - m,
                Err(_) => NO_SOLUTION_PENALTY.sqrt(),
            }
        })
        .collect()
}

/// Mean squared implied-vol error of `model` against the quote mids.
pub fn objective(
    model: &ModelSpec,
    anchor: &ModelSpec,
    quotes: &[QuoteRecord],
    env: &MarketEnv,
    settings: &CalibrationSettings,
) -> Result<f64> {
    let market = market_vols(quotes, env)?;
    Ok(mse(&vol_errors(model, anchor, quotes, &market, env, settings)))
}

fn mse(e: &[f64]) -> f64 {
    e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64
}

/// Maps between parameters and the unit box.
struct BoxMap {
    bounds: Vec<(f64, f64)>,
}

impl BoxMap {
    fn to_unit(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(&self.bounds)
            .map(|(x, (lo, hi))| ((x - lo) / (hi - lo)).clamp(0.0, 1.0))
            .collect()
    }

    fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.bounds)
            .map(|(x, (lo, hi))| lo + x * (hi - lo))
            .collect()
    }
}

/// Folds a coordinate back into [0, 1] by mirror reflection.
fn reflect(x: f64) -> f64 {
    let m = x.rem_euclid(2.0);
    if m > 1.0 {
        2.0 - m
    } else {
        m
    }
}

struct Simplex {
    pts: Vec<Vec<f64>>,
    vals: Vec<f64>,
}

impl Simplex {
    fn sort(&mut self) {
        let mut idx: Vec<usize> = (0..self.vals.len()).collect();
        idx.sort_by(|&a, &b| self.vals[a].total_cmp(&self.vals[b]));
        self.pts = idx.iter().map(|&i| self.pts[i].clone()).collect();
        self.vals = idx.iter().map(|&i| self.vals[i]).collect();
    }

    fn diameter(&self) -> f64 {
        let b = &self.pts[0];
        self.pts[1..]
            .iter()
            .map(|p| p.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }
}

/// Nelder-Mead on the unit box with reflecting walls. Returns the best point,
/// its value, iterations used and whether the tolerances were met.
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    start: &[f64],
    step: f64,
    f_tol: f64,
    x_tol: f64,
    budget: &mut usize,
    history: &mut Vec<f64>,
) -> (Vec<f64>, f64, usize, bool) {
    let n = start.len();
    let mut eval = |x: &[f64], budget: &mut usize| {
        *budget = budget.saturating_sub(1);
        f(x)
    };
    let mut pts = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        // step away from the nearer wall
        p[i] = if p[i] + step <= 1.0 { p[i] + step } else { p[i] - step };
        pts.push(p);
    }
    let vals = pts.iter().map(|p| eval(p, budget)).collect();
    let mut s = Simplex { pts, vals };
    s.sort();
    let mut iters = 0;
    let along = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> {
        c.iter().zip(w).map(|(c, w)| reflect(c + t * (w - c))).collect()
    };
    loop {
        let spread = s.vals[n] - s.vals[0];
        if spread <= f_tol && s.diameter() <= x_tol {
            return (s.pts[0].clone(), s.vals[0], iters, true);
        }
        if *budget == 0 {
            return (s.pts[0].clone(), s.vals[0], iters, false);
        }
        iters += 1;
        let mut c = vec![0.0; n];
        for p in &s.pts[..n] {
            for (ci, pi) in c.iter_mut().zip(p) {
                *ci += pi / n as f64;
            }
        }
        let worst = s.pts[n].clone();
        let xr = along(&c, &worst, -1.0);
        let fr = eval(&xr, budget);
        if fr < s.vals[0] {
            let xe = along(&c, &worst, -2.0);
            let fe = eval(&xe, budget);
            if fe < fr {
                s.pts[n] = xe;
                s.vals[n] = fe;
            } else {
                s.pts[n] = xr;
                s.vals[n] = fr;
            }
        } else if fr < s.vals[n - 1] {
            s.pts[n] = xr;
            s.vals[n] = fr;
        } else {
            let (xc, fc) = if fr < s.vals[n] {
                let x = along(&c, &worst, -0.5);
                let v = eval(&x, budget);
                (x, v)
            } else {
                let x = along(&c, &worst, 0.5);
                let v = eval(&x, budget);
                (x, v)
            };
            if fc < s.vals[n].min(fr) {
                s.pts[n] = xc;
                s.vals[n] = fc;
            } else {
                let best = s.pts[0].clone();
                for i in 1..=n {
                    s.pts[i] = along(&best, &s.pts[i], 0.5);
                    s.vals[i] = eval(&s.pts[i], budget);
                }
            }
        }
        s.sort();
        history.push(s.vals[0]);
    }
}

/// Whether the lattice grids for `quotes` differ between two anchors.
fn grid_scale_moved(a: &ModelSpec, b: &ModelSpec, quotes: &[QuoteRecord]) -> bool {
    quotes.iter().any(|q| {
        let (x, y) = (a.reference_vol(q.maturity), b.reference_vol(q.maturity));
        (x - y).abs() > 1e-3 * x
    })
}

/// Fits the parameters of `init`'s model family to the quote mids.
///
/// The optimizer runs Nelder-Mead in box-normalized coordinates and restarts
/// from the best point until a restart brings no improvement. Within a run
/// the lattice grid scale is held fixed, so the objective is a smooth
/// function of the parameters; each restart rescales the grid to the point
/// reached, and the reported objective uses the grid of the fitted model.
pub fn calibrate(
    quotes: &[QuoteRecord],
    env: &MarketEnv,
    init: &ModelSpec,
    settings: &CalibrationSettings,
) -> Result<CalibrationResult> {
    init.validate()?;
    env.validate()?;
    let n = init.to_vec().len();
    for q in quotes {
        q.validate()?;
    }
    if quotes.len() < n {
        return Err(Error::domain(format!(
            "{} quotes cannot identify {n} parameters",
            quotes.len()
        )));
    }
    let mut strikes: Vec<f64> = quotes.iter().map(|q| q.strike).collect();
    strikes.sort_by(f64::total_cmp);
    strikes.dedup();
    if strikes.len() < 3 {
        return Err(Error::domain("quotes must span at least three strikes"));
    }
    let market = market_vols(quotes, env)?;
    let map = BoxMap {
        bounds: param_bounds(init),
    };
    let eval = |u: &[f64], anchor: &ModelSpec| -> f64 {
        let m = init.with_vec(&map.from_unit(u));
        if m.validate().is_err() {
            return f64::INFINITY;
        }
        mse(&vol_errors(&m, anchor, quotes, &market, env, settings))
    };
    let mut budget = settings.max_evals;
    let mut history = Vec::new();
    let mut x = map.to_unit(&init.to_vec());
    let mut anchor = *init;
    let mut best = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..=settings.max_restarts {
        let start = eval(&x, &anchor);
        budget = budget.saturating_sub(1);
        let (xn, fx, it, ok) = nelder_mead(
            &mut |u: &[f64]| eval(u, &anchor),
            &x,
            settings.step,
            settings.f_tol,
            settings.x_tol,
            &mut budget,
            &mut history,
        );
        iterations += it;
        let improved = fx < start - settings.f_tol;
        if fx < start {
            x = xn;
        }
        best = fx.min(start);
        converged = ok;
        // rescale the grid to the fitted point before the next restart
        let fitted = init.with_vec(&map.from_unit(&x));
        let rescaled = grid_scale_moved(&anchor, &fitted, quotes);
        anchor = fitted;
        if !ok || !(improved || rescaled) {
            break;
        }
    }
    let fitted = init.with_vec(&map.from_unit(&x));
    if fitted != anchor {
        best = eval(&x, &fitted);
    }
    if !converged {
        log::warn!("calibration stopped after {} evaluations without converging", settings.max_evals);
    }
    Ok(CalibrationResult {
        model: fitted,
        objective: best,
        iterations,
        evaluations: settings.max_evals - budget,
        converged,
        history,
    })
}

/// Which parameters the quotes pin down near `model`.
///
/// The implied-vol errors are linearized around `model`. Every parameter set
/// whose objective stays below `obj_tol` then lies in an ellipsoid; a
/// parameter is identifiable when that ellipsoid confines it within
/// `rel_tol` of its value.
pub fn identifiable(
    model: &ModelSpec,
    quotes: &[QuoteRecord],
    env: &MarketEnv,
    settings: &CalibrationSettings,
    obj_tol: f64,
    rel_tol: f64,
) -> Result<Vec<bool>> {
    Ok(confinement(model, quotes, env, settings, obj_tol)?
        .iter()
        .map(|c| *c <= rel_tol)
        .collect())
}

/// Largest relative parameter move, per parameter, among parameter sets
/// whose linearized objective stays below `obj_tol`. Infinite when the
/// quotes leave a direction flat.
pub fn confinement(
    model: &ModelSpec,
    quotes: &[QuoteRecord],
    env: &MarketEnv,
    settings: &CalibrationSettings,
    obj_tol: f64,
) -> Result<Vec<f64>> {
    let p = model.to_vec();
    let n = p.len();
    let market = market_vols(quotes, env)?;
    let m = quotes.len();
    let mut jac = DMatrix::<f64>::zeros(m, n);
    for i in 0..n {
        let h = 1e-4 * p[i].abs().max(0.01);
        let mut up = p.clone();
        let mut dn = p.clone();
        up[i] += h;
        dn[i] -= h;
        let eu = vol_errors(&model.with_vec(&up), model, quotes, &market, env, settings);
        let ed = vol_errors(&model.with_vec(&dn), model, quotes, &market, env, settings);
        for k in 0..m {
            jac[(k, i)] = (eu[k] - ed[k]) / (2.0 * h);
        }
    }
    let h = jac.transpose() * &jac / m as f64;
    let Some(cov) = h.try_inverse() else {
        return Ok(vec![f64::INFINITY; n]);
    };
    Ok((0..n)
        .map(|i| {
            let c = cov[(i, i)];
            if c >= 0.0 {
                (obj_tol * c).sqrt() / p[i].abs()
            } else {
                f64::INFINITY
            }
        })
        .collect())
}
