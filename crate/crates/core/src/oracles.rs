//! Independent reference prices: closed-form Europeans, binomial trees with
//! cash dividends, and least-squares Monte Carlo.

use crate::error::{Error, Result};
use crate::math::{norm_cdf, C64, I};
use crate::model::{HestonParams, JumpParams, MarketEnv, ModelSpec};
use crate::pricer::{Contract, ExerciseStyle, Payoff, Schedule};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Black–Scholes European price with continuous yield `q`.
pub fn bs_price(call: bool, s: f64, k: f64, t: f64, r: f64, q: f64, sigma: f64) -> f64 {
    let df = (-r * t).exp();
    let fwd = s * ((r - q) * t).exp();
    if sigma <= 0.0 || t <= 0.0 {
        let intrinsic = if call { fwd - k } else { k - fwd };
        return df * intrinsic.max(0.0);
    }
    let sd = sigma * t.sqrt();
    let d1 = ((fwd / k).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    if call {
        df * (fwd * norm_cdf(d1) - k * norm_cdf(d2))
    } else {
        df * (k * norm_cdf(-d2) - fwd * norm_cdf(-d1))
    }
}

/// Black–Scholes delta of a call with continuous yield.
pub fn bs_call_delta(s: f64, k: f64, t: f64, r: f64, q: f64, sigma: f64) -> f64 {
    let sd = sigma * t.sqrt();
    let d1 = ((s / k).ln() + (r - q) * t + 0.5 * sd * sd) / sd;
    (-q * t).exp() * norm_cdf(d1)
}

/// Merton European price as a Poisson-weighted sum of Black–Scholes prices.
pub fn merton_price(
    call: bool,
    s: f64,
    k: f64,
    t: f64,
    r: f64,
    q: f64,
    sigma: f64,
    jump: &JumpParams,
) -> f64 {
    let ups = jump.compensator();
    let lam = jump.gamma * (1.0 + ups) * t;
    if lam == 0.0 {
        return bs_price(call, s, k, t, r, q, sigma);
    }
    let mut w = (-lam).exp();
    let mut total = 0.0;
    let mut mass = 0.0;
    for n in 0..2000 {
        if n > 0 {
            w *= lam / n as f64;
        }
        let nf = n as f64;
        let vol = (sigma * sigma + nf * jump.sigma_psi * jump.sigma_psi / t).sqrt();
        let rn = r - jump.gamma * ups + nf * (1.0 + ups).ln() / t;
        total += w * bs_price(call, s, k, t, rn, q, vol);
        mass += w;
        if 1.0 - mass < 1e-15 && nf > lam {
            break;
        }
    }
    total
}

/// Characteristic function of `log S_T` under Heston in the original
/// 1993 parameterisation (second probability measure, undiscounted).
pub fn heston_cf_1993(phi: C64, s: f64, v0: f64, t: f64, r: f64, q: f64, p: &HestonParams) -> C64 {
    let kappa = p.beta;
    let theta = p.long_run_variance();
    let sig = p.omega;
    let rho = p.rho;
    let u = -0.5;
    let b = kappa;
    let a = kappa * theta;
    let x = s.ln();
    let rsp = rho * sig * phi * I;
    let d = ((rsp - b).powi(2) - sig * sig * (2.0 * u * phi * I - phi * phi)).sqrt();
    let g = (b - rsp + d) / (b - rsp - d);
    let edt = (d * t).exp();
    let c = (r - q) * phi * I * t
        + a / (sig * sig) * ((b - rsp + d) * t - 2.0 * ((1.0 - g * edt) / (1.0 - g)).ln());
    let dd = (b - rsp + d) / (sig * sig) * (1.0 - edt) / (1.0 - g * edt);
    (c + dd * v0 + I * phi * x).exp()
}

/// Characteristic function of `log S_T` in the rotated form that stays on
/// the principal branch for long maturities.
fn heston_cf_stable(phi: C64, s: f64, v0: f64, t: f64, r: f64, q: f64, p: &HestonParams) -> C64 {
    let kappa = p.beta;
    let theta = p.long_run_variance();
    let sig = p.omega;
    let rsp = p.rho * sig * phi * I;
    let d = ((rsp - kappa).powi(2) + sig * sig * (I * phi + phi * phi)).sqrt();
    let g = (kappa - rsp - d) / (kappa - rsp + d);
    let emdt = (-d * t).exp();
    let c = (r - q) * phi * I * t
        + kappa * theta / (sig * sig)
            * ((kappa - rsp - d) * t - 2.0 * ((1.0 - g * emdt) / (1.0 - g)).ln());
    let dd = (kappa - rsp - d) / (sig * sig) * (1.0 - emdt) / (1.0 - g * emdt);
    (c + dd * v0 + I * phi * s.ln()).exp()
}

/// Heston European price by Gil-Pelaez inversion with composite Simpson.
pub fn heston_price(call: bool, s: f64, k: f64, t: f64, r: f64, q: f64, p: &HestonParams) -> f64 {
    if p.omega == 0.0 {
        let var = p.expected_average_variance(t);
        return bs_price(call, s, k, t, r, q, var.sqrt());
    }
    let cf = |phi: C64| heston_cf_stable(phi, s, p.v0, t, r, q, p);
    let fwd = s * ((r - q) * t).exp();
    let lk = k.ln();
    // P1 uses the share measure: cf(phi - i) / cf(-i)
    let norm1 = fwd;
    let integrand = |u: f64| -> (f64, f64) {
        let e = (-I * u * lk).exp() / (I * u);
        let p1 = (e * cf(C64::new(u, -1.0)) / norm1).re;
        let p2 = (e * cf(C64::new(u, 0.0))).re;
        (p1, p2)
    };
    let upper = 40.0 / (p.v0.max(p.long_run_variance()).max(1e-4) * t).sqrt() + 50.0;
    let n = 20_000;
    let h = upper / n as f64;
    let (mut a1, mut a2) = (0.0, 0.0);
    for i in 0..=n {
        let u = (i as f64 * h).max(1e-10);
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let (p1, p2) = integrand(u);
        a1 += w * p1;
        a2 += w * p2;
    }
    let prob1 = 0.5 + a1 * h / 3.0 / PI;
    let prob2 = 0.5 + a2 * h / 3.0 / PI;
    let c = s * (-q * t).exp() * prob1 - k * (-r * t).exp() * prob2;
    if call {
        c
    } else {
        c - s * (-q * t).exp() + k * (-r * t).exp()
    }
}

/// Closed-form European price for plain calls and puts.
pub fn european_closed_form(
    model: &ModelSpec,
    contract: &Contract,
    env: &MarketEnv,
    spot: f64,
) -> Result<f64> {
    if !env.cash_dividends().is_empty() {
        return Err(Error::Unsupported(
            "closed forms do not handle cash dividends".into(),
        ));
    }
    let call = match contract.payoff {
        Payoff::Call { .. } => true,
        Payoff::Put { .. } => false,
        _ => return Err(Error::Unsupported("closed forms cover calls and puts".into())),
    };
    let (k, t, r, q) = (
        contract.payoff.strike(),
        contract.maturity,
        env.r,
        env.yield_rate(),
    );
    match model {
        ModelSpec::Bs { sigma } => Ok(bs_price(call, spot, k, t, r, q, *sigma)),
        ModelSpec::Merton { sigma_m, .. } => Ok(merton_price(
            call,
            spot,
            k,
            t,
            r,
            q,
            *sigma_m,
            &model.jump().unwrap(),
        )),
        ModelSpec::Heston(p) => Ok(heston_price(call, spot, k, t, r, q, p)),
        ModelSpec::Bates { .. } => Err(Error::Unsupported(
            "no closed form implemented for Bates".into(),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    /// A fresh recombining tree is started from every node on an
    /// ex-dividend date.
    NonRecombining,
    /// One recombining tree; post-dividend values are interpolated at the
    /// ex-dividend price.
    ContinuationInterpolated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub steps: usize,
    pub kind: TreeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeResult {
    pub price: f64,
    pub node_evaluations: u64,
    /// Largest distance between a dividend date and the tree date it was
    /// moved to.
    pub max_snap_offset: f64,
}

struct Tree<'a> {
    contract: &'a Contract,
    dt: f64,
    up: f64,
    p: f64,
    disc: f64,
    /// (step index, amount)
    divs: Vec<(usize, f64)>,
    exercise: Vec<bool>,
    evals: u64,
}

impl Tree<'_> {
    fn payoff(&self, s: f64) -> f64 {
        self.contract.payoff.value(s)
    }

    /// Backward induction over a recombining layer structure from `start`
    /// to `end` steps, given values at `end` as a function of node price.
    fn roll_back(&mut self, mut v: Vec<f64>, s_base: f64, start: usize, end: usize) -> Vec<f64> {
        for step in (start..end).rev() {
            let width = step - start;
            let mut next = Vec::with_capacity(width + 1);
            for i in 0..=width {
                let cont = self.disc * (self.p * v[i + 1] + (1.0 - self.p) * v[i]);
                let val = if self.exercise[step] && step > start {
                    let s = s_base * self.up.powi(2 * i as i32 - width as i32);
                    cont.max(self.payoff(s))
                } else {
                    cont
                };
                next.push(val);
            }
            self.evals += next.len() as u64;
            v = next;
        }
        v
    }

    /// Value at price `s` on step `start`, just after any dividend there.
    fn value_non_recombining(&mut self, s: f64, start: usize, div_idx: usize, steps: usize) -> f64 {
        let end = self.divs.get(div_idx).map_or(steps, |d| d.0);
        let width = end - start;
        let mut v = Vec::with_capacity(width + 1);
        for i in 0..=width {
            let si = s * self.up.powi(2 * i as i32 - width as i32);
            let val = if end == steps {
                self.payoff(si)
            } else {
                let d = self.divs[div_idx].1;
                let after = if si - d > 0.0 {
                    self.value_non_recombining(si - d, end, div_idx + 1, steps)
                } else {
                    0.0
                };
                if self.exercise[end] {
                    after.max(self.payoff(si))
                } else {
                    after
                }
            };
            v.push(val);
        }
        self.evals += v.len() as u64;
        self.roll_back(v, s, start, end)[0]
    }
}

fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        // below the tree: extrapolate on the first segment, never negative
        let slope = (ys[1] - ys[0]) / (xs[1] - xs[0]);
        return (ys[0] + slope * (x - xs[0])).max(0.0);
    }
    let n = xs.len();
    if x >= xs[n - 1] {
        let slope = (ys[n - 1] - ys[n - 2]) / (xs[n - 1] - xs[n - 2]);
        return ys[n - 1] + slope * (x - xs[n - 1]);
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] * (1.0 - t) + ys[i + 1] * t
}

/// Cox–Ross–Rubinstein tree with cash dividends for Black–Scholes.
pub fn tree_price(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    spot: f64,
    spec: &TreeSpec,
) -> Result<TreeResult> {
    let sigma = match model {
        ModelSpec::Bs { sigma } => *sigma,
        _ => return Err(Error::Unsupported("trees support Black-Scholes only".into())),
    };
    if spec.steps == 0 {
        return Err(Error::domain("tree needs at least one step"));
    }
    let schedule = Schedule::build(contract, env)?;
    let steps = spec.steps;
    let t_end = contract.maturity;
    let dt = t_end / steps as f64;
    let up = (sigma * dt.sqrt()).exp();
    let growth = ((env.r - env.yield_rate()) * dt).exp();
    let p = (growth - 1.0 / up) / (up - 1.0 / up);
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain("tree step too coarse for a valid probability"));
    }
    let snap = |t: f64| ((t / dt).round() as usize).min(steps);
    let mut exercise = vec![false; steps + 1];
    let mut divs = Vec::new();
    let mut max_snap_offset: f64 = 0.0;
    for (l, &t) in schedule.times.iter().enumerate() {
        let k = snap(t);
        if schedule.exercise[l] {
            exercise[k] = true;
        }
        if schedule.dividend[l] > 0.0 {
            max_snap_offset = max_snap_offset.max((k as f64 * dt - t).abs());
            divs.push((k, schedule.dividend[l]));
        }
    }
    if let ExerciseStyle::American { .. } = contract.style {
        exercise.iter_mut().for_each(|e| *e = true);
    }
    let mut tree = Tree {
        contract,
        dt,
        up,
        p,
        disc: (-env.r * dt).exp(),
        divs,
        exercise,
        evals: 0,
    };
    let _ = tree.dt;
    let price = match spec.kind {
        TreeKind::NonRecombining => {
            let first = tree.divs.first().map(|d| d.0);
            if first == Some(0) {
                let d = tree.divs[0].1;
                let after = tree.value_non_recombining(spot - d, 0, 1, steps);
                if tree.exercise[0] {
                    after.max(tree.payoff(spot))
                } else {
                    after
                }
            } else {
                let v = tree.value_non_recombining(spot, 0, 0, steps);
                if tree.exercise[0] {
                    v.max(tree.payoff(spot))
                } else {
                    v
                }
            }
        }
        TreeKind::ContinuationInterpolated => {
            // node prices are pre-dividend; at a dividend step the holder
            // receives the continuation at the ex-dividend price; a
            // dividend on the first date roots the tree at the ex price
            let d0: f64 = tree.divs.iter().filter(|x| x.0 == 0).map(|x| x.1).sum();
            let base = spot - d0;
            if base <= 0.0 {
                return Err(Error::DividendTooLarge { dividend: d0, price: spot });
            }
            let layer = |k: usize| -> Vec<f64> {
                (0..=k).map(|i| base * up.powi(2 * i as i32 - k as i32)).collect()
            };
            let mut v: Vec<f64> = layer(steps).iter().map(|&s| tree.payoff(s)).collect();
            tree.evals += v.len() as u64;
            for k in (0..steps).rev() {
                let xs = layer(k);
                let cont: Vec<f64> = (0..=k)
                    .map(|i| tree.disc * (p * v[i + 1] + (1.0 - p) * v[i]))
                    .collect();
                let div = tree.divs.iter().filter(|x| x.0 == k).map(|x| x.1).sum::<f64>();
                let mut next: Vec<f64> = if div > 0.0 && k > 0 {
                    xs.iter().map(|&s| interp_linear(&xs, &cont, s - div)).collect()
                } else {
                    cont
                };
                if tree.exercise[k] && k > 0 {
                    for (val, &s) in next.iter_mut().zip(&xs) {
                        *val = val.max(tree.payoff(s));
                    }
                }
                tree.evals += next.len() as u64;
                v = next;
            }
            if tree.exercise[0] {
                v[0].max(tree.payoff(spot))
            } else {
                v[0]
            }
        }
    };
    Ok(TreeResult {
        price,
        node_evaluations: tree.evals,
        max_snap_offset,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSpec {
    pub paths: usize,
    /// Euler steps per year for stochastic-volatility models.
    pub steps_per_year: usize,
    pub seed: u64,
    /// Polynomial degree of the regression basis.
    pub degree: usize,
}

impl Default for McSpec {
    fn default() -> Self {
        McSpec {
            paths: 100_000,
            steps_per_year: 250,
            seed: 7,
            degree: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsmResult {
    pub price: f64,
    pub std_error: f64,
    /// Basis degree actually used after any reduction.
    pub degree_used: usize,
}

const BATCH: usize = 4096;

/// Simulates `(S, v)` at each monitoring date (cum-dividend) for one batch.
fn simulate_batch(
    model: &ModelSpec,
    env: &MarketEnv,
    schedule: &Schedule,
    spot: f64,
    spec: &McSpec,
    batch: usize,
    count: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9).wrapping_add(batch as u64));
    let m = schedule.steps();
    let q = env.yield_rate();
    let r = env.r;
    let mut s_out = vec![vec![0.0; count]; m + 1];
    let mut v_out = vec![vec![0.0; count]; m + 1];
    for path in 0..count {
        let mut s = spot;
        let mut v = model.initial_variance().unwrap_or(0.0);
        s_out[0][path] = s;
        v_out[0][path] = v;
        for l in 0..m {
            // dividend paid at t_l after the exercise decision
            s = (s - schedule.dividend[l]).max(1e-12);
            let tau = schedule.tau(l);
            match model {
                ModelSpec::Bs { sigma } => {
                    let z: f64 = rng.sample(StandardNormal);
                    s *= ((r - q - 0.5 * sigma * sigma) * tau + sigma * tau.sqrt() * z).exp();
                }
                ModelSpec::Merton { sigma_m, .. } => {
                    let j = model.jump().unwrap();
                    let z: f64 = rng.sample(StandardNormal);
                    let n = if j.gamma * tau > 0.0 {
                        Poisson::new(j.gamma * tau).unwrap().sample(&mut rng) as f64
                    } else {
                        0.0
                    };
                    let zj: f64 = rng.sample(StandardNormal);
                    let jump = n * j.mu_psi + (n.sqrt() * j.sigma_psi) * zj;
                    s *= ((r - q - j.gamma * j.compensator() - 0.5 * sigma_m * sigma_m) * tau
                        + sigma_m * tau.sqrt() * z
                        + jump)
                        .exp();
                }
                ModelSpec::Heston(_) | ModelSpec::Bates { .. } => {
                    let h = model.heston().unwrap();
                    let jump = model.jump();
                    let theta = h.long_run_variance();
                    let nsteps = ((tau * spec.steps_per_year as f64).ceil() as usize).max(1);
                    let dt = tau / nsteps as f64;
                    let comp = jump.map_or(0.0, |j| j.gamma * j.compensator());
                    let mut x = s.ln();
                    for _ in 0..nsteps {
                        let z1: f64 = rng.sample(StandardNormal);
                        let z2: f64 = rng.sample(StandardNormal);
                        let zv = h.rho * z1 + (1.0 - h.rho * h.rho).sqrt() * z2;
                        let vp = v.max(0.0);
                        x += (r - q - comp - 0.5 * vp) * dt + (vp * dt).sqrt() * z1;
                        if let Some(j) = jump {
                            if j.gamma > 0.0 {
                                let n = Poisson::new(j.gamma * dt).unwrap().sample(&mut rng) as f64;
                                if n > 0.0 {
                                    let zj: f64 = rng.sample(StandardNormal);
                                    x += n * j.mu_psi + n.sqrt() * j.sigma_psi * zj;
                                }
                            }
                        }
                        v += h.beta * (theta - vp) * dt + h.omega * (vp * dt).sqrt() * zv;
                    }
                    s = x.exp();
                }
            }
            s_out[l + 1][path] = s;
            v_out[l + 1][path] = v.max(0.0);
        }
    }
    (s_out, v_out)
}

fn basis(s: f64, v: f64, k: f64, degree: usize, with_var: bool) -> Vec<f64> {
    let x = s / k;
    let mut b = Vec::with_capacity(degree + 4);
    let mut p = 1.0;
    for _ in 0..=degree {
        b.push(p);
        p *= x;
    }
    if with_var {
        let vv = v * 10.0;
        b.push(vv);
        b.push(vv * x);
        b.push(vv * vv);
    }
    b
}

/// Least-squares regression of `y` on `rows`, dropping the highest basis
/// terms while the normal equations are singular.
fn regress(rows: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, usize)> {
    let full = rows.first()?.len();
    for width in (1..=full).rev() {
        if rows.len() <= width {
            continue;
        }
        let x = DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]);
        let yv = DVector::from_column_slice(y);
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * yv;
        if let Some(ch) = xtx.cholesky() {
            let beta = ch.solve(&xty);
            if beta.iter().all(|b| b.is_finite()) {
                return Some((beta.iter().cloned().collect(), width));
            }
        }
    }
    None
}

/// Longstaff–Schwartz price with its Monte Carlo standard error.
pub fn lsm_price(
    contract: &Contract,
    model: &ModelSpec,
    env: &MarketEnv,
    spot: f64,
    spec: &McSpec,
) -> Result<LsmResult> {
    model.validate()?;
    if spec.paths < 2 {
        return Err(Error::domain("Monte Carlo needs at least two paths"));
    }
    let schedule = Schedule::build(contract, env)?;
    let m = schedule.steps();
    let batches = spec.paths.div_ceil(BATCH);
    let sims: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let count = BATCH.min(spec.paths - b * BATCH);
            simulate_batch(model, env, &schedule, spot, spec, b, count)
        })
        .collect();
    let n = spec.paths;
    let mut s_at = vec![Vec::with_capacity(n); m + 1];
    let mut v_at = vec![Vec::with_capacity(n); m + 1];
    for (s_b, v_b) in &sims {
        for l in 0..=m {
            s_at[l].extend_from_slice(&s_b[l]);
            v_at[l].extend_from_slice(&v_b[l]);
        }
    }
    let k = contract.payoff.strike();
    let barrier = contract.payoff.barrier();
    let sv = model.is_stochastic_vol();
    // cash flows discounted to the current date being processed
    let mut cf: Vec<f64> = s_at[m].iter().map(|&s| contract.payoff.value(s)).collect();
    let mut alive = vec![true; n];
    let mut degree_used = spec.degree;
    let knocked = |s: f64| barrier.is_some_and(|b| s <= b);
    for (i, s) in s_at[m].iter().enumerate() {
        if knocked(*s) {
            cf[i] = 0.0;
        }
    }
    for l in (1..m).rev() {
        let df = (-env.r * schedule.tau(l)).exp();
        cf.iter_mut().for_each(|c| *c *= df);
        for i in 0..n {
            if alive[i] && knocked(s_at[l][i]) {
                alive[i] = false;
                cf[i] = 0.0;
            }
        }
        if !schedule.exercise[l] {
            continue;
        }
        let itm: Vec<usize> = (0..n)
            .filter(|&i| alive[i] && contract.payoff.value(s_at[l][i]) > 0.0)
            .collect();
        if itm.is_empty() {
            continue;
        }
        let rows: Vec<Vec<f64>> = itm
            .iter()
            .map(|&i| basis(s_at[l][i], v_at[l][i], k, spec.degree, sv))
            .collect();
        let y: Vec<f64> = itm.iter().map(|&i| cf[i]).collect();
        let (beta, width) = regress(&rows, &y)
            .ok_or_else(|| Error::Regression(format!("singular regression at date {}", schedule.times[l])))?;
        if width < rows[0].len() {
            log::warn!("regression basis reduced to {width} terms at t={}", schedule.times[l]);
            degree_used = degree_used.min(width.saturating_sub(1));
        }
        for (row, &i) in rows.iter().zip(&itm) {
            let cont: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let h = contract.payoff.value(s_at[l][i]);
            if h > cont {
                cf[i] = h;
            }
        }
    }
    let df = (-env.r * schedule.tau(0)).exp();
    cf.iter_mut().for_each(|c| *c *= df);
    let mean = cf.iter().sum::<f64>() / n as f64;
    let var = cf.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mut price = mean;
    if schedule.exercise[0] {
        price = price.max(contract.payoff.value(spot));
    }
    Ok(LsmResult {
        price,
        std_error: (var / n as f64).sqrt(),
        degree_used,
    })
}

/// Uniform draw helper kept for deterministic test fixtures.
pub fn seeded_uniforms(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}
