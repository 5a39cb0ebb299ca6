//! Model dynamics and their pricing kernels.
//!
//! Everything is expressed in the log-price `X = log S`. Black–Scholes and
//! Merton have closed-form discounted transition densities; Heston and Bates
//! are handled through the discounted joint characteristic function of
//! `(X_T, v_T)`, which is exponential-affine in the conditioning state:
//!
//! ```text
//! E[e^{-r tau} exp(i lambda X_T + i kappa v_T) | X_0 = x, v_0 = xi]
//!     = exp(i lambda x + A(lambda, kappa, tau) + B(lambda, kappa, tau) xi)
//! ```

use crate::error::{Error, Result};
use crate::math::{expm1_over, gaussian_pdf, ln_1p, poisson_cutoff, poisson_tail, C64, I};
use serde::{Deserialize, Serialize};

/// Tail mass below which the Merton Poisson series is cut.
pub const MERTON_TAIL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpParams {
    /// Jump intensity per year.
    pub gamma: f64,
    /// Mean of the log jump size.
    pub mu_psi: f64,
    /// Standard deviation of the log jump size.
    pub sigma_psi: f64,
}

impl JumpParams {
    /// Mean relative jump size `E[psi - 1]`, the drift compensator.
    pub fn compensator(&self) -> f64 {
        (self.mu_psi + 0.5 * self.sigma_psi * self.sigma_psi).exp() - 1.0
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.sigma_psi >= 0.0 && self.mu_psi.is_finite()) {
            return Err(Error::domain(format!("invalid jump parameters {self:?}")));
        }
        Ok(())
    }

    /// `gamma tau (E[e^{i lambda log psi}] - 1)`.
    fn log_char(&self, lambda: f64, tau: f64) -> C64 {
        let jump = (I * lambda * self.mu_psi
            - 0.5 * lambda * lambda * self.sigma_psi * self.sigma_psi)
            .exp();
        self.gamma * tau * (jump - 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    /// Initial variance.
    pub v0: f64,
    /// Mean-reversion speed per year.
    pub beta: f64,
    /// Long-run volatility; the long-run variance is its square.
    #[serde(rename = "sigma_LT")]
    pub sigma_lt: f64,
    /// Volatility of variance.
    pub omega: f64,
    pub rho: f64,
}

impl HestonParams {
    pub fn long_run_variance(&self) -> f64 {
        self.sigma_lt * self.sigma_lt
    }

    fn validate(&self) -> Result<()> {
        let ok = self.v0 >= 0.0
            && self.beta >= 0.0
            && self.sigma_lt >= 0.0
            && self.omega >= 0.0
            && self.rho.abs() <= 1.0
            && [self.v0, self.beta, self.sigma_lt, self.omega, self.rho]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(Error::domain(format!("invalid Heston parameters {self:?}")));
        }
        Ok(())
    }

    /// Expected average variance over `[0, t]`.
    pub fn expected_average_variance(&self, t: f64) -> f64 {
        let theta = self.long_run_variance();
        let bt = self.beta * t;
        if bt < 1e-10 {
            self.v0
        } else {
            theta + (self.v0 - theta) * (1.0 - (-bt).exp()) / bt
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Bs {
        sigma: f64,
    },
    Merton {
        #[serde(rename = "sigma_M")]
        sigma_m: f64,
        gamma: f64,
        mu_psi: f64,
        sigma_psi: f64,
    },
    Heston(HestonParams),
    Bates {
        heston: HestonParams,
        jump: JumpParams,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Bs { sigma } => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::domain(format!("invalid volatility {sigma}")));
                }
                Ok(())
            }
            ModelSpec::Merton { sigma_m, .. } => {
                if !(sigma_m.is_finite() && *sigma_m >= 0.0) {
                    return Err(Error::domain(format!("invalid volatility {sigma_m}")));
                }
                self.jump().unwrap().validate()
            }
            ModelSpec::Heston(h) => h.validate(),
            ModelSpec::Bates { heston, jump } => {
                heston.validate()?;
                jump.validate()
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Bs { .. } => "bs",
            ModelSpec::Merton { .. } => "merton",
            ModelSpec::Heston(_) => "heston",
            ModelSpec::Bates { .. } => "bates",
        }
    }

    /// Whether the model carries a variance state (two-dimensional lattice).
    pub fn is_stochastic_vol(&self) -> bool {
        matches!(self, ModelSpec::Heston(_) | ModelSpec::Bates { .. })
    }

    pub fn jump(&self) -> Option<JumpParams> {
        match *self {
            ModelSpec::Merton {
                gamma,
                mu_psi,
                sigma_psi,
                ..
            } => Some(JumpParams {
                gamma,
                mu_psi,
                sigma_psi,
            }),
            ModelSpec::Bates { jump, .. } => Some(jump),
            _ => None,
        }
    }

    pub fn heston(&self) -> Option<HestonParams> {
        match *self {
            ModelSpec::Heston(h) => Some(h),
            ModelSpec::Bates { heston, .. } => Some(heston),
            _ => None,
        }
    }

    /// Initial variance for stochastic-volatility models.
    pub fn initial_variance(&self) -> Option<f64> {
        self.heston().map(|h| h.v0)
    }

    /// Variance of the log return per unit time, averaged over `[0, t]`.
    ///
    /// This is the volatility a Black–Scholes comparator needs so that both
    /// models share the same total return variance over the option's life.
    pub fn matched_variance(&self, t: f64) -> f64 {
        let jump_var = |j: &JumpParams| j.gamma * (j.mu_psi * j.mu_psi + j.sigma_psi * j.sigma_psi);
        match self {
            ModelSpec::Bs { sigma } => sigma * sigma,
            ModelSpec::Merton { sigma_m, .. } => sigma_m * sigma_m + jump_var(&self.jump().unwrap()),
            ModelSpec::Heston(h) => h.expected_average_variance(t),
            ModelSpec::Bates { heston, jump } => heston.expected_average_variance(t) + jump_var(jump),
        }
    }

    /// A volatility scale used to size lattices.
    pub fn reference_vol(&self, t: f64) -> f64 {
        self.matched_variance(t).sqrt()
    }

    /// Parameters as a flat vector, in the order used by calibration.
    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            ModelSpec::Bs { sigma } => vec![sigma],
            ModelSpec::Merton {
                sigma_m,
                gamma,
                mu_psi,
                sigma_psi,
            } => vec![sigma_m, gamma, mu_psi, sigma_psi],
            ModelSpec::Heston(h) => vec![h.v0.sqrt(), h.beta, h.sigma_lt, h.omega, h.rho],
            ModelSpec::Bates { heston: h, jump: j } => vec![
                h.v0.sqrt(),
                h.beta,
                h.sigma_lt,
                h.omega,
                h.rho,
                j.gamma,
                j.mu_psi,
                j.sigma_psi,
            ],
        }
    }

    /// Rebuild a model of the same kind from a flat parameter vector.
    pub fn with_vec(&self, p: &[f64]) -> ModelSpec {
        let heston = |p: &[f64]| HestonParams {
            v0: p[0] * p[0],
            beta: p[1],
            sigma_lt: p[2],
            omega: p[3],
            rho: p[4],
        };
        match self {
            ModelSpec::Bs { .. } => ModelSpec::Bs { sigma: p[0] },
            ModelSpec::Merton { .. } => ModelSpec::Merton {
                sigma_m: p[0],
                gamma: p[1],
                mu_psi: p[2],
                sigma_psi: p[3],
            },
            ModelSpec::Heston(_) => ModelSpec::Heston(heston(p)),
            ModelSpec::Bates { .. } => ModelSpec::Bates {
                heston: heston(p),
                jump: JumpParams {
                    gamma: p[5],
                    mu_psi: p[6],
                    sigma_psi: p[7],
                },
            },
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            ModelSpec::Bs { .. } => &["sigma"],
            ModelSpec::Merton { .. } => &["sigma_M", "gamma", "mu_psi", "sigma_psi"],
            ModelSpec::Heston(_) => &["sigma0", "beta", "sigma_LT", "omega", "rho"],
            ModelSpec::Bates { .. } => &[
                "sigma0", "beta", "sigma_LT", "omega", "rho", "gamma", "mu_psi", "sigma_psi",
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CashDividend {
    /// Ex-dividend time in years.
    pub time: f64,
    pub amount: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DividendSpec {
    CashSchedule {
        payments: Vec<CashDividend>,
    },
    Yield {
        r_d: f64,
    },
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketEnv {
    /// Continuously compounded risk-free rate.
    pub r: f64,
    #[serde(default)]
    pub dividend: DividendSpec,
}

impl MarketEnv {
    pub fn new(r: f64) -> Self {
        MarketEnv {
            r,
            dividend: DividendSpec::None,
        }
    }

    pub fn with_cash(r: f64, payments: &[(f64, f64)]) -> Self {
        MarketEnv {
            r,
            dividend: DividendSpec::CashSchedule {
                payments: payments
                    .iter()
                    .map(|&(time, amount)| CashDividend { time, amount })
                    .collect(),
            },
        }
    }

    pub fn with_yield(r: f64, r_d: f64) -> Self {
        MarketEnv {
            r,
            dividend: DividendSpec::Yield { r_d },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.r.is_finite() {
            return Err(Error::domain("interest rate must be finite"));
        }
        match &self.dividend {
            DividendSpec::CashSchedule { payments } => {
                for p in payments {
                    if !(p.time >= 0.0 && p.amount >= 0.0 && p.amount.is_finite()) {
                        return Err(Error::domain(format!("invalid cash dividend {p:?}")));
                    }
                }
                Ok(())
            }
            DividendSpec::Yield { r_d } if !r_d.is_finite() => {
                Err(Error::domain("dividend yield must be finite"))
            }
            _ => Ok(()),
        }
    }

    /// Continuous dividend yield, zero unless the schedule is a yield.
    pub fn yield_rate(&self) -> f64 {
        match self.dividend {
            DividendSpec::Yield { r_d } => r_d,
            _ => 0.0,
        }
    }

    /// Cash payments sorted by time.
    pub fn cash_dividends(&self) -> Vec<CashDividend> {
        match &self.dividend {
            DividendSpec::CashSchedule { payments } => {
                let mut p = payments.clone();
                p.sort_by(|a, b| a.time.total_cmp(&b.time));
                p
            }
            _ => Vec::new(),
        }
    }

    /// The same environment with the clock moved forward by `dt`; payments
    /// before the new origin are dropped.
    pub fn shifted(&self, dt: f64) -> MarketEnv {
        let dividend = match &self.dividend {
            DividendSpec::CashSchedule { payments } => DividendSpec::CashSchedule {
                payments: payments
                    .iter()
                    .filter(|p| p.time >= dt - 1e-12)
                    .map(|p| CashDividend {
                        time: (p.time - dt).max(0.0),
                        amount: p.amount,
                    })
                    .collect(),
            },
            other => other.clone(),
        };
        MarketEnv { r: self.r, dividend }
    }
}

/// Discounted transition density of the log-price over one step for the
/// closed-form models, as a Gaussian mixture in the offset `y - x`.
#[derive(Clone, Debug)]
pub struct TransitionDensity {
    discount: f64,
    /// (weight, mean of y - x, variance)
    components: Vec<(f64, f64, f64)>,
}

impl TransitionDensity {
    pub fn new(model: &ModelSpec, env: &MarketEnv, tau: f64) -> Result<Self> {
        Self::with_terms(model, env, tau, None)
    }

    /// Builds the density; `n_terms` overrides the Merton series cutoff.
    pub fn with_terms(
        model: &ModelSpec,
        env: &MarketEnv,
        tau: f64,
        n_terms: Option<usize>,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::domain(format!("time step must be positive, got {tau}")));
        }
        model.validate()?;
        let q = env.yield_rate();
        let discount = (-env.r * tau).exp();
        match *model {
            ModelSpec::Bs { sigma } => {
                if !(sigma > 0.0) {
                    return Err(Error::domain("Black-Scholes volatility must be positive"));
                }
                let var = sigma * sigma * tau;
                Ok(TransitionDensity {
                    discount,
                    components: vec![(1.0, (env.r - q) * tau - 0.5 * var, var)],
                })
            }
            ModelSpec::Merton { sigma_m, .. } => {
                let jump = model.jump().unwrap();
                let mean_jumps = jump.gamma * tau;
                let needed = poisson_cutoff(mean_jumps, MERTON_TAIL_TOL);
                let n = match n_terms {
                    Some(0) => return Err(Error::domain("Merton series needs at least one term")),
                    Some(n) => {
                        // n terms cover jump counts 0..n-1
                        let tail = poisson_tail(mean_jumps, n - 1);
                        if tail >= MERTON_TAIL_TOL {
                            return Err(Error::Truncation {
                                terms: n,
                                tail,
                                tol: MERTON_TAIL_TOL,
                            });
                        }
                        n
                    }
                    None => needed + 1,
                };
                let drift = (env.r - q - jump.gamma * jump.compensator()) * tau
                    - 0.5 * sigma_m * sigma_m * tau;
                let mut components = Vec::with_capacity(n);
                let mut w = (-mean_jumps).exp();
                for k in 0..n {
                    if k > 0 {
                        w *= mean_jumps / k as f64;
                    }
                    let var = sigma_m * sigma_m * tau + k as f64 * jump.sigma_psi * jump.sigma_psi;
                    if var <= 0.0 {
                        return Err(Error::domain("Merton density is degenerate (zero variance)"));
                    }
                    components.push((w, drift + k as f64 * jump.mu_psi, var));
                }
                Ok(TransitionDensity {
                    discount,
                    components,
                })
            }
            _ => Err(Error::Unsupported(format!(
                "{} has no closed-form transition density",
                model.name()
            ))),
        }
    }

    /// Discounted density of moving from log-price `x` to `y`.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.eval_offset(y - x)
    }

    pub fn eval_offset(&self, offset: f64) -> f64 {
        self.discount
            * self
                .components
                .iter()
                .map(|&(w, m, v)| w * gaussian_pdf(offset, m, v))
                .sum::<f64>()
    }

    /// Mean and standard deviation of the offset, for sizing.
    pub fn spread(&self) -> (f64, f64) {
        let tot: f64 = self.components.iter().map(|c| c.0).sum();
        let mean = self.components.iter().map(|c| c.0 * c.1).sum::<f64>() / tot;
        let second = self
            .components
            .iter()
            .map(|c| c.0 * (c.2 + c.1 * c.1))
            .sum::<f64>()
            / tot;
        (mean, (second - mean * mean).max(0.0).sqrt())
    }
}

/// Discounted Black–Scholes transition density in log-price.
pub fn bs_green(x: f64, y: f64, tau: f64, env: &MarketEnv, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain("volatility must be positive"));
    }
    Ok(TransitionDensity::new(&ModelSpec::Bs { sigma }, env, tau)?.eval(x, y))
}

/// Discounted Merton jump-diffusion transition density in log-price,
/// truncated at `n_terms` Poisson terms.
pub fn merton_density(
    x: f64,
    y: f64,
    tau: f64,
    env: &MarketEnv,
    model: &ModelSpec,
    n_terms: usize,
) -> Result<f64> {
    if !matches!(model, ModelSpec::Merton { .. }) {
        return Err(Error::Unsupported("merton_density needs a Merton model".into()));
    }
    Ok(TransitionDensity::with_terms(model, env, tau, Some(n_terms))?.eval(x, y))
}

/// Exponent pieces of the affine characteristic function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineExponent {
    /// State-independent part, including discounting and drift.
    pub a: C64,
    /// Coefficient multiplying the conditioning variance.
    pub b: C64,
}

impl AffineExponent {
    pub fn eval(&self, x: f64, xi: f64, lambda: f64) -> C64 {
        (I * lambda * x + self.a + self.b * xi).exp()
    }
}

/// Prepared characteristic-function evaluator for Heston and Bates over a
/// fixed time step.
#[derive(Clone, Debug)]
pub struct AffineKernel {
    heston: HestonParams,
    jump: Option<JumpParams>,
    r: f64,
    drift: f64,
    tau: f64,
}

const MAX_SPLIT_DEPTH: u32 = 40;

impl AffineKernel {
    pub fn new(model: &ModelSpec, env: &MarketEnv, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::domain(format!("time step must be positive, got {tau}")));
        }
        model.validate()?;
        let heston = model.heston().ok_or_else(|| {
            Error::Unsupported(format!("{} has no affine variance state", model.name()))
        })?;
        let jump = model.jump();
        let compensator = jump.map_or(0.0, |j| j.gamma * j.compensator());
        Ok(AffineKernel {
            heston,
            jump,
            r: env.r,
            drift: env.r - env.yield_rate() - compensator,
            tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Exponent `(A, B)` at transform arguments `(lambda, kappa)`.
    pub fn exponent(&self, lambda: f64, kappa: f64) -> Result<AffineExponent> {
        let u = I * lambda;
        let w = I * kappa;
        let h = &self.heston;
        let theta = h.long_run_variance();
        let base = -self.r * self.tau + u * self.drift * self.tau;
        let jumps = self.jump.map_or(C64::new(0.0, 0.0), |j| j.log_char(lambda, self.tau));
        let offset = base + jumps;
        let (int_b, b) = self.riccati(u, w, self.tau, offset.re, 0)?;
        let a = offset + h.beta * theta * int_b;
        if !(a.re.is_finite() && a.im.is_finite() && b.re.is_finite() && b.im.is_finite()) {
            return Err(Error::Overflow {
                lambda,
                kappa,
                tau: self.tau,
                detail: format!("non-finite exponent A={a}, B={b}"),
            });
        }
        Ok(AffineExponent { a, b })
    }

    /// Discounted joint characteristic function at the state `(x, xi)`.
    pub fn char2(&self, x: f64, xi: f64, lambda: f64, kappa: f64) -> Result<C64> {
        Ok(self.exponent(lambda, kappa)?.eval(x, xi, lambda))
    }

    /// Returns `(integral of B over [0, h], B(h))` starting from `B(0) = w`.
    ///
    /// The log in the `A` integral is only evaluated where its argument stays
    /// inside the disc `|z| < 1/2`, so the principal branch is the continuous
    /// one; longer steps are split through the semigroup property.
    fn riccati(&self, u: C64, w: C64, h: f64, re_offset: f64, depth: u32) -> Result<(C64, C64)> {
        let p = &self.heston;
        let om2 = p.omega * p.omega;
        let c = 0.5 * (u * u - u);
        let b = p.beta - p.rho * p.omega * u;
        if om2 == 0.0 {
            // linear Riccati: B' = c - b B
            if b.norm() < 1e-14 {
                return Ok((w * h + c * h * h * 0.5, w + c * h));
            }
            let e = (-b * h).exp();
            let fixed = c / b;
            let ph = h * expm1_over(-b * h);
            return Ok((fixed * h + (w - fixed) * ph, fixed + (w - fixed) * e));
        }
        let d = (b * b - om2 * (u * u - u)).sqrt();
        let b_minus = if (b + d).norm() >= (b - d).norm() {
            (u * u - u) / (b + d)
        } else {
            (b - d) / om2
        };
        let e = (-d * h).exp();
        let ph = h * expm1_over(-d * h);
        let z = 0.5 * om2 * ph * (w - b_minus);
        let int_b = b_minus * h - (2.0 / om2) * ln_1p(-z);
        let b_end = b_minus + e * (w - b_minus) / (1.0 - z);
        let theta = p.long_run_variance();
        let negligible = re_offset + p.beta * theta * int_b.re < -800.0;
        if z.norm() < 0.5 || negligible {
            return Ok((int_b, b_end));
        }
        if depth >= MAX_SPLIT_DEPTH {
            return Err(Error::Overflow {
                lambda: u.im,
                kappa: w.im,
                tau: h,
                detail: "Riccati step splitting did not converge".into(),
            });
        }
        let half = 0.5 * h;
        let (i1, w1) = self.riccati(u, w, half, re_offset * 0.5, depth + 1)?;
        let (i2, w2) = self.riccati(u, w1, half, re_offset * 0.5 + p.beta * theta * i1.re, depth + 1)?;
        Ok((i1 + i2, w2))
    }
}

/// Discounted joint characteristic function of `(log S_T, v_T)` under Heston.
pub fn heston_char2(
    x: f64,
    xi: f64,
    tau: f64,
    lambda: f64,
    kappa: f64,
    env: &MarketEnv,
    model: &HestonParams,
) -> Result<C64> {
    AffineKernel::new(&ModelSpec::Heston(*model), env, tau)?.char2(x, xi, lambda, kappa)
}

/// Discounted joint characteristic function under Bates: the Heston factor
/// with compensated drift times the independent jump factor.
pub fn bates_char2(
    x: f64,
    xi: f64,
    tau: f64,
    lambda: f64,
    kappa: f64,
    env: &MarketEnv,
    heston: &HestonParams,
    jump: &JumpParams,
) -> Result<C64> {
    AffineKernel::new(
        &ModelSpec::Bates {
            heston: *heston,
            jump: *jump,
        },
        env,
        tau,
    )?
    .char2(x, xi, lambda, kappa)
}
