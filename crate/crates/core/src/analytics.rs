//! Early-exercise decisions before ex-dividend dates, losses from leaving
//! calls unexercised, and the break-even exercise fee.

use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::matched_bs;
use crate::calibration::{moneyness, Moneyness, Reject};
use crate::error::{Error, Result};
use crate::math::bisect;
use crate::model::{CashDividend, MarketEnv, ModelSpec};
use crate::oracles::{bs_call_delta, bs_price, european_closed_form};
use crate::pricer::{price_value, Contract, ExerciseStyle, LatticeConfig, Payoff};

/// Per-share rollover cost treated as a conservative trading friction.
pub const REFERENCE_FEE: f64 = 0.4446;
/// Shares per contract.
pub const CONTRACT_SIZE: f64 = 100.0;

const FEE_TOL: f64 = 1e-7;

/// One call series observed the day before an ex-dividend date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExerciseEvent {
    pub id: String,
    /// Ex-dividend time in years.
    pub ex_time: f64,
    /// Stock price the day before the ex-dividend date.
    pub spot: f64,
    pub dividend: f64,
    pub strike: f64,
    /// Years from the ex-dividend date to expiry.
    pub maturity: f64,
    pub rate: f64,
    /// Open interest the day before the ex-dividend date.
    pub oi_prev: f64,
    /// Open interest two days before the ex-dividend date.
    pub oi_prev2: f64,
    pub delta: Option<f64>,
    pub market_price: Option<f64>,
    /// Later dividends before expiry as `time:amount` pairs joined by `;`,
    /// times measured from the ex-dividend date.
    #[serde(default)]
    pub later_dividends: String,
}

impl ExerciseEvent {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !(pos(self.spot) && pos(self.strike) && pos(self.maturity)) {
            return Err(Error::domain("spot, strike and maturity must be positive"));
        }
        if !(self.dividend >= 0.0 && self.dividend < self.spot) {
            return Err(Error::domain(format!("dividend {} must lie in [0, spot)", self.dividend)));
        }
        if !(self.oi_prev >= 0.0 && self.oi_prev2 >= 0.0) {
            return Err(Error::domain("open interest must be non-negative"));
        }
        if !self.rate.is_finite() {
            return Err(Error::domain("rate must be finite"));
        }
        self.later()?;
        Ok(())
    }

    /// Dividends paid after the ex-dividend date.
    pub fn later(&self) -> Result<Vec<CashDividend>> {
        self.later_dividends
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (t, a) = s
                    .split_once(':')
                    .ok_or_else(|| Error::Schema(format!("bad dividend entry '{s}'")))?;
                let parse = |x: &str| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Schema(format!("bad dividend entry '{s}': {e}")))
                };
                Ok(CashDividend {
                    time: parse(t)?,
                    amount: parse(a)?,
                })
            })
            .collect()
    }

    /// Market environment seen from the ex-dividend date.
    pub fn env_after(&self) -> Result<MarketEnv> {
        let later: Vec<(f64, f64)> = self.later()?.iter().map(|d| (d.time, d.amount)).collect();
        let env = if later.is_empty() {
            MarketEnv::new(self.rate)
        } else {
            MarketEnv::with_cash(self.rate, &later)
        };
        env.validate()?;
        Ok(env)
    }

    pub fn intrinsic(&self, fee: f64) -> f64 {
        self.spot - self.strike - fee
    }
}

/// How a model values the unexercised call right after the dividend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationModel {
    pub name: String,
    pub model: ModelSpec,
    /// Replace `model` by Black-Scholes with the same return variance over
    /// each event's remaining life.
    #[serde(default)]
    pub match_variance: bool,
    /// Lattice used when later dividends leave early exercise possible or no
    /// closed form exists.
    #[serde(default)]
    pub lattice: LatticeConfig,
}

impl ContinuationModel {
    pub fn new(name: impl Into<String>, model: ModelSpec) -> Self {
        ContinuationModel {
            name: name.into(),
            model,
            match_variance: false,
            lattice: LatticeConfig::default(),
        }
    }

    pub fn matched(name: impl Into<String>, reference: ModelSpec) -> Self {
        ContinuationModel {
            match_variance: true,
            ..Self::new(name, reference)
        }
    }

    fn model_for(&self, ev: &ExerciseEvent) -> ModelSpec {
        if self.match_variance {
            matched_bs(&self.model, ev.maturity)
        } else {
            self.model
        }
    }

    /// C(S - d, strike, T): the call's value just after the dividend.
    pub fn value(&self, ev: &ExerciseEvent, strike: f64) -> Result<f64> {
        let model = self.model_for(ev);
        let env = ev.env_after()?;
        let s = ev.spot - ev.dividend;
        let payoff = Payoff::Call { strike };
        if env.cash_dividends().is_empty() {
            let c = Contract::new(payoff, ev.maturity, ExerciseStyle::European);
            match european_closed_form(&model, &c, &env, s) {
                Err(Error::Unsupported(_)) => {}
                other => return other,
            }
        }
        let c = Contract::new(payoff, ev.maturity, ExerciseStyle::AmericanCallOnDivDates);
        price_value(&c, &model, &env, s, &self.lattice)
    }
}

/// Whether exercising before the dividend beats holding, net of `fee`.
/// Ties favour exercise.
pub fn should_exercise(ev: &ExerciseEvent, model: &ContinuationModel, fee: f64) -> Result<bool> {
    Ok(model.value(ev, ev.strike + fee)? <= ev.intrinsic(fee))
}

/// Share of contracts left unexercised; `None` without prior open interest.
/// Ratios above one, from contracts issued on the last day, are clipped.
pub fn ne_percentage(oi_prev: f64, oi_prev2: f64) -> Option<f64> {
    if !(oi_prev2 > 0.0) {
        return None;
    }
    let ratio = oi_prev / oi_prev2;
    if !(0.0..=1.0).contains(&ratio) {
        log::info!("non-exercise ratio {ratio} clipped to [0, 1]");
    }
    Some(ratio.clamp(0.0, 1.0))
}

/// Gain per share from exercising, floored at zero.
fn gain(ev: &ExerciseEvent, continuation: f64, fee: f64) -> f64 {
    (ev.intrinsic(fee) - continuation).max(0.0)
}

/// Money left on the table by the contracts still open the day before the
/// dividend.
pub fn total_loss(ev: &ExerciseEvent, model: &ContinuationModel, fee: f64) -> Result<f64> {
    let c = model.value(ev, ev.strike + fee)?;
    Ok(CONTRACT_SIZE * ev.oi_prev * gain(ev, c, fee))
}

/// f(F) = C(S - d, K + F, T) - (S - K - F), whose root is the implied fee.
pub fn fee_gap(ev: &ExerciseEvent, model: &ContinuationModel, fee: f64) -> Result<f64> {
    Ok(model.value(ev, ev.strike + fee)? - ev.intrinsic(fee))
}

/// Fee at which exercising and holding break even; zero when holding
/// already wins without a fee.
pub fn implied_fee(ev: &ExerciseEvent, model: &ContinuationModel) -> Result<f64> {
    let f0 = fee_gap(ev, model, 0.0)?;
    if f0 >= 0.0 {
        return Ok(0.0);
    }
    // at F = S - K the intrinsic value is gone and f >= 0
    let hi = ev.intrinsic(0.0);
    let mut err = None;
    let root = bisect(
        |f| match fee_gap(ev, model, f) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                0.0
            }
        },
        0.0,
        hi,
        FEE_TOL,
    );
    if let Some(e) = err {
        return Err(e);
    }
    root.ok_or_else(|| Error::NoSolution("implied fee not bracketed".into()))
}

/// Whether a break-even fee exceeds the conservative trading cost.
pub fn beyond_conservative(fee: f64) -> bool {
    fee > REFERENCE_FEE
}

/// Decision and money for one event under one model and fee.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub event: String,
    pub model: String,
    pub fee: f64,
    pub continuation: f64,
    pub intrinsic: f64,
    pub should_exercise: bool,
    pub ne_ratio: Option<f64>,
    pub money_available: f64,
    pub loss: f64,
    pub bucket: Option<Moneyness>,
}

pub fn evaluate(ev: &ExerciseEvent, model: &ContinuationModel, fee: f64) -> Result<Outcome> {
    let c = model.value(ev, ev.strike + fee)?;
    let should = c <= ev.intrinsic(fee);
    let g = gain(ev, c, fee);
    Ok(Outcome {
        event: ev.id.clone(),
        model: model.name.clone(),
        fee,
        continuation: c,
        intrinsic: ev.intrinsic(fee),
        should_exercise: should,
        ne_ratio: ne_percentage(ev.oi_prev, ev.oi_prev2),
        money_available: CONTRACT_SIZE * ev.oi_prev2 * g,
        loss: CONTRACT_SIZE * ev.oi_prev * g,
        bucket: ev.delta.map(moneyness),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketRate {
    pub bucket: Option<Moneyness>,
    pub should_exercise_contracts: f64,
    pub unexercised_contracts: f64,
    pub ne_rate: f64,
}

/// Aggregates for one model and fee.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub fee: f64,
    pub events: usize,
    /// Open interest two days before, over all events.
    pub contracts_outstanding: f64,
    pub total_market_value: f64,
    pub should_exercise_events: usize,
    pub should_exercise_contracts: f64,
    /// Open interest the day before, over should-exercise events.
    pub unexercised_contracts: f64,
    pub ne_rate: f64,
    pub money_available: f64,
    pub total_loss: f64,
    pub loss_share_of_available: f64,
    pub buckets: Vec<BucketRate>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub reports: Vec<ModelReport>,
    pub rejects: Vec<String>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Folds outcomes in event order. Events without prior open interest are
/// left out of the non-exercise rates.
pub fn aggregate(model: &str, fee: f64, events: &[ExerciseEvent], outcomes: &[Outcome]) -> ModelReport {
    let mut r = ModelReport {
        model: model.to_string(),
        fee,
        events: events.len(),
        ..Default::default()
    };
    let order = [None, Some(Moneyness::Otm), Some(Moneyness::Atm), Some(Moneyness::Itm)];
    let mut buckets: Vec<BucketRate> = order
        .iter()
        .map(|&bucket| BucketRate {
            bucket,
            ..Default::default()
        })
        .collect();
    let mut ne_num = 0.0;
    let mut ne_den = 0.0;
    for (ev, o) in events.iter().zip(outcomes) {
        r.contracts_outstanding += ev.oi_prev2;
        r.total_market_value += CONTRACT_SIZE * ev.oi_prev2 * ev.market_price.unwrap_or(0.0);
        r.money_available += o.money_available;
        r.total_loss += o.loss;
        if !o.should_exercise {
            continue;
        }
        r.should_exercise_events += 1;
        r.should_exercise_contracts += ev.oi_prev2;
        r.unexercised_contracts += ev.oi_prev;
        if let Some(ne) = o.ne_ratio {
            ne_num += ne * ev.oi_prev2;
            ne_den += ev.oi_prev2;
            let b = order.iter().position(|&b| b == o.bucket).unwrap();
            buckets[b].should_exercise_contracts += ev.oi_prev2;
            buckets[b].unexercised_contracts += ne * ev.oi_prev2;
        }
    }
    r.ne_rate = ratio(ne_num, ne_den);
    r.loss_share_of_available = ratio(r.total_loss, r.money_available);
    for b in &mut buckets {
        b.ne_rate = ratio(b.unexercised_contracts, b.should_exercise_contracts);
    }
    r.buckets = buckets;
    r
}

/// Per-model, per-fee aggregates over the events. Events that fail to price
/// are dropped with a logged reason.
pub fn build_report(events: &[ExerciseEvent], models: &[ContinuationModel], fees: &[f64]) -> Report {
    let mut report = Report::default();
    let mut kept: Vec<ExerciseEvent> = Vec::new();
    for ev in events {
        match ev.validate() {
            Ok(()) => kept.push(ev.clone()),
            Err(e) => report.rejects.push(format!("{}: {e}", ev.id)),
        }
    }
    for m in models {
        for &fee in fees {
            let res: Vec<Result<Outcome>> = kept.par_iter().map(|ev| evaluate(ev, m, fee)).collect();
            let mut evs = Vec::with_capacity(kept.len());
            let mut outs = Vec::with_capacity(kept.len());
            for (ev, o) in kept.iter().zip(res) {
                match o {
                    Ok(o) => {
                        evs.push(ev.clone());
                        outs.push(o);
                    }
                    Err(e) => {
                        log::warn!("event {} dropped under {}: {e}", ev.id, m.name);
                        report.rejects.push(format!("{} ({}, fee {fee}): {e}", ev.id, m.name));
                    }
                }
            }
            report.reports.push(aggregate(&m.name, fee, &evs, &outs));
        }
    }
    report
}

/// Rows for the summary CSV, one per model and fee.
pub fn report_csv(report: &Report) -> Result<String> {
    #[derive(Serialize)]
    struct Row<'a> {
        model: &'a str,
        fee: f64,
        events: usize,
        contracts_outstanding: f64,
        total_market_value: f64,
        should_exercise_events: usize,
        should_exercise_contracts: f64,
        unexercised_contracts: f64,
        ne_rate: f64,
        money_available: f64,
        total_loss: f64,
        loss_share_of_available: f64,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.reports {
        w.serialize(Row {
            model: &r.model,
            fee: r.fee,
            events: r.events,
            contracts_outstanding: r.contracts_outstanding,
            total_market_value: r.total_market_value,
            should_exercise_events: r.should_exercise_events,
            should_exercise_contracts: r.should_exercise_contracts,
            unexercised_contracts: r.unexercised_contracts,
            ne_rate: r.ne_rate,
            money_available: r.money_available,
            total_loss: r.total_loss,
            loss_share_of_available: r.loss_share_of_available,
        })?;
    }
    into_string(w)
}

/// Non-exercise rate by delta bucket, one row per model, fee and bucket.
pub fn bucket_csv(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "fee", "bucket", "should_exercise_contracts", "unexercised_contracts", "ne_rate"])?;
    for r in &report.reports {
        for b in &r.buckets {
            let name = match b.bucket {
                None => "unknown",
                Some(Moneyness::Otm) => "otm",
                Some(Moneyness::Atm) => "atm",
                Some(Moneyness::Itm) => "itm",
            };
            w.write_record([
                r.model.clone(),
                r.fee.to_string(),
                name.to_string(),
                b.should_exercise_contracts.to_string(),
                b.unexercised_contracts.to_string(),
                b.ne_rate.to_string(),
            ])?;
        }
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?)
        .map_err(|e| Error::Io(e.to_string()))
}

/// Reads events from CSV with header
/// `id,ex_time,spot,dividend,strike,maturity,rate,oi_prev,oi_prev2,delta,market_price,later_dividends`.
pub fn read_events<R: Read>(reader: R) -> Result<(Vec<ExerciseEvent>, Vec<Reject>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for (i, rec) in rdr.deserialize::<ExerciseEvent>().enumerate() {
        match rec.map_err(Error::from).and_then(|e| e.validate().map(|_| e)) {
            Ok(e) => good.push(e),
            Err(e) => {
                log::warn!("rejecting event row {}: {e}", i + 1);
                bad.push(Reject {
                    row: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok((good, bad))
}

pub fn write_events(events: &[ExerciseEvent]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in events {
        w.serialize(e)?;
    }
    into_string(w)
}

/// Settings for synthetic events around a Black-Scholes boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    pub rate: f64,
    /// Volatility used for deltas and market prices.
    pub sigma: f64,
    pub strike: f64,
    /// Spot range as multiples of the strike.
    pub moneyness: (f64, f64),
    pub dividend: (f64, f64),
    pub maturity: (f64, f64),
    pub max_open_interest: u32,
    /// Chance that open interest grows into the ex-dividend date.
    pub reissue_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 1000,
            seed: 7,
            rate: 0.03,
            sigma: 0.29,
            strike: 100.0,
            moneyness: (0.9, 1.6),
            dividend: (0.25, 2.0),
            maturity: (0.02, 0.4),
            max_open_interest: 5000,
            reissue_prob: 0.02,
        }
    }
}

/// Events with a single dividend before expiry, so the continuation value is
/// European and every boundary is known in closed form.
pub fn synthetic_events(spec: &SyntheticSpec) -> Vec<ExerciseEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n)
        .map(|i| {
            let m = rng.gen_range(spec.moneyness.0..spec.moneyness.1);
            let spot = (spec.strike * m * 100.0).round() / 100.0;
            let dividend = (rng.gen_range(spec.dividend.0..spec.dividend.1) * 100.0).round() / 100.0;
            let maturity = rng.gen_range(spec.maturity.0..spec.maturity.1);
            let oi_prev2 = rng.gen_range(0..=spec.max_open_interest) as f64;
            let oi_prev = if rng.gen_bool(spec.reissue_prob) {
                oi_prev2 + rng.gen_range(1..=100) as f64
            } else {
                (oi_prev2 * rng.gen_range(0.0..1.0f64)).round()
            };
            let s_ex = spot - dividend;
            let (r, k, sig) = (spec.rate, spec.strike, spec.sigma);
            ExerciseEvent {
                id: format!("syn{i:05}"),
                ex_time: 0.0,
                spot,
                dividend,
                strike: k,
                maturity,
                rate: r,
                oi_prev,
                oi_prev2,
                delta: Some(bs_call_delta(s_ex, k, maturity, r, 0.0, sig)),
                market_price: Some(bs_price(true, s_ex, k, maturity, r, 0.0, sig).max(spot - k)),
                later_dividends: String::new(),
            }
        })
        .collect()
}
