use recproj::calibration::{self, CalibrationSettings, Moneyness, QuoteRecord};
use recproj::model::{MarketEnv, ModelSpec};
use recproj::oracles::bs_price;
use recproj::pricer::LatticeConfig;

fn settings(level: u32) -> CalibrationSettings {
    CalibrationSettings {
        lattice: LatticeConfig::default().with_level(level),
        ..Default::default()
    }
}

#[test]
fn moneyness_buckets() {
    assert_eq!(calibration::moneyness(0.2), Moneyness::Otm);
    assert_eq!(calibration::moneyness(0.375), Moneyness::Atm);
    assert_eq!(calibration::moneyness(0.625), Moneyness::Atm);
    assert_eq!(calibration::moneyness(0.7), Moneyness::Itm);
}

#[test]
fn implied_vol_escrows_dividends_and_rejects_arbitrage() {
    let env = MarketEnv::with_cash(0.05, &[(0.2, 2.0)]);
    let s_net = 100.0 - 2.0 * (-0.05f64 * 0.2).exp();
    let p = bs_price(true, s_net, 105.0, 0.5, 0.05, 0.0, 0.31);
    let iv = calibration::implied_vol(p, 100.0, 105.0, 0.5, &env).unwrap();
    assert!((iv - 0.31).abs() < 1e-8);
    // below intrinsic under the escrowed spot
    assert!(calibration::implied_vol(0.5, 100.0, 90.0, 0.5, &env).is_err());
    // above the spot
    assert!(calibration::implied_vol(120.0, 100.0, 90.0, 0.5, &env).is_err());
}

#[test]
fn objective_vanishes_at_the_generating_model() {
    let env = MarketEnv::with_cash(0.03, &[(0.1, 1.0)]);
    let m = ModelSpec::Merton {
        sigma_m: 0.22,
        gamma: 1.33,
        mu_psi: -0.12,
        sigma_psi: 0.16,
    };
    let s = settings(7);
    let q = calibration::synthetic_quotes(&m, &env, 100.0, &[90.0, 100.0, 110.0], &[0.25, 0.5], &s).unwrap();
    assert!(calibration::objective(&m, &m, &q, &env, &s).unwrap() < 1e-20);
    let off = m.with_vec(&[0.25, 1.33, -0.12, 0.16]);
    assert!(calibration::objective(&off, &m, &q, &env, &s).unwrap() > 1e-6);
}

#[test]
fn merton_round_trip_with_dividends() {
    let env = MarketEnv::with_cash(0.03, &[(0.1, 1.0), (0.35, 1.0)]);
    let truth = ModelSpec::Merton {
        sigma_m: 0.22,
        gamma: 1.33,
        mu_psi: -0.12,
        sigma_psi: 0.16,
    };
    let s = settings(7);
    let q = calibration::synthetic_quotes(&truth, &env, 100.0, &[80.0, 90.0, 100.0, 110.0, 120.0], &[0.25, 0.5, 1.0], &s)
        .unwrap();
    let init = truth.with_vec(&[0.25, 1.0, -0.1, 0.2]);
    let res = calibration::calibrate(&q, &env, &init, &s).unwrap();
    assert!(res.objective < 1e-8, "{}", res.objective);
    let ident = calibration::identifiable(&truth, &q, &env, &s, 1e-8, 0.05).unwrap();
    for ((a, b), id) in truth.to_vec().iter().zip(res.model.to_vec()).zip(ident) {
        if id {
            assert!(((a - b) / a).abs() < 0.05, "{a} vs {b}");
        }
    }
}

#[test]
fn too_few_quotes_or_strikes_are_rejected() {
    let env = MarketEnv::new(0.03);
    let s = settings(7);
    let m = ModelSpec::Bs { sigma: 0.3 };
    let q = calibration::synthetic_quotes(&m, &env, 100.0, &[100.0], &[0.25, 0.5, 1.0], &s).unwrap();
    assert!(calibration::calibrate(&q, &env, &m, &s).is_err());
    let merton = ModelSpec::Merton {
        sigma_m: 0.2,
        gamma: 1.0,
        mu_psi: 0.0,
        sigma_psi: 0.1,
    };
    let q = calibration::synthetic_quotes(&m, &env, 100.0, &[90.0, 100.0, 110.0], &[0.5], &s).unwrap();
    assert!(calibration::calibrate(&q, &env, &merton, &s).is_err());
}

#[test]
fn quote_csv_round_trip_and_rejects() {
    let mut q = QuoteRecord::synthetic(100.0, 105.0, 0.5, 4.2);
    q.bid = 4.1;
    q.ask = 4.3;
    q.delta = Some(0.45);
    let text = calibration::write_quotes(&[q.clone()]).unwrap();
    let (good, bad) = calibration::read_quotes(text.as_bytes()).unwrap();
    assert_eq!(good, vec![q.clone()]);
    assert!(bad.is_empty());
    assert_eq!(good[0].moneyness(), Some(Moneyness::Atm));

    let mut crossed = q.clone();
    crossed.bid = 4.5;
    let mut text = calibration::write_quotes(&[q, crossed]).unwrap();
    text.push_str("d,u,abc,1,1,1,1,1,0,,\n");
    let (good, bad) = calibration::read_quotes(text.as_bytes()).unwrap();
    assert_eq!(good.len(), 1);
    assert_eq!(bad.iter().map(|r| r.row).collect::<Vec<_>>(), vec![2, 3]);
}
