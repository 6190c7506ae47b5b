use proptest::prelude::*;
use randshift::conformal::ConformalFamily;
use randshift::density::{invariance_residual, invariant_measure, rho_estimate};
use randshift::models::{builtin, ModelSpec, Params};
use randshift::stochastics::{sample_mu, InvariantOrbit};
use randshift::{Engine, EnvironmentKind, FiberPoint, SymbolCodec, TruncationParams};

fn model(name: &str) -> ModelSpec {
    builtin(name, &Params::new()).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn codec_round_trips(z in -1_000_000i64..1_000_000) {
        let s = SymbolCodec::encode(z);
        prop_assert_eq!(SymbolCodec::decode(s), z);
        prop_assert_eq!(SymbolCodec::encode(SymbolCodec::decode(s + 1)), s + 1);
    }

    #[test]
    fn operator_is_positive_and_linear(
        seed in any::<u64>(),
        t in -20i64..20,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        g in values(97),
        h in values(89),
    ) {
        let m = model("random_eta");
        let e = Engine::new(&m, m.default_truncation).unwrap();
        let x = FiberPoint::new(seed, t);
        // random values repeated cyclically over the word space
        let mut fg = e.constant(x, 0.0);
        fg.values.iter_mut().enumerate().for_each(|(i, v)| *v = g[i % g.len()]);
        let mut fh = e.constant(x, 0.0);
        fh.values.iter_mut().enumerate().for_each(|(i, v)| *v = h[i % h.len()]);
        let lhs = e.apply(&fg.combine(a, &fh, b).unwrap()).unwrap();
        let rhs = e.apply(&fg).unwrap().combine(a, &e.apply(&fh).unwrap(), b).unwrap();
        for (u, v) in lhs.values.iter().zip(&rhs.values) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
        let abs = fg.map(|_, v| v.abs());
        prop_assert!(e.apply(&abs).unwrap().values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn normalized_operator_preserves_integrals(seed in any::<u64>()) {
        let m = model("random_eta");
        let e = Engine::new(&m, m.default_truncation).unwrap();
        let x = FiberPoint::new(seed, 0);
        let fam = ConformalFamily::build(&e, x, 0, 1, 30).unwrap();
        let g = e.function(x, |w| (w[0] % 3) as f64 - 0.7 * (w[1] % 2) as f64);
        let lg = e.apply_normalized(&g, fam.lambdas.get(0).unwrap()).unwrap();
        let before = fam.nu(0).unwrap().integrate(&g).unwrap();
        let after = fam.nu(1).unwrap().integrate(&lg).unwrap();
        let slack = fam.nu(0).unwrap().tail_mass_bound + fam.nu(1).unwrap().tail_mass_bound;
        prop_assert!((before - after).abs() <= 4.0 * slack + 1e-10, "{before} vs {after}");
    }

    #[test]
    fn density_is_positive_and_normalized(seed in any::<u64>()) {
        let m = model("random_eta");
        let e = Engine::new(&m, m.default_truncation).unwrap();
        let x = FiberPoint::new(seed, 0);
        let fam = ConformalFamily::build(&e, x, -25, 1, 25).unwrap();
        let rho = rho_estimate(&e, &fam, 0, 25).unwrap();
        prop_assert!(rho.min() > 0.0);
        prop_assert!((fam.nu(0).unwrap().integrate(&rho).unwrap() - 1.0).abs() < 1e-12);
        let mu = invariant_measure(&rho, fam.nu(0).unwrap()).unwrap();
        let mu1 = invariant_measure(&rho_estimate(&e, &fam, 1, 25).unwrap(), fam.nu(1).unwrap()).unwrap();
        prop_assert!(invariance_residual(&mu, &mu1).unwrap() < 1e-8);
    }

    #[test]
    fn periodic_environment_repeats(seed in any::<u64>(), t in -50i64..50, p in 1u32..5) {
        let m = model("random_eta").with_environment(EnvironmentKind::Periodic { period: p }).unwrap();
        let env = &m.environment;
        let (a, b) = (env.matrix_at(FiberPoint::new(seed, t)), env.matrix_at(FiberPoint::new(seed, t.rem_euclid(p as i64))));
        for i in 0..12 {
            for j in 0..12 {
                prop_assert_eq!(a.allows(i, j), b.allows(i, j));
            }
        }
    }

    #[test]
    fn sampled_paths_are_admissible(seed in any::<u64>()) {
        let m = model("random_eta");
        let e = Engine::new(&m, m.default_truncation).unwrap();
        let x = FiberPoint::new(seed % 4, 0);
        let orbit = InvariantOrbit::build(&e, x, 24, 20, 20).unwrap();
        let batch = sample_mu(&orbit, 24, 20, seed).unwrap();
        for p in &batch.paths {
            for (k, w) in p.windows(2).enumerate() {
                prop_assert!(m.environment.matrix_at(x.advance(k as i64)).allows(w[0], w[1]));
            }
        }
    }
}

#[test]
fn wider_truncation_only_adds_preimages() {
    let m = model("growing_walk");
    let x = FiberPoint::new(0, 0);
    let small = Engine::new(&m, TruncationParams::new(12, 3).unwrap()).unwrap();
    let large = Engine::new(&m, TruncationParams::new(20, 3).unwrap()).unwrap();
    let ls = small.apply(&small.constant(x, 1.0)).unwrap();
    let ll = large.apply(&large.constant(x, 1.0)).unwrap();
    for (w, v) in ls.space.words().zip(&ls.values) {
        let big = ll.get(w).unwrap();
        assert!(big >= *v && big <= *v + ls.ledger + 1e-15, "{w:?}: {v} -> {big}");
    }
}
