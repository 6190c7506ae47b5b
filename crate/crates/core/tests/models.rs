use randshift::audit::{audit, AuditOptions};
use randshift::environment::SampleSet;
use randshift::models::{builtin, Params, BUILTINS};
use randshift::Engine;

/// Every built-in model's documented properties agree with the audit.
#[test]
fn audits_match_documented_properties() {
    for name in BUILTINS {
        let m = builtin(name, &Params::new()).unwrap();
        let e = Engine::new(&m, m.default_truncation).unwrap();
        let samples = SampleSet::for_env(&m.environment, 4, 1, 0, 8);
        let r = audit(
            &e,
            &samples,
            &AuditOptions::for_truncation(m.default_truncation.max_symbol),
        )
        .unwrap();
        assert!(r.disagreements.is_empty(), "{name}: {:?}", r.disagreements);
        assert_eq!(r.fine, m.documented.fine(), "{name}: {:?}", r.verdicts());
    }
}

#[test]
fn descriptions_serialize() {
    for name in BUILTINS {
        let d = builtin(name, &Params::new()).unwrap().describe();
        let json = serde_json::to_value(&d).unwrap();
        assert_eq!(json["name"], *name);
    }
}
