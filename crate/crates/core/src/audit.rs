//! The fineness audit: every structural and operator condition on one
//! sample set, compared against the claims each model documents.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::environment::SampleSet;
use crate::error::{Error, Result};
use crate::models::Claim;
use crate::operator::{check_condition_a, check_condition_b, check_condition_c, Engine};
use crate::potential::check_summability;
use crate::shift::{check_bounded_access, check_finite_range, check_mixing, CheckBounds, ConditionReport, Symbol};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AuditOptions {
    pub horizon: usize,
    /// Smallest admissible `inf L1|[e]` for (A).
    pub floor_a: f64,
    /// (B) passes when the majorant beyond the window is below this
    /// fraction of the peak of the profile.
    pub threshold_b: f64,
}

impl AuditOptions {
    pub fn for_truncation(max_symbol: Symbol) -> Self {
        Self {
            horizon: 2 * (max_symbol as usize + 1) + 4,
            floor_a: 1e-12,
            threshold_b: 0.25,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinenessReport {
    pub conditions: Vec<ConditionReport>,
    /// `(condition, documented claim)` pairs whose verdict contradicts the claim.
    pub disagreements: Vec<(String, Claim)>,
    pub kappa: f64,
    pub strongly_summable: bool,
    pub fine: bool,
}

impl FinenessReport {
    pub fn get(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.condition == name)
    }

    pub fn verdicts(&self) -> BTreeMap<String, bool> {
        self.conditions
            .iter()
            .map(|c| (c.condition.clone(), c.certified))
            .collect()
    }
}

fn report(
    name: &str,
    certified: bool,
    bounds: CheckBounds,
    random: bool,
    witnesses: Vec<serde_json::Value>,
    detail: serde_json::Value,
) -> ConditionReport {
    ConditionReport {
        condition: name.into(),
        certified,
        sampled_not_uniform: random,
        bounds,
        witnesses,
        detail,
    }
}

/// Structural failures become uncertified reports, not errors.
fn structural<T: Serialize>(name: &str, r: Result<T>, bounds: CheckBounds, random: bool) -> Result<ConditionReport> {
    Ok(match r {
        Ok(v) => report(
            name,
            true,
            bounds,
            random,
            Vec::new(),
            serde_json::to_value(v).expect("serializable"),
        ),
        Err(e @ (Error::NotFiniteRange { .. } | Error::NotBoundedAccess { .. } | Error::NotMixing { .. })) => {
            report(name, false, bounds, random, vec![json!(e.to_string())], json!(null))
        }
        Err(e) => return Err(e),
    })
}

pub fn audit(engine: &Engine<'_>, samples: &SampleSet, opts: &AuditOptions) -> Result<FinenessReport> {
    let model = engine.model;
    let env = &model.environment;
    let top = engine.trunc.max_symbol;
    let random = env.is_random();
    let letters: Vec<Symbol> = (0..=top).collect();
    let bounds = |h: Option<usize>| CheckBounds::new(top, h, samples);
    let mut conditions = Vec::new();

    let mixing = check_mixing(env, &letters, samples, opts.horizon, top);
    conditions.push(report(
        "mixing",
        mixing.failures.is_empty(),
        bounds(Some(opts.horizon)),
        random,
        mixing.failures.iter().take(8).map(|p| json!(p)).collect(),
        serde_json::to_value(&mixing).expect("serializable"),
    ));
    conditions.push(structural(
        "finite_range",
        check_finite_range(env, &letters, samples, Symbol::MAX),
        bounds(None),
        random,
    )?);
    let scan = 4 * (top + 1);
    conditions.push(structural(
        "bounded_access",
        check_bounded_access(env, &letters, samples, scan),
        bounds(None),
        random,
    )?);

    let summ = check_summability(engine, samples);
    let strongly_summable = summ.as_ref().is_ok_and(|s| s.strong);
    conditions.push(match summ {
        Ok(s) => {
            let ok = s.m_bound.is_finite() && s.tail.is_finite();
            report(
                "summable",
                ok,
                bounds(None),
                random,
                Vec::new(),
                serde_json::to_value(&s).expect("serializable"),
            )
        }
        Err(Error::SummabilityUncertifiable(why)) => {
            report("summable", false, bounds(None), random, vec![json!(why)], json!(null))
        }
        Err(e) => return Err(e),
    });

    let a = check_condition_a(engine, samples, opts.floor_a)?;
    conditions.push(report(
        "condition_a",
        a.pass,
        bounds(None),
        random,
        a.witness.iter().map(|w| json!(w)).collect(),
        serde_json::to_value(&a).expect("serializable"),
    ));
    let b = check_condition_b(engine, samples, opts.threshold_b)?;
    conditions.push(report(
        "condition_b",
        b.pass,
        bounds(None),
        random,
        if b.pass { Vec::new() } else { vec![json!(b.reason)] },
        serde_json::to_value(&b).expect("serializable"),
    ));
    let c = check_condition_c(engine, samples, &model.anchor_set)?;
    conditions.push(report(
        "condition_c",
        c.pass,
        bounds(None),
        random,
        c.witness.iter().map(|w| json!(w)).collect(),
        serde_json::to_value(&c).expect("serializable"),
    ));

    let doc = &model.documented;
    let claims = [
        ("mixing", doc.mixing),
        ("finite_range", doc.finite_range),
        ("bounded_access", doc.bounded_access),
        ("summable", doc.summable),
        ("condition_a", doc.condition_a),
        ("condition_b", doc.condition_b),
        ("condition_c", doc.condition_c),
    ];
    let mut disagreements = Vec::new();
    for (name, claim) in claims {
        let certified = conditions.iter().any(|r| r.condition == name && r.certified);
        if certified == (claim == Claim::Fails) {
            disagreements.push((name.to_string(), claim));
        }
    }
    if strongly_summable == (doc.strongly_summable == Claim::Fails) {
        disagreements.push(("strongly_summable".into(), doc.strongly_summable));
    }
    let fine = conditions.iter().all(|r| r.certified);
    Ok(FinenessReport {
        conditions,
        disagreements,
        kappa: c.kappa_measured,
        strongly_summable,
        fine,
    })
}
