//! JSON report rendering. Every report is an object tagged
//! `"schema": "cubiform/1"` with a `"kind"` discriminator, so downstream
//! tooling can dispatch without guessing.

use crate::embed::EmbeddingCertificate;
use crate::poly::{SparsePoly, Vector};
use crate::quad::{Exactness, Rank, SosDecomposition};
use crate::rrk::ResidualRankReport;
use crate::tables::GoodTable;
use serde_json::{json, Value};

pub const SCHEMA: &str = "cubiform/1";

fn rank_value(r: &Rank) -> Value {
    match r {
        Rank::Finite(n) => json!(n),
        Rank::Infinite => json!("inf"),
    }
}

fn mode_value(e: Exactness) -> Value {
    match e {
        Exactness::Exact => json!("exact"),
        Exactness::Heuristic => json!("heuristic"),
    }
}

fn vector_value(v: &Vector) -> Value {
    let map: serde_json::Map<String, Value> = v
        .iter()
        .map(|(var, c)| (var.to_string(), json!(c.to_string())))
        .collect();
    Value::Object(map)
}

/// A residual-rank computation: value, exactness, independent derivative
/// directions, and (in heuristic mode) the per-window rank evidence.
pub fn rrk_report(r: &ResidualRankReport) -> Value {
    json!({
        "schema": SCHEMA,
        "kind": "rrk",
        "value": rank_value(&r.value),
        "mode": mode_value(r.mode),
        "basis": r.basis,
        "windows": r.windows.iter().map(|w| json!({
            "window": w.window,
            "rank": w.rank,
        })).collect::<Vec<_>>(),
    })
}

/// An embedding certificate: the substitution rows (explicit and tail
/// rules), the windows checked, and the verdict.
pub fn certificate_report(c: &EmbeddingCertificate) -> Value {
    json!({
        "schema": SCHEMA,
        "kind": "embedding",
        "source": c.source.to_string(),
        "target": c.target.to_string(),
        "substitution": c.substitution.pairs_for_report().iter().map(|(t, i)| json!({
            "target": t,
            "image": i,
        })).collect::<Vec<_>>(),
        "verified": c.verified_windows.iter().map(|(n, ok)| json!({
            "N": n,
            "ok": ok,
        })).collect::<Vec<_>>(),
        "all_verified": c.all_verified(),
    })
}

/// An isogeny-class label.
pub fn classify_report(label: &Rank, mode: Exactness) -> Value {
    json!({
        "schema": SCHEMA,
        "kind": "classify",
        "label": rank_value(label),
        "mode": mode_value(mode),
    })
}

/// A sum-of-cubes decomposition of a finite cubic.
pub fn cubes_report(input: &SparsePoly, cubes: &[SparsePoly]) -> Value {
    json!({
        "schema": SCHEMA,
        "kind": "cubes",
        "input": input.to_string(),
        "cubes": cubes.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
        "count": cubes.len(),
    })
}

/// A sum-of-squares decomposition: explicit squared linear forms plus
/// pass-through square streams.
pub fn sos_report(input: &str, d: &SosDecomposition) -> Value {
    json!({
        "schema": SCHEMA,
        "kind": "sos",
        "input": input,
        "squares": d.finite.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
        "streams": d.streams.iter().map(|s| json!({
            "scale": s.scale.to_string(),
            "family": s.family,
            "fixed": s.fixed,
            "start": s.start,
        })).collect::<Vec<_>>(),
        "count": d.finite.len(),
    })
}

/// A good-table dump: rows of coordinate vectors with the goodness verdict.
pub fn table_report(t: &GoodTable) -> Value {
    let good = t.check_good();
    json!({
        "schema": SCHEMA,
        "kind": "table",
        "mode": t.mode().to_string(),
        "ambient": t.ambient().to_string(),
        "rows": t.rows().iter().map(|(v, ws)| json!({
            "v": vector_value(v),
            "w": ws.iter().map(vector_value).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "final_row": t.final_row().iter().map(vector_value).collect::<Vec<_>>(),
        "good": good.ok,
        "violation": good.violation,
    })
}

/// One suite's outcome inside a selftest run.
pub fn suite_entry(name: &str, trials: u32, failures: &[u64], millis: u128) -> Value {
    json!({
        "name": name,
        "trials": trials,
        "passed": trials as usize - failures.len(),
        "failing_seeds": failures,
        "millis": millis,
    })
}

/// The aggregated selftest report.
pub fn selftest_report(max_tower_depth: usize, suites: Vec<Value>) -> Value {
    let ok = suites
        .iter()
        .all(|s| s["failing_seeds"].as_array().map(Vec::is_empty).unwrap_or(false));
    json!({
        "schema": SCHEMA,
        "kind": "selftest",
        "ok": ok,
        "max_tower_depth": max_tower_depth,
        "suites": suites,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canon;
    use crate::rrk::residual_rank;
    use crate::scalar::Field;

    #[test]
    fn rrk_report_formats_infinite_and_finite_values() {
        let f = Field::default_field();
        let inf = residual_rank(&canon::v_infinity(&f)).unwrap();
        let r = rrk_report(&inf);
        assert_eq!(r["schema"], SCHEMA);
        assert_eq!(r["value"], "inf");
        assert_eq!(r["mode"], "exact");
        let two = residual_rank(&canon::v_r(&f, 2)).unwrap();
        let r = rrk_report(&two);
        assert_eq!(r["value"], 2);
    }

    #[test]
    fn certificate_report_carries_windows_and_rows() {
        let f = Field::default_field();
        let source = canon::v_r(&f, 1);
        let cert = crate::embed::embed_into_v_infinity(&source, &[5, 10]).unwrap();
        let r = certificate_report(&cert);
        assert_eq!(r["kind"], "embedding");
        assert!(r["all_verified"].as_bool().unwrap());
        let verified = r["verified"].as_array().unwrap();
        assert_eq!(verified.len(), 2);
        assert_eq!(verified[0]["N"], 5);
        assert!(!r["substitution"].as_array().unwrap().is_empty());
    }
}
