use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gbl_core::harness::{find_case, run_case, TableReport};
use gbl_core::Method;

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        out.insert(rel, fs::read(&entry).unwrap());
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn artifacts_are_byte_identical_across_runs() {
    let mut case = find_case("case2").unwrap();
    case.budget.epochs = 4;
    case.budget.counts = case.budget.counts.reduced(40);
    case.eval.n_x = 64;
    let methods = [Method::Exact, Method::Weno5, Method::Cpinn];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_case(&case, &methods, Some(a.path())).unwrap();
    let rb = run_case(&case, &methods, Some(b.path())).unwrap();
    assert!(ra.failures.is_empty(), "{:?}", ra.failures);
    assert_eq!(ra.rows, rb.rows);

    let sa = snapshot(a.path());
    let sb = snapshot(b.path());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        if k.ends_with("manifest.json") {
            continue;
        }
        assert!(v == &sb[k], "{k} differs between runs");
    }
    for f in [
        "metrics.csv",
        "case2-exact.csv",
        "case2-weno5.csv",
        "case2-cpinn.csv",
        "case2-overlay.svg",
        "case2-cpinn/metrics-seed1234.csv",
    ] {
        assert!(sa.contains_key(f), "missing {f}: {:?}", sa.keys());
    }
    let metrics = String::from_utf8(sa["metrics.csv"].clone()).unwrap();
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn weno_failure_is_recorded_not_fatal() {
    let case = find_case("case1-nc").unwrap();
    let r = run_case(&case, &[Method::Weno5, Method::Exact], None).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].method, Method::Exact);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].0, Method::Weno5);
}

#[test]
fn empty_table_renders_header_only() {
    let t = TableReport {
        budget: gbl_core::harness::Budget::Desk,
        entries: Vec::new(),
        failures: vec![("case9/cpinn".into(), "boom".into())],
    };
    let s = t.render();
    assert!(s.starts_with("case"));
    assert!(s.contains("case9/cpinn: error: boom"));
}
