//! Regression fixtures: one task per family at a fixed seed. Regenerate with
//! `UPDATE_GOLDEN=1 cargo test -p stationary-np --test golden_tasks` after an
//! intentional generator change.

use std::path::PathBuf;

use stationary_np::taskgen::{generate_task, Counts, Family, TaskDump, TaskGenConfig};
use stationary_np::Task64;

const SEED: u64 = 20_240_601;
const TOL: f64 = 1e-9;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_tasks.json")
}

fn current() -> Vec<Task64> {
    Family::ALL
        .iter()
        .map(|&f| {
            let cfg = TaskGenConfig { families: vec![f], counts: Counts { nc_min: 3, nc_max: 6, nt_min: None, nt_max: 8 }, ..TaskGenConfig::default() };
            generate_task(f, &cfg, SEED).unwrap()
        })
        .collect()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= TOL * (1.0 + y.abs()))
}

#[test]
fn generators_match_golden_fixtures() {
    let tasks = current();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        let dump = TaskDump::new(Default::default(), tasks);
        std::fs::write(fixture(), dump.to_json().unwrap()).unwrap();
        return;
    }
    let golden = TaskDump::from_json(&std::fs::read_to_string(fixture()).unwrap()).unwrap();
    assert_eq!(golden.tasks.len(), tasks.len());
    for (g, t) in golden.tasks.iter().zip(&tasks) {
        assert_eq!(g.meta.family, t.meta.family);
        assert_eq!(g.meta.seed, t.meta.seed);
        assert_eq!(g.meta.hyper.keys().collect::<Vec<_>>(), t.meta.hyper.keys().collect::<Vec<_>>());
        for (k, v) in &g.meta.hyper {
            assert!(close(&[t.meta.hyper[k]], &[*v]), "{} hyper {k}", g.meta.family);
        }
        assert_eq!(g.channels.len(), t.channels.len());
        for (gc, tc) in g.channels.iter().zip(&t.channels) {
            for (name, a, b) in [("xc", &tc.xc, &gc.xc), ("yc", &tc.yc, &gc.yc), ("xt", &tc.xt, &gc.xt), ("yt", &tc.yt, &gc.yt)] {
                assert!(close(a, b), "{} {name} drifted", g.meta.family);
            }
        }
    }
}

#[test]
fn golden_dump_survives_binary_round_trip() {
    let golden = TaskDump::from_json(&std::fs::read_to_string(fixture()).unwrap()).unwrap();
    assert_eq!(TaskDump::from_binary(&golden.to_binary().unwrap()).unwrap(), golden);
}
