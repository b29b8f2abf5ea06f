use std::fs;

use towerlab::clicks::simulate;
use towerlab::corpus;
use towerlab::data::{preprocess, LabelTable, Split};
use towerlab::diagnostics::build_swap_graph;
use towerlab::experiment::{run, ExperimentConfig};
use towerlab::policy::{expert_policy, LoggingPolicy};
use towerlab::report::report;

fn small(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        "alpha = 1\ntau = 0, 0.5, 1\nseeds = 1, 2, 3\n\
         train_sessions = 2000\nvalid_sessions = 1000\npolicy_epochs = 10\nmax_epochs = 2\n",
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

#[test]
fn grid_runs_resumes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let first = run(&cfg, 2).unwrap();
    assert_eq!(first.len(), 9);
    assert!(first.iter().all(|r| r.computed));
    let dirs: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(dirs.len(), 9);
    assert!(dirs.iter().all(|d| !d.starts_with('.')));
    for r in &first {
        for f in ["config.snapshot", "metrics.csv", "theta.csv", "model.params"] {
            assert!(r.dir.join(f).is_file(), "{f}");
        }
        let metrics = fs::read_to_string(r.dir.join("metrics.csv")).unwrap();
        assert_eq!(
            metrics.lines().next().unwrap(),
            "run_id,alpha,tau,tower,loss,seed,rank,theta_true,theta_hat,abs_err,ndcg10,swap_connected"
        );
        assert_eq!(metrics.lines().count(), 11);
    }

    let before = fs::read(first[4].dir.join("metrics.csv")).unwrap();
    let second = run(&cfg, 1).unwrap();
    assert!(second.iter().all(|r| !r.computed));
    assert_eq!(
        first.iter().map(|r| &r.run_id).collect::<Vec<_>>(),
        second.iter().map(|r| &r.run_id).collect::<Vec<_>>()
    );
    assert_eq!(before, fs::read(first[4].dir.join("metrics.csv")).unwrap());

    let rep = report(tmp.path()).unwrap();
    assert_eq!(rep.rows.len(), 3 * 10);
    assert!(rep.rows.iter().all(|r| r.n_seeds == 3 && !r.single_seed));
}

#[test]
fn unfinished_cells_are_recomputed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.taus = vec![0.5];
    cfg.seeds = vec![1];
    let first = run(&cfg, 1).unwrap();
    fs::remove_file(first[0].dir.join("metrics.csv")).unwrap();
    let again = run(&cfg, 1).unwrap();
    assert!(again[0].computed);
}

#[test]
fn swap_edges_grow_with_exploration() {
    let (ds, _) = preprocess(&corpus::bundled(Split::Train).unwrap(), 25).unwrap();
    let labels = LabelTable::expert(&ds);
    let scores = expert_policy(&labels);
    let mut prev = 0;
    for tau in [0.0, 0.01, 0.05, 0.2, 1.0] {
        let policy = LoggingPolicy::interpolated(&ds, &scores, 1.0, tau, 3).unwrap();
        let log = simulate(&ds, &labels, &policy, 20_000, 3).unwrap();
        let graph = build_swap_graph(&log);
        let edges = graph.edges.len();
        if tau == 0.0 {
            assert_eq!(edges, 0);
            assert_eq!(graph.components.len(), 10);
        } else {
            assert!(graph.is_connected(), "tau={tau}");
        }
        assert!(edges >= prev, "tau={tau}: {edges} < {prev}");
        prev = edges;
    }
    assert_eq!(prev, 45);
}
