use speedbump::session::*;
use speedbump::Execution;

fn config(groups: usize, policy: AgentPolicy, seed: u64) -> SessionConfig {
    SessionConfig { n_groups: groups, policies: vec![policy], master_seed: seed, ..Default::default() }
}

fn csv_bytes(records: &[RoundRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf).unwrap();
    buf
}

#[test]
fn record_counts() {
    let recs = run_session(&config(18, AgentPolicy::UniformRandom, 1), Execution::Parallel).unwrap();
    assert_eq!(recs.len(), 1728);
    assert_eq!(analysis_records(&recs).unwrap().len(), 1512);
    let recs16 = run_session(&config(16, AgentPolicy::UniformRandom, 1), Execution::Parallel).unwrap();
    assert_eq!(analysis_records(&recs16).unwrap().len(), 1344);
}

#[test]
fn fixed_fraction_is_exact() {
    let recs = run_session(&config(4, AgentPolicy::FixedFraction { fraction: 0.75 }, 3), Execution::Sequential).unwrap();
    for r in recs.iter().filter(|r| r.bump_mean == 0.0) {
        assert_eq!(r.invest_frac, 0.75);
        assert!(!r.clamped);
    }
}

#[test]
fn out_of_range_policy_is_clamped_and_flagged() {
    let recs = run_session(&config(2, AgentPolicy::FixedFraction { fraction: 1.4 }, 3), Execution::Sequential).unwrap();
    assert!(recs.iter().all(|r| r.clamped && r.invest == r.endowment));
    let noisy = run_session(&config(2, AgentPolicy::NoisyBestResponse { scale: 0.3 }, 3), Execution::Sequential).unwrap();
    assert!(noisy.iter().any(|r| r.clamped));
    assert!(noisy.iter().all(|r| (0.0..=1.0).contains(&r.invest_frac)));
}

#[test]
fn records_are_sorted_and_tiers_constant() {
    let recs = run_session(&config(6, AgentPolicy::UniformRandom, 9), Execution::Parallel).unwrap();
    let keys: Vec<_> = recs.iter().map(|r| (r.group_id, r.round, r.participant_id)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    for g in 1..=6 {
        let tiers: Vec<_> = recs.iter().filter(|r| r.group_id == g).map(|r| r.tier.as_str()).collect();
        assert!(tiers.iter().all(|t| *t == tiers[0]));
    }
}

#[test]
fn payoffs_are_conserved() {
    let recs = run_session(&config(5, AgentPolicy::UniformRandom, 11), Execution::Parallel).unwrap();
    for chunk in recs.chunks(3) {
        let omega = chunk[0].endowment;
        let invested: f64 = chunk.iter().map(|r| r.invest).sum();
        let won = chunk.iter().filter(|r| r.won).count();
        assert!(won <= 1);
        let total: f64 = chunk.iter().map(|r| r.payoff).sum();
        assert!((total - (3.0 * omega - invested + 100.0 * won as f64)).abs() < 1e-9);
    }
}

#[test]
fn won_previous_is_the_lag_of_won() {
    let recs = run_session(&config(3, AgentPolicy::UniformRandom, 5), Execution::Sequential).unwrap();
    for p in recs.iter().map(|r| r.participant_id).collect::<std::collections::BTreeSet<_>>() {
        let mine: Vec<_> = recs.iter().filter(|r| r.participant_id == p).collect();
        assert!(!mine[0].won_previous);
        for w in mine.windows(2) {
            assert_eq!(w[1].won_previous, w[0].won);
        }
    }
}

#[test]
fn same_seed_same_bytes_any_execution() {
    let cfg = config(4, AgentPolicy::NoisyBestResponse { scale: 0.05 }, 21);
    let a = csv_bytes(&run_session(&cfg, Execution::Parallel).unwrap());
    let b = csv_bytes(&run_session(&cfg, Execution::Sequential).unwrap());
    assert_eq!(a, b);
    let other = csv_bytes(&run_session(&config(4, AgentPolicy::NoisyBestResponse { scale: 0.05 }, 22), Execution::Parallel).unwrap());
    assert_ne!(a, other);
}

#[test]
fn csv_round_trip() {
    let recs = run_session(&config(2, AgentPolicy::UniformRandom, 8), Execution::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rounds.csv");
    export_csv(&recs, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    let back = read_csv(&path).unwrap();
    assert_eq!(back.len(), recs.len());
    // the file holds six significant digits; rereading and rewriting is lossless
    assert_eq!(csv_bytes(&back), text.as_bytes());
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(format_sig6(a.invest), format_sig6(b.invest));
        assert_eq!((a.won, a.bump_symmetric, &a.tier), (b.won, b.bump_symmetric, &b.tier));
        assert!((a.arrival_time - b.arrival_time).abs() <= 5e-6 * a.arrival_time.abs());
    }
}

#[test]
fn empty_exports_are_rejected() {
    let recs = run_session(&config(1, AgentPolicy::UniformRandom, 8), Execution::Parallel).unwrap();
    let training: Vec<_> = recs.into_iter().filter(|r| r.training).collect();
    assert!(analysis_records(&training).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    assert!(export_csv(&[], &path).is_err());
    assert!(!path.exists());
}

#[test]
fn unwritable_path_is_io_error() {
    let recs = run_session(&config(1, AgentPolicy::UniformRandom, 8), Execution::Parallel).unwrap();
    let err = export_csv(&recs, "/nonexistent-dir/x.csv").unwrap_err();
    assert!(matches!(err, speedbump::Error::Io(_)));
}

#[test]
fn equilibrium_agents_cut_investment_under_asymmetric_bumps() {
    let cfg = SessionConfig { n_groups: 9, tier_assignment: TierAssignment::Explicit(vec!["high-cost".into(), "medium-cost".into(), "low-cost".into()]), ..config(9, AgentPolicy::Equilibrium, 7) };
    let recs = analysis_records(&run_session(&cfg, Execution::Parallel).unwrap()).unwrap();
    let mean = |f: &dyn Fn(&RoundRecord) -> bool| {
        let v: Vec<f64> = recs.iter().filter(|r| f(r)).map(|r| r.invest_frac).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let asym = mean(&|r| r.bump_symmetric == Some(false));
    let none = mean(&|r| r.bump_symmetric.is_none());
    assert!(asym < none, "asymmetric {asym} vs no bump {none}");
}

#[test]
fn manifest_records_provenance() {
    let cfg = config(3, AgentPolicy::Equilibrium, 4);
    let m = SessionManifest::new(&cfg, 288).unwrap();
    assert_eq!(m.group_tiers, cfg.resolve_tiers().unwrap());
    assert_eq!(m.schedule_hash, build_schedule().hash());
    assert_eq!(m.schedule_hash.len(), 64);
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<SessionManifest>(&json).unwrap(), m);
}
