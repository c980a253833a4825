use std::sync::Arc;

use cdti_core::elicitation::{evaluate_pairs, extract_perfect};
use cdti_core::experiments::{cv_propensity, DEFAULT_CV_FOLDS};
use cdti_core::matching::{propose, StrategyConfig, StrategyKind};
use cdti_core::scm::{OutcomeScm, StandInConfig, StandInScm};
use cdti_core::Dataset;
use cdti_session::model::*;
use cdti_session::{ErrorCode, Service};

fn stand_in(n: usize) -> Dataset {
    StandInScm::new(StandInConfig::default(), 0).simulate(n, 3).unwrap()
}

fn upload(ds: &Dataset) -> DatasetUpload {
    DatasetUpload { csv: String::from_utf8(ds.csv_bytes().unwrap()).unwrap(), roles: ds.roles() }
}

fn setup(n: usize) -> (tempfile::TempDir, Service, String) {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::open(dir.path()).unwrap();
    let info = svc.add_dataset(&upload(&stand_in(n))).unwrap();
    (dir, svc, info.dataset_id)
}

fn create(svc: &Service, dataset: &str, kind: StrategyKind, budget: usize) -> SessionInfo {
    svc.create_session(&CreateSession { dataset_id: dataset.into(), strategy: kind, budget, config: None }).unwrap()
}

fn cite(pair_id: usize, names: &[&str]) -> AnnotationInput {
    AnnotationInput {
        pair_id,
        explanations: names.iter().map(|n| Explanation { name: n.to_string(), origin: Origin::FreeText }).collect(),
        skipped: false,
        annotator_id: "a1".into(),
    }
}

fn skip(pair_id: usize) -> AnnotationInput {
    AnnotationInput { pair_id, explanations: vec![], skipped: true, annotator_id: "a1".into() }
}

#[test]
fn create_with_budget() {
    let (_d, svc, ds) = setup(300);
    let s = create(&svc, &ds, StrategyKind::ZMatch, 10);
    assert_eq!(s.proposals, 10);
    assert_eq!(s.status, SessionStatus::Active);
    assert_eq!(s.cursor, 0);
    assert!(s.note.is_none());
}

#[test]
fn oversized_budget_notes_shortfall() {
    let (_d, svc, ds) = setup(40);
    let s = create(&svc, &ds, StrategyKind::ZDom, 10_000);
    assert!(s.proposals < 10_000);
    assert!(s.note.unwrap().contains("short"));
}

#[test]
fn unknown_ids() {
    let (_d, svc, _) = setup(50);
    let e = svc.create_session(&CreateSession { dataset_id: "nope".into(), strategy: StrategyKind::ZMatch, budget: 3, config: None }).unwrap_err();
    assert_eq!(e.code, ErrorCode::NotFound);
    assert_eq!(svc.next_pair("missing").unwrap_err().code, ErrorCode::NotFound);
    assert_eq!(svc.report("missing").unwrap_err().code, ErrorCode::NotFound);
    let e = svc.create_session(&CreateSession { dataset_id: "../x".into(), strategy: StrategyKind::ZMatch, budget: 3, config: None }).unwrap_err();
    assert_eq!(e.code, ErrorCode::NotFound);
}

#[test]
fn proposals_follow_selection_exactly() {
    let (_d, svc, id) = setup(400);
    let ds = svc.dataset(&id).unwrap();
    for kind in [StrategyKind::ZDom, StrategyKind::PiMatch] {
        let s = create(&svc, &id, kind, 15);
        let cfg = StrategyConfig::new(kind);
        let pi = kind.needs_propensity().then(|| cv_propensity(&ds, DEFAULT_CV_FOLDS, cfg.seed).unwrap());
        let expected = propose(&ds, pi.as_deref(), &cfg, 15).unwrap();
        for (k, p) in expected.pairs.iter().enumerate() {
            let got = svc.next_pair(&s.session_id).unwrap();
            assert_eq!((got.pair_id, got.treated_unit, got.untreated_unit), (k, p.i, p.j));
            svc.submit(&s.session_id, &skip(k)).unwrap();
        }
        assert_eq!(svc.next_pair(&s.session_id).unwrap_err().code, ErrorCode::Exhausted);
    }
}

#[test]
fn next_is_idempotent_and_table_is_observed_only() {
    let (_d, svc, id) = setup(300);
    let s = create(&svc, &id, StrategyKind::ZMatch, 3);
    let a = svc.next_pair(&s.session_id).unwrap();
    let b = svc.next_pair(&s.session_id).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.remaining, 3);
    let ds = svc.dataset(&id).unwrap();
    assert_eq!(a.covariates.len(), ds.dz());
    for (row, name) in a.covariates.iter().zip(&ds.z_names) {
        assert_eq!(&row.name, name);
        let want = if row.treated > row.untreated {
            Larger::Treated
        } else if row.untreated > row.treated {
            Larger::Untreated
        } else {
            Larger::Equal
        };
        assert_eq!(row.larger, want);
    }
    assert!(a.covariates.iter().all(|r| !ds.u_names.contains(&r.name)));
}

#[test]
fn submission_rules() {
    let (_d, svc, id) = setup(300);
    let s = create(&svc, &id, StrategyKind::ZMatch, 3);
    let sid = &s.session_id;
    let ack = svc.submit(sid, &cite(0, &["dyspnea"])).unwrap();
    assert_eq!((ack.cursor, ack.remaining), (1, 2));
    let e = svc.submit(sid, &cite(0, &["dyspnea"])).unwrap_err();
    assert_eq!(e.code, ErrorCode::StalePair);
    assert_eq!(svc.session(sid).unwrap().cursor, 1);
    assert_eq!(svc.submit(sid, &cite(2, &["x"])).unwrap_err().code, ErrorCode::ValidationError);
    assert_eq!(svc.submit(sid, &cite(1, &[])).unwrap_err().code, ErrorCode::ValidationError);
    assert_eq!(svc.submit(sid, &cite(1, &["  "])).unwrap_err().code, ErrorCode::ValidationError);
    let mut both = skip(1);
    both.explanations = cite(1, &["x"]).explanations;
    assert_eq!(svc.submit(sid, &both).unwrap_err().code, ErrorCode::ValidationError);
    let mut anon = cite(1, &["x"]);
    anon.annotator_id = "".into();
    assert_eq!(svc.submit(sid, &anon).unwrap_err().code, ErrorCode::ValidationError);
    let bad_col = AnnotationInput { explanations: vec![Explanation { name: "not_a_column".into(), origin: Origin::ObservedColumn }], ..cite(1, &[]) };
    assert_eq!(svc.submit(sid, &bad_col).unwrap_err().code, ErrorCode::ValidationError);
    assert_eq!(svc.session(sid).unwrap().cursor, 1);
    svc.submit(sid, &skip(1)).unwrap();
    let ack = svc.submit(sid, &cite(2, &["fever"])).unwrap();
    assert_eq!(ack.status, SessionStatus::Exhausted);
    assert_eq!(svc.submit(sid, &cite(3, &["fever"])).unwrap_err().code, ErrorCode::Exhausted);
    assert_eq!(svc.submit(sid, &cite(2, &["fever"])).unwrap_err().code, ErrorCode::StalePair);
}

#[test]
fn report_counts_and_ranks() {
    let (_d, svc, id) = setup(300);
    let s = create(&svc, &id, StrategyKind::ZMatch, 5);
    let sid = &s.session_id;
    let empty = svc.report(sid).unwrap();
    assert!(empty.concepts.is_empty());
    assert_eq!(empty.annotated, 0);
    svc.submit(sid, &cite(0, &["fever"])).unwrap();
    svc.submit(sid, &cite(1, &[" Dyspnea "])).unwrap();
    svc.submit(sid, &cite(2, &["dyspnea"])).unwrap();
    svc.submit(sid, &skip(3)).unwrap();
    let obs = svc.dataset(&id).unwrap().z_names[0].clone();
    let mixed = AnnotationInput {
        explanations: vec![Explanation { name: obs.clone(), origin: Origin::ObservedColumn }, Explanation { name: "Fever".into(), origin: Origin::FreeText }],
        ..cite(4, &[])
    };
    svc.submit(sid, &mixed).unwrap();
    let r = svc.report(sid).unwrap();
    let pairs: Vec<(&str, f64)> = r.concepts.iter().map(|c| (c.name.as_str(), c.count)).collect();
    // fever and dyspnea tie at 2; fever was seen first.
    assert_eq!(pairs, vec![("fever", 2.0), ("dyspnea", 2.0), (obs.to_lowercase().as_str(), 1.0)]);
    assert_eq!(r.concepts.iter().map(|c| c.count).sum::<f64>(), r.total_explanations as f64);
    assert_eq!(r.observed_citations, vec![Count { name: obs, count: 1.0 }]);
    assert_eq!(r.skipped, 1);
    let single: f64 = r.single_selection.iter().map(|c| c.count).sum();
    assert!((single - 4.0).abs() < 1e-12);
    assert_eq!(r.session.status, SessionStatus::Exhausted);
    assert!(r.oracle.is_some());
}

#[test]
fn three_record_example() {
    let (_d, svc, id) = setup(300);
    let s = create(&svc, &id, StrategyKind::Marginal, 3);
    for (k, c) in ["dyspnea", "dyspnea", "fever"].iter().enumerate() {
        svc.submit(&s.session_id, &cite(k, &[c])).unwrap();
    }
    let r = svc.report(&s.session_id).unwrap();
    assert_eq!(r.concepts, vec![Count { name: "dyspnea".into(), count: 2.0 }, Count { name: "fever".into(), count: 1.0 }]);
}

/// Cites every variable the perfect extractor offers; the per-pair success share is then N / (N + D).
fn perfect_annotator(svc: &Service, sid: &str, ds: &Dataset) {
    while let Ok(p) = svc.next_pair(sid) {
        let c = extract_perfect(ds, p.treated_unit, p.untreated_unit).unwrap();
        let input = if c.is_empty() {
            skip(p.pair_id)
        } else {
            let mut e: Vec<Explanation> = c.observed.iter().map(|n| Explanation { name: n.clone(), origin: Origin::ObservedColumn }).collect();
            e.extend(c.unobserved.iter().map(|n| Explanation { name: n.clone(), origin: Origin::FreeText }));
            AnnotationInput { pair_id: p.pair_id, explanations: e, skipped: false, annotator_id: "sim".into() }
        };
        svc.submit(sid, &input).unwrap();
    }
}

#[test]
fn simulated_annotator_success_equals_mean_lambda() {
    let (_d, svc, id) = setup(800);
    let ds = svc.dataset(&id).unwrap();
    for kind in StrategyKind::ALL {
        let s = create(&svc, &id, kind, 40);
        perfect_annotator(&svc, &s.session_id, &ds);
        let r = svc.report(&s.session_id).unwrap();
        let o = r.oracle.unwrap();
        assert_eq!(s.proposals, r.annotated);
        assert!((o.success_rate - o.mean_lambda_proposals).abs() < 1e-12, "{kind}: {o:?}");
        assert_eq!(o.mean_lambda_annotated, o.mean_lambda_proposals);
    }
}

#[test]
fn simulated_success_matches_independent_lambda() {
    let (_d, svc, id) = setup(500);
    let ds = svc.dataset(&id).unwrap();
    let s = create(&svc, &id, StrategyKind::ZDom, 25);
    let cfg = StrategyConfig::new(StrategyKind::ZDom);
    let sel = propose(&ds, None, &cfg, 25).unwrap();
    let lam = evaluate_pairs(&ds, &sel.pairs).unwrap();
    let mean = lam.iter().map(|o| o.lambda).sum::<f64>() / lam.len() as f64;
    perfect_annotator(&svc, &s.session_id, &ds);
    let o = svc.report(&s.session_id).unwrap().oracle.unwrap();
    assert!((o.success_rate - mean).abs() < 1e-12);
}

#[test]
fn restart_replays_log() {
    let dir = tempfile::tempdir().unwrap();
    let (sid, before) = {
        let svc = Service::open(dir.path()).unwrap();
        let id = svc.add_dataset(&upload(&stand_in(300))).unwrap().dataset_id;
        let s = create(&svc, &id, StrategyKind::ZMatch, 6);
        svc.submit(&s.session_id, &cite(0, &["fever"])).unwrap();
        svc.submit(&s.session_id, &skip(1)).unwrap();
        svc.submit(&s.session_id, &cite(2, &["chills", "fever"])).unwrap();
        (s.session_id.clone(), svc.report(&s.session_id).unwrap())
    };
    let svc = Service::open(dir.path()).unwrap();
    assert_eq!(svc.report(&sid).unwrap(), before);
    assert_eq!(svc.next_pair(&sid).unwrap().pair_id, 3);
    svc.submit(&sid, &cite(3, &["x"])).unwrap();
    assert_eq!(svc.session(&sid).unwrap().cursor, 4);
}

#[test]
fn torn_final_line_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let sid = {
        let svc = Service::open(dir.path()).unwrap();
        let id = svc.add_dataset(&upload(&stand_in(300))).unwrap().dataset_id;
        let s = create(&svc, &id, StrategyKind::ZMatch, 4);
        svc.submit(&s.session_id, &cite(0, &["fever"])).unwrap();
        s.session_id
    };
    let log = dir.path().join("sessions").join(&sid).join("log.jsonl");
    let mut bytes = std::fs::read(&log).unwrap();
    let good = bytes.len();
    bytes.extend_from_slice(br#"{"session_id":"x","pair_id":1,"expl"#);
    std::fs::write(&log, &bytes).unwrap();
    let svc = Service::open(dir.path()).unwrap();
    assert_eq!(svc.session(&sid).unwrap().cursor, 1);
    assert_eq!(std::fs::metadata(&log).unwrap().len() as usize, good);
    svc.submit(&sid, &cite(1, &["chills"])).unwrap();
    drop(svc);
    let svc = Service::open(dir.path()).unwrap();
    assert_eq!(svc.session(&sid).unwrap().cursor, 2);
}

#[test]
fn directory_without_manifest_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("sessions").join("half")).unwrap();
    let svc = Service::open(dir.path()).unwrap();
    assert!(svc.session_ids().is_empty());
}

#[test]
fn closed_sessions_stay_closed() {
    let dir = tempfile::tempdir().unwrap();
    let sid = {
        let svc = Service::open(dir.path()).unwrap();
        let id = svc.add_dataset(&upload(&stand_in(300))).unwrap().dataset_id;
        let s = create(&svc, &id, StrategyKind::ZMatch, 4);
        assert_eq!(svc.close(&s.session_id).unwrap().status, SessionStatus::Closed);
        s.session_id
    };
    let svc = Service::open(dir.path()).unwrap();
    assert_eq!(svc.session(&sid).unwrap().status, SessionStatus::Closed);
    assert_eq!(svc.next_pair(&sid).unwrap_err().code, ErrorCode::Exhausted);
    assert_eq!(svc.submit(&sid, &cite(0, &["x"])).unwrap_err().code, ErrorCode::Exhausted);
}

#[test]
fn dataset_upload_is_idempotent() {
    let (dir, svc, id) = setup(200);
    let again = svc.add_dataset(&upload(&stand_in(200))).unwrap();
    assert_eq!(again.dataset_id, id);
    assert!(again.has_oracle);
    drop(svc);
    let svc = Service::open(dir.path()).unwrap();
    assert_eq!(svc.dataset(&id).unwrap().n(), 200);
}

#[test]
fn concurrent_sessions_do_not_interleave() {
    let (_d, svc, id) = setup(400);
    let svc = Arc::new(svc);
    let ids: Vec<String> = (0..6).map(|_| create(&svc, &id, StrategyKind::ZMatch, 20).session_id).collect();
    std::thread::scope(|s| {
        for (t, sid) in ids.iter().enumerate() {
            let svc = svc.clone();
            s.spawn(move || {
                for k in 0..20 {
                    svc.submit(sid, &cite(k, &[&format!("c{t}")])).unwrap();
                }
            });
        }
    });
    for (t, sid) in ids.iter().enumerate() {
        let r = svc.report(sid).unwrap();
        assert_eq!(r.concepts, vec![Count { name: format!("c{t}"), count: 20.0 }]);
    }
}

#[test]
fn racing_duplicate_submissions_record_once() {
    let (_d, svc, id) = setup(300);
    let svc = Arc::new(svc);
    let sid = create(&svc, &id, StrategyKind::ZMatch, 5).session_id;
    let oks: usize = std::thread::scope(|s| {
        let hs: Vec<_> = (0..8)
            .map(|_| {
                let svc = svc.clone();
                let sid = sid.clone();
                s.spawn(move || svc.submit(&sid, &cite(0, &["fever"])).is_ok() as usize)
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).sum()
    });
    assert_eq!(oks, 1);
    assert_eq!(svc.report(&sid).unwrap().annotated, 1);
}
