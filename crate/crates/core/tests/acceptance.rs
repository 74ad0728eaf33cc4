//! Acceptance suite. Each test prints one PASS/FAIL line to stderr
//! (bypassing output capture) and then asserts on the same condition.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nestknn::calibration::{auc, calibrate_all, roc_from_votes, CalibrationConfig, CalibrationQuery, RocCurve, VoteSample};
use nestknn::database::{build_balanced_database, merge_ref_phase, BuildConfig};
use nestknn::detector::{detect_phase, Stage};
use nestknn::grid::{grid_accumulate, grid_accumulate_sharded, grid_to_envelope, GeoDetection, PhaseGrid, Season};
use nestknn::knn::{brute_force_knn, build_index, query_knn, NeighborHit};
use nestknn::metrics::{contingency, hss, kl_divergence, pod, pofa, ProbabilityHistogram};
use nestknn::synth::{generate, scenario_separable, scenario_specs, ScenarioConfig, SYNTH_END_UNIX, SYNTH_START_UNIX};
use nestknn::{
    AtmosphericClass, ChannelVector, ContingencyTable, LandSurfaceClass, MatchedSample, PhaseLabel, StageParams,
    VoteFraction, WeightMatrix,
};

use common::{skill_all, Pipeline};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "[acceptance {id}] {verdict} {name}: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn sample(id: u64, tb: Vec<f64>, class: AtmosphericClass) -> MatchedSample {
    let phase = class.phase();
    MatchedSample {
        sample_id: id,
        tb: ChannelVector::new(tb).unwrap(),
        rate: if phase.is_some() { 1.0 } else { 0.0 },
        active_phase: phase,
        passive_phase_prob: None,
        ref_phase: phase,
        snow_fraction: 0.0,
        skin_temp: 280.0,
        air_temp: 280.0,
        latitude: 0.0,
        longitude: 0.0,
        timestamp: SYNTH_START_UNIX,
    }
}

fn random_weights(rng: &mut ChaCha8Rng, dim: usize, full: bool) -> WeightMatrix {
    if !full {
        let w = (0..dim)
            .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.05..3.0) })
            .collect();
        return WeightMatrix::diagonal(w).unwrap();
    }
    // A^T A with A of rank <= rows: positive semi-definite and exactly symmetric.
    let rows = if rng.random_bool(0.3) { dim.saturating_sub(1).max(1) } else { dim };
    let a: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut w = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            w[i * dim + j] = (0..rows).map(|r| a[r * dim + i] * a[r * dim + j]).sum();
        }
    }
    WeightMatrix::full(dim, w).unwrap()
}

#[test]
fn acceptance_1_index_matches_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x51ab);
    let classes = AtmosphericClass::ALL;
    let (mut mismatches, mut queries) = (0usize, 0usize);
    for case in 0..200usize {
        let dim = [2, 5, 13][case % 3];
        let k = [1, 10, 50][(case / 3) % 3];
        let full = (case / 9) % 2 == 1;
        // coarse lattices force exact distance ties
        let quantum = if case % 4 == 0 { Some(1.0) } else { None };
        let n = rng.random_range(k.max(2)..=5000);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim)
                .map(|_| {
                    let v = rng.random_range(150.0..300.0f64);
                    quantum.map_or(v, |q| (v / q / 10.0).round() * q * 10.0)
                })
                .collect()
        };
        let stratum: Vec<MatchedSample> = (0..n)
            .map(|i| {
                let class = classes[rng.random_range(0..classes.len())];
                sample(i as u64 * 7 + 3, draw(&mut rng), class)
            })
            .collect();
        let w = random_weights(&mut rng, dim, full);
        let index = build_index(&stratum, &w).unwrap();
        for q in 0..5 {
            let y = if q == 0 {
                stratum[rng.random_range(0..n)].tb.as_slice().to_vec()
            } else {
                draw(&mut rng)
            };
            let fast: Vec<u64> = query_knn(&index, &y, k).unwrap().iter().map(|h| h.sample_id).collect();
            let slow: Vec<u64> = brute_force_knn(&stratum, &y, k, &w).unwrap().iter().map(|h| h.sample_id).collect();
            queries += 1;
            if fast != slow {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(120);
    report(
        1,
        "indexed kNN equals brute force",
        pass,
        &format!("200 cases, {queries} queries, {mismatches} mismatches, {}", secs(elapsed)),
    );
    assert!(pass);
}

fn tally(pred: &[bool], truth: &[bool]) -> ContingencyTable {
    let mut t = ContingencyTable::default();
    for (pv, tv) in [(true, true), (true, false), (false, true), (false, false)] {
        let n = pred.iter().zip(truth).filter(|&(&p, &o)| p == pv && o == tv).count() as u64;
        match (pv, tv) {
            (true, true) => t.a = n,
            (true, false) => t.b = n,
            (false, true) => t.c = n,
            (false, false) => t.d = n,
        }
    }
    t
}

#[test]
fn acceptance_2_metric_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x2e7);
    let mut failures = Vec::new();

    if hss(&ContingencyTable::new(37, 0, 0, 91)).unwrap() != 1.0 {
        failures.push("hss of a perfect table".to_string());
    }
    for _ in 0..200 {
        let (r, u) = (rng.random_range(1..50u64), rng.random_range(1..50u64));
        let (s, t) = (rng.random_range(1..50u64), rng.random_range(1..50u64));
        let table = ContingencyTable::new(r * s, r * t, u * s, u * t);
        if hss(&table).unwrap() != 0.0 {
            failures.push(format!("hss of {table:?} with ad = bc"));
        }
    }

    for case in 0..50 {
        let n = rng.random_range(1..2000);
        let bias = rng.random_range(0.05..0.95);
        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(bias)).collect();
        let pred: Vec<bool> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.7) { t } else { rng.random_bool(0.5) })
            .collect();
        let got = contingency(&pred, &truth).unwrap();
        let want = tally(&pred, &truth);
        if got != want {
            failures.push(format!("table {case}: {got:?} vs {want:?}"));
            continue;
        }
        let pod_ok = match pod(&got) {
            Ok(v) => want.a + want.c > 0 && v == want.a as f64 / (want.a + want.c) as f64,
            Err(_) => want.a + want.c == 0,
        };
        let pofa_ok = match pofa(&got) {
            Ok(v) => want.b + want.d > 0 && v == want.b as f64 / (want.b + want.d) as f64,
            Err(_) => want.b + want.d == 0,
        };
        if !pod_ok || !pofa_ok {
            failures.push(format!("pod/pofa of table {case}"));
        }
    }

    let mut worst_self = 0.0f64;
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let bins = rng.random_range(1..40);
        let hist = |rng: &mut ChaCha8Rng| {
            let mut counts: Vec<u64> = (0..bins)
                .map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(0..500) })
                .collect();
            if counts.iter().all(|&c| c == 0) {
                counts[0] = 1;
            }
            ProbabilityHistogram::from_counts(counts).unwrap()
        };
        let (p, q) = (hist(&mut rng), hist(&mut rng));
        worst_self = worst_self.max(kl_divergence(&p, &p).unwrap().abs());
        min_kl = min_kl.min(kl_divergence(&p, &q).unwrap());
    }
    if worst_self > 1e-12 {
        failures.push(format!("KL(P,P) up to {worst_self:e}"));
    }
    if min_kl < 0.0 {
        failures.push(format!("negative KL {min_kl:e}"));
    }

    let pass = failures.is_empty();
    report(
        2,
        "metric identities",
        pass,
        &format!(
            "50 tables vs tally, 1000 histogram pairs, max |KL(P,P)| = {worst_self:e}, min KL = {min_kl:e}; {}",
            if pass { "no failures".to_string() } else { failures.join("; ") }
        ),
    );
    assert!(pass);
}

fn curve_is_monotone(c: &RocCurve) -> bool {
    c.points.windows(2).all(|w| {
        let thresholds_drop = match (w[0].threshold, w[1].threshold) {
            (Some(a), Some(b)) => b.value() < a.value(),
            (Some(_), None) => true,
            _ => false,
        };
        thresholds_drop && w[1].p_f >= w[0].p_f && w[1].p_h >= w[0].p_h
    })
}

#[test]
fn acceptance_3_roc_properties() {
    let start = Instant::now();
    let mut cfg = ScenarioConfig::new(6.0, 2500, 303);
    cfg.n_calibration = 1250; // 8 classes -> 10^4 queries
    cfg.n_holdout = 0;
    let sc = scenario_separable(&cfg).unwrap();
    let db = build_balanced_database(sc.build, &BuildConfig::new(13, 5000, 303)).unwrap();
    let k = 100;

    let mut rng = ChaCha8Rng::seed_from_u64(0x3a);
    let (mut true_votes, mut random_votes) = (Vec::new(), Vec::new());
    let mut separable_aucs = BTreeMap::new();
    let mut curves = Vec::new();
    for &land in LandSurfaceClass::ALL {
        let stratum = db.stratum(land).unwrap();
        let index = build_index(stratum, &WeightMatrix::identity(13)).unwrap();
        let mut votes = Vec::new();
        for q in sc.calibration.iter().filter(|s| nestknn::database::land_class(s) == land) {
            let hits = query_knn(&index, q.tb.as_slice(), k).unwrap();
            let n_p = hits.iter().filter(|h| h.atmospheric_class.is_precipitating()).count() as u64;
            let v = VoteSample {
                votes: n_p,
                voters: k as u64,
                eligible: true,
                positive: q.atmospheric_class().is_precipitating(),
            };
            votes.push(v);
            random_votes.push(VoteSample {
                positive: rng.random_bool(0.5),
                ..v
            });
        }
        let curve = roc_from_votes(&votes, k, Stage::Occurrence, land).unwrap();
        separable_aucs.insert(land, auc(&curve).unwrap());
        curves.push(curve);
        true_votes.extend(votes);
    }
    let random_curve = roc_from_votes(&random_votes, k, Stage::Occurrence, LandSurfaceClass::NoSnow).unwrap();
    let random_auc = auc(&random_curve).unwrap();
    curves.push(random_curve);
    curves.push(roc_from_votes(&true_votes, k, Stage::Occurrence, LandSurfaceClass::NoSnow).unwrap());

    // every stage curve produced by a real calibration
    let queries: Vec<CalibrationQuery> = sc.calibration.iter().map(CalibrationQuery::from_sample).collect();
    let cal_cfg = CalibrationConfig {
        candidate_ks: vec![25, 50, 100],
        ..CalibrationConfig::default()
    };
    let outcome = calibrate_all(&queries, &db, &cal_cfg).unwrap();
    curves.extend(outcome.curves().cloned());

    let non_monotone = curves.iter().filter(|c| !curve_is_monotone(c)).count();
    let min_sep = separable_aucs.values().cloned().fold(f64::INFINITY, f64::min);
    let elapsed = start.elapsed();
    let pass = non_monotone == 0
        && (random_auc - 0.5).abs() <= 0.05
        && min_sep >= 0.98
        && elapsed < Duration::from_secs(300);
    report(
        3,
        "ROC properties",
        pass,
        &format!(
            "{} curves, {non_monotone} non-monotone; randomized AUC {random_auc:.4} (n = {}); separable AUC min {min_sep:.4}; {}",
            curves.len(),
            random_votes.len(),
            secs(elapsed)
        ),
    );
    assert!(pass);
}

#[test]
fn acceptance_4_end_to_end_skill() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(
        dir.path(),
        "channel_count = 13\n\
         seed = 20150601\n\
         database_size_per_land = 20000\n\
         synth_separation = 6\n\
         synth_n_per_class = 10000\n",
    );
    p.synth();
    p.build_db();
    p.calibrate();
    p.retrieve();
    p.evaluate();
    let text = std::fs::read_to_string(&p.report).unwrap();
    let elapsed = start.elapsed();

    let (occ_pod, occ_pofa, _) = skill_all(&text, "D1_occurrence");
    let mut pass = occ_pod.is_some_and(|v| v >= 0.90) && occ_pofa.is_some_and(|v| v <= 0.10);
    let mut detail = format!(
        "occurrence pod {:.4} pofa {:.4}",
        occ_pod.unwrap_or(f64::NAN),
        occ_pofa.unwrap_or(f64::NAN)
    );
    for class in ["D2_liquid", "D3_mixed", "D4_solid"] {
        let (v, _, _) = skill_all(&text, class);
        pass &= v.is_some_and(|v| v >= 0.90);
        detail.push_str(&format!("; {class} pod {:.4}", v.unwrap_or(f64::NAN)));
    }
    pass &= elapsed < Duration::from_secs(600);
    report(4, "end-to-end synthetic skill", pass, &format!("{detail}; {}", secs(elapsed)));
    assert!(pass);
}

/// A dim-2 stratum where stage 2 sees only the first coordinate and stage 3
/// only the second. `near2`/`far2` hold (liquid, solid, mixed) counts close
/// to and far from the query along the first axis; `near3` holds the
/// (solid, mixed) counts of the non-liquid members placed close along the
/// second axis, all other non-liquid members being far along it.
fn traced_stratum(near2: (usize, usize, usize), far2: (usize, usize, usize), near3: (usize, usize)) -> Vec<MatchedSample> {
    let mut out = Vec::new();
    let (mut solid_close, mut mixed_close) = (near3.0, near3.1);
    let mut push = |class: AtmosphericClass, x: f64| {
        let id = out.len() as u64;
        let close = match class {
            AtmosphericClass::Solid if solid_close > 0 => {
                solid_close -= 1;
                true
            }
            AtmosphericClass::Mixed if mixed_close > 0 => {
                mixed_close -= 1;
                true
            }
            _ => false,
        };
        let y = if close { 200.0 + 0.01 * id as f64 } else { 300.0 + 0.01 * id as f64 };
        out.push(sample(id, vec![x, y], class));
    };
    for (counts, base) in [(near2, 200.0), (far2, 320.0)] {
        let classes = [AtmosphericClass::Liquid, AtmosphericClass::Solid, AtmosphericClass::Mixed];
        let mut i = 0;
        for (class, n) in classes.into_iter().zip([counts.0, counts.1, counts.2]) {
            for _ in 0..n {
                push(class, base + 0.01 * i as f64);
                i += 1;
            }
        }
    }
    out
}

#[test]
fn acceptance_5_decision_rule_traces() {
    let half = VoteFraction::new(1, 2).unwrap();
    let w2 = WeightMatrix::diagonal(vec![1.0, 0.0]).unwrap();
    let w3 = WeightMatrix::diagonal(vec![0.0, 1.0]).unwrap();
    let y = [200.0, 200.0];
    let run = |stratum: &[MatchedSample], k3: usize| {
        let pool: Vec<NeighborHit> = stratum
            .iter()
            .enumerate()
            .map(|(slot, s)| NeighborHit {
                sample_id: s.sample_id,
                distance: 0.0,
                atmospheric_class: s.atmospheric_class(),
                slot,
            })
            .collect();
        let s2 = StageParams::new(50, w2.clone(), half).unwrap();
        let s3 = StageParams::new(k3, w3.clone(), half).unwrap();
        detect_phase(stratum, &pool, &y, &s2, &s3).unwrap()
    };

    let mut lines = Vec::new();
    let mut pass = true;

    let a = run(&traced_stratum((30, 15, 5), (10, 0, 0), (0, 0)), 40);
    let ok = (a.liquid.n_l, a.liquid.n_s, a.liquid.n_m) == (30, 15, 5)
        && a.phase == PhaseLabel::Liquid
        && a.solid_mixed.is_none();
    pass &= ok;
    lines.push(format!("(30,15,5) -> {}", a.phase));

    let b = run(&traced_stratum((10, 35, 5), (0, 5, 5), (32, 8)), 40);
    let sm = b.solid_mixed.map(|v| (v.k, v.n_s, v.n_m));
    let ok = (b.liquid.n_l, b.liquid.n_s, b.liquid.n_m) == (10, 35, 5)
        && sm == Some((40, 32, 8))
        && b.phase == PhaseLabel::Solid;
    pass &= ok;
    lines.push(format!("(10,35,5) -> {sm:?} -> {}", b.phase));

    let c = run(&traced_stratum((10, 20, 20), (0, 0, 0), (18, 18)), 36);
    let sm = c.solid_mixed.map(|v| (v.k, v.n_s, v.n_m));
    let ok = (c.liquid.n_l, c.liquid.n_s, c.liquid.n_m) == (10, 20, 20)
        && sm == Some((36, 18, 18))
        && c.phase == PhaseLabel::Mixed;
    pass &= ok;
    lines.push(format!("(10,20,20) -> {sm:?} -> {}", c.phase));

    report(5, "decision-rule traces", pass, &lines.join("; "));
    assert!(pass);
}

#[test]
fn acceptance_6_ref_rule_enumeration() {
    // (active, passive liquid probability, expected)
    let cases = [
        (PhaseLabel::Liquid, 0.9, PhaseLabel::Liquid),
        (PhaseLabel::Solid, 0.1, PhaseLabel::Solid),
        (PhaseLabel::Liquid, 0.1, PhaseLabel::Mixed),
        (PhaseLabel::Solid, 0.7, PhaseLabel::Mixed),
        (PhaseLabel::Mixed, 0.9, PhaseLabel::Mixed),
        (PhaseLabel::Mixed, 0.1, PhaseLabel::Mixed),
    ];
    let mut wrong = Vec::new();
    let mut mixed = 0;
    for (active, prob, want) in cases {
        let got = merge_ref_phase(active, prob, 0.5).unwrap();
        if got != want {
            wrong.push(format!("({active}, {prob}) -> {got}"));
        }
        mixed += usize::from(got == PhaseLabel::Mixed);
    }
    // the threshold itself discretizes to liquid
    if merge_ref_phase(PhaseLabel::Liquid, 0.5, 0.5).unwrap() != PhaseLabel::Liquid {
        wrong.push("probability at the threshold".into());
    }
    let pass = wrong.is_empty();
    report(
        6,
        "reference phase rule",
        pass,
        &format!(
            "6 combinations: 2 agreeing pure, {mixed} mixed (2 disagreeing pure + 2 mixed active); {}",
            if pass { "all as expected".to_string() } else { wrong.join(", ") }
        ),
    );
    assert!(pass);
}

fn dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn acceptance_7_reproducibility() {
    let start = Instant::now();
    let body = "channel_count = 13\n\
                seed = 77\n\
                database_size_per_land = 3000\n\
                candidate_k = 10,25,50,100,200\n\
                synth_n_per_class = 1500\n\
                workers = 1\n";
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (Pipeline::new(d1.path(), body), Pipeline::new(d2.path(), body));
    a.run_all();
    b.run_all();

    let mut diffs = Vec::new();
    let same = |x: &std::path::Path, y: &std::path::Path| std::fs::read(x).unwrap() == std::fs::read(y).unwrap();
    if !same(&a.db, &b.db) {
        diffs.push("database");
    }
    if dir_bytes(&a.cal) != dir_bytes(&b.cal) {
        diffs.push("params/roc");
    }
    if !same(&a.detections, &b.detections) {
        diffs.push("detections");
    }
    if dir_bytes(&a.grids) != dir_bytes(&b.grids) {
        diffs.push("grids");
    }

    let wide = common::write_config(d1.path(), "wide.cfg", &body.replace("workers = 1", "workers = 8"));
    let det8 = d1.path().join("detections_w8.csv");
    a.retrieve_with(&wide, &det8);
    if !same(&a.detections, &det8) {
        diffs.push("detections 1 vs 8 workers");
    }
    let grids8 = d1.path().join("grids_w8");
    a.grid_with(&wide, &grids8);
    if dir_bytes(&a.grids) != dir_bytes(&grids8) {
        diffs.push("grids 1 vs 8 workers");
    }

    // library-level sharding over a shuffled detection list
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let geo = random_detections(&mut rng, 30_000);
    for season in [None, Some(Season::Winter), Some(Season::Summer)] {
        let one = grid_accumulate_sharded(&geo, 0.25, season, None, 1).unwrap();
        let eight = grid_accumulate_sharded(&geo, 0.25, season, None, 8).unwrap();
        if one != eight || grid_to_envelope(&one).encode() != grid_to_envelope(&eight).encode() {
            diffs.push("sharded grid");
        }
    }

    let pass = diffs.is_empty();
    report(
        7,
        "reproducibility",
        pass,
        &format!(
            "two runs plus 1 vs 8 workers: {}; {}",
            if pass { "bit-identical".to_string() } else { format!("differs in {}", diffs.join(", ")) },
            secs(start.elapsed())
        ),
    );
    assert!(pass);
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn peak_rss_mib() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kib: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib / 1024.0)
}

#[test]
fn acceptance_8_index_speedup() {
    let start = Instant::now();
    let mut cfg = ScenarioConfig::new(6.0, 250_000, 88);
    cfg.channel_count = 13;
    let mut stratum = Vec::with_capacity(1_000_000);
    for spec in scenario_specs(&cfg, 0, 250_000).unwrap() {
        if spec.land == LandSurfaceClass::NoSnow {
            stratum.extend(generate(&spec).unwrap());
        }
    }
    let mut queries = Vec::new();
    for spec in scenario_specs(&cfg, 2, 250).unwrap() {
        if spec.land == LandSurfaceClass::NoSnow {
            queries.extend(generate(&spec).unwrap());
        }
    }
    let w = WeightMatrix::diagonal((0..13).map(|i| 1.0 + 0.1 * i as f64).collect()).unwrap();
    let build_start = Instant::now();
    let index = build_index(&stratum, &w).unwrap();
    let build_time = build_start.elapsed();

    let k = 100;
    let (mut fast, mut slow) = (Vec::new(), Vec::new());
    let mut mismatches = 0;
    for q in &queries {
        let y = q.tb.as_slice();
        let t = Instant::now();
        let a = query_knn(&index, y, k).unwrap();
        fast.push(t.elapsed());
        let t = Instant::now();
        let b = brute_force_knn(&stratum, y, k, &w).unwrap();
        slow.push(t.elapsed());
        if a.iter().map(|h| h.sample_id).ne(b.iter().map(|h| h.sample_id)) {
            mismatches += 1;
        }
    }
    let (mf, ms) = (median(fast), median(slow));
    let speedup = ms.as_secs_f64() / mf.as_secs_f64().max(1e-12);
    let rss = peak_rss_mib().map_or("n/a".to_string(), |m| format!("{m:.0} MiB"));
    let profile = format!(
        "M = {}, {} queries, k = {k}: indexed median {:.3} ms, brute median {:.3} ms, speedup {speedup:.1}x; \
         index build {}, peak RSS {rss}, total {}",
        stratum.len(),
        queries.len(),
        mf.as_secs_f64() * 1e3,
        ms.as_secs_f64() * 1e3,
        secs(build_time),
        secs(start.elapsed())
    );
    if speedup >= 10.0 {
        report(8, "index speedup", true, &profile);
    } else {
        let _ = writeln!(
            std::io::stderr().lock(),
            "[acceptance 8] WARN index speedup below 10x (informational): {profile}"
        );
    }
    // correctness is not informational
    assert_eq!(mismatches, 0);
}

fn random_detections(rng: &mut ChaCha8Rng, n: usize) -> Vec<GeoDetection> {
    let phases = [PhaseLabel::Liquid, PhaseLabel::Solid, PhaseLabel::Mixed];
    (0..n)
        .map(|_| {
            let precipitating = rng.random_bool(0.7);
            GeoDetection {
                latitude: rng.random_range(-60.0..60.0),
                longitude: rng.random_range(-180.0..180.0),
                timestamp: rng.random_range(SYNTH_START_UNIX..SYNTH_END_UNIX),
                precipitating,
                phase: precipitating.then(|| phases[rng.random_range(0..3)]),
            }
        })
        .collect()
}

#[test]
fn acceptance_9_grid_merge_associativity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9);
    let mut failures = 0;
    let mut trials = 0;
    for round in 0..5 {
        // a small area so that cells collect many detections
        let mut dets = random_detections(&mut rng, 20_000);
        if round % 2 == 0 {
            for d in &mut dets {
                d.latitude /= 30.0;
                d.longitude /= 30.0;
            }
        }
        for season in [None, Some(Season::Winter), Some(Season::Summer)] {
            trials += 1;
            let single = grid_accumulate(&dets, 0.5, season, None).unwrap();
            let mut shards: Vec<Vec<GeoDetection>> = vec![Vec::new(); 8];
            for d in &dets {
                shards[rng.random_range(0..8)].push(*d);
            }
            let mut partials: Vec<PhaseGrid> = shards
                .iter_mut()
                .map(|s| {
                    s.shuffle(&mut rng);
                    grid_accumulate(s, 0.5, season, None).unwrap()
                })
                .collect();
            partials.shuffle(&mut rng);
            let mut merged = PhaseGrid::new(0.5, season).unwrap();
            for p in &partials {
                merged.merge(p).unwrap();
            }
            if merged != single || grid_to_envelope(&merged).encode() != grid_to_envelope(&single).encode() {
                failures += 1;
            }
        }
    }
    let pass = failures == 0;
    report(
        9,
        "grid merge associativity",
        pass,
        &format!("{trials} trials of 8 shuffled partial grids, {failures} differ from single pass"),
    );
    assert!(pass);
}
