mod common;

use std::fs::File;
use std::io::BufReader;

use nestknn::cli::queries_from_rows;
use nestknn::config::load_params;
use nestknn::detector::{read_detections, DetectionRow, Detector};
use nestknn::io::{load_database, read_sample_file, write_text_samples, ChannelLayout};

use common::{cli, s, write_config, Pipeline};

const SMALL: &str = "channel_count = 13\n\
                     seed = 5\n\
                     database_size_per_land = 1200\n\
                     candidate_k = 10,25,50,100,200\n\
                     synth_n_per_class = 600\n\
                     synth_n_holdout = 150\n\
                     workers = 2\n";

fn small_pipeline(dir: &std::path::Path) -> Pipeline {
    let p = Pipeline::new(dir, SMALL);
    p.synth();
    p.build_db();
    p.calibrate();
    p
}

#[test]
fn retrieve_matches_library_batch() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_pipeline(dir.path());
    p.retrieve();

    let from_cli = read_detections(BufReader::new(File::open(&p.detections).unwrap())).unwrap();
    let db = load_database(&p.db).unwrap();
    let params = load_params(&p.params(), db.channel_count).unwrap();
    let (_, rows) = read_sample_file(&p.data.join("holdout.csv")).unwrap();
    let queries = queries_from_rows(&rows).unwrap();
    let detector = Detector::new(&db, &params).unwrap();
    let from_lib: Vec<DetectionRow> = detector.retrieve_batch(&queries).unwrap().iter().map(DetectionRow::from).collect();

    assert_eq!(from_cli.len(), rows.len());
    assert_eq!(from_cli, from_lib);
    assert!(from_cli.iter().any(|d| d.precipitating) && from_cli.iter().any(|d| !d.precipitating));
}

#[test]
fn full_pipeline_writes_every_product() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(dir.path(), SMALL);
    p.run_all();
    let report = std::fs::read_to_string(&p.report).unwrap();
    assert!(report.starts_with("region,class,a,b,c,d,pod,pofa,hss\n"));
    assert!(report.contains("season,cells,rho,rmse,kl,kl_max_norm"));
    for name in ["phase_all.csv", "phase_all.grid", "zonal_winter.csv", "occurrence_all.csv"] {
        assert!(p.grids.join(name).is_file(), "{name}");
    }
    assert!(p.cal.join("roc_report.csv").is_file());
    assert!(std::fs::read_dir(p.cal.join("roc")).unwrap().count() >= 6);
}

#[test]
fn empty_query_file_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_pipeline(dir.path());
    let layout = ChannelLayout::new(nestknn::database::default_channel_order(13));
    let empty = dir.path().join("empty.csv");
    write_text_samples(&empty, &layout, &[]).unwrap();
    let out = dir.path().join("empty_out.csv");
    let (code, _, err) = cli(&[
        "retrieve",
        "--config",
        s(&p.config),
        "--db",
        s(&p.db),
        "--params",
        s(&p.params()),
        "--queries",
        s(&empty),
        "--output",
        s(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    let rows = read_detections(BufReader::new(File::open(&out).unwrap())).unwrap();
    assert!(rows.is_empty());
}

#[test]
fn violated_k2_constraint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_pipeline(dir.path());
    let text = std::fs::read_to_string(p.params()).unwrap();
    let broken: String = text
        .lines()
        .map(|l| if l.starts_with("snow.stage2.k") { "snow.stage2.k = 1000".to_string() } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    let bad = write_config(dir.path(), "bad_params.txt", &broken);
    let (code, _, err) = cli(&[
        "retrieve",
        "--config",
        s(&p.config),
        "--db",
        s(&p.db),
        "--params",
        s(&bad),
        "--queries",
        s(&p.data.join("holdout.csv")),
        "--output",
        s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("k2 < p1 x k1"), "{err}");
}

#[test]
fn unreadable_database_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_pipeline(dir.path());
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"definitely not a database").unwrap();
    let mut corrupt = std::fs::read(&p.db).unwrap();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x5a;
    let flipped = dir.path().join("flipped.bin");
    std::fs::write(&flipped, corrupt).unwrap();
    for db in [&junk, &flipped, &dir.path().join("absent.bin")] {
        let (code, _, err) = cli(&[
            "retrieve",
            "--config",
            s(&p.config),
            "--db",
            s(db),
            "--params",
            s(&p.params()),
            "--queries",
            s(&p.data.join("holdout.csv")),
            "--output",
            s(&dir.path().join("x.csv")),
        ]);
        assert_eq!(code, 3, "{}: {err}", db.display());
    }
}

#[test]
fn query_for_missing_stratum_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_pipeline(dir.path());
    let text = std::fs::read_to_string(p.params()).unwrap();
    let snow_only: String = text.lines().filter(|l| !l.starts_with("nosnow.")).map(|l| format!("{l}\n")).collect();
    let params = write_config(dir.path(), "snow_params.txt", &snow_only);
    let (code, _, err) = cli(&[
        "retrieve",
        "--config",
        s(&p.config),
        "--db",
        s(&p.db),
        "--params",
        s(&params),
        "--queries",
        s(&p.data.join("holdout.csv")),
        "--output",
        s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("nosnow"), "{err}");
}

#[test]
fn malformed_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "channel_count = 13\nseed = banana\n");
    let (code, _, err) = cli(&["synth", "--config", s(&cfg), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(code, 2);
    assert!(err.contains("line 2") && err.contains("seed"), "{err}");
}

#[test]
fn synth_binary_and_text_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "seed = 3\nsynth_n_per_class = 40\n");
    let (text_dir, bin_dir) = (dir.path().join("t"), dir.path().join("b"));
    assert_eq!(cli(&["synth", "--config", s(&cfg), "--out-dir", s(&text_dir)]).0, 0);
    assert_eq!(cli(&["synth", "--config", s(&cfg), "--out-dir", s(&bin_dir), "--binary"]).0, 0);
    for name in ["build", "calibration", "holdout"] {
        let (_, a) = nestknn::io::read_matched_samples(&text_dir.join(format!("{name}.csv"))).unwrap();
        let (_, b) = nestknn::io::read_matched_samples(&bin_dir.join(format!("{name}.bin"))).unwrap();
        assert_eq!(a, b, "{name}");
    }
}
