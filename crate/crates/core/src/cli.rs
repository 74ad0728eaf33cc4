//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
//! invariant violation. Every written file is reported with its CRC-64.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::calibration::{calibrate_all, roc_file_name, write_roc_report, CalibrationConfig, CalibrationQuery};
use crate::config::{format_params, load_params, RunConfig};
use crate::database::{build_balanced_database, land_class};
use crate::detector::{read_detections, write_detections, DetectionRow, Detector, Query};
use crate::envelope::checksum;
use crate::error::{Error, ErrorKind, Result};
use crate::grid::{
    grid_accumulate_sharded, occurrence_accumulate, write_grid_binary, write_grid_text, write_zonal_text,
    zonal_mean, GeoDetection, Season,
};
use crate::io::{
    encode_binary_samples, load_database, persist_database, read_matched_samples, read_sample_file,
    write_text_samples, ChannelLayout, SampleRow,
};
use crate::metrics::{evaluation_report, write_report, EvalConfig, EvalRecord};
use crate::model::MatchedSample;
use crate::synth::scenario_separable;

#[derive(Debug, Parser)]
#[command(name = "nestknn", version, about = "Nested kNN precipitation occurrence and phase detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a balanced a-priori database from matched sample files.
    BuildDb {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Select (k, p) per stage and land class; writes params and ROC files.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the detector over a query file.
    Retrieve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score detections against truth samples.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Grid detections into phase maps and zonal means.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Sample file supplying geolocation and time.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a synthetic scenario (build, calibration, holdout streams).
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Write the binary record format instead of delimited text.
        #[arg(long)]
        binary: bool,
    },
}

/// Exit code for an error kind.
pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Internal => 4,
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(e.kind())
        }
    }
}

/// Runs `f` on a rayon pool of `workers` threads.
fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invariant(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::config(format!("{}: {source}", path.display())),
        other => other,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn report_file(out: &mut dyn Write, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let _ = writeln!(out, "wrote {} (crc64 {:016x})", path.display(), checksum(&bytes));
    Ok(())
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::BuildDb { config, output, inputs } => build_db(&load_config(&config)?, &output, &inputs, out),
        Command::Calibrate {
            config,
            db,
            calibration,
            out_dir,
        } => calibrate(&load_config(&config)?, &db, &calibration, &out_dir, out),
        Command::Retrieve {
            config,
            db,
            params,
            queries,
            output,
        } => retrieve(&load_config(&config)?, &db, &params, &queries, &output, out),
        Command::Evaluate {
            config,
            detections,
            truth,
            output,
        } => evaluate(&load_config(&config)?, &detections, &truth, &output, out),
        Command::Grid {
            config,
            detections,
            samples,
            out_dir,
        } => grid(&load_config(&config)?, &detections, &samples, &out_dir, out),
        Command::Synth { config, out_dir, binary } => synth(&load_config(&config)?, &out_dir, binary, out),
    }
}

fn build_db(cfg: &RunConfig, output: &Path, inputs: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    let mut samples = Vec::new();
    for path in inputs {
        let (layout, mut s) = read_matched_samples(path)?;
        check_layout(&layout, cfg, path)?;
        samples.append(&mut s);
    }
    let db = build_balanced_database(samples, &cfg.build_config()?)?;
    let sum = persist_database(&db, output)?;
    for ((land, atm), n) in db.counts() {
        let _ = writeln!(out, "{land}\t{atm}\t{n}");
    }
    let _ = writeln!(
        out,
        "database {} samples, {} excluded, checksum {sum:016x}",
        db.len(),
        db.meta.excluded_count
    );
    report_file(out, output)
}

fn check_layout(layout: &ChannelLayout, cfg: &RunConfig, path: &Path) -> Result<()> {
    if layout.order != cfg.channel_order {
        return Err(Error::Format(format!(
            "{}: channel order {:?} differs from configured {:?}",
            path.display(),
            layout.order,
            cfg.channel_order
        )));
    }
    Ok(())
}

/// Calibration queries from truth-carrying samples.
pub fn calibration_queries(samples: &[MatchedSample]) -> Vec<CalibrationQuery> {
    samples.iter().map(CalibrationQuery::from_sample).collect()
}

fn calibrate(cfg: &RunConfig, db_path: &Path, cal_path: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let db = load_database(db_path)?;
    let (layout, samples) = read_matched_samples(cal_path)?;
    if layout.order != db.channel_order {
        return Err(Error::Format("calibration file channel order differs from the database".into()));
    }
    let cal_cfg = CalibrationConfig {
        candidate_ks: cfg.candidate_ks.clone(),
        weights: cfg.weights.clone(),
    };
    let queries = calibration_queries(&samples);
    let outcome = with_workers(cfg.workers, || calibrate_all(&queries, &db, &cal_cfg))?;
    let params_path = out_dir.join("params.txt");
    write_with(&params_path, |w| w.write_all(format_params(&outcome.params).as_bytes()))?;
    let report_path = out_dir.join("roc_report.csv");
    write_with(&report_path, |w| write_roc_report(w, outcome.curves()))?;
    let roc_dir = out_dir.join("roc");
    for curve in outcome.curves() {
        write_with(&roc_dir.join(roc_file_name(curve)), |w| write_roc_report(w, [curve]))?;
    }
    for s in &outcome.stages {
        let _ = writeln!(
            out,
            "{}\tstage{}\tk={}\tp={}\tauc={:.6}\tqueries={}",
            s.land,
            s.stage.number(),
            s.params.k,
            s.params.p,
            s.auc,
            s.queries
        );
    }
    if outcome.excluded > 0 {
        let _ = writeln!(out, "excluded {} calibration samples present in the database", outcome.excluded);
    }
    report_file(out, &params_path)?;
    report_file(out, &report_path)
}

/// Turns sample rows into detector queries; the land class comes from the
/// snow fraction, which every query must carry.
pub fn queries_from_rows(rows: &[SampleRow]) -> Result<Vec<Query>> {
    rows.iter()
        .map(|r| {
            let snow_fraction = r.snow_fraction.ok_or_else(|| Error::InvalidSample {
                sample_id: r.sample_id,
                reason: "query lacks a snow fraction, so its land class is unknown".into(),
            })?;
            let probe = MatchedSample {
                sample_id: r.sample_id,
                tb: crate::model::ChannelVector::new_unchecked(Vec::new()),
                rate: 0.0,
                active_phase: None,
                passive_phase_prob: None,
                ref_phase: None,
                snow_fraction,
                skin_temp: 0.0,
                air_temp: 0.0,
                latitude: r.latitude,
                longitude: r.longitude,
                timestamp: r.timestamp,
            };
            Ok(Query {
                sample_id: r.sample_id,
                tb: r.tb.clone(),
                land: land_class(&probe),
            })
        })
        .collect()
}

fn retrieve(
    cfg: &RunConfig,
    db_path: &Path,
    params_path: &Path,
    queries_path: &Path,
    output: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let db = load_database(db_path)?;
    let params = load_params(params_path, db.channel_count)?;
    let (layout, rows) = read_sample_file(queries_path)?;
    if !rows.is_empty() && layout.order != db.channel_order {
        return Err(Error::Format("query file channel order differs from the database".into()));
    }
    let detector = Detector::new(&db, &params)?;
    let queries = queries_from_rows(&rows)?;
    let records = with_workers(cfg.workers, || detector.retrieve_batch(&queries))?;
    let rows: Vec<DetectionRow> = records.iter().map(DetectionRow::from).collect();
    write_with(output, |w| write_detections(w, &rows))?;
    let _ = writeln!(out, "{} detections", rows.len());
    report_file(out, output)
}

fn read_detection_file(path: &Path) -> Result<Vec<DetectionRow>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_detections(BufReader::new(f))
}

/// Pairs detections with their samples by id.
pub fn join_detections<'a>(
    detections: &'a [DetectionRow],
    samples: &'a [MatchedSample],
) -> Result<Vec<(&'a DetectionRow, &'a MatchedSample)>> {
    let by_id: HashMap<u64, &MatchedSample> = samples.iter().map(|s| (s.sample_id, s)).collect();
    detections
        .iter()
        .map(|d| {
            by_id
                .get(&d.sample_id)
                .map(|s| (d, *s))
                .ok_or_else(|| Error::Format(format!("detection {} has no matching sample", d.sample_id)))
        })
        .collect()
}

pub fn eval_records(detections: &[DetectionRow], truth: &[MatchedSample]) -> Result<Vec<EvalRecord>> {
    Ok(join_detections(detections, truth)?
        .into_iter()
        .map(|(d, s)| EvalRecord {
            truth: s.clone(),
            precipitating: d.precipitating,
            phase: d.phase,
        })
        .collect())
}

fn evaluate(cfg: &RunConfig, det_path: &Path, truth_path: &Path, output: &Path, out: &mut dyn Write) -> Result<()> {
    let detections = read_detection_file(det_path)?;
    let (_, truth) = read_matched_samples(truth_path)?;
    let records = eval_records(&detections, &truth)?;
    if records.is_empty() {
        return Err(Error::Format("no detections to evaluate".into()));
    }
    let eval_cfg = EvalConfig {
        cell_deg: cfg.grid_cell_deg,
        histogram_bins: cfg.kl_bins,
        window: cfg.strict_window().copied(),
    };
    let report = evaluation_report(&records, &eval_cfg)?;
    write_with(output, |w| write_report(w, &report))?;
    for r in report.skill.iter().filter(|r| r.region == "all") {
        let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(out, "{}\tpod={}\tpofa={}\thss={}", r.class.as_str(), f(r.pod), f(r.pofa), f(r.hss));
    }
    report_file(out, output)
}

pub fn geo_detections(detections: &[DetectionRow], samples: &[SampleRow]) -> Result<Vec<GeoDetection>> {
    let by_id: HashMap<u64, &SampleRow> = samples.iter().map(|s| (s.sample_id, s)).collect();
    detections
        .iter()
        .map(|d| {
            let s = by_id
                .get(&d.sample_id)
                .ok_or_else(|| Error::Format(format!("detection {} has no matching sample", d.sample_id)))?;
            Ok(GeoDetection {
                latitude: s.latitude,
                longitude: s.longitude,
                timestamp: s.timestamp,
                precipitating: d.precipitating,
                phase: d.phase,
            })
        })
        .collect()
}

fn grid(cfg: &RunConfig, det_path: &Path, samples_path: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let detections = read_detection_file(det_path)?;
    let (_, rows) = read_sample_file(samples_path)?;
    let geo = geo_detections(&detections, &rows)?;
    let window = cfg.strict_window();
    let seasons: [(Option<Season>, &str); 3] = [
        (None, "all"),
        (Some(Season::Winter), "winter"),
        (Some(Season::Summer), "summer"),
    ];
    for (season, tag) in seasons {
        let g = grid_accumulate_sharded(&geo, cfg.grid_cell_deg, season, window, cfg.workers)?;
        let text = out_dir.join(format!("phase_{tag}.csv"));
        write_with(&text, |w| write_grid_text(w, &g))?;
        let bin = out_dir.join(format!("phase_{tag}.grid"));
        write_grid_binary(&bin, &g)?;
        let zonal = out_dir.join(format!("zonal_{tag}.csv"));
        let bands = zonal_mean(&g, cfg.zonal_band_deg)?;
        write_with(&zonal, |w| write_zonal_text(w, &bands))?;
        let _ = writeln!(out, "{tag}: {} cells", g.cells().len());
        for p in [&text, &bin, &zonal] {
            report_file(out, p)?;
        }
    }
    let occ = occurrence_accumulate(&geo, cfg.grid_cell_deg, None, window)?;
    let occ_path = out_dir.join("occurrence_all.csv");
    write_with(&occ_path, |w| write_grid_text(w, &occ))?;
    report_file(out, &occ_path)
}

fn synth(cfg: &RunConfig, out_dir: &Path, binary: bool, out: &mut dyn Write) -> Result<()> {
    let sc = scenario_separable(&cfg.scenario())?;
    let layout = ChannelLayout::new(cfg.channel_order.clone());
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, samples) in [("build", &sc.build), ("calibration", &sc.calibration), ("holdout", &sc.holdout)] {
        let path = if binary {
            let p = out_dir.join(format!("{name}.bin"));
            encode_binary_samples(&layout, samples).write_file(&p)?;
            p
        } else {
            let p = out_dir.join(format!("{name}.csv"));
            write_text_samples(&p, &layout, samples)?;
            p
        };
        let _ = writeln!(out, "{name}: {} samples", samples.len());
        report_file(out, &path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run_with(args.iter().copied(), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_capture(&["nestknn"]).0, 2);
        assert_eq!(run_capture(&["nestknn", "frobnicate"]).0, 2);
        assert_eq!(run_capture(&["nestknn", "--help"]).0, 0);
    }

    #[test]
    fn missing_config_is_a_config_error() {
        let (code, _, err) = run_capture(&["nestknn", "synth", "--config", "/nonexistent/c.txt", "--out-dir", "/tmp/x"]);
        assert_eq!(code, 2, "{err}");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(ErrorKind::Config), 2);
        assert_eq!(exit_code(ErrorKind::Data), 3);
        assert_eq!(exit_code(ErrorKind::Internal), 4);
    }
}
