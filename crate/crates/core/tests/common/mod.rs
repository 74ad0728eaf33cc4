#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nestknn::cli::run_with;

pub fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["nestknn"];
    argv.extend_from_slice(args);
    let code = run_with(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

pub fn cli_ok(args: &[&str]) -> String {
    let (code, out, err) = cli(args);
    assert_eq!(code, 0, "nestknn {args:?} failed: {err}");
    out
}

pub fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Output locations of one synth -> build-db -> calibrate -> retrieve ->
/// evaluate -> grid run.
pub struct Pipeline {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub data: PathBuf,
    pub db: PathBuf,
    pub cal: PathBuf,
    pub detections: PathBuf,
    pub report: PathBuf,
    pub grids: PathBuf,
}

impl Pipeline {
    pub fn new(dir: &Path, config_body: &str) -> Self {
        let config = write_config(dir, "run.cfg", config_body);
        Pipeline {
            dir: dir.to_path_buf(),
            config,
            data: dir.join("data"),
            db: dir.join("db.bin"),
            cal: dir.join("cal"),
            detections: dir.join("detections.csv"),
            report: dir.join("report.csv"),
            grids: dir.join("grids"),
        }
    }

    pub fn params(&self) -> PathBuf {
        self.cal.join("params.txt")
    }

    pub fn synth(&self) {
        cli_ok(&["synth", "--config", s(&self.config), "--out-dir", s(&self.data)]);
    }

    pub fn build_db(&self) {
        cli_ok(&[
            "build-db",
            "--config",
            s(&self.config),
            "--output",
            s(&self.db),
            s(&self.data.join("build.csv")),
        ]);
    }

    pub fn calibrate(&self) {
        cli_ok(&[
            "calibrate",
            "--config",
            s(&self.config),
            "--db",
            s(&self.db),
            "--calibration",
            s(&self.data.join("calibration.csv")),
            "--out-dir",
            s(&self.cal),
        ]);
    }

    pub fn retrieve(&self) {
        self.retrieve_with(&self.config, &self.detections);
    }

    pub fn retrieve_with(&self, config: &Path, output: &Path) {
        cli_ok(&[
            "retrieve",
            "--config",
            s(config),
            "--db",
            s(&self.db),
            "--params",
            s(&self.params()),
            "--queries",
            s(&self.data.join("holdout.csv")),
            "--output",
            s(output),
        ]);
    }

    pub fn evaluate(&self) {
        cli_ok(&[
            "evaluate",
            "--config",
            s(&self.config),
            "--detections",
            s(&self.detections),
            "--truth",
            s(&self.data.join("holdout.csv")),
            "--output",
            s(&self.report),
        ]);
    }

    pub fn grid_with(&self, config: &Path, out_dir: &Path) {
        cli_ok(&[
            "grid",
            "--config",
            s(config),
            "--detections",
            s(&self.detections),
            "--samples",
            s(&self.data.join("holdout.csv")),
            "--out-dir",
            s(out_dir),
        ]);
    }

    pub fn run_all(&self) {
        self.synth();
        self.build_db();
        self.calibrate();
        self.retrieve();
        self.evaluate();
        self.grid_with(&self.config, &self.grids);
    }
}

/// `(pod, pofa, hss)` of the "all" region row of an evaluation report.
pub fn skill_all(report: &str, class: &str) -> (Option<f64>, Option<f64>, Option<f64>) {
    let f = |v: &str| if v.is_empty() { None } else { Some(v.parse::<f64>().unwrap()) };
    for line in report.lines() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() == 9 && cols[0] == "all" && cols[1] == class {
            return (f(cols[6]), f(cols[7]), f(cols[8]));
        }
    }
    panic!("no `all` row for {class} in report");
}
