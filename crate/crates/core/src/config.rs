//! Flat `key = value` configuration and calibrated-parameter files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors, reported with their line number.
//!
//! Weight matrices are written as `identity`, `diag:w1,w2,...`,
//! `full:w11,w12,...` (row-major) or `file:path`, where the file holds
//! either `n` (diagonal) or `n * n` (full) numbers separated by commas or
//! whitespace. Relative paths resolve against the config file's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::calibration::DEFAULT_CANDIDATE_KS;
use crate::database::{default_channel_order, BuildConfig, DEFAULT_REF_THRESHOLD};
use crate::detector::{CascadeParams, ParamSet, Stage};
use crate::error::{Error, Result};
use crate::grid::{StudyWindow, DEFAULT_CELL_DEG};
use crate::metrics::{WrfPhaseMode, DEFAULT_HISTOGRAM_BINS};
use crate::model::{LandSurfaceClass, StageParams, VoteFraction, WeightMatrix, DEFAULT_CHANNEL_COUNT};
use crate::synth::ScenarioConfig;

/// One `key = value` entry with its one-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

fn located(line: usize, key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        line: Some(line),
        field: Some(key.to_string()),
        message: message.into(),
    }
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let Some((k, v)) = s.split_once('=') else {
            return Err(Error::Config {
                line: Some(line),
                field: None,
                message: format!("expected `key = value`, found `{s}`"),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config {
                line: Some(line),
                field: None,
                message: "empty key".into(),
            });
        }
        if !seen.insert(key.clone()) {
            return Err(located(line, &key, "key given more than once"));
        }
        out.push(Entry {
            line,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(e: &Entry, what: &str) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| located(e.line, &e.key, format!("expected {what}, found `{}`", e.value)))
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

/// Parses a weight-matrix value for `dim` channels.
pub fn parse_weights(value: &str, dim: usize, base_dir: &Path) -> std::result::Result<WeightMatrix, String> {
    let value = value.trim();
    let from_numbers = |v: Vec<f64>, kind: Option<bool>| -> std::result::Result<WeightMatrix, String> {
        match kind {
            Some(true) | None if v.len() == dim => WeightMatrix::diagonal(v).map_err(|e| e.to_string()),
            Some(false) | None if v.len() == dim * dim => WeightMatrix::full(dim, v).map_err(|e| e.to_string()),
            _ => Err(format!(
                "{} weights given, expected {}",
                v.len(),
                match kind {
                    Some(true) => format!("{dim}"),
                    Some(false) => format!("{}", dim * dim),
                    None => format!("{dim} or {}", dim * dim),
                }
            )),
        }
    };
    if value == "identity" {
        Ok(WeightMatrix::identity(dim))
    } else if let Some(rest) = value.strip_prefix("diag:") {
        from_numbers(parse_floats(rest)?, Some(true))
    } else if let Some(rest) = value.strip_prefix("full:") {
        from_numbers(parse_floats(rest)?, Some(false))
    } else if let Some(rest) = value.strip_prefix("file:") {
        let path = base_dir.join(rest.trim());
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let nums: Vec<f64> = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .map(parse_floats)
            .collect::<std::result::Result<Vec<_>, _>>()?
            .concat();
        from_numbers(nums, None)
    } else {
        Err(format!("unknown weight form `{value}`"))
    }
}

/// Inverse of [`parse_weights`] for the inline forms; round-trips exactly.
pub fn format_weights(w: &WeightMatrix) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    match w {
        WeightMatrix::Diagonal(d) if d.iter().all(|&x| x == 1.0) => "identity".into(),
        WeightMatrix::Diagonal(d) => format!("diag:{}", join(d)),
        WeightMatrix::Full { entries, .. } => format!("full:{}", join(entries)),
    }
}

fn parse_stage(s: &str) -> Option<Stage> {
    match s {
        "stage1" | "occurrence" => Some(Stage::Occurrence),
        "stage2" | "liquid" => Some(Stage::Liquid),
        "stage3" | "solid_mixed" => Some(Stage::SolidMixed),
        _ => None,
    }
}

/// Validated run configuration shared by all subcommands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub channel_count: usize,
    pub channel_order: Vec<String>,
    pub ref_threshold: f64,
    pub database_size_per_land: Option<usize>,
    pub seed: u64,
    pub created_unix: i64,
    pub candidate_ks: Vec<usize>,
    pub weights: BTreeMap<(LandSurfaceClass, Stage), WeightMatrix>,
    pub grid_cell_deg: f64,
    pub zonal_band_deg: f64,
    pub season_window: Option<StudyWindow>,
    pub season_strict: bool,
    pub wrf_phase_mode: WrfPhaseMode,
    pub kl_bins: usize,
    pub workers: usize,
    pub synth_separation: f64,
    pub synth_n_per_class: usize,
    pub synth_n_calibration: Option<usize>,
    pub synth_n_holdout: Option<usize>,
    pub synth_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            channel_count: DEFAULT_CHANNEL_COUNT,
            channel_order: default_channel_order(DEFAULT_CHANNEL_COUNT),
            ref_threshold: DEFAULT_REF_THRESHOLD,
            database_size_per_land: None,
            seed: 0,
            created_unix: 0,
            candidate_ks: DEFAULT_CANDIDATE_KS.to_vec(),
            weights: BTreeMap::new(),
            grid_cell_deg: DEFAULT_CELL_DEG,
            zonal_band_deg: 1.0,
            season_window: None,
            season_strict: false,
            wrf_phase_mode: WrfPhaseMode::default(),
            kl_bins: DEFAULT_HISTOGRAM_BINS,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            synth_separation: 6.0,
            synth_n_per_class: 1000,
            synth_n_calibration: None,
            synth_n_holdout: None,
            synth_sigma: 2.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        RunConfig::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut cfg = RunConfig::default();
        // channel count first so weights and ordering can be checked
        if let Some(e) = entries.iter().find(|e| e.key == "channel_count") {
            cfg.channel_count = parse_num(e, "a positive integer")?;
            if cfg.channel_count == 0 {
                return Err(located(e.line, &e.key, "must be at least 1"));
            }
            cfg.channel_order = default_channel_order(cfg.channel_count);
        }
        let mut window = (None, None);
        for e in &entries {
            let bad = |m: String| located(e.line, &e.key, m);
            match e.key.as_str() {
                "channel_count" => {}
                "channel_order" => {
                    let order: Vec<String> = e.value.split(',').map(|s| s.trim().to_string()).collect();
                    if order.len() != cfg.channel_count || order.iter().any(String::is_empty) {
                        return Err(bad(format!("expected {} non-empty channel names", cfg.channel_count)));
                    }
                    cfg.channel_order = order;
                }
                "ref_threshold" => {
                    cfg.ref_threshold = parse_num(e, "a number")?;
                    if !(0.0..=1.0).contains(&cfg.ref_threshold) {
                        return Err(bad("must lie in [0, 1]".into()));
                    }
                }
                "database_size_per_land" => {
                    let m: usize = parse_num(e, "a positive integer")?;
                    if m < 2 {
                        return Err(bad("must be at least 2".into()));
                    }
                    cfg.database_size_per_land = Some(m);
                }
                "seed" => cfg.seed = parse_num(e, "an unsigned integer")?,
                "created_unix" => cfg.created_unix = parse_num(e, "an integer")?,
                "candidate_k" => {
                    let ks: Vec<usize> = e
                        .value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(format!("expected comma-separated integers, found `{}`", e.value)))?;
                    if ks.is_empty() || ks.contains(&0) {
                        return Err(bad("candidate k values must be positive".into()));
                    }
                    cfg.candidate_ks = ks;
                }
                "grid_cell_deg" | "zonal_band_deg" => {
                    let v: f64 = parse_num(e, "a number of degrees")?;
                    if !(v > 0.0 && v <= 180.0) {
                        return Err(bad("must lie in (0, 180]".into()));
                    }
                    if e.key == "grid_cell_deg" {
                        cfg.grid_cell_deg = v;
                    } else {
                        cfg.zonal_band_deg = v;
                    }
                }
                "season_window_start" => {
                    window.0 = Some(StudyWindow::parse_instant(&e.value).map_err(|err| bad(err.to_string()))?)
                }
                "season_window_end" => {
                    window.1 = Some(StudyWindow::parse_instant(&e.value).map_err(|err| bad(err.to_string()))?)
                }
                "season_strict" => {
                    cfg.season_strict = parse_num(e, "true or false")?;
                }
                "wrf_ratio_mode" => cfg.wrf_phase_mode = e.value.parse().map_err(|err: Error| bad(err.to_string()))?,
                "kl_bins" => {
                    cfg.kl_bins = parse_num(e, "a positive integer")?;
                    if cfg.kl_bins == 0 {
                        return Err(bad("must be at least 1".into()));
                    }
                }
                "workers" => {
                    cfg.workers = parse_num(e, "a positive integer")?;
                    if cfg.workers == 0 {
                        return Err(bad("must be at least 1".into()));
                    }
                }
                "synth_separation" => cfg.synth_separation = parse_num(e, "a number")?,
                "synth_n_per_class" => cfg.synth_n_per_class = parse_num(e, "an integer")?,
                "synth_n_calibration" => cfg.synth_n_calibration = Some(parse_num(e, "an integer")?),
                "synth_n_holdout" => cfg.synth_n_holdout = Some(parse_num(e, "an integer")?),
                "synth_sigma" => {
                    cfg.synth_sigma = parse_num(e, "a number")?;
                    if cfg.synth_sigma.is_nan() || cfg.synth_sigma <= 0.0 {
                        return Err(bad("must be positive".into()));
                    }
                }
                key if key.starts_with("weights.") => {
                    let parts: Vec<&str> = key.split('.').collect();
                    let (land, stage) = match parts.as_slice() {
                        [_, land, stage] => (
                            land.parse::<LandSurfaceClass>().map_err(|_| bad(format!("unknown land class `{land}`")))?,
                            parse_stage(stage).ok_or_else(|| bad(format!("unknown stage `{stage}`")))?,
                        ),
                        _ => return Err(bad("expected weights.<land>.<stage>".into())),
                    };
                    let w = parse_weights(&e.value, cfg.channel_count, base_dir).map_err(bad)?;
                    cfg.weights.insert((land, stage), w);
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        cfg.season_window = match window {
            (Some(s), Some(e)) => Some(StudyWindow::new(s, e)?),
            (None, None) => None,
            _ => return Err(Error::config("season_window_start and season_window_end go together")),
        };
        if cfg.season_strict && cfg.season_window.is_none() {
            return Err(Error::config_field("season_strict", "strict seasons need a season window"));
        }
        Ok(cfg)
    }

    pub fn build_config(&self) -> Result<BuildConfig> {
        let m = self
            .database_size_per_land
            .ok_or_else(|| Error::config_field("database_size_per_land", "required to build a database"))?;
        let mut b = BuildConfig::new(self.channel_count, m, self.seed);
        b.channel_order = self.channel_order.clone();
        b.ref_threshold = self.ref_threshold;
        b.created_unix = self.created_unix;
        Ok(b)
    }

    /// The window used to validate timestamps, when strict mode is on.
    pub fn strict_window(&self) -> Option<&StudyWindow> {
        self.season_window.as_ref().filter(|_| self.season_strict)
    }

    pub fn scenario(&self) -> ScenarioConfig {
        let mut s = ScenarioConfig::new(self.synth_separation, self.synth_n_per_class, self.seed);
        s.channel_count = self.channel_count;
        s.sigma = self.synth_sigma;
        s.n_calibration = self.synth_n_calibration.unwrap_or(self.synth_n_per_class);
        s.n_holdout = self.synth_n_holdout.unwrap_or(self.synth_n_per_class);
        s
    }
}

/// Serializes calibrated parameters as `<land>.stage<n>.{k,p,weights}`.
pub fn format_params(params: &ParamSet) -> String {
    let mut s = String::from("# calibrated cascade parameters\n");
    for (land, cascade) in params {
        for stage in Stage::ALL {
            let p = cascade.stage(stage);
            let prefix = format!("{land}.stage{}", stage.number());
            writeln!(s, "{prefix}.k = {}", p.k).expect("string write");
            writeln!(s, "{prefix}.p = {}", p.p).expect("string write");
            writeln!(s, "{prefix}.weights = {}", format_weights(&p.weights)).expect("string write");
        }
    }
    s
}

pub fn parse_params(text: &str, dim: usize, base_dir: &Path) -> Result<ParamSet> {
    type Partial = (Option<usize>, Option<VoteFraction>, Option<WeightMatrix>);
    let mut parts: BTreeMap<(LandSurfaceClass, Stage), Partial> = BTreeMap::new();
    let mut first_line: BTreeMap<LandSurfaceClass, usize> = BTreeMap::new();
    for e in parse_entries(text)? {
        let bad = |m: String| located(e.line, &e.key, m);
        let segs: Vec<&str> = e.key.split('.').collect();
        let [land, stage, field] = segs.as_slice() else {
            return Err(bad("expected <land>.stage<n>.<field>".into()));
        };
        let land: LandSurfaceClass = land.parse().map_err(|_| bad(format!("unknown land class `{land}`")))?;
        let stage = parse_stage(stage).ok_or_else(|| bad(format!("unknown stage `{stage}`")))?;
        first_line.entry(land).or_insert(e.line);
        let slot = parts.entry((land, stage)).or_default();
        match *field {
            "k" => slot.0 = Some(parse_num(&e, "a positive integer")?),
            "p" => slot.1 = Some(e.value.parse().map_err(|err: Error| bad(err.to_string()))?),
            "weights" => slot.2 = Some(parse_weights(&e.value, dim, base_dir).map_err(bad)?),
            other => return Err(bad(format!("unknown field `{other}`"))),
        }
    }
    let mut out = ParamSet::new();
    for (land, line) in first_line {
        let mut stages = Vec::new();
        for stage in Stage::ALL {
            let field = format!("{land}.stage{}", stage.number());
            let (k, p, w) = parts.remove(&(land, stage)).unwrap_or_default();
            let missing = |f: &str| Error::Config {
                line: Some(line),
                field: Some(format!("{field}.{f}")),
                message: "missing".into(),
            };
            let k = k.ok_or_else(|| missing("k"))?;
            let p = p.ok_or_else(|| missing("p"))?;
            let w = w.unwrap_or_else(|| WeightMatrix::identity(dim));
            stages.push(StageParams::new(k, w, p).map_err(|e| match e {
                Error::Config { message, .. } => Error::Config {
                    line: Some(line),
                    field: Some(field.clone()),
                    message,
                },
                other => other,
            })?);
        }
        let mut it = stages.into_iter();
        let (s1, s2, s3) = (it.next().expect("3"), it.next().expect("3"), it.next().expect("3"));
        out.insert(land, CascadeParams::new(s1, s2, s3)?);
    }
    Ok(out)
}

pub fn load_params(path: &Path, dim: usize) -> Result<ParamSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    parse_params(&text, dim, &base)
}
