//! Skill and similarity metrics, the model phase-conversion rule, the
//! clear/precipitating signal separation diagnostic, and the evaluation
//! report built from them.
//!
//! Metrics with a zero denominator return [`Error::UndefinedMetric`]
//! rather than a sentinel value.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use crate::database::{analysis_surface, AnalysisSurfaceClass};
use crate::error::{Error, Result};
use crate::grid::{season_in_window, CellIndex, PhaseGrid, Season, StudyWindow};
use crate::model::{ContingencyTable, MatchedSample, PhaseLabel};

pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

pub fn contingency(pred: &[bool], truth: &[bool]) -> Result<ContingencyTable> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("contingency of empty sequences".into()));
    }
    let mut t = ContingencyTable::default();
    for (&p, &o) in pred.iter().zip(truth) {
        t.record(p, o);
    }
    Ok(t)
}

/// `a / (a + c)`.
pub fn pod(t: &ContingencyTable) -> Result<f64> {
    let den = t.a + t.c;
    if den == 0 {
        return Err(Error::UndefinedMetric("POD has no observed events (a + c = 0)"));
    }
    Ok(t.a as f64 / den as f64)
}

/// `b / (b + d)`.
pub fn pofa(t: &ContingencyTable) -> Result<f64> {
    let den = t.b + t.d;
    if den == 0 {
        return Err(Error::UndefinedMetric("POFA has no observed non-events (b + d = 0)"));
    }
    Ok(t.b as f64 / den as f64)
}

/// Heidke skill score `2(ad - bc) / ((a+c)(c+d) + (a+b)(b+d))`, with the
/// numerator and denominator formed in exact integer arithmetic.
pub fn hss(t: &ContingencyTable) -> Result<f64> {
    let (a, b, c, d) = (t.a as i128, t.b as i128, t.c as i128, t.d as i128);
    let den = (a + c) * (c + d) + (a + b) * (b + d);
    if den == 0 {
        return Err(Error::UndefinedMetric("HSS denominator is zero"));
    }
    Ok((2 * (a * d - b * c)) as f64 / den as f64)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant sequence"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least 2 pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("spearman input is not finite".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Root-mean-square difference of two probability sequences. Inputs lie in
/// `[0, 1]`, so the result does too and needs no further scaling.
pub fn rmse_normalized(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("rmse of empty sequences".into()));
    }
    if let Some(v) = x.iter().chain(y).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("value {v} outside [0, 1]")));
    }
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / x.len() as f64).sqrt())
}

/// Counts of values in `n` equal-width bins over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbabilityHistogram {
    counts: Vec<u64>,
}

impl ProbabilityHistogram {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::InvalidArgument("histogram is empty".into()));
        }
        Ok(ProbabilityHistogram { counts })
    }

    /// Bins values with `min(floor(v * n), n - 1)`, so 1.0 falls in the
    /// last bin.
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        let mut counts = vec![0u64; bins];
        for &v in values {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("probability {v} outside [0, 1]")));
            }
            counts[((v * bins as f64).floor() as usize).min(bins - 1)] += 1;
        }
        ProbabilityHistogram::from_counts(counts)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> f64 {
        1.0 / self.bins() as f64
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let t = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Discrete `KL(P || Q) = sum P(i) ln(P(i) / Q(i))` over bins with
/// `P(i) > 0`. Bins where `Q` is empty but `P` is not get
/// `Q(i) = 1 / (10 N_Q)` and `Q` is renormalized.
pub fn kl_divergence(p: &ProbabilityHistogram, q: &ProbabilityHistogram) -> Result<f64> {
    if p.bins() != q.bins() {
        return Err(Error::DimensionMismatch {
            expected: p.bins(),
            actual: q.bins(),
        });
    }
    let pf = p.frequencies();
    let mut qf = q.frequencies();
    let eps = 1.0 / (10.0 * q.total() as f64);
    let mut patched = false;
    for (pi, qi) in pf.iter().zip(qf.iter_mut()) {
        if *pi > 0.0 && *qi == 0.0 {
            *qi = eps;
            patched = true;
        }
    }
    if patched {
        let s: f64 = qf.iter().sum();
        qf.iter_mut().for_each(|v| *v /= s);
    }
    let kl: f64 = pf
        .iter()
        .zip(&qf)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum();
    // negative values can only be rounding noise
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WrfPhaseMode {
    /// `f = snow / (snow + rain)`.
    #[default]
    SnowFraction,
    /// `f = snow / rain`.
    Ratio,
}

impl std::str::FromStr for WrfPhaseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "snow_fraction" => Ok(WrfPhaseMode::SnowFraction),
            "ratio" => Ok(WrfPhaseMode::Ratio),
            other => Err(Error::config(format!("unknown model phase mode `{other}`"))),
        }
    }
}

/// Solid when `f > 0.66`, liquid when `f < 0.33`, mixed otherwise.
pub fn wrf_phase_from_rates(snow_rate: f64, rain_rate: f64, mode: WrfPhaseMode) -> Result<PhaseLabel> {
    if !(snow_rate.is_finite() && rain_rate.is_finite()) || snow_rate < 0.0 || rain_rate < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "rates must be finite and non-negative, got snow {snow_rate}, rain {rain_rate}"
        )));
    }
    if snow_rate == 0.0 && rain_rate == 0.0 {
        return Err(Error::InvalidArgument("both snow and rain rates are zero".into()));
    }
    let f = match mode {
        WrfPhaseMode::SnowFraction => snow_rate / (snow_rate + rain_rate),
        WrfPhaseMode::Ratio if rain_rate == 0.0 => f64::INFINITY,
        WrfPhaseMode::Ratio => snow_rate / rain_rate,
    };
    Ok(if f > 0.66 {
        PhaseLabel::Solid
    } else if f < 0.33 {
        PhaseLabel::Liquid
    } else {
        PhaseLabel::Mixed
    })
}

/// Per-channel `precip - clear` and `sqrt(mean(diff^2))`.
pub fn signal_separation(clear_means: &[f64], precip_means: &[f64]) -> Result<(Vec<f64>, f64)> {
    if clear_means.len() != precip_means.len() {
        return Err(Error::DimensionMismatch {
            expected: clear_means.len(),
            actual: precip_means.len(),
        });
    }
    if clear_means.is_empty() {
        return Err(Error::InvalidArgument("empty mean vectors".into()));
    }
    let diff: Vec<f64> = precip_means.iter().zip(clear_means).map(|(p, c)| p - c).collect();
    let ms = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
    Ok((diff, ms.sqrt()))
}

/// Detection classes of the skill table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DetectionClass {
    Occurrence,
    Liquid,
    Mixed,
    Solid,
}

impl DetectionClass {
    pub const ALL: [DetectionClass; 4] = [
        DetectionClass::Occurrence,
        DetectionClass::Liquid,
        DetectionClass::Mixed,
        DetectionClass::Solid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectionClass::Occurrence => "D1_occurrence",
            DetectionClass::Liquid => "D2_liquid",
            DetectionClass::Mixed => "D3_mixed",
            DetectionClass::Solid => "D4_solid",
        }
    }

    fn phase(self) -> Option<PhaseLabel> {
        match self {
            DetectionClass::Occurrence => None,
            DetectionClass::Liquid => Some(PhaseLabel::Liquid),
            DetectionClass::Mixed => Some(PhaseLabel::Mixed),
            DetectionClass::Solid => Some(PhaseLabel::Solid),
        }
    }
}

/// Lower edges of the dry-snow-percentage bands; the last band is closed.
pub const DRY_SNOW_BANDS: [(f64, f64); 5] = [(0.0, 0.10), (0.10, 0.25), (0.25, 0.45), (0.45, 0.70), (0.70, 1.0)];

/// A truth sample with the detector's output for it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub truth: MatchedSample,
    pub precipitating: bool,
    pub phase: Option<PhaseLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillRow {
    pub region: String,
    pub class: DetectionClass,
    pub table: ContingencyTable,
    pub pod: Option<f64>,
    pub pofa: Option<f64>,
    pub hss: Option<f64>,
}

impl SkillRow {
    fn new(region: String, class: DetectionClass, table: ContingencyTable) -> Self {
        SkillRow {
            region,
            class,
            pod: pod(&table).ok(),
            pofa: pofa(&table).ok(),
            hss: hss(&table).ok(),
            table,
        }
    }
}

/// Agreement between detected and reference phase maps for one season.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    pub season: Season,
    pub cells: usize,
    pub rho: Option<f64>,
    pub rmse: Option<f64>,
    pub kl: Option<f64>,
    /// `kl` divided by the largest `kl` in the report.
    pub kl_max_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub skill: Vec<SkillRow>,
    pub similarity: Vec<SimilarityRow>,
}

impl EvaluationReport {
    pub fn row(&self, region: &str, class: DetectionClass) -> Option<&SkillRow> {
        self.skill.iter().find(|r| r.region == region && r.class == class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub cell_deg: f64,
    pub histogram_bins: usize,
    pub window: Option<StudyWindow>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cell_deg: crate::grid::DEFAULT_CELL_DEG,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            window: None,
        }
    }
}

fn skill_tables(records: &[&EvalRecord]) -> [ContingencyTable; 4] {
    let mut t = [ContingencyTable::default(); 4];
    for r in records {
        let truth_phase = r.truth.atmospheric_class().phase();
        t[0].record(r.precipitating, truth_phase.is_some());
        // phase skill is conditional on a correctly detected event
        if let (true, Some(obs), Some(pred)) = (r.precipitating, truth_phase, r.phase) {
            for (i, class) in DetectionClass::ALL.iter().enumerate().skip(1) {
                let want = class.phase();
                t[i].record(Some(pred) == want, Some(obs) == want);
            }
        }
    }
    t
}

fn band_label(i: usize) -> String {
    let (lo, hi) = DRY_SNOW_BANDS[i];
    format!("dry_snow_pct_{:.0}_{:.0}", lo * 100.0, hi * 100.0)
}

fn band_of(fraction: f64) -> usize {
    DRY_SNOW_BANDS
        .iter()
        .position(|&(_, hi)| fraction < hi)
        .unwrap_or(DRY_SNOW_BANDS.len() - 1)
}

/// Builds the skill table (surfaces and dry-snow bands by detection class)
/// and the per-season map similarity rows.
pub fn evaluation_report(records: &[EvalRecord], cfg: &EvalConfig) -> Result<EvaluationReport> {
    let geometry = PhaseGrid::new(cfg.cell_deg, None)?;
    let mut by_surface: BTreeMap<AnalysisSurfaceClass, Vec<&EvalRecord>> = BTreeMap::new();
    let mut cell_dry: HashMap<CellIndex, (u64, u64)> = HashMap::new();
    let mut cells = Vec::with_capacity(records.len());
    for r in records {
        let surface = analysis_surface(&r.truth)?;
        by_surface.entry(surface).or_default().push(r);
        let cell = geometry.cell_of(r.truth.latitude, r.truth.longitude)?;
        let e = cell_dry.entry(cell).or_default();
        e.0 += u64::from(surface == AnalysisSurfaceClass::DrySnow);
        e.1 += 1;
        cells.push((cell, surface));
    }

    let mut skill = Vec::new();
    let mut push = |region: String, subset: &[&EvalRecord]| {
        let tables = skill_tables(subset);
        for (class, table) in DetectionClass::ALL.into_iter().zip(tables) {
            skill.push(SkillRow::new(region.clone(), class, table));
        }
    };
    push("all".into(), &records.iter().collect::<Vec<_>>());
    for surface in AnalysisSurfaceClass::ALL {
        push(surface.as_str().into(), by_surface.get(&surface).map_or(&[][..], Vec::as_slice));
    }
    let mut bands: Vec<Vec<&EvalRecord>> = vec![Vec::new(); DRY_SNOW_BANDS.len()];
    for (r, (cell, surface)) in records.iter().zip(&cells) {
        if *surface == AnalysisSurfaceClass::DrySnow {
            let (dry, n) = cell_dry[cell];
            bands[band_of(dry as f64 / n as f64)].push(r);
        }
    }
    for (i, subset) in bands.iter().enumerate() {
        push(band_label(i), subset);
    }

    let mut similarity = Vec::new();
    for season in Season::ALL {
        let mut reference = PhaseGrid::new(cfg.cell_deg, Some(season))?;
        let mut detected = PhaseGrid::new(cfg.cell_deg, Some(season))?;
        for r in records {
            let t = &r.truth;
            if season_in_window(t.timestamp, cfg.window.as_ref())? != season {
                continue;
            }
            if let Some(phase) = t.atmospheric_class().phase() {
                reference.add_phase(t.latitude, t.longitude, phase)?;
            }
            if let (true, Some(phase)) = (r.precipitating, r.phase) {
                detected.add_phase(t.latitude, t.longitude, phase)?;
            }
        }
        similarity.push(map_similarity(&reference, &detected, season, cfg.histogram_bins)?);
    }
    let max_kl = similarity.iter().filter_map(|s| s.kl).fold(0.0, f64::max);
    for s in &mut similarity {
        s.kl_max_norm = s.kl.map(|k| if max_kl > 0.0 { k / max_kl } else { 0.0 });
    }
    Ok(EvaluationReport { skill, similarity })
}

/// Compares cell means where both maps have data.
pub fn map_similarity(reference: &PhaseGrid, detected: &PhaseGrid, season: Season, bins: usize) -> Result<SimilarityRow> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (cell, acc) in reference.cells() {
        if let (Some(a), Some(b)) = (acc.mean(), detected.get(*cell).and_then(|c| c.mean())) {
            x.push(a);
            y.push(b);
        }
    }
    let (rho, rmse, kl) = if x.is_empty() {
        (None, None, None)
    } else {
        let p = ProbabilityHistogram::from_values(&x, bins)?;
        let q = ProbabilityHistogram::from_values(&y, bins)?;
        (
            spearman(&x, &y).ok(),
            Some(rmse_normalized(&x, &y)?),
            Some(kl_divergence(&p, &q)?),
        )
    };
    Ok(SimilarityRow {
        season,
        cells: x.len(),
        rho,
        rmse,
        kl,
        kl_max_norm: None,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes the skill table, then the similarity table after a blank line.
/// Undefined metrics are left empty.
pub fn write_report<W: Write>(mut w: W, report: &EvaluationReport) -> std::io::Result<()> {
    writeln!(w, "region,class,a,b,c,d,pod,pofa,hss")?;
    for r in &report.skill {
        let t = r.table;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.region,
            r.class.as_str(),
            t.a,
            t.b,
            t.c,
            t.d,
            opt(r.pod),
            opt(r.pofa),
            opt(r.hss)
        )?;
    }
    writeln!(w)?;
    writeln!(w, "season,cells,rho,rmse,kl,kl_max_norm")?;
    for s in &report.similarity {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.season,
            s.cells,
            opt(s.rho),
            opt(s.rmse),
            opt(s.kl),
            opt(s.kl_max_norm)
        )?;
    }
    Ok(())
}
