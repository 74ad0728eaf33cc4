//! The nested three-stage decision cascade.
//!
//! Stage 1 votes precipitation against clear sky among the `k1` nearest
//! neighbors under `W1`. For a precipitating query, stage 2 re-ranks the
//! `n_p` precipitating neighbors under `W2` and labels the query liquid when
//! liquid votes are the unique maximum and exceed `p2 * k2`. Otherwise
//! stage 3 re-ranks the non-liquid members of that pool under `W3` and
//! votes solid against mixed, falling back to mixed.
//!
//! All vote thresholds are compared exactly (`votes * den > num * k`).

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::{build_index, knn_among, NeighborHit, SearchIndex};
use crate::model::{
    AtmosphericClass, LandSurfaceClass, MatchedSample, PhaseLabel, StageParams, VoteFraction,
};
use crate::database::AprioriDatabase;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OccurrenceVote {
    pub k: usize,
    pub n_p: usize,
    pub threshold: VoteFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiquidVote {
    pub k: usize,
    pub n_l: usize,
    pub n_s: usize,
    pub n_m: usize,
    pub threshold: VoteFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolidMixedVote {
    /// Effective k after clamping to the candidate count.
    pub k: usize,
    pub n_s: usize,
    pub n_m: usize,
    pub threshold: VoteFraction,
}

/// Per-stage vote record kept for audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageVotes {
    pub occurrence: OccurrenceVote,
    pub liquid: Option<LiquidVote>,
    pub solid_mixed: Option<SolidMixedVote>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Detection {
    pub precipitating: bool,
    pub phase: Option<PhaseLabel>,
    pub stage_votes: StageVotes,
    pub land_class: LandSurfaceClass,
}

/// `(k, W, p)` for the occurrence, liquid and solid/mixed stages of one
/// land class.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeParams {
    pub occurrence: StageParams,
    pub liquid: StageParams,
    pub solid_mixed: StageParams,
}

impl CascadeParams {
    /// Checks `k2 < p1 * k1`, which guarantees stage 2 always has at least
    /// `k2` precipitating neighbors to choose from.
    pub fn new(occurrence: StageParams, liquid: StageParams, solid_mixed: StageParams) -> Result<Self> {
        if !occurrence
            .p
            .product_exceeds(liquid.k as u64, occurrence.k as u64)
        {
            return Err(Error::config(format!(
                "constraint k2 < p1 x k1 violated: k2 = {}, p1 = {}, k1 = {}",
                liquid.k, occurrence.p, occurrence.k
            )));
        }
        Ok(CascadeParams {
            occurrence,
            liquid,
            solid_mixed,
        })
    }

    pub fn stage(&self, stage: Stage) -> &StageParams {
        match stage {
            Stage::Occurrence => &self.occurrence,
            Stage::Liquid => &self.liquid,
            Stage::SolidMixed => &self.solid_mixed,
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        for stage in Stage::ALL {
            let d = self.stage(stage).weights.dim();
            if d != dim {
                return Err(Error::config(format!(
                    "{} weights have dimension {d}, database has {dim} channels",
                    stage.as_str()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Occurrence,
    Liquid,
    SolidMixed,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Occurrence, Stage::Liquid, Stage::SolidMixed];

    /// One-based stage number.
    pub fn number(self) -> usize {
        match self {
            Stage::Occurrence => 1,
            Stage::Liquid => 2,
            Stage::SolidMixed => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Occurrence => "occurrence",
            Stage::Liquid => "liquid",
            Stage::SolidMixed => "solid_mixed",
        }
    }

    pub fn from_number(n: usize) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.number() == n)
    }
}

/// Calibrated parameters for every land class.
pub type ParamSet = BTreeMap<LandSurfaceClass, CascadeParams>;

/// Stage 1: precipitating iff `n_p > p1 * k1`.
pub fn detect_occurrence(neighbors: &[NeighborHit], k1: usize, p1: VoteFraction) -> Result<(bool, usize)> {
    if neighbors.len() != k1 {
        return Err(Error::InvalidArgument(format!(
            "occurrence vote expects {k1} neighbors, got {}",
            neighbors.len()
        )));
    }
    let n_p = neighbors
        .iter()
        .filter(|h| h.atmospheric_class.is_precipitating())
        .count();
    Ok((p1.exceeded_by(n_p as u64, k1 as u64), n_p))
}

/// Stage 2 rule: liquid votes must be the unique maximum and exceed
/// `p2 * k2`.
pub fn liquid_decision(vote: &LiquidVote) -> bool {
    vote.n_l > vote.n_s
        && vote.n_l > vote.n_m
        && vote.threshold.exceeded_by(vote.n_l as u64, vote.k as u64)
}

/// Stage 3 rule: solid when `n_s > p3 * k3`, mixed otherwise.
pub fn solid_mixed_decision(vote: &SolidMixedVote) -> PhaseLabel {
    if vote.threshold.exceeded_by(vote.n_s as u64, vote.k as u64) {
        PhaseLabel::Solid
    } else {
        PhaseLabel::Mixed
    }
}

fn count_phases(hits: &[NeighborHit]) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for h in hits {
        match h.atmospheric_class {
            AtmosphericClass::Liquid => c.0 += 1,
            AtmosphericClass::Solid => c.1 += 1,
            AtmosphericClass::Mixed => c.2 += 1,
            AtmosphericClass::ClearSky => {}
        }
    }
    c
}

/// Outcome of stages 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseOutcome {
    pub phase: PhaseLabel,
    pub liquid: LiquidVote,
    pub solid_mixed: Option<SolidMixedVote>,
}

/// Ranks the stage-2 pool under `W2` and returns the liquid vote.
pub fn liquid_stage(
    stratum: &[MatchedSample],
    pool: &[NeighborHit],
    y: &[f64],
    stage2: &StageParams,
) -> Result<LiquidVote> {
    if stage2.k > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "k2 = {} exceeds the {} precipitating neighbors",
            stage2.k,
            pool.len()
        )));
    }
    let nearest = knn_among(stratum, pool, y, stage2.k, &stage2.weights)?;
    let (n_l, n_s, n_m) = count_phases(&nearest);
    Ok(LiquidVote {
        k: stage2.k,
        n_l,
        n_s,
        n_m,
        threshold: stage2.p,
    })
}

/// Ranks the non-liquid members of the pool under `W3` and returns the
/// solid/mixed vote, or `None` when the pool holds no non-liquid member.
pub fn solid_mixed_stage(
    stratum: &[MatchedSample],
    pool: &[NeighborHit],
    y: &[f64],
    stage3: &StageParams,
) -> Result<Option<SolidMixedVote>> {
    let candidates: Vec<NeighborHit> = pool
        .iter()
        .filter(|h| {
            matches!(
                h.atmospheric_class,
                AtmosphericClass::Solid | AtmosphericClass::Mixed
            )
        })
        .copied()
        .collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let k = stage3.k.min(candidates.len());
    let nearest = knn_among(stratum, &candidates, y, k, &stage3.weights)?;
    let (_, n_s, n_m) = count_phases(&nearest);
    Ok(Some(SolidMixedVote {
        k,
        n_s,
        n_m,
        threshold: stage3.p,
    }))
}

/// Stages 2 and 3 over the precipitating neighbors found in stage 1.
pub fn detect_phase(
    stratum: &[MatchedSample],
    precip_neighbors: &[NeighborHit],
    y: &[f64],
    stage2: &StageParams,
    stage3: &StageParams,
) -> Result<PhaseOutcome> {
    if precip_neighbors
        .iter()
        .any(|h| !h.atmospheric_class.is_precipitating())
    {
        return Err(Error::InvalidArgument(
            "phase detection pool contains clear-sky neighbors".into(),
        ));
    }
    let liquid = liquid_stage(stratum, precip_neighbors, y, stage2)?;
    if liquid_decision(&liquid) {
        return Ok(PhaseOutcome {
            phase: PhaseLabel::Liquid,
            liquid,
            solid_mixed: None,
        });
    }
    let solid_mixed = solid_mixed_stage(stratum, precip_neighbors, y, stage3)?;
    let phase = solid_mixed
        .as_ref()
        .map_or(PhaseLabel::Mixed, solid_mixed_decision);
    Ok(PhaseOutcome {
        phase,
        liquid,
        solid_mixed,
    })
}

struct LandEngine {
    index: SearchIndex,
    params: CascadeParams,
}

/// Detector over a loaded database: one stage-1 index per land class.
///
/// `D` is anything that lends the database, such as `&AprioriDatabase` or
/// `Arc<AprioriDatabase>`. Immutable once built; `retrieve` may be called
/// from any number of threads and always returns the same result for the
/// same query.
pub struct Detector<D: Borrow<AprioriDatabase>> {
    db: D,
    engines: BTreeMap<LandSurfaceClass, LandEngine>,
}

impl<D: Borrow<AprioriDatabase>> Detector<D> {
    pub fn new(db: D, params: &ParamSet) -> Result<Self> {
        let mut engines = BTreeMap::new();
        {
            let base: &AprioriDatabase = db.borrow();
            for (land, p) in params {
                let Some(stratum) = base.strata.get(land) else {
                    continue;
                };
                p.check_dim(base.channel_count)?;
                if p.occurrence.k > stratum.len() {
                    return Err(Error::config(format!(
                        "k1 = {} exceeds the {} samples of the {land} stratum",
                        p.occurrence.k,
                        stratum.len()
                    )));
                }
                let index = build_index(stratum, &p.occurrence.weights)?;
                engines.insert(*land, LandEngine { index, params: p.clone() });
            }
        }
        Ok(Detector { db, engines })
    }

    pub fn database(&self) -> &AprioriDatabase {
        self.db.borrow()
    }

    pub fn channel_count(&self) -> usize {
        self.database().channel_count
    }

    /// Land classes this detector can serve.
    pub fn lands(&self) -> impl Iterator<Item = LandSurfaceClass> + '_ {
        self.engines.keys().copied()
    }

    /// Stage-1 neighbors of `y` within the stratum of `land`.
    pub fn occurrence_neighbors(&self, y: &[f64], land: LandSurfaceClass, k: usize) -> Result<Vec<NeighborHit>> {
        let engine = self.engine(land)?;
        engine.index.query_knn(y, k)
    }

    pub fn stratum(&self, land: LandSurfaceClass) -> Result<&[MatchedSample]> {
        self.engine(land)?;
        self.database().stratum(land)
    }

    pub fn params(&self, land: LandSurfaceClass) -> Result<&CascadeParams> {
        Ok(&self.engine(land)?.params)
    }

    fn engine(&self, land: LandSurfaceClass) -> Result<&LandEngine> {
        self.engines.get(&land).ok_or(Error::MissingStratum { land })
    }

    pub fn retrieve(&self, y: &[f64], land: LandSurfaceClass) -> Result<Detection> {
        let engine = self.engine(land)?;
        let p = &engine.params;
        let neighbors = engine.index.query_knn(y, p.occurrence.k)?;
        let (precipitating, n_p) = detect_occurrence(&neighbors, p.occurrence.k, p.occurrence.p)?;
        let occurrence = OccurrenceVote {
            k: p.occurrence.k,
            n_p,
            threshold: p.occurrence.p,
        };
        if !precipitating {
            return Ok(Detection {
                precipitating,
                phase: None,
                stage_votes: StageVotes {
                    occurrence,
                    liquid: None,
                    solid_mixed: None,
                },
                land_class: land,
            });
        }
        let pool: Vec<NeighborHit> = neighbors
            .into_iter()
            .filter(|h| h.atmospheric_class.is_precipitating())
            .collect();
        let outcome = detect_phase(self.stratum(land)?, &pool, y, &p.liquid, &p.solid_mixed)?;
        Ok(Detection {
            precipitating,
            phase: Some(outcome.phase),
            stage_votes: StageVotes {
                occurrence,
                liquid: Some(outcome.liquid),
                solid_mixed: outcome.solid_mixed,
            },
            land_class: land,
        })
    }

    /// Retrieves a batch in parallel. Output order and content equal
    /// sequential retrieval.
    pub fn retrieve_batch(&self, queries: &[Query]) -> Result<Vec<DetectionRecord>>
    where
        D: Sync,
    {
        queries
            .par_iter()
            .map(|q| {
                self.retrieve(&q.tb, q.land).map(|detection| DetectionRecord {
                    sample_id: q.sample_id,
                    detection,
                })
            })
            .collect()
    }
}

/// A query vector with its land class.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub sample_id: u64,
    pub tb: Vec<f64>,
    pub land: LandSurfaceClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionRecord {
    pub sample_id: u64,
    pub detection: Detection,
}

/// One row of a detection file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionRow {
    pub sample_id: u64,
    pub precipitating: bool,
    pub phase: Option<PhaseLabel>,
    pub n_p: usize,
    pub n_l: Option<usize>,
    pub n_s: Option<usize>,
    pub n_m: Option<usize>,
}

impl From<&DetectionRecord> for DetectionRow {
    fn from(r: &DetectionRecord) -> Self {
        let v = r.detection.stage_votes;
        DetectionRow {
            sample_id: r.sample_id,
            precipitating: r.detection.precipitating,
            phase: r.detection.phase,
            n_p: v.occurrence.n_p,
            n_l: v.liquid.map(|l| l.n_l),
            n_s: v.liquid.map(|l| l.n_s),
            n_m: v.liquid.map(|l| l.n_m),
        }
    }
}

pub const DETECTION_HEADER: &str = "sample_id,precipitating,phase,n_p,n_l,n_s,n_m";

/// Writes detections as `sample_id,precipitating,phase,n_p,n_l,n_s,n_m`.
/// `n_l, n_s, n_m` are the stage-2 votes and are empty for clear-sky rows.
pub fn write_detections<W: Write>(mut w: W, rows: &[DetectionRow]) -> std::io::Result<()> {
    writeln!(w, "{DETECTION_HEADER}")?;
    let o = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.sample_id,
            u8::from(r.precipitating),
            r.phase.map(|p| p.as_str()).unwrap_or(""),
            r.n_p,
            o(r.n_l),
            o(r.n_s),
            o(r.n_m)
        )?;
    }
    Ok(())
}

pub fn read_detections<R: BufRead>(reader: R) -> Result<Vec<DetectionRow>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 {
            if line != DETECTION_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{DETECTION_HEADER}`"),
                });
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: String| Error::Parse { line: lineno, message: m };
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("bad count `{s}`")))
            }
        };
        out.push(DetectionRow {
            sample_id: f[0].parse().map_err(|_| bad(format!("bad sample_id `{}`", f[0])))?,
            precipitating: match f[1] {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("bad precipitating flag `{other}`"))),
            },
            phase: if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|_| bad(format!("bad phase `{}`", f[2])))?)
            },
            n_p: num(f[3])?.ok_or_else(|| bad("missing n_p".into()))?,
            n_l: num(f[4])?,
            n_s: num(f[5])?,
            n_m: num(f[6])?,
        });
    }
    Ok(out)
}
