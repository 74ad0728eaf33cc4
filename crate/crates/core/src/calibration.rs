//! Selection of `(k, p)` for every stage and land class.
//!
//! For a fixed `k` each calibration query yields a vote count; sweeping the
//! threshold `p` over `{1, (k-1)/k, ..., 0}` with the strict rule
//! `votes > p * k` traces an ROC curve. The chosen `k` maximizes the area
//! under its curve, and the chosen `p` sits at the curve's point of
//! maximum curvature.
//!
//! Stages are calibrated in order for each land class, since the queries
//! and neighbor pools of a later stage depend on the earlier stages'
//! parameters.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rayon::prelude::*;

use crate::database::AprioriDatabase;
use crate::detector::{liquid_decision, CascadeParams, LiquidVote, ParamSet, Stage};
use crate::error::{Error, Result};
use crate::knn::{build_index, knn_among, NeighborHit};
use crate::model::{AtmosphericClass, LandSurfaceClass, MatchedSample, StageParams, VoteFraction, WeightMatrix};

pub const DEFAULT_CANDIDATE_KS: [usize; 5] = [25, 50, 100, 200, 400];

const CURVATURE_TIE_REL: f64 = 1e-9;
const AUC_TIE: f64 = 1e-12;

/// One ROC vertex. `threshold` is `None` for the accept-everything point
/// reached as the threshold drops below zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: Option<VoteFraction>,
    pub p_f: f64,
    pub p_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub stage: Stage,
    pub land: LandSurfaceClass,
    pub k: usize,
    /// Sorted by `p_f`, then `p_h`, ascending.
    pub points: Vec<RocPoint>,
}

/// Vote outcome of one calibration query at one `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoteSample {
    pub votes: u64,
    /// Neighbors actually voting; can be below the nominal `k` when the
    /// candidate pool is smaller.
    pub voters: u64,
    /// Whether the query can be called positive at all (the unique-maximum
    /// rule of the liquid stage, or a non-empty pool).
    pub eligible: bool,
    pub positive: bool,
}

impl VoteSample {
    fn predicted(&self, p: VoteFraction) -> bool {
        self.eligible && p.exceeded_by(self.votes, self.voters)
    }
}

/// Sweeps `p = j/k` for `j = k..=0` and appends the accept-all point.
pub fn roc_from_votes(samples: &[VoteSample], k: usize, stage: Stage, land: LandSurfaceClass) -> Result<RocCurve> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let pos = samples.iter().filter(|s| s.positive).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} calibration for {land} needs positive and negative cases ({pos} positive, {neg} negative)",
            stage.as_str()
        )));
    }
    let mut points = Vec::with_capacity(k + 2);
    for j in (0..=k as u64).rev() {
        let p = VoteFraction::new(j, k as u64)?;
        let (mut hits, mut false_alarms) = (0usize, 0usize);
        for s in samples {
            if s.predicted(p) {
                if s.positive {
                    hits += 1;
                } else {
                    false_alarms += 1;
                }
            }
        }
        points.push(RocPoint {
            threshold: Some(p),
            p_f: false_alarms as f64 / neg as f64,
            p_h: hits as f64 / pos as f64,
        });
    }
    points.push(RocPoint {
        threshold: None,
        p_f: 1.0,
        p_h: 1.0,
    });
    Ok(RocCurve { stage, land, k, points })
}

/// Trapezoidal area over `p_f`, adding `(0,0)` and `(1,1)` if absent.
pub fn auc(curve: &RocCurve) -> Result<f64> {
    auc_points(&curve.points.iter().map(|p| (p.p_f, p.p_h)).collect::<Vec<_>>())
}

pub fn auc_points(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("AUC needs at least 2 points".into()));
    }
    for &(f, h) in points {
        if !(0.0..=1.0).contains(&f) || !(0.0..=1.0).contains(&h) {
            return Err(Error::InvalidArgument(format!("ROC point ({f}, {h}) outside the unit square")));
        }
    }
    if points.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::InvalidArgument("ROC points are not sorted by false-alarm rate".into()));
    }
    let mut pts = Vec::with_capacity(points.len() + 2);
    if points[0] != (0.0, 0.0) {
        pts.push((0.0, 0.0));
    }
    pts.extend_from_slice(points);
    if *points.last().expect("non-empty") != (1.0, 1.0) {
        pts.push((1.0, 1.0));
    }
    Ok(pts
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum())
}

/// Curvature `4 * area / (|ab| |bc| |ca|)` of the circle through three
/// points; zero for collinear or coincident points.
pub fn menger_curvature(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let d = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
    let den = d(a, b) * d(b, c) * d(c, a);
    if den == 0.0 {
        0.0
    } else {
        2.0 * cross.abs() / den
    }
}

/// Threshold at the vertex of maximum curvature.
///
/// Consecutive coincident points are merged into one vertex that keeps the
/// run of thresholds producing it; its representative threshold is the
/// upper middle of those lying strictly inside `(0, 1)`. With five or more
/// distinct vertices the interior is smoothed by a 3-point moving average
/// (endpoints fixed) and curvature is evaluated away from the fixed ends.
/// Ties within a relative `1e-9` go to the larger threshold.
pub fn max_curvature_point(curve: &RocCurve) -> Result<VoteFraction> {
    if curve.points.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "maximum curvature needs at least 5 ROC points, got {}",
            curve.points.len()
        )));
    }
    let mut verts: Vec<((f64, f64), Vec<VoteFraction>)> = Vec::new();
    for p in &curve.points {
        let xy = (p.p_f, p.p_h);
        match verts.last_mut() {
            Some((last, ts)) if *last == xy => ts.extend(p.threshold),
            _ => verts.push((xy, p.threshold.into_iter().collect())),
        }
    }
    let n = verts.len();
    if n < 3 {
        return Err(Error::InvalidArgument("no curvature maximum: curve has fewer than 3 distinct vertices".into()));
    }
    let raw: Vec<(f64, f64)> = verts.iter().map(|v| v.0).collect();
    let (xy, range) = if n >= 5 {
        let mut s = raw.clone();
        for i in 1..n - 1 {
            s[i] = (
                (raw[i - 1].0 + raw[i].0 + raw[i + 1].0) / 3.0,
                (raw[i - 1].1 + raw[i].1 + raw[i + 1].1) / 3.0,
            );
        }
        (s, 2..n - 2)
    } else {
        (raw, 1..n - 1)
    };
    let mut best: Option<(f64, VoteFraction)> = None;
    for i in range {
        let ts: Vec<VoteFraction> = verts[i].1.iter().copied().filter(|t| t.is_open_unit()).collect();
        if ts.is_empty() {
            continue;
        }
        // thresholds run in descending order within a vertex
        let t = ts[(ts.len() - 1) / 2];
        let kappa = menger_curvature(xy[i - 1], xy[i], xy[i + 1]);
        if kappa <= 0.0 {
            continue;
        }
        best = match best {
            None => Some((kappa, t)),
            Some((bk, bt)) => {
                let tol = CURVATURE_TIE_REL * bk.max(kappa);
                if kappa > bk + tol || ((kappa - bk).abs() <= tol && t.value() > bt.value()) {
                    Some((kappa, t))
                } else {
                    Some((bk, bt))
                }
            }
        };
    }
    best.map(|(_, t)| t)
        .ok_or_else(|| Error::InvalidArgument("no curvature maximum: curve is straight".into()))
}

/// `argmax` AUC; ties within `1e-12` go to the smallest `k`.
pub fn select_k(curves: &[RocCurve]) -> Result<(usize, f64)> {
    rank_k(curves)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument("no candidate k".into()))
}

/// Candidates in order of preference: `select_k` applied repeatedly to the
/// ones not yet taken.
pub fn rank_k(curves: &[RocCurve]) -> Result<Vec<(usize, f64)>> {
    let mut left = curves.iter().map(|c| Ok((c.k, auc(c)?))).collect::<Result<Vec<_>>>()?;
    left.sort_by_key(|&(k, _)| k);
    let mut out = Vec::with_capacity(left.len());
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            if left[i].1 > left[best].1 + AUC_TIE {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    Ok(out)
}

/// A labeled query used for calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationQuery {
    pub sample_id: u64,
    pub tb: Vec<f64>,
    pub land: LandSurfaceClass,
    pub truth: AtmosphericClass,
}

impl CalibrationQuery {
    pub fn from_sample(s: &MatchedSample) -> Self {
        CalibrationQuery {
            sample_id: s.sample_id,
            tb: s.tb.as_slice().to_vec(),
            land: crate::database::land_class(s),
            truth: s.atmospheric_class(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub candidate_ks: Vec<usize>,
    /// Stage weights; missing entries default to the identity.
    pub weights: BTreeMap<(LandSurfaceClass, Stage), WeightMatrix>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            candidate_ks: DEFAULT_CANDIDATE_KS.to_vec(),
            weights: BTreeMap::new(),
        }
    }
}

impl CalibrationConfig {
    pub fn weights_for(&self, land: LandSurfaceClass, stage: Stage, dim: usize) -> Result<WeightMatrix> {
        let w = self
            .weights
            .get(&(land, stage))
            .cloned()
            .unwrap_or_else(|| WeightMatrix::identity(dim));
        if w.dim() != dim {
            return Err(Error::config(format!(
                "{land} {} weights have dimension {}, database has {dim} channels",
                stage.as_str(),
                w.dim()
            )));
        }
        Ok(w)
    }
}

/// Chosen parameters of one stage with every candidate curve.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCalibration {
    pub stage: Stage,
    pub land: LandSurfaceClass,
    pub params: StageParams,
    pub auc: f64,
    pub queries: usize,
    pub curves: Vec<RocCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub params: ParamSet,
    pub stages: Vec<StageCalibration>,
    /// Queries dropped because their id is also in the database.
    pub excluded: usize,
}

impl CalibrationOutcome {
    pub fn curves(&self) -> impl Iterator<Item = &RocCurve> {
        self.stages.iter().flat_map(|s| s.curves.iter())
    }
}

fn count_class(hits: &[NeighborHit], class: AtmosphericClass) -> u64 {
    hits.iter().filter(|h| h.atmospheric_class == class).count() as u64
}

/// Calibrates all three stages for every land class of the database.
///
/// Queries whose id appears in the database are excluded. Stage 1 takes the
/// most preferred `k1` whose threshold leaves room for some `k2 < p1 * k1`;
/// the liquid stage's `k` is shrunk to the largest admissible candidate
/// when the best one violates that bound.
pub fn calibrate_all(
    queries: &[CalibrationQuery],
    db: &AprioriDatabase,
    cfg: &CalibrationConfig,
) -> Result<CalibrationOutcome> {
    if cfg.candidate_ks.is_empty() || cfg.candidate_ks.contains(&0) {
        return Err(Error::config("candidate k list must be non-empty and positive"));
    }
    let dup = duplicate_ids(queries);
    if !dup.is_empty() {
        return Err(Error::Format(format!(
            "{} calibration ids occur more than once, first {}",
            dup.len(),
            dup[0]
        )));
    }
    let mut ks = cfg.candidate_ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let db_ids = db.sample_ids();
    let mut excluded = 0;
    let mut params = ParamSet::new();
    let mut stages = Vec::new();
    for (&land, stratum) in &db.strata {
        let mine: Vec<&CalibrationQuery> = queries
            .iter()
            .filter(|q| q.land == land)
            .filter(|q| {
                let leak = db_ids.contains(&q.sample_id);
                excluded += usize::from(leak);
                !leak
            })
            .collect();
        for q in &mine {
            if q.tb.len() != db.channel_count {
                return Err(Error::DimensionMismatch {
                    expected: db.channel_count,
                    actual: q.tb.len(),
                });
            }
        }
        let (cascade, cal) = calibrate_land(land, stratum, &mine, &ks, cfg, db.channel_count)?;
        params.insert(land, cascade);
        stages.extend(cal);
    }
    Ok(CalibrationOutcome {
        params,
        stages,
        excluded,
    })
}

fn calibrate_land(
    land: LandSurfaceClass,
    stratum: &[MatchedSample],
    queries: &[&CalibrationQuery],
    ks: &[usize],
    cfg: &CalibrationConfig,
    dim: usize,
) -> Result<(CascadeParams, Vec<StageCalibration>)> {
    let k_max = *ks.last().expect("non-empty");
    if k_max > stratum.len() {
        return Err(Error::config(format!(
            "candidate k = {k_max} exceeds the {} samples of the {land} stratum",
            stratum.len()
        )));
    }
    let w1 = cfg.weights_for(land, Stage::Occurrence, dim)?;
    let w2 = cfg.weights_for(land, Stage::Liquid, dim)?;
    let w3 = cfg.weights_for(land, Stage::SolidMixed, dim)?;

    // stage 1: neighbors at the largest k, prefixes for smaller ones
    let index = build_index(stratum, &w1)?;
    let neighbors: Vec<Vec<NeighborHit>> = queries
        .par_iter()
        .map(|q| index.query_knn(&q.tb, k_max))
        .collect::<Result<_>>()?;
    let curves1 = ks
        .iter()
        .map(|&k| {
            let votes: Vec<VoteSample> = queries
                .iter()
                .zip(&neighbors)
                .map(|(q, hits)| VoteSample {
                    votes: hits[..k].iter().filter(|h| h.atmospheric_class.is_precipitating()).count() as u64,
                    voters: k as u64,
                    eligible: true,
                    positive: q.truth.is_precipitating(),
                })
                .collect();
            roc_from_votes(&votes, k, Stage::Occurrence, land)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut chosen = None;
    let mut curvature_err = None;
    let mut any_threshold = false;
    for (k, a) in rank_k(&curves1)? {
        match max_curvature_point(curve_for(&curves1, k)) {
            Ok(p) => {
                any_threshold = true;
                if ks.iter().any(|&k2| p.product_exceeds(k2 as u64, k as u64)) {
                    chosen = Some((k, a, p));
                    break;
                }
            }
            Err(e) => {
                curvature_err.get_or_insert(e);
            }
        }
    }
    let (k1, auc1, p1) = match (chosen, curvature_err) {
        (Some(c), _) => c,
        (None, Some(e)) if !any_threshold => return Err(e),
        _ => {
            return Err(Error::config(format!(
                "no candidate k2 satisfies k2 < p1 x k1 for any candidate k1 (candidates {ks:?})"
            )))
        }
    };
    let stage1 = StageParams::new(k1, w1, p1)?;

    // stage 2: truly precipitating queries detected by stage 1
    let pools: Vec<(usize, Vec<NeighborHit>)> = queries
        .iter()
        .zip(&neighbors)
        .enumerate()
        .filter(|(_, (q, _))| q.truth.is_precipitating())
        .filter_map(|(i, (_, hits))| {
            let pool: Vec<NeighborHit> = hits[..k1]
                .iter()
                .filter(|h| h.atmospheric_class.is_precipitating())
                .copied()
                .collect();
            p1.exceeded_by(pool.len() as u64, k1 as u64).then_some((i, pool))
        })
        .collect();
    let ranked2: Vec<Vec<NeighborHit>> = pools
        .par_iter()
        .map(|(i, pool)| knn_among(stratum, pool, &queries[*i].tb, pool.len(), &w2))
        .collect::<Result<_>>()?;
    let liquid_votes = |k: usize| -> Vec<LiquidVote> {
        ranked2
            .iter()
            .map(|r| {
                let top = &r[..k.min(r.len())];
                LiquidVote {
                    k: top.len(),
                    n_l: count_class(top, AtmosphericClass::Liquid) as usize,
                    n_s: count_class(top, AtmosphericClass::Solid) as usize,
                    n_m: count_class(top, AtmosphericClass::Mixed) as usize,
                    threshold: p1,
                }
            })
            .collect()
    };
    let curves2 = ks
        .iter()
        .map(|&k| {
            let votes: Vec<VoteSample> = liquid_votes(k)
                .iter()
                .zip(&pools)
                .map(|(v, (i, _))| VoteSample {
                    votes: v.n_l as u64,
                    voters: v.k as u64,
                    eligible: v.n_l > v.n_s && v.n_l > v.n_m,
                    positive: queries[*i].truth == AtmosphericClass::Liquid,
                })
                .collect();
            roc_from_votes(&votes, k, Stage::Liquid, land)
        })
        .collect::<Result<Vec<_>>>()?;
    let (best_k2, _) = select_k(&curves2)?;
    let admissible = |k: usize| p1.product_exceeds(k as u64, k1 as u64);
    let k2 = if admissible(best_k2) {
        best_k2
    } else {
        ks.iter().rev().copied().find(|&k| admissible(k)).ok_or_else(|| {
            Error::config(format!(
                "no candidate k2 satisfies k2 < p1 x k1 (p1 = {p1}, k1 = {k1}, candidates {ks:?})"
            ))
        })?
    };
    let curve2 = curve_for(&curves2, k2);
    let auc2 = auc(curve2)?;
    let p2 = max_curvature_point(curve2)?;
    let stage2 = StageParams::new(k2, w2, p2)?;

    // stage 3: truly solid or mixed queries that reach it
    let called_liquid: Vec<bool> = liquid_votes(k2)
        .into_iter()
        .map(|v| liquid_decision(&LiquidVote { threshold: p2, ..v }))
        .collect();
    let reach3: Vec<(usize, &Vec<NeighborHit>)> = pools
        .iter()
        .zip(&called_liquid)
        .filter(|((i, _), liquid)| {
            !**liquid && matches!(queries[*i].truth, AtmosphericClass::Solid | AtmosphericClass::Mixed)
        })
        .map(|((i, pool), _)| (*i, pool))
        .collect();
    let ranked3: Vec<Vec<NeighborHit>> = reach3
        .par_iter()
        .map(|(i, pool)| {
            let cands: Vec<NeighborHit> = pool
                .iter()
                .filter(|h| matches!(h.atmospheric_class, AtmosphericClass::Solid | AtmosphericClass::Mixed))
                .copied()
                .collect();
            if cands.is_empty() {
                Ok(cands)
            } else {
                knn_among(stratum, &cands, &queries[*i].tb, cands.len(), &w3)
            }
        })
        .collect::<Result<_>>()?;
    let curves3 = ks
        .iter()
        .map(|&k| {
            let votes: Vec<VoteSample> = ranked3
                .iter()
                .zip(&reach3)
                .map(|(r, (i, _))| {
                    let top = &r[..k.min(r.len())];
                    VoteSample {
                        votes: count_class(top, AtmosphericClass::Solid),
                        voters: top.len() as u64,
                        eligible: !top.is_empty(),
                        positive: queries[*i].truth == AtmosphericClass::Solid,
                    }
                })
                .collect();
            roc_from_votes(&votes, k, Stage::SolidMixed, land)
        })
        .collect::<Result<Vec<_>>>()?;
    let (k3, auc3) = select_k(&curves3)?;
    let p3 = max_curvature_point(curve_for(&curves3, k3))?;
    let stage3 = StageParams::new(k3, w3, p3)?;

    let cascade = CascadeParams::new(stage1.clone(), stage2.clone(), stage3.clone())?;
    let report = vec![
        StageCalibration {
            stage: Stage::Occurrence,
            land,
            params: stage1,
            auc: auc1,
            queries: queries.len(),
            curves: curves1,
        },
        StageCalibration {
            stage: Stage::Liquid,
            land,
            params: stage2,
            auc: auc2,
            queries: pools.len(),
            curves: curves2,
        },
        StageCalibration {
            stage: Stage::SolidMixed,
            land,
            params: stage3,
            auc: auc3,
            queries: reach3.len(),
            curves: curves3,
        },
    ];
    Ok((cascade, report))
}

fn curve_for(curves: &[RocCurve], k: usize) -> &RocCurve {
    curves.iter().find(|c| c.k == k).expect("k taken from the candidate list")
}

fn threshold_text(t: Option<VoteFraction>) -> String {
    t.map(|t| t.to_string()).unwrap_or_default()
}

/// Rows `stage,land,k,threshold,p_F,p_H`; the accept-all point has an
/// empty threshold.
pub fn write_roc_report<'a, W: Write>(mut w: W, curves: impl IntoIterator<Item = &'a RocCurve>) -> std::io::Result<()> {
    writeln!(w, "stage,land,k,threshold,p_F,p_H")?;
    for c in curves {
        for p in &c.points {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                c.stage.number(),
                c.land,
                c.k,
                threshold_text(p.threshold),
                p.p_f,
                p.p_h
            )?;
        }
    }
    Ok(())
}

/// File name of the per-(stage, land, k) ROC file.
pub fn roc_file_name(curve: &RocCurve) -> String {
    format!("roc_stage{}_{}_k{}.csv", curve.stage.number(), curve.land, curve.k)
}

/// Ids occurring more than once, ascending.
pub fn duplicate_ids(queries: &[CalibrationQuery]) -> Vec<u64> {
    let mut seen = HashSet::new();
    let mut dup: Vec<u64> = queries
        .iter()
        .filter(|q| !seen.insert(q.sample_id))
        .map(|q| q.sample_id)
        .collect();
    dup.sort_unstable();
    dup.dedup();
    dup
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const L: LandSurfaceClass = LandSurfaceClass::NoSnow;

    fn curve(points: &[(f64, f64)]) -> RocCurve {
        let k = points.len() as u64;
        RocCurve {
            stage: Stage::Occurrence,
            land: L,
            k: points.len(),
            points: points
                .iter()
                .enumerate()
                .map(|(i, &(f, h))| RocPoint {
                    threshold: Some(VoteFraction::new(k - 1 - i as u64, k).unwrap()),
                    p_f: f,
                    p_h: h,
                })
                .collect(),
        }
    }

    fn vs(votes: u64, k: u64, positive: bool) -> VoteSample {
        VoteSample {
            votes,
            voters: k,
            eligible: true,
            positive,
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_points(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]).unwrap(), 1.0);
        assert_eq!(auc_points(&[(0.0, 0.0), (1.0, 1.0)]).unwrap(), 0.5);
        // trapezoid sum 0.08 + 0.72
        let a = auc_points(&[(0.0, 0.0), (0.2, 0.8), (1.0, 1.0)]).unwrap();
        assert!((a - 0.80).abs() < 1e-12);
        assert!(auc_points(&[(0.5, 0.5), (0.2, 0.8)]).is_err());
        assert!(auc_points(&[(0.5, 0.5)]).is_err());
    }

    #[test]
    fn auc_matches_numeric_integration() {
        // midpoint rule on the piecewise-linear interpolant
        let pts = [(0.0, 0.0), (0.2, 0.8), (1.0, 1.0)];
        let n = 100_000;
        let mut s = 0.0;
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64;
            let seg = pts.windows(2).find(|w| x >= w[0].0 && x <= w[1].0).unwrap();
            let t = (x - seg[0].0) / (seg[1].0 - seg[0].0);
            s += seg[0].1 + t * (seg[1].1 - seg[0].1);
        }
        assert!((s / n as f64 - auc_points(&pts).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn separable_curve_reaches_corner() {
        let mut samples = Vec::new();
        for _ in 0..50 {
            samples.push(vs(9, 10, true));
            samples.push(vs(1, 10, false));
        }
        let c = roc_from_votes(&samples, 10, Stage::Occurrence, L).unwrap();
        assert!(c.points.iter().any(|p| p.p_f == 0.0 && p.p_h == 1.0));
        assert_eq!(auc(&c).unwrap(), 1.0);
    }

    #[test]
    fn k_one_has_two_interior_thresholds() {
        let samples = [vs(1, 1, true), vs(0, 1, false), vs(1, 1, false)];
        let c = roc_from_votes(&samples, 1, Stage::Occurrence, L).unwrap();
        let interior: Vec<_> = c.points.iter().filter_map(|p| p.threshold).collect();
        assert_eq!(interior.len(), 2);
    }

    #[test]
    fn one_class_calibration_set_is_rejected() {
        assert!(roc_from_votes(&[vs(1, 2, true)], 2, Stage::Occurrence, L).is_err());
    }

    #[test]
    fn random_labels_follow_the_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 20u64;
        let samples: Vec<VoteSample> = (0..10_000)
            .map(|_| vs(rng.random_range(0..=k), k, rng.random_bool(0.5)))
            .collect();
        let c = roc_from_votes(&samples, k as usize, Stage::Occurrence, L).unwrap();
        for p in &c.points {
            assert!((p.p_f - p.p_h).abs() < 0.05, "{p:?}");
        }
        assert!((auc(&c).unwrap() - 0.5).abs() < 0.05);
    }

    fn densified_l() -> RocCurve {
        let mut pts = Vec::new();
        for i in 0..=10 {
            pts.push((0.05 * i as f64 / 10.0, 0.9 * i as f64 / 10.0));
        }
        for i in 1..=20 {
            let t = i as f64 / 20.0;
            pts.push((0.05 + 0.95 * t, 0.9 + 0.1 * t));
        }
        curve(&pts)
    }

    #[test]
    fn corner_of_l_curve() {
        let c = densified_l();
        let p = max_curvature_point(&c).unwrap();
        let corner = c.points[10].threshold.unwrap();
        // smoothing spreads the corner over its immediate neighbors
        let idx = c.points.iter().position(|q| q.threshold == Some(p)).unwrap();
        assert!((9..=11).contains(&idx), "picked vertex {idx}, corner is {corner}");
    }

    #[test]
    fn straight_curve_has_no_maximum() {
        let pts: Vec<(f64, f64)> = (0..=10).map(|i| (i as f64 / 10.0, i as f64 / 10.0)).collect();
        let err = max_curvature_point(&curve(&pts)).unwrap_err();
        assert!(err.to_string().contains("no curvature maximum"));
        assert!(max_curvature_point(&curve(&pts[..4])).is_err());
    }

    #[test]
    fn constant_curvature_picks_largest_threshold() {
        // quarter circle centered at (1, 0) through (0, 0) and (1, 1)
        let n = 21;
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let a = std::f64::consts::PI - std::f64::consts::FRAC_PI_2 * i as f64 / (n - 1) as f64;
                (1.0 + a.cos(), a.sin())
            })
            .collect();
        let c = curve(&pts);
        let p = max_curvature_point(&c).unwrap();
        // first vertex eligible after smoothing holds the largest threshold
        assert_eq!(Some(p), c.points[2].threshold);
    }

    #[test]
    fn select_k_ties_and_winner() {
        let diag = curve(&[(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]);
        let good = curve(&[(0.0, 0.0), (0.1, 0.9), (1.0, 1.0)]);
        let with_k = |c: &RocCurve, k| RocCurve { k, ..c.clone() };
        assert_eq!(select_k(&[with_k(&diag, 7)]).unwrap().0, 7);
        assert_eq!(select_k(&[with_k(&diag, 50), with_k(&good, 100), with_k(&diag, 25)]).unwrap().0, 100);
        assert_eq!(select_k(&[with_k(&diag, 50), with_k(&diag, 25)]).unwrap().0, 25);
    }

    #[test]
    fn rank_k_orders_by_preference() {
        let diag = curve(&[(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]);
        let good = curve(&[(0.0, 0.0), (0.1, 0.9), (1.0, 1.0)]);
        let with_k = |c: &RocCurve, k| RocCurve { k, ..c.clone() };
        let order: Vec<usize> = rank_k(&[with_k(&diag, 50), with_k(&good, 100), with_k(&diag, 25)])
            .unwrap()
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        assert_eq!(order, vec![100, 25, 50]);
    }

    proptest! {
        #[test]
        fn sweep_is_monotone_and_reversal_complements(
            raw in prop::collection::vec((0u64..=15, any::<bool>()), 2..200),
        ) {
            prop_assume!(raw.iter().any(|r| r.1) && raw.iter().any(|r| !r.1));
            let samples: Vec<VoteSample> = raw.iter().map(|&(v, pos)| vs(v, 15, pos)).collect();
            let c = roc_from_votes(&samples, 15, Stage::Occurrence, L).unwrap();
            for w in c.points.windows(2) {
                // decreasing threshold never lowers either rate
                prop_assert!(w[1].p_f >= w[0].p_f && w[1].p_h >= w[0].p_h);
            }
            let a = auc(&c).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            let rev: Vec<VoteSample> = samples.iter().map(|s| VoteSample { positive: !s.positive, ..*s }).collect();
            let r = roc_from_votes(&rev, 15, Stage::Occurrence, L).unwrap();
            prop_assert!((auc(&r).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }
}
