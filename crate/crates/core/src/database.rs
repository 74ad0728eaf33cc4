//! Construction of the stratified, balanced a-priori database.
//!
//! Raw matched samples go through reference-phase merging, snow-cover
//! classification and stratification into (land surface, atmosphere)
//! cells. Each cell is reservoir-sampled down to its quota so that every
//! land class holds exactly `M` records, half clear sky and half split
//! evenly across the three precipitation phases.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, Shortfall};
use crate::model::{
    validate_sample, AtmosphericClass, LandSurfaceClass, MatchedSample, PhaseLabel,
};

/// Current on-disk format version of database and sample files.
pub const FORMAT_VERSION: u16 = 1;
/// Default threshold for discretizing the passive liquid-phase probability.
pub const DEFAULT_REF_THRESHOLD: f64 = 0.5;
/// 0 degrees Celsius in Kelvin.
pub const FREEZING_K: f64 = 273.15;

/// Discretizes a passive liquid-phase probability: below the threshold is
/// solid, otherwise liquid.
pub fn discretize_passive(prob: f64, threshold: f64) -> Result<PhaseLabel> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!(
            "passive phase probability {prob} outside [0, 1]"
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "discretization threshold {threshold} outside (0, 1)"
        )));
    }
    Ok(if prob < threshold {
        PhaseLabel::Solid
    } else {
        PhaseLabel::Liquid
    })
}

/// Merges the active phase and the discretized passive phase into the
/// reference label: agreement keeps the phase, anything else is mixed.
pub fn merge_ref_phase(active: PhaseLabel, passive_prob: f64, threshold: f64) -> Result<PhaseLabel> {
    let passive = discretize_passive(passive_prob, threshold)?;
    Ok(match (active, passive) {
        (PhaseLabel::Solid, PhaseLabel::Solid) => PhaseLabel::Solid,
        (PhaseLabel::Liquid, PhaseLabel::Liquid) => PhaseLabel::Liquid,
        _ => PhaseLabel::Mixed,
    })
}

/// Fraction of pixels that indicate snow (any positive snow fraction).
pub fn snow_pixel_fraction(pixel_fractions: &[f64]) -> Result<f64> {
    if pixel_fractions.is_empty() {
        return Err(Error::InvalidArgument("no snow-cover pixels supplied".into()));
    }
    if let Some(v) = pixel_fractions.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("pixel snow fraction {v} outside [0, 1]")));
    }
    let flagged = pixel_fractions.iter().filter(|&&v| v > 0.0).count();
    Ok(flagged as f64 / pixel_fractions.len() as f64)
}

/// A footprint is snow covered when strictly more than half of its pixels
/// indicate snow.
pub fn classify_snow_cover(pixel_fractions: &[f64]) -> Result<bool> {
    let n = pixel_fractions.len();
    snow_pixel_fraction(pixel_fractions)?;
    let flagged = pixel_fractions.iter().filter(|&&v| v > 0.0).count();
    Ok(2 * flagged > n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnowWetness {
    Dry,
    Wet,
    /// Skin and air temperature straddle freezing.
    Indeterminate,
}

impl SnowWetness {
    /// Collapses to the two analysis classes; indeterminate counts as wet.
    pub fn for_analysis(self) -> AnalysisSurfaceClass {
        match self {
            SnowWetness::Dry => AnalysisSurfaceClass::DrySnow,
            SnowWetness::Wet | SnowWetness::Indeterminate => AnalysisSurfaceClass::WetSnow,
        }
    }
}

pub fn classify_snow_wetness(skin_temp: f64, air_temp: f64) -> Result<SnowWetness> {
    if !skin_temp.is_finite() || !air_temp.is_finite() {
        return Err(Error::InvalidArgument("non-finite temperature".into()));
    }
    Ok(if skin_temp < FREEZING_K && air_temp < FREEZING_K {
        SnowWetness::Dry
    } else if skin_temp > FREEZING_K && air_temp > FREEZING_K {
        SnowWetness::Wet
    } else {
        SnowWetness::Indeterminate
    })
}

/// Three-way surface class used only for stratified evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnalysisSurfaceClass {
    Ground,
    WetSnow,
    DrySnow,
}

impl AnalysisSurfaceClass {
    pub const ALL: [AnalysisSurfaceClass; 3] = [
        AnalysisSurfaceClass::Ground,
        AnalysisSurfaceClass::WetSnow,
        AnalysisSurfaceClass::DrySnow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnalysisSurfaceClass::Ground => "ground",
            AnalysisSurfaceClass::WetSnow => "wet_snow",
            AnalysisSurfaceClass::DrySnow => "dry_snow",
        }
    }
}

pub fn analysis_surface(sample: &MatchedSample) -> Result<AnalysisSurfaceClass> {
    if land_class(sample) == LandSurfaceClass::NoSnow {
        return Ok(AnalysisSurfaceClass::Ground);
    }
    Ok(classify_snow_wetness(sample.skin_temp, sample.air_temp)?.for_analysis())
}

/// Centers of the five base-2 logarithmic intensity bins, mm/h.
pub const BIN_CENTERS: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

fn bin_edge(j: usize) -> f64 {
    0.5 * 2f64.powf(j as f64 - 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityBin {
    /// One-based bin index.
    pub index: usize,
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
}

impl IntensityBin {
    pub fn from_index(index: usize) -> Option<Self> {
        if !(1..=BIN_CENTERS.len()).contains(&index) {
            return None;
        }
        Some(IntensityBin {
            index,
            center: BIN_CENTERS[index - 1],
            lower: bin_edge(index - 1),
            upper: bin_edge(index),
        })
    }
}

/// Assigns a positive rate to its bin `[lower, upper)`. Rates outside the
/// outermost edges clamp to the first or last bin.
pub fn assign_intensity_bin(rate: f64) -> Result<IntensityBin> {
    if rate.is_nan() || rate <= 0.0 || !rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "intensity binning needs a positive finite rate, got {rate}"
        )));
    }
    let index = (1..BIN_CENTERS.len())
        .find(|&i| rate < bin_edge(i))
        .unwrap_or(BIN_CENTERS.len());
    Ok(IntensityBin::from_index(index).expect("index within range"))
}

pub fn land_class(sample: &MatchedSample) -> LandSurfaceClass {
    if 2.0 * sample.snow_fraction > 1.0 {
        LandSurfaceClass::SnowCovered
    } else {
        LandSurfaceClass::NoSnow
    }
}

/// Land-surface and atmospheric class of a validated sample.
pub fn stratify(sample: &MatchedSample) -> (LandSurfaceClass, AtmosphericClass) {
    (land_class(sample), sample.atmospheric_class())
}

/// Fills in the reference phase from the active and passive phases.
///
/// Returns `Ok(None)` for precipitating samples that carry only one of the
/// two phases; those are left out of the database.
pub fn assign_ref_phase(mut sample: MatchedSample, threshold: f64) -> Result<Option<MatchedSample>> {
    if sample.rate > 0.0 && sample.ref_phase.is_none() {
        match (sample.active_phase, sample.passive_phase_prob) {
            (Some(active), Some(prob)) => {
                sample.ref_phase = Some(merge_ref_phase(active, prob, threshold)?);
            }
            _ => return Ok(None),
        }
    }
    Ok(Some(sample))
}

/// Per-stratum quotas for a land class of size `m`: clear sky gets
/// `floor(m/2)`, the remainder is split across liquid, solid and mixed
/// with leftovers assigned in that order.
pub fn stratum_quotas(m: usize) -> [(AtmosphericClass, usize); 4] {
    let clear = m / 2;
    let precip = m - clear;
    let base = precip / 3;
    let rem = precip % 3;
    [
        (AtmosphericClass::ClearSky, clear),
        (AtmosphericClass::Liquid, base + usize::from(rem > 0)),
        (AtmosphericClass::Solid, base + usize::from(rem > 1)),
        (AtmosphericClass::Mixed, base),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub channel_count: usize,
    pub channel_order: Vec<String>,
    pub samples_per_land: usize,
    pub seed: u64,
    pub ref_threshold: f64,
    /// Recorded in the metadata; fixed by the caller so rebuilds are
    /// byte-identical.
    pub created_unix: i64,
}

impl BuildConfig {
    pub fn new(channel_count: usize, samples_per_land: usize, seed: u64) -> Self {
        BuildConfig {
            channel_count,
            channel_order: default_channel_order(channel_count),
            samples_per_land,
            seed,
            ref_threshold: DEFAULT_REF_THRESHOLD,
            created_unix: 0,
        }
    }
}

/// Channel names `ch00, ch01, ...` used when no explicit ordering is given.
pub fn default_channel_order(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("ch{i:02}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildMetadata {
    pub format_version: u16,
    pub seed: u64,
    pub samples_per_land: usize,
    pub ref_threshold: f64,
    pub created_unix: i64,
    /// Records read from the input stream.
    pub source_count: u64,
    /// Precipitating records dropped for lacking one of the two phases.
    pub excluded_count: u64,
    /// Valid records available per stratum before subsampling.
    pub available: BTreeMap<(LandSurfaceClass, AtmosphericClass), u64>,
}

/// Class-stratified, balanced collection of matched samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AprioriDatabase {
    pub channel_count: usize,
    pub channel_order: Vec<String>,
    pub strata: BTreeMap<LandSurfaceClass, Vec<MatchedSample>>,
    pub meta: BuildMetadata,
}

impl AprioriDatabase {
    pub fn stratum(&self, land: LandSurfaceClass) -> Result<&[MatchedSample]> {
        self.strata
            .get(&land)
            .map(Vec::as_slice)
            .ok_or(Error::MissingStratum { land })
    }

    pub fn len(&self) -> usize {
        self.strata.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_ids(&self) -> HashSet<u64> {
        self.strata
            .values()
            .flat_map(|v| v.iter().map(|s| s.sample_id))
            .collect()
    }

    /// Sample counts per (land, atmosphere) stratum.
    pub fn counts(&self) -> BTreeMap<(LandSurfaceClass, AtmosphericClass), usize> {
        let mut out = BTreeMap::new();
        for (land, samples) in &self.strata {
            for atm in AtmosphericClass::ALL {
                out.insert((*land, *atm), 0);
            }
            for s in samples {
                *out.entry((*land, s.atmospheric_class())).or_default() += 1;
            }
        }
        out
    }
}

struct Reservoir {
    quota: usize,
    seen: u64,
    items: Vec<MatchedSample>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(quota: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Reservoir {
            quota,
            seen: 0,
            items: Vec::with_capacity(quota),
            rng,
        }
    }

    fn offer(&mut self, sample: MatchedSample) {
        self.seen += 1;
        if self.items.len() < self.quota {
            self.items.push(sample);
        } else if self.quota > 0 {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.quota {
                self.items[j as usize] = sample;
            }
        }
    }
}

fn stratum_stream(land: LandSurfaceClass, atm: AtmosphericClass) -> u64 {
    (land.index() * 8 + atm.index()) as u64
}

/// Builds the balanced database from a stream of raw samples.
///
/// The result is a pure function of the input order, `M` and the seed.
pub fn build_balanced_database<I>(samples: I, config: &BuildConfig) -> Result<AprioriDatabase>
where
    I: IntoIterator<Item = MatchedSample>,
{
    if config.samples_per_land < 2 {
        return Err(Error::config_field(
            "database_size_per_land",
            "must be at least 2 so both clear and precipitating strata are populated",
        ));
    }
    if config.channel_order.len() != config.channel_count {
        return Err(Error::config_field(
            "channel_order",
            format!(
                "lists {} channels, channel_count is {}",
                config.channel_order.len(),
                config.channel_count
            ),
        ));
    }
    let quotas = stratum_quotas(config.samples_per_land);
    let mut reservoirs: BTreeMap<(LandSurfaceClass, AtmosphericClass), Reservoir> = BTreeMap::new();
    for land in LandSurfaceClass::ALL {
        for (atm, quota) in quotas {
            reservoirs.insert(
                (*land, atm),
                Reservoir::new(quota, config.seed, stratum_stream(*land, atm)),
            );
        }
    }

    let mut seen_ids = HashSet::new();
    let mut source_count = 0u64;
    let mut excluded_count = 0u64;
    for raw in samples {
        source_count += 1;
        let Some(sample) = assign_ref_phase(raw, config.ref_threshold)? else {
            excluded_count += 1;
            continue;
        };
        let sample = validate_sample(sample, config.channel_count)?;
        if !seen_ids.insert(sample.sample_id) {
            return Err(Error::InvalidSample {
                sample_id: sample.sample_id,
                reason: "duplicate sample_id".into(),
            });
        }
        let key = stratify(&sample);
        reservoirs
            .get_mut(&key)
            .expect("every stratum has a reservoir")
            .offer(sample);
    }

    let shortfalls: Vec<Shortfall> = reservoirs
        .iter()
        .filter(|(_, r)| (r.seen as usize) < r.quota)
        .map(|((land, atm), r)| Shortfall {
            land: *land,
            atmosphere: *atm,
            available: r.seen as usize,
            required: r.quota,
        })
        .collect();
    if !shortfalls.is_empty() {
        return Err(Error::Shortfall(shortfalls));
    }

    let available = reservoirs.iter().map(|(k, r)| (*k, r.seen)).collect();
    let mut strata: BTreeMap<LandSurfaceClass, Vec<MatchedSample>> = BTreeMap::new();
    for ((land, _), r) in reservoirs {
        strata.entry(land).or_default().extend(r.items);
    }
    for samples in strata.values_mut() {
        samples.sort_by_key(|s| s.sample_id);
    }

    Ok(AprioriDatabase {
        channel_count: config.channel_count,
        channel_order: config.channel_order.clone(),
        strata,
        meta: BuildMetadata {
            format_version: FORMAT_VERSION,
            seed: config.seed,
            samples_per_land: config.samples_per_land,
            ref_threshold: config.ref_threshold,
            created_unix: config.created_unix,
            source_count,
            excluded_count,
            available,
        },
    })
}

/// Mean brightness temperatures for one (atmosphere, intensity bin) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStat {
    pub atmosphere: AtmosphericClass,
    /// `None` for clear sky.
    pub bin: Option<usize>,
    pub count: usize,
    pub mean_tb: Vec<f64>,
}

/// Per-class, per-intensity-bin mean brightness temperatures.
pub fn binned_mean_tb(samples: &[MatchedSample]) -> Result<Vec<BinStat>> {
    let mut acc: BTreeMap<(AtmosphericClass, Option<usize>), (usize, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let atm = s.atmospheric_class();
        let bin = if atm.is_precipitating() {
            Some(assign_intensity_bin(s.rate)?.index)
        } else {
            None
        };
        let entry = acc
            .entry((atm, bin))
            .or_insert_with(|| (0, vec![0.0; s.tb.len()]));
        if entry.1.len() != s.tb.len() {
            return Err(Error::DimensionMismatch {
                expected: entry.1.len(),
                actual: s.tb.len(),
            });
        }
        entry.0 += 1;
        for (m, v) in entry.1.iter_mut().zip(s.tb.as_slice()) {
            *m += v;
        }
    }
    Ok(acc
        .into_iter()
        .map(|((atmosphere, bin), (count, sum))| BinStat {
            atmosphere,
            bin,
            count,
            mean_tb: sum.into_iter().map(|v| v / count as f64).collect(),
        })
        .collect())
}

/// Channel-wise mean over the samples accepted by `filter`.
pub fn class_mean_tb<F>(samples: &[MatchedSample], filter: F) -> Option<Vec<f64>>
where
    F: Fn(&MatchedSample) -> bool,
{
    let mut count = 0usize;
    let mut sum: Vec<f64> = Vec::new();
    for s in samples.iter().filter(|s| filter(s)) {
        if sum.is_empty() {
            sum = vec![0.0; s.tb.len()];
        }
        count += 1;
        for (m, v) in sum.iter_mut().zip(s.tb.as_slice()) {
            *m += v;
        }
    }
    (count > 0).then(|| sum.into_iter().map(|v| v / count as f64).collect())
}
