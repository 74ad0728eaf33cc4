//! Shared domain types: channel vectors, class labels, matched samples,
//! per-stage parameters and weight matrices.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Lower plausibility bound for a brightness temperature, in Kelvin.
pub const TB_MIN_K: f64 = 50.0;
/// Upper plausibility bound for a brightness temperature, in Kelvin.
pub const TB_MAX_K: f64 = 350.0;
/// Default number of radiometer channels (10 to 183 GHz).
pub const DEFAULT_CHANNEL_COUNT: usize = 13;

/// Brightness temperatures (K), one entry per radiometer channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector(Vec<f64>);

impl ChannelVector {
    /// Wraps `values` after checking every entry is finite and inside
    /// `[TB_MIN_K, TB_MAX_K]`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < TB_MIN_K || **v > TB_MAX_K)
        {
            return Err(Error::InvalidArgument(format!(
                "channel {i} brightness temperature {v} outside [{TB_MIN_K}, {TB_MAX_K}] K"
            )));
        }
        Ok(ChannelVector(values))
    }

    /// Wraps `values` without range checks. Used for queries and tests in
    /// abstract low-dimensional spaces.
    pub fn new_unchecked(values: Vec<f64>) -> Self {
        ChannelVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ChannelVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

macro_rules! label_enum {
    (
        $(#[$meta:meta])*
        $name:ident { $($variant:ident => $text:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

label_enum! {
    /// Precipitation phase as reported by the active/passive products.
    PhaseLabel { Liquid => "liquid", Mixed => "mixed", Solid => "solid" }
}

label_enum! {
    /// Atmospheric condition of a database record.
    AtmosphericClass {
        ClearSky => "clear",
        Liquid => "liquid",
        Solid => "solid",
        Mixed => "mixed",
    }
}

label_enum! {
    /// Land-surface class used to partition the database.
    LandSurfaceClass { SnowCovered => "snow", NoSnow => "nosnow" }
}

impl PhaseLabel {
    pub fn code(self) -> u8 {
        match self {
            PhaseLabel::Liquid => 1,
            PhaseLabel::Mixed => 2,
            PhaseLabel::Solid => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(PhaseLabel::Liquid),
            2 => Some(PhaseLabel::Mixed),
            3 => Some(PhaseLabel::Solid),
            _ => None,
        }
    }
}

impl AtmosphericClass {
    /// One-based index (clear sky = 1, liquid = 2, solid = 3, mixed = 4).
    pub fn index(self) -> usize {
        match self {
            AtmosphericClass::ClearSky => 1,
            AtmosphericClass::Liquid => 2,
            AtmosphericClass::Solid => 3,
            AtmosphericClass::Mixed => 4,
        }
    }

    pub fn is_precipitating(self) -> bool {
        self != AtmosphericClass::ClearSky
    }

    pub fn phase(self) -> Option<PhaseLabel> {
        match self {
            AtmosphericClass::ClearSky => None,
            AtmosphericClass::Liquid => Some(PhaseLabel::Liquid),
            AtmosphericClass::Solid => Some(PhaseLabel::Solid),
            AtmosphericClass::Mixed => Some(PhaseLabel::Mixed),
        }
    }
}

impl From<PhaseLabel> for AtmosphericClass {
    fn from(p: PhaseLabel) -> Self {
        match p {
            PhaseLabel::Liquid => AtmosphericClass::Liquid,
            PhaseLabel::Solid => AtmosphericClass::Solid,
            PhaseLabel::Mixed => AtmosphericClass::Mixed,
        }
    }
}

impl LandSurfaceClass {
    /// One-based index (snow covered = 1, no snow = 2).
    pub fn index(self) -> usize {
        match self {
            LandSurfaceClass::SnowCovered => 1,
            LandSurfaceClass::NoSnow => 2,
        }
    }
}

/// One database record: brightness temperatures plus ancillary truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSample {
    pub sample_id: u64,
    pub tb: ChannelVector,
    /// Radar precipitation rate, mm/h.
    pub rate: f64,
    pub active_phase: Option<PhaseLabel>,
    /// Passive liquid-phase probability (0 solid, 1 liquid).
    pub passive_phase_prob: Option<f64>,
    pub ref_phase: Option<PhaseLabel>,
    /// Fraction of enclosed high-resolution pixels indicating snow.
    pub snow_fraction: f64,
    pub skin_temp: f64,
    pub air_temp: f64,
    pub latitude: f64,
    pub longitude: f64,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
}

impl MatchedSample {
    pub fn atmospheric_class(&self) -> AtmosphericClass {
        match self.ref_phase {
            Some(p) if self.rate > 0.0 => p.into(),
            _ => AtmosphericClass::ClearSky,
        }
    }
}

/// Checks every per-record invariant and returns the sample unchanged.
pub fn validate_sample(sample: MatchedSample, channel_count: usize) -> Result<MatchedSample> {
    let fail = |reason: String| Error::InvalidSample {
        sample_id: sample.sample_id,
        reason,
    };
    if sample.tb.len() != channel_count {
        return Err(fail(format!(
            "channel vector has {} entries, database declares {channel_count}",
            sample.tb.len()
        )));
    }
    for (i, &v) in sample.tb.as_slice().iter().enumerate() {
        if !v.is_finite() {
            return Err(fail(format!("channel {i} is not finite")));
        }
        if !(TB_MIN_K..=TB_MAX_K).contains(&v) {
            return Err(fail(format!(
                "channel {i} value {v} K outside [{TB_MIN_K}, {TB_MAX_K}]"
            )));
        }
    }
    if !sample.rate.is_finite() || sample.rate < 0.0 {
        return Err(fail(format!("rate {} is not a finite non-negative value", sample.rate)));
    }
    match (sample.rate > 0.0, sample.ref_phase) {
        (true, None) => return Err(fail("precipitating sample has no reference phase".into())),
        (false, Some(_)) => return Err(fail("clear-sky sample carries a reference phase".into())),
        _ => {}
    }
    if let Some(p) = sample.passive_phase_prob {
        if !(0.0..=1.0).contains(&p) {
            return Err(fail(format!("passive phase probability {p} outside [0, 1]")));
        }
    }
    if !(0.0..=1.0).contains(&sample.snow_fraction) {
        return Err(fail(format!(
            "snow fraction {} outside [0, 1]",
            sample.snow_fraction
        )));
    }
    if !sample.skin_temp.is_finite() || !sample.air_temp.is_finite() {
        return Err(fail("non-finite skin or air temperature".into()));
    }
    if !(-90.0..=90.0).contains(&sample.latitude) {
        return Err(fail(format!("latitude {} outside [-90, 90]", sample.latitude)));
    }
    if !(-180.0..180.0).contains(&sample.longitude) {
        return Err(fail(format!("longitude {} outside [-180, 180)", sample.longitude)));
    }
    Ok(sample)
}

/// An exact rational in `[0, 1]` used for vote thresholds, so that the
/// comparison `votes > p * k` never depends on float rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VoteFraction {
    num: u64,
    den: u64,
}

impl VoteFraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num > den {
            return Err(Error::InvalidArgument(format!(
                "fraction {num}/{den} is not in [0, 1]"
            )));
        }
        let g = gcd(num, den);
        Ok(VoteFraction {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `votes > self * k`, evaluated exactly.
    pub fn exceeded_by(self, votes: u64, k: u64) -> bool {
        (votes as u128) * (self.den as u128) > (self.num as u128) * (k as u128)
    }

    /// `k < self * total`, evaluated exactly.
    pub fn product_exceeds(self, k: u64, total: u64) -> bool {
        (k as u128) * (self.den as u128) < (self.num as u128) * (total as u128)
    }

    pub fn is_open_unit(self) -> bool {
        self.num > 0 && self.num < self.den
    }
}

impl fmt::Display for VoteFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for VoteFraction {
    type Err = Error;

    /// Accepts `num/den` or a plain decimal such as `0.45`; decimals are
    /// converted exactly.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("cannot parse fraction `{s}`"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse::<u64>().map_err(|_| bad())?;
            let d = d.trim().parse::<u64>().map_err(|_| bad())?;
            return VoteFraction::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        if frac.len() > 18 {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int_v: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int_v
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac_v))
            .ok_or_else(bad)?;
        VoteFraction::new(num, den)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Symmetric positive semi-definite weight matrix of a quadratic distance.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightMatrix {
    Diagonal(Vec<f64>),
    /// Row-major `dim x dim` entries.
    Full { dim: usize, entries: Vec<f64> },
}

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;

impl WeightMatrix {
    pub fn identity(dim: usize) -> Self {
        WeightMatrix::Diagonal(vec![1.0; dim])
    }

    pub fn diagonal(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("empty weight vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidWeights(format!(
                "diagonal weight {w} is negative or not finite"
            )));
        }
        Ok(WeightMatrix::Diagonal(weights))
    }

    /// Builds a full matrix from row-major entries, checking symmetry and
    /// positive semi-definiteness.
    pub fn full(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || entries.len() != dim * dim {
            return Err(Error::InvalidWeights(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidWeights("non-finite entry".into()));
        }
        let scale = entries.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..dim {
            for j in (i + 1)..dim {
                let (a, b) = (entries[i * dim + j], entries[j * dim + i]);
                if (a - b).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidWeights(format!(
                        "asymmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        let eig = symmetric_eigenvalues(dim, &entries);
        let max = eig.iter().fold(0.0f64, |m, v| m.max(*v));
        if let Some(min) = eig.iter().copied().reduce(f64::min) {
            if min < -PSD_TOL * max.max(f64::MIN_POSITIVE) {
                return Err(Error::InvalidWeights(format!(
                    "not positive semi-definite (eigenvalue {min:.6e})"
                )));
            }
        }
        Ok(WeightMatrix::Full { dim, entries })
    }

    pub fn dim(&self) -> usize {
        match self {
            WeightMatrix::Diagonal(w) => w.len(),
            WeightMatrix::Full { dim, .. } => *dim,
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, WeightMatrix::Diagonal(_))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            WeightMatrix::Diagonal(w) => {
                if i == j {
                    w[i]
                } else {
                    0.0
                }
            }
            WeightMatrix::Full { dim, entries } => entries[i * dim + j],
        }
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim();
        (0..n * n).map(|ix| self.get(ix / n, ix % n)).collect()
    }

    /// Multiplies every entry by a positive scalar.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::InvalidWeights(format!("scale factor {factor} must be positive")));
        }
        Ok(match self {
            WeightMatrix::Diagonal(w) => WeightMatrix::Diagonal(w.iter().map(|v| v * factor).collect()),
            WeightMatrix::Full { dim, entries } => WeightMatrix::Full {
                dim: *dim,
                entries: entries.iter().map(|v| v * factor).collect(),
            },
        })
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        match self {
            WeightMatrix::Diagonal(w) => w.iter().map(|v| v * v).sum::<f64>().sqrt(),
            WeightMatrix::Full { entries, .. } => entries.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

pub(crate) fn symmetric_eigenvalues(dim: usize, entries: &[f64]) -> Vec<f64> {
    let m = DMatrix::from_row_slice(dim, dim, entries);
    // Symmetrize to absorb the tolerated asymmetry.
    let m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigenvalues().iter().copied().collect()
}

/// Neighbor count, weights and vote threshold of one decision stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub k: usize,
    pub weights: WeightMatrix,
    pub p: VoteFraction,
}

impl StageParams {
    pub fn new(k: usize, weights: WeightMatrix, p: VoteFraction) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if !p.is_open_unit() {
            return Err(Error::config(format!(
                "detection probability {p} must lie strictly between 0 and 1"
            )));
        }
        Ok(StageParams { k, weights, p })
    }
}

/// Counts of hits (a), false alarms (b), misses (c) and correct
/// rejections (d).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        ContingencyTable { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn record(&mut self, predicted: bool, observed: bool) {
        match (predicted, observed) {
            (true, true) => self.a += 1,
            (true, false) => self.b += 1,
            (false, true) => self.c += 1,
            (false, false) => self.d += 1,
        }
    }

    pub fn merge(&self, other: &ContingencyTable) -> ContingencyTable {
        ContingencyTable {
            a: self.a + other.a,
            b: self.b + other.b,
            c: self.c + other.c,
            d: self.d + other.d,
        }
    }
}
