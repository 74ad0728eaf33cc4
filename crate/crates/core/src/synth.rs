//! Labeled synthetic matched samples.
//!
//! Each class is Gaussian with diagonal covariance. For precipitating
//! classes the rate is log-uniform on `[lo, hi]` and the mean shifts by
//! `slope * log2(rate / center)` per channel, where `center = sqrt(lo * hi)`.
//!
//! Randomness is portable: a `ChaCha8Rng` seeded with `seed_from_u64`
//! (rand_chacha 0.9), uniforms from `Rng::random::<f64>()` (the top 53
//! bits of a `u64`, scaled to `[0, 1)`), and normals from the cosine branch
//! of Box-Muller, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`, drawn per channel
//! in channel order. Every sample draws, in order: the rate (precipitating
//! classes only), the channel noises, then the ancillary fields.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AtmosphericClass, ChannelVector, LandSurfaceClass, MatchedSample, PhaseLabel, TB_MAX_K, TB_MIN_K};

/// Study period used for synthetic timestamps: 2015-06-01 to 2016-06-01 UTC.
pub const SYNTH_START_UNIX: i64 = 1_433_116_800;
pub const SYNTH_END_UNIX: i64 = 1_464_739_200;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub land: LandSurfaceClass,
    pub atmosphere: AtmosphericClass,
    pub mean: Vec<f64>,
    pub std_dev: Vec<f64>,
    /// Kelvin per doubling of the rate.
    pub slope: Vec<f64>,
    /// Log-uniform rate bounds, mm/h; ignored for clear sky.
    pub intensity: (f64, f64),
    pub count: usize,
    pub seed: u64,
    /// Sample ids are `first_id..first_id + count`.
    pub first_id: u64,
}

impl ClassSpec {
    fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if n == 0 || self.std_dev.len() != n || self.slope.len() != n {
            return Err(Error::InvalidArgument(
                "mean, std_dev and slope must be non-empty and equally long".into(),
            ));
        }
        if self.std_dev.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("standard deviations must be positive".into()));
        }
        if self.mean.iter().chain(&self.slope).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite mean or slope".into()));
        }
        let (lo, hi) = self.intensity;
        if self.atmosphere.is_precipitating() && !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "intensity bounds must satisfy 0 < lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (TAU * u2).cos()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws `spec.count` samples. Channel values are clamped to the plausible
/// brightness temperature range.
pub fn generate(spec: &ClassSpec) -> Result<Vec<MatchedSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.intensity;
    let precip = spec.atmosphere.is_precipitating();
    let center = (lo * hi).sqrt();
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let rate = if precip {
            lo * (hi / lo).powf(rng.random::<f64>())
        } else {
            0.0
        };
        let shift = if precip { (rate / center).log2() } else { 0.0 };
        let tb: Vec<f64> = (0..spec.mean.len())
            .map(|c| {
                let v = spec.mean[c] + spec.slope[c] * shift + spec.std_dev[c] * normal(&mut rng);
                v.clamp(TB_MIN_K, TB_MAX_K)
            })
            .collect();
        let snow = spec.land == LandSurfaceClass::SnowCovered;
        let snow_fraction = if snow { 0.8 } else { 0.1 };
        let dry = rng.random_bool(0.5);
        let (skin_temp, air_temp) = match (snow, dry) {
            (true, true) => (uniform(&mut rng, 250.0, 270.0), uniform(&mut rng, 250.0, 270.0)),
            (true, false) => (uniform(&mut rng, 274.0, 278.0), uniform(&mut rng, 274.0, 278.0)),
            _ => (uniform(&mut rng, 278.0, 300.0), uniform(&mut rng, 278.0, 300.0)),
        };
        let latitude = uniform(&mut rng, -60.0, 75.0);
        let longitude = uniform(&mut rng, -180.0, 180.0).min(179.999_999);
        let timestamp = SYNTH_START_UNIX + (rng.random::<f64>() * (SYNTH_END_UNIX - SYNTH_START_UNIX) as f64) as i64;
        let (active_phase, passive_phase_prob) = match spec.atmosphere {
            AtmosphericClass::ClearSky => (None, None),
            AtmosphericClass::Liquid => (Some(PhaseLabel::Liquid), Some(uniform(&mut rng, 0.6, 1.0))),
            AtmosphericClass::Solid => (Some(PhaseLabel::Solid), Some(uniform(&mut rng, 0.0, 0.4))),
            AtmosphericClass::Mixed => (Some(PhaseLabel::Solid), Some(uniform(&mut rng, 0.6, 1.0))),
        };
        out.push(MatchedSample {
            sample_id: spec.first_id + i as u64,
            tb: ChannelVector::new(tb)?,
            rate,
            active_phase,
            passive_phase_prob,
            ref_phase: spec.atmosphere.phase(),
            snow_fraction,
            skin_temp,
            air_temp,
            latitude,
            longitude,
            timestamp,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Distance between class means, in units of `sigma`.
    pub separation: f64,
    pub channel_count: usize,
    pub sigma: f64,
    pub base_tb: f64,
    /// Slope on the high-frequency channels, K per doubling of the rate.
    pub high_freq_slope: f64,
    pub intensity: (f64, f64),
    pub n_build: usize,
    pub n_calibration: usize,
    pub n_holdout: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(separation: f64, n_per_class: usize, seed: u64) -> Self {
        ScenarioConfig {
            separation,
            channel_count: crate::model::DEFAULT_CHANNEL_COUNT,
            sigma: 2.0,
            base_tb: 240.0,
            high_freq_slope: -1.0,
            intensity: (0.25, 16.0),
            n_build: n_per_class,
            n_calibration: n_per_class,
            n_holdout: n_per_class,
            seed,
        }
    }
}

/// Samples of the three disjoint streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub build: Vec<MatchedSample>,
    pub calibration: Vec<MatchedSample>,
    pub holdout: Vec<MatchedSample>,
}

/// Stream offsets in the id space; class `c` of stream `s` starts at
/// `s * 10^9 + c * 10^8`.
const STREAM_STRIDE: u64 = 1_000_000_000;
const CLASS_STRIDE: u64 = 100_000_000;

fn class_channel(land: LandSurfaceClass, atm: AtmosphericClass, dim: usize) -> usize {
    let li = land.index() - 1;
    let ai = atm.index() - 1;
    if dim >= 8 {
        li * 4 + ai
    } else {
        ai
    }
}

/// Class mean vectors: each class displaces one channel by
/// `separation * sigma / sqrt(2)`, so any two classes sharing a land type
/// are `separation * sigma` apart.
pub fn class_mean(cfg: &ScenarioConfig, land: LandSurfaceClass, atm: AtmosphericClass) -> Vec<f64> {
    let mut m = vec![cfg.base_tb; cfg.channel_count];
    m[class_channel(land, atm, cfg.channel_count)] += cfg.separation * cfg.sigma / std::f64::consts::SQRT_2;
    m
}

/// Channels carrying the intensity slope: the last four, once there are
/// enough channels to keep them clear of the class axes.
fn slope_channels(dim: usize) -> std::ops::Range<usize> {
    if dim >= 12 {
        dim - 4..dim
    } else {
        dim..dim
    }
}

/// Class specs of one stream, clear sky through mixed for each land class.
pub fn scenario_specs(cfg: &ScenarioConfig, stream: u64, count: usize) -> Result<Vec<ClassSpec>> {
    if !(cfg.separation.is_finite() && cfg.separation >= 0.0) {
        return Err(Error::InvalidArgument(format!("separation {} must be non-negative", cfg.separation)));
    }
    if cfg.channel_count < 4 {
        return Err(Error::InvalidArgument("scenario needs at least 4 channels".into()));
    }
    if count as u64 >= CLASS_STRIDE {
        return Err(Error::InvalidArgument(format!("at most {} samples per class", CLASS_STRIDE - 1)));
    }
    let dim = cfg.channel_count;
    let mut slope = vec![0.0; dim];
    for c in slope_channels(dim) {
        slope[c] = cfg.high_freq_slope;
    }
    let mut specs = Vec::with_capacity(8);
    for &land in LandSurfaceClass::ALL {
        for &atm in AtmosphericClass::ALL {
            let class = ((land.index() - 1) * 4 + atm.index() - 1) as u64;
            specs.push(ClassSpec {
                land,
                atmosphere: atm,
                mean: class_mean(cfg, land, atm),
                std_dev: vec![cfg.sigma; dim],
                slope: if atm.is_precipitating() { slope.clone() } else { vec![0.0; dim] },
                intensity: cfg.intensity,
                count,
                seed: cfg
                    .seed
                    .wrapping_add((stream * 8 + class + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                first_id: stream * STREAM_STRIDE + class * CLASS_STRIDE,
            });
        }
    }
    Ok(specs)
}

/// Build, calibration and holdout streams over both land classes and all
/// four atmospheric classes.
pub fn scenario_separable(cfg: &ScenarioConfig) -> Result<Scenario> {
    let stream = |s: u64, n: usize| -> Result<Vec<MatchedSample>> {
        let mut out = Vec::new();
        for spec in scenario_specs(cfg, s, n)? {
            out.extend(generate(&spec)?);
        }
        Ok(out)
    };
    Ok(Scenario {
        build: stream(0, cfg.n_build)?,
        calibration: stream(1, cfg.n_calibration)?,
        holdout: stream(2, cfg.n_holdout)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::database::{assign_intensity_bin, stratify};
    use crate::model::validate_sample;

    fn spec(atm: AtmosphericClass, slope: f64, sd: f64, count: usize) -> ClassSpec {
        ClassSpec {
            land: LandSurfaceClass::NoSnow,
            atmosphere: atm,
            mean: vec![240.0, 250.0, 260.0],
            std_dev: vec![sd; 3],
            slope: vec![0.0, 0.0, slope],
            intensity: (0.25, 16.0),
            count,
            seed: 5,
            first_id: 0,
        }
    }

    #[test]
    fn empty_spec() {
        assert!(generate(&spec(AtmosphericClass::Liquid, 0.0, 1.0, 0)).unwrap().is_empty());
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&spec(AtmosphericClass::Liquid, 0.0, 0.0, 1)).is_err());
        let mut s = spec(AtmosphericClass::Liquid, 0.0, 1.0, 1);
        s.intensity = (2.0, 1.0);
        assert!(generate(&s).is_err());
    }

    #[test]
    fn means_within_standard_error() {
        for n in [1_000, 10_000] {
            let sd = 0.1;
            let s = generate(&spec(AtmosphericClass::Liquid, 0.0, sd, n)).unwrap();
            for c in 0..3 {
                let m = s.iter().map(|x| x.tb.as_slice()[c]).sum::<f64>() / n as f64;
                assert!((m - [240.0, 250.0, 260.0][c]).abs() < 3.0 * sd / (n as f64).sqrt(), "n {n} ch {c}: {m}");
            }
        }
    }

    #[test]
    fn negative_slope_cools_with_intensity() {
        let s = generate(&spec(AtmosphericClass::Solid, -3.0, 1.0, 20_000)).unwrap();
        let mut sums = [(0.0, 0usize); 5];
        for x in &s {
            let b = assign_intensity_bin(x.rate).unwrap().index - 1;
            sums[b].0 += x.tb.as_slice()[2];
            sums[b].1 += 1;
        }
        let means: Vec<f64> = sums.iter().map(|(s, n)| s / *n as f64).collect();
        assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    }

    #[test]
    fn samples_are_valid_and_labeled() {
        let cfg = ScenarioConfig::new(6.0, 50, 9);
        let sc = scenario_separable(&cfg).unwrap();
        let mut ids = std::collections::HashSet::new();
        for s in sc.build.iter().chain(&sc.calibration).chain(&sc.holdout) {
            assert!(ids.insert(s.sample_id));
            validate_sample(s.clone(), 13).unwrap();
        }
        assert_eq!(sc.build.len(), 400);
        let strata: std::collections::BTreeSet<_> = sc.build.iter().map(stratify).collect();
        assert_eq!(strata.len(), 8);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = scenario_separable(&ScenarioConfig::new(4.0, 20, 77)).unwrap();
        let b = scenario_separable(&ScenarioConfig::new(4.0, 20, 77)).unwrap();
        assert_eq!(a, b);
        let c = scenario_separable(&ScenarioConfig::new(4.0, 20, 78)).unwrap();
        assert_ne!(a.build, c.build);
    }

    #[test]
    fn class_means_are_equidistant() {
        let cfg = ScenarioConfig::new(6.0, 0, 1);
        for &land in LandSurfaceClass::ALL {
            let means: Vec<Vec<f64>> = AtmosphericClass::ALL.iter().map(|a| class_mean(&cfg, land, *a)).collect();
            for i in 0..4 {
                for j in i + 1..4 {
                    let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!((d - 12.0).abs() < 1e-9);
                }
            }
        }
    }
}
