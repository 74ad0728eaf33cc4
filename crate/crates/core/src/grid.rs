//! Gridded phase probability maps, zonal means and seasonal composites.
//!
//! Cells hold exact `(sum, count)` accumulators. Phase indices are
//! multiples of one half, so sums are kept as integer half-units and every
//! merge is exact: any sharding or ordering of the input yields a
//! bit-identical grid.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate};

use crate::envelope::{ByteReader, ByteWriter, Envelope};
use crate::error::{Error, Result};
use crate::model::PhaseLabel;

pub const TAG_GRID: &[u8; 4] = b"GRID";
pub const DEFAULT_CELL_DEG: f64 = 0.1;

/// Liquid 0, mixed 0.5, solid 1.
pub fn phase_index(phase: PhaseLabel) -> f64 {
    phase_half_units(phase) as f64 / 2.0
}

fn phase_half_units(phase: PhaseLabel) -> u64 {
    match phase {
        PhaseLabel::Liquid => 0,
        PhaseLabel::Mixed => 1,
        PhaseLabel::Solid => 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Season {
    Winter,
    Summer,
}

impl Season {
    pub const ALL: [Season; 2] = [Season::Winter, Season::Summer];

    pub fn as_str(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Summer => "summer",
        }
    }

    fn code(self) -> u8 {
        match self {
            Season::Winter => 1,
            Season::Summer => 2,
        }
    }

    fn from_code(c: u8) -> Option<Option<Season>> {
        match c {
            0 => Some(None),
            1 => Some(Some(Season::Winter)),
            2 => Some(Some(Season::Summer)),
            _ => None,
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Season {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "winter" => Ok(Season::Winter),
            "summer" => Ok(Season::Summer),
            other => Err(Error::InvalidArgument(format!("unknown season `{other}`"))),
        }
    }
}

/// Inclusive start, exclusive end, in Unix seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudyWindow {
    pub start: i64,
    pub end: i64,
}

impl StudyWindow {
    pub fn new(start: i64, end: i64) -> Result<Self> {
        if end <= start {
            return Err(Error::config("study window end must follow its start"));
        }
        Ok(StudyWindow { start, end })
    }

    /// Parses `YYYY-MM-DD` (midnight UTC) or integer Unix seconds.
    pub fn parse_instant(s: &str) -> Result<i64> {
        let s = s.trim();
        if let Ok(v) = s.parse::<i64>() {
            return Ok(v);
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
            .map_err(|_| Error::config(format!("cannot parse instant `{s}`")))
    }

    pub fn contains(&self, ts: i64) -> bool {
        ts >= self.start && ts < self.end
    }
}

/// November to April is winter, May to October summer, in any year.
pub fn season_of(timestamp: i64) -> Result<Season> {
    let dt = DateTime::from_timestamp(timestamp, 0)
        .ok_or_else(|| Error::InvalidArgument(format!("timestamp {timestamp} out of range")))?;
    Ok(match dt.month() {
        11 | 12 | 1..=4 => Season::Winter,
        _ => Season::Summer,
    })
}

/// [`season_of`] that rejects timestamps outside `window` when one is set.
pub fn season_in_window(timestamp: i64, window: Option<&StudyWindow>) -> Result<Season> {
    if let Some(w) = window {
        if !w.contains(timestamp) {
            return Err(Error::InvalidArgument(format!(
                "timestamp {timestamp} outside study window [{}, {})",
                w.start, w.end
            )));
        }
    }
    season_of(timestamp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CellAccumulator {
    /// Sum of values in half-units.
    pub half_units: u64,
    pub count: u64,
}

impl CellAccumulator {
    pub fn sum(&self) -> f64 {
        self.half_units as f64 / 2.0
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.half_units as f64 / (2.0 * self.count as f64))
    }
}

/// Row and column of a cell; rows count up from the south pole, columns
/// east from the antimeridian.
pub type CellIndex = (u32, u32);

/// Sparse global plate-carree grid of `(sum, count)` accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    cell_deg: f64,
    rows: u32,
    cols: u32,
    season: Option<Season>,
    cells: BTreeMap<CellIndex, CellAccumulator>,
}

impl PhaseGrid {
    pub fn new(cell_deg: f64, season: Option<Season>) -> Result<Self> {
        if !(cell_deg.is_finite() && cell_deg > 0.0 && cell_deg <= 180.0) {
            return Err(Error::config(format!("grid cell size {cell_deg} deg out of range")));
        }
        Ok(PhaseGrid {
            cell_deg,
            rows: (180.0 / cell_deg).ceil() as u32,
            cols: (360.0 / cell_deg).ceil() as u32,
            season,
            cells: BTreeMap::new(),
        })
    }

    pub fn cell_deg(&self) -> f64 {
        self.cell_deg
    }

    pub fn season(&self) -> Option<Season> {
        self.season
    }

    pub fn shape(&self) -> (u32, u32) {
        (self.rows, self.cols)
    }

    pub fn cells(&self) -> &BTreeMap<CellIndex, CellAccumulator> {
        &self.cells
    }

    pub fn get(&self, cell: CellIndex) -> Option<&CellAccumulator> {
        self.cells.get(&cell)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// `floor((lat + 90) / cell)`, `floor((lon + 180) / cell)`.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Result<CellIndex> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..180.0).contains(&lon) {
            return Err(Error::InvalidArgument(format!(
                "coordinates ({lat}, {lon}) out of range"
            )));
        }
        let row = (((lat + 90.0) / self.cell_deg).floor() as u32).min(self.rows - 1);
        let col = (((lon + 180.0) / self.cell_deg).floor() as u32).min(self.cols - 1);
        Ok((row, col))
    }

    /// Latitude and longitude of a cell center.
    pub fn center(&self, cell: CellIndex) -> (f64, f64) {
        (
            -90.0 + (cell.0 as f64 + 0.5) * self.cell_deg,
            -180.0 + (cell.1 as f64 + 0.5) * self.cell_deg,
        )
    }

    fn add_half_units(&mut self, lat: f64, lon: f64, half_units: u64) -> Result<()> {
        let cell = self.cell_of(lat, lon)?;
        let acc = self.cells.entry(cell).or_default();
        acc.half_units += half_units;
        acc.count += 1;
        Ok(())
    }

    pub fn add_phase(&mut self, lat: f64, lon: f64, phase: PhaseLabel) -> Result<()> {
        self.add_half_units(lat, lon, phase_half_units(phase))
    }

    /// Adds a 0/1 value, used for occurrence-frequency grids.
    pub fn add_flag(&mut self, lat: f64, lon: f64, flag: bool) -> Result<()> {
        self.add_half_units(lat, lon, if flag { 2 } else { 0 })
    }

    fn check_geometry(&self, other: &PhaseGrid) -> Result<()> {
        if self.cell_deg.to_bits() != other.cell_deg.to_bits() {
            return Err(Error::InvalidArgument(format!(
                "grid geometry mismatch: {} vs {} deg cells",
                self.cell_deg, other.cell_deg
            )));
        }
        Ok(())
    }

    /// Adds another grid's accumulators into this one.
    pub fn merge(&mut self, other: &PhaseGrid) -> Result<()> {
        self.check_geometry(other)?;
        if self.season != other.season {
            return Err(Error::InvalidArgument("cannot merge grids of different seasons".into()));
        }
        for (cell, acc) in &other.cells {
            let e = self.cells.entry(*cell).or_default();
            e.half_units += acc.half_units;
            e.count += acc.count;
        }
        Ok(())
    }

    /// `(min_lat, min_lon, max_lat, max_lon)` of populated cell edges.
    pub fn bounding_box(&self) -> Option<(f64, f64, f64, f64)> {
        let first = self.cells.keys().next()?;
        let (mut r0, mut r1, mut c0, mut c1) = (first.0, first.0, first.1, first.1);
        for &(r, c) in self.cells.keys() {
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
        let d = self.cell_deg;
        Some((
            -90.0 + r0 as f64 * d,
            -180.0 + c0 as f64 * d,
            -90.0 + (r1 + 1) as f64 * d,
            -180.0 + (c1 + 1) as f64 * d,
        ))
    }
}

/// A detection with the geolocation needed for gridding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoDetection {
    pub latitude: f64,
    pub longitude: f64,
    pub timestamp: i64,
    pub precipitating: bool,
    pub phase: Option<PhaseLabel>,
}

fn season_matches(d: &GeoDetection, season: Option<Season>, window: Option<&StudyWindow>) -> Result<bool> {
    let s = season_in_window(d.timestamp, window)?;
    Ok(season.is_none_or(|want| want == s))
}

/// Mean phase index per cell over precipitating detections.
pub fn grid_accumulate(
    detections: &[GeoDetection],
    cell_deg: f64,
    season: Option<Season>,
    window: Option<&StudyWindow>,
) -> Result<PhaseGrid> {
    let mut grid = PhaseGrid::new(cell_deg, season)?;
    for d in detections {
        if !season_matches(d, season, window)? {
            continue;
        }
        if let (true, Some(phase)) = (d.precipitating, d.phase) {
            grid.add_phase(d.latitude, d.longitude, phase)?;
        }
    }
    Ok(grid)
}

/// Fraction of detections flagged precipitating per cell.
pub fn occurrence_accumulate(
    detections: &[GeoDetection],
    cell_deg: f64,
    season: Option<Season>,
    window: Option<&StudyWindow>,
) -> Result<PhaseGrid> {
    let mut grid = PhaseGrid::new(cell_deg, season)?;
    for d in detections {
        if season_matches(d, season, window)? {
            grid.add_flag(d.latitude, d.longitude, d.precipitating)?;
        }
    }
    Ok(grid)
}

/// [`grid_accumulate`] over `workers` concurrent shards, merged in shard
/// order.
pub fn grid_accumulate_sharded(
    detections: &[GeoDetection],
    cell_deg: f64,
    season: Option<Season>,
    window: Option<&StudyWindow>,
    workers: usize,
) -> Result<PhaseGrid> {
    let workers = workers.max(1);
    let chunk = detections.len().div_ceil(workers).max(1);
    let partials: Vec<Result<PhaseGrid>> = std::thread::scope(|scope| {
        let handles: Vec<_> = detections
            .chunks(chunk)
            .map(|part| scope.spawn(move || grid_accumulate(part, cell_deg, season, window)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invariant("grid worker panicked".into()))))
            .collect()
    });
    let mut grid = PhaseGrid::new(cell_deg, season)?;
    for p in partials {
        grid.merge(&p?)?;
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZonalBand {
    pub center: f64,
    /// `None` when no cell in the band has a count.
    pub mean: Option<f64>,
    pub count: u64,
}

/// Count-weighted mean over all cells whose center falls in each latitude
/// band, from the south pole upward.
pub fn zonal_mean(grid: &PhaseGrid, band_deg: f64) -> Result<Vec<ZonalBand>> {
    if !(band_deg.is_finite() && band_deg > 0.0 && band_deg <= 180.0) {
        return Err(Error::config(format!("zonal band {band_deg} deg out of range")));
    }
    let n = (180.0 / band_deg).ceil() as usize;
    let mut acc = vec![CellAccumulator::default(); n];
    for (cell, a) in grid.cells() {
        let (lat, _) = grid.center(*cell);
        let b = (((lat + 90.0) / band_deg).floor() as usize).min(n - 1);
        acc[b].half_units += a.half_units;
        acc[b].count += a.count;
    }
    Ok(acc
        .iter()
        .enumerate()
        .map(|(i, a)| ZonalBand {
            center: (-90.0 + (i as f64 + 0.5) * band_deg).min(90.0),
            mean: a.mean(),
            count: a.count,
        })
        .collect())
}

/// Per-cell `g1 - g2` of means, defined only where both grids have data.
pub fn grid_difference(g1: &PhaseGrid, g2: &PhaseGrid) -> Result<BTreeMap<CellIndex, f64>> {
    g1.check_geometry(g2)?;
    let mut out = BTreeMap::new();
    for (cell, a) in g1.cells() {
        if let (Some(m1), Some(m2)) = (a.mean(), g2.get(*cell).and_then(|b| b.mean())) {
            out.insert(*cell, m1 - m2);
        }
    }
    Ok(out)
}

pub fn write_grid_text<W: Write>(mut w: W, grid: &PhaseGrid) -> std::io::Result<()> {
    writeln!(w, "lat,lon,mean,count")?;
    for (cell, acc) in grid.cells() {
        let (lat, lon) = grid.center(*cell);
        let mean = acc.mean().expect("stored cells have counts");
        writeln!(w, "{lat:.6},{lon:.6},{mean},{}", acc.count)?;
    }
    Ok(())
}

pub fn write_zonal_text<W: Write>(mut w: W, bands: &[ZonalBand]) -> std::io::Result<()> {
    writeln!(w, "band_center,mean,count")?;
    for b in bands {
        let mean = b.mean.map(|m| m.to_string()).unwrap_or_default();
        writeln!(w, "{:.6},{mean},{}", b.center, b.count)?;
    }
    Ok(())
}

pub fn grid_to_envelope(grid: &PhaseGrid) -> Envelope {
    let mut w = ByteWriter::new();
    w.f64(grid.cell_deg);
    w.u8(grid.season.map_or(0, Season::code));
    w.u64(grid.cells.len() as u64);
    for (&(r, c), acc) in &grid.cells {
        w.u32(r);
        w.u32(c);
        w.u64(acc.half_units);
        w.u64(acc.count);
    }
    let mut env = Envelope::new();
    env.push(TAG_GRID, w.into_inner());
    env
}

pub fn grid_from_envelope(env: &Envelope) -> Result<PhaseGrid> {
    let mut r = ByteReader::new(env.require(TAG_GRID)?);
    let cell_deg = r.f64()?;
    let season = Season::from_code(r.u8()?)
        .ok_or_else(|| Error::Format("bad season code in grid".into()))?;
    let mut grid = PhaseGrid::new(cell_deg, season)?;
    let n = r.u64()?;
    for _ in 0..n {
        let cell = (r.u32()?, r.u32()?);
        if cell.0 >= grid.rows || cell.1 >= grid.cols {
            return Err(Error::Format(format!("grid cell {cell:?} outside raster")));
        }
        let acc = CellAccumulator {
            half_units: r.u64()?,
            count: r.u64()?,
        };
        if acc.count == 0 || acc.half_units > 2 * acc.count {
            return Err(Error::Format(format!("grid cell {cell:?} has inconsistent accumulators")));
        }
        grid.cells.insert(cell, acc);
    }
    r.finish()?;
    Ok(grid)
}

pub fn write_grid_binary(path: &Path, grid: &PhaseGrid) -> Result<u64> {
    grid_to_envelope(grid).write_file(path)
}

pub fn read_grid_binary(path: &Path) -> Result<PhaseGrid> {
    grid_from_envelope(&Envelope::read_file(path)?)
}
