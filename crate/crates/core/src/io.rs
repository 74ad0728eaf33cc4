//! Sample interchange files and database persistence.
//!
//! Text sample files are comma-delimited:
//!
//! ```text
//! #channels=3;order=89V,166V,183V
//! sample_id,rate,active_phase,passive_prob,ref_phase,snow_fraction,skin_temp,air_temp,latitude,longitude,time,89V,166V,183V
//! 17,1.25,solid,0.1,solid,0.8,268.1,269.0,61.2,-150.3,1447000000,231.5,228.0,240.2
//! ```
//!
//! Empty fields mark absent values. `time` is Unix seconds (UTC). Binary
//! sample files and databases use the [`Envelope`] container.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::database::{AprioriDatabase, BuildMetadata, FORMAT_VERSION};
use crate::envelope::{ByteReader, ByteWriter, Envelope, Tag};
use crate::error::{Error, Result};
use crate::model::{AtmosphericClass, ChannelVector, LandSurfaceClass, MatchedSample, PhaseLabel};

pub const TAG_META: &Tag = b"META";
pub const TAG_CHANNELS: &Tag = b"CHAN";
pub const TAG_SAMPLES: &Tag = b"SMPL";

const FIXED_COLUMNS: [&str; 11] = [
    "sample_id",
    "rate",
    "active_phase",
    "passive_prob",
    "ref_phase",
    "snow_fraction",
    "skin_temp",
    "air_temp",
    "latitude",
    "longitude",
    "time",
];

/// Channel layout declared in a sample file header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelLayout {
    pub order: Vec<String>,
}

impl ChannelLayout {
    pub fn new(order: Vec<String>) -> Self {
        ChannelLayout { order }
    }

    pub fn count(&self) -> usize {
        self.order.len()
    }

    pub fn header_line(&self) -> String {
        format!("#channels={};order={}", self.order.len(), self.order.join(","))
    }

    pub fn parse_header(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse {
            line: 1,
            message: m.to_string(),
        };
        let body = line
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| bad("missing `#channels=N;order=...` header"))?;
        let mut count = None;
        let mut order = None;
        for part in body.split(';') {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("malformed header field"))?;
            match k.trim() {
                "channels" => {
                    count = Some(v.trim().parse::<usize>().map_err(|_| bad("bad channel count"))?)
                }
                "order" => {
                    order = Some(v.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>())
                }
                _ => return Err(bad("unknown header field")),
            }
        }
        let count = count.ok_or_else(|| bad("header lacks `channels`"))?;
        let order = order.ok_or_else(|| bad("header lacks `order`"))?;
        if order.len() != count {
            return Err(bad(&format!(
                "header declares {count} channels but orders {}",
                order.len()
            )));
        }
        Ok(ChannelLayout { order })
    }
}

/// One row of a sample file. Truth columns are optional so that query
/// files without ground truth share the format.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub sample_id: u64,
    pub tb: Vec<f64>,
    pub rate: Option<f64>,
    pub active_phase: Option<PhaseLabel>,
    pub passive_prob: Option<f64>,
    pub ref_phase: Option<PhaseLabel>,
    pub snow_fraction: Option<f64>,
    pub skin_temp: Option<f64>,
    pub air_temp: Option<f64>,
    pub latitude: f64,
    pub longitude: f64,
    pub timestamp: i64,
}

impl SampleRow {
    pub fn into_matched(self) -> Result<MatchedSample> {
        let missing = |c: &str| Error::InvalidSample {
            sample_id: self.sample_id,
            reason: format!("missing `{c}` column value"),
        };
        Ok(MatchedSample {
            sample_id: self.sample_id,
            rate: self.rate.ok_or_else(|| missing("rate"))?,
            snow_fraction: self.snow_fraction.ok_or_else(|| missing("snow_fraction"))?,
            skin_temp: self.skin_temp.ok_or_else(|| missing("skin_temp"))?,
            air_temp: self.air_temp.ok_or_else(|| missing("air_temp"))?,
            tb: ChannelVector::new_unchecked(self.tb),
            active_phase: self.active_phase,
            passive_phase_prob: self.passive_prob,
            ref_phase: self.ref_phase,
            latitude: self.latitude,
            longitude: self.longitude,
            timestamp: self.timestamp,
        })
    }
}

impl From<&MatchedSample> for SampleRow {
    fn from(s: &MatchedSample) -> Self {
        SampleRow {
            sample_id: s.sample_id,
            tb: s.tb.as_slice().to_vec(),
            rate: Some(s.rate),
            active_phase: s.active_phase,
            passive_prob: s.passive_phase_prob,
            ref_phase: s.ref_phase,
            snow_fraction: Some(s.snow_fraction),
            skin_temp: Some(s.skin_temp),
            air_temp: Some(s.air_temp),
            latitude: s.latitude,
            longitude: s.longitude,
            timestamp: s.timestamp,
        }
    }
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Writes rows in the delimited text format.
pub fn write_text_rows<W: Write>(mut w: W, layout: &ChannelLayout, rows: &[SampleRow]) -> std::io::Result<()> {
    writeln!(w, "{}", layout.header_line())?;
    let mut columns: Vec<&str> = FIXED_COLUMNS.to_vec();
    columns.extend(layout.order.iter().map(String::as_str));
    writeln!(w, "{}", columns.join(","))?;
    let mut line = String::new();
    for r in rows {
        line.clear();
        let _ = write!(
            line,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.sample_id,
            opt(&r.rate),
            opt(&r.active_phase),
            opt(&r.passive_prob),
            opt(&r.ref_phase),
            opt(&r.snow_fraction),
            opt(&r.skin_temp),
            opt(&r.air_temp),
            r.latitude,
            r.longitude,
            r.timestamp
        );
        for v in &r.tb {
            let _ = write!(line, ",{v}");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_text_samples(path: &Path, layout: &ChannelLayout, samples: &[MatchedSample]) -> Result<()> {
    let rows: Vec<SampleRow> = samples.iter().map(SampleRow::from).collect();
    write_text_rows_file(path, layout, &rows)
}

pub fn write_text_rows_file(path: &Path, layout: &ChannelLayout, rows: &[SampleRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_text_rows(&mut w, layout, rows).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, col: &str) -> Result<Option<T>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<T>().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{s}` in column `{col}`"),
    })
}

fn parse_phase(s: &str, line: usize, col: &str) -> Result<Option<PhaseLabel>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<PhaseLabel>().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("unknown phase `{s}` in column `{col}`"),
    })
}

/// Reads a delimited sample file from any buffered reader.
pub fn read_text_rows<R: BufRead>(reader: R) -> Result<(ChannelLayout, Vec<SampleRow>)> {
    let mut lines = reader.lines().enumerate();
    let io_err = |e: std::io::Error| Error::Parse {
        line: 0,
        message: e.to_string(),
    };
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty sample file".into(),
    })?;
    let layout = ChannelLayout::parse_header(&header.map_err(io_err)?)?;
    let n = layout.count();
    let mut rows = Vec::new();
    let mut saw_columns = false;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(io_err)?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !saw_columns {
            saw_columns = true;
            let cols: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            let expected: Vec<&str> = FIXED_COLUMNS
                .iter()
                .copied()
                .chain(layout.order.iter().map(String::as_str))
                .collect();
            if cols != expected {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("column header does not match, expected `{}`", expected.join(",")),
                });
            }
            continue;
        }
        let f: Vec<&str> = trimmed.split(',').collect();
        if f.len() != FIXED_COLUMNS.len() + n {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", FIXED_COLUMNS.len() + n, f.len()),
            });
        }
        let required = |v: Option<f64>, col: &str| {
            v.ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("column `{col}` is required"),
            })
        };
        let mut tb = Vec::with_capacity(n);
        for (j, s) in f[FIXED_COLUMNS.len()..].iter().enumerate() {
            tb.push(required(parse_field(s, lineno, &layout.order[j])?, &layout.order[j])?);
        }
        rows.push(SampleRow {
            sample_id: parse_field(f[0], lineno, "sample_id")?.ok_or_else(|| Error::Parse {
                line: lineno,
                message: "column `sample_id` is required".into(),
            })?,
            rate: parse_field(f[1], lineno, "rate")?,
            active_phase: parse_phase(f[2], lineno, "active_phase")?,
            passive_prob: parse_field(f[3], lineno, "passive_prob")?,
            ref_phase: parse_phase(f[4], lineno, "ref_phase")?,
            snow_fraction: parse_field(f[5], lineno, "snow_fraction")?,
            skin_temp: parse_field(f[6], lineno, "skin_temp")?,
            air_temp: parse_field(f[7], lineno, "air_temp")?,
            latitude: required(parse_field(f[8], lineno, "latitude")?, "latitude")?,
            longitude: required(parse_field(f[9], lineno, "longitude")?, "longitude")?,
            timestamp: parse_field(f[10], lineno, "time")?.ok_or_else(|| Error::Parse {
                line: lineno,
                message: "column `time` is required".into(),
            })?,
            tb,
        });
    }
    Ok((layout, rows))
}

fn write_record(w: &mut ByteWriter, s: &MatchedSample) {
    w.u64(s.sample_id);
    for v in s.tb.as_slice() {
        w.f64(*v);
    }
    w.f64(s.rate);
    w.u8(s.active_phase.map_or(0, PhaseLabel::code));
    w.u8(u8::from(s.passive_phase_prob.is_some()));
    w.f64(s.passive_phase_prob.unwrap_or(0.0));
    w.u8(s.ref_phase.map_or(0, PhaseLabel::code));
    w.f64(s.snow_fraction);
    w.f64(s.skin_temp);
    w.f64(s.air_temp);
    w.f64(s.latitude);
    w.f64(s.longitude);
    w.i64(s.timestamp);
}

fn read_phase_code(code: u8) -> Result<Option<PhaseLabel>> {
    match code {
        0 => Ok(None),
        c => PhaseLabel::from_code(c)
            .map(Some)
            .ok_or_else(|| Error::Format(format!("bad phase code {c}"))),
    }
}

fn read_record(r: &mut ByteReader<'_>, n: usize) -> Result<MatchedSample> {
    let sample_id = r.u64()?;
    let mut tb = Vec::with_capacity(n);
    for _ in 0..n {
        tb.push(r.f64()?);
    }
    let rate = r.f64()?;
    let active_phase = read_phase_code(r.u8()?)?;
    let has_passive = r.u8()? != 0;
    let passive = r.f64()?;
    let ref_phase = read_phase_code(r.u8()?)?;
    Ok(MatchedSample {
        sample_id,
        tb: ChannelVector::new_unchecked(tb),
        rate,
        active_phase,
        passive_phase_prob: has_passive.then_some(passive),
        ref_phase,
        snow_fraction: r.f64()?,
        skin_temp: r.f64()?,
        air_temp: r.f64()?,
        latitude: r.f64()?,
        longitude: r.f64()?,
        timestamp: r.i64()?,
    })
}

fn encode_records(samples: &[MatchedSample]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u64(samples.len() as u64);
    for s in samples {
        write_record(&mut w, s);
    }
    w.into_inner()
}

fn decode_records(body: &[u8], n: usize) -> Result<Vec<MatchedSample>> {
    let mut r = ByteReader::new(body);
    let count = r.u64()? as usize;
    let record_len = 8 * (n + 9) + 3;
    if r.remaining() != count.saturating_mul(record_len) {
        return Err(Error::Format(format!(
            "record section holds {} bytes, expected {count} records of {record_len}",
            r.remaining()
        )));
    }
    (0..count).map(|_| read_record(&mut r, n)).collect()
}

fn encode_channels(order: &[String]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u32(order.len() as u32);
    for name in order {
        w.str(name);
    }
    w.into_inner()
}

fn decode_channels(body: &[u8]) -> Result<Vec<String>> {
    let mut r = ByteReader::new(body);
    let n = r.u32()? as usize;
    let order = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(order)
}

/// Binary sample file: channel layout plus fixed-width records.
pub fn encode_binary_samples(layout: &ChannelLayout, samples: &[MatchedSample]) -> Envelope {
    let mut env = Envelope::new();
    env.push(TAG_CHANNELS, encode_channels(&layout.order));
    env.push(TAG_SAMPLES, encode_records(samples));
    env
}

pub fn decode_binary_samples(env: &Envelope) -> Result<(ChannelLayout, Vec<MatchedSample>)> {
    let order = decode_channels(env.require(TAG_CHANNELS)?)?;
    let samples = decode_records(env.require(TAG_SAMPLES)?, order.len())?;
    Ok((ChannelLayout::new(order), samples))
}

/// Reads a sample file, choosing the binary or text decoder from the
/// leading magic bytes.
pub fn read_sample_file(path: &Path) -> Result<(ChannelLayout, Vec<SampleRow>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(crate::envelope::MAGIC) {
        let (layout, samples) = decode_binary_samples(&Envelope::decode(&bytes)?)?;
        return Ok((layout, samples.iter().map(SampleRow::from).collect()));
    }
    read_text_rows(BufReader::new(bytes.as_slice()))
}

/// Reads a sample file whose rows must all carry truth columns.
pub fn read_matched_samples(path: &Path) -> Result<(ChannelLayout, Vec<MatchedSample>)> {
    let (layout, rows) = read_sample_file(path)?;
    let samples = rows
        .into_iter()
        .map(SampleRow::into_matched)
        .collect::<Result<Vec<_>>>()?;
    Ok((layout, samples))
}

fn stratum_tag(land: LandSurfaceClass) -> &'static Tag {
    match land {
        LandSurfaceClass::SnowCovered => b"STSN",
        LandSurfaceClass::NoSnow => b"STNS",
    }
}

fn land_code(l: LandSurfaceClass) -> u8 {
    l.index() as u8
}

fn land_from_code(c: u8) -> Result<LandSurfaceClass> {
    LandSurfaceClass::ALL
        .iter()
        .copied()
        .find(|l| l.index() == c as usize)
        .ok_or_else(|| Error::Format(format!("bad land code {c}")))
}

fn atm_from_code(c: u8) -> Result<AtmosphericClass> {
    AtmosphericClass::ALL
        .iter()
        .copied()
        .find(|a| a.index() == c as usize)
        .ok_or_else(|| Error::Format(format!("bad atmosphere code {c}")))
}

pub fn encode_database(db: &AprioriDatabase) -> Envelope {
    let mut meta = ByteWriter::new();
    meta.u16(db.meta.format_version);
    meta.u64(db.meta.seed);
    meta.u64(db.meta.samples_per_land as u64);
    meta.f64(db.meta.ref_threshold);
    meta.i64(db.meta.created_unix);
    meta.u64(db.meta.source_count);
    meta.u64(db.meta.excluded_count);
    meta.u32(db.meta.available.len() as u32);
    for ((land, atm), n) in &db.meta.available {
        meta.u8(land_code(*land));
        meta.u8(atm.index() as u8);
        meta.u64(*n);
    }
    let mut env = Envelope::new();
    env.push(TAG_META, meta.into_inner());
    env.push(TAG_CHANNELS, encode_channels(&db.channel_order));
    for (land, samples) in &db.strata {
        env.push(stratum_tag(*land), encode_records(samples));
    }
    env
}

pub fn decode_database(env: &Envelope) -> Result<AprioriDatabase> {
    let mut r = ByteReader::new(env.require(TAG_META)?);
    let format_version = r.u16()?;
    if format_version > FORMAT_VERSION {
        return Err(Error::Version {
            found: format_version,
            supported: FORMAT_VERSION,
        });
    }
    let seed = r.u64()?;
    let samples_per_land = r.u64()? as usize;
    let ref_threshold = r.f64()?;
    let created_unix = r.i64()?;
    let source_count = r.u64()?;
    let excluded_count = r.u64()?;
    let n_avail = r.u32()?;
    let mut available = BTreeMap::new();
    for _ in 0..n_avail {
        let land = land_from_code(r.u8()?)?;
        let atm = atm_from_code(r.u8()?)?;
        available.insert((land, atm), r.u64()?);
    }
    r.finish()?;
    let channel_order = decode_channels(env.require(TAG_CHANNELS)?)?;
    let n = channel_order.len();
    let mut strata = BTreeMap::new();
    for land in LandSurfaceClass::ALL {
        if let Some(body) = env.section(stratum_tag(*land)) {
            strata.insert(*land, decode_records(body, n)?);
        }
    }
    Ok(AprioriDatabase {
        channel_count: n,
        channel_order,
        strata,
        meta: BuildMetadata {
            format_version,
            seed,
            samples_per_land,
            ref_threshold,
            created_unix,
            source_count,
            excluded_count,
            available,
        },
    })
}

/// Writes the database and returns the file checksum.
pub fn persist_database(db: &AprioriDatabase, path: &Path) -> Result<u64> {
    encode_database(db).write_file(path)
}

pub fn load_database(path: &Path) -> Result<AprioriDatabase> {
    decode_database(&Envelope::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::database::{build_balanced_database, BuildConfig};

    fn samples(n: usize) -> Vec<MatchedSample> {
        let phases = [None, Some(PhaseLabel::Liquid), Some(PhaseLabel::Solid), Some(PhaseLabel::Mixed)];
        (0..n)
            .map(|i| {
                let phase = phases[i % 4];
                MatchedSample {
                    sample_id: i as u64,
                    tb: ChannelVector::new(vec![200.0 + i as f64 * 0.01, 250.125, 260.0 / 3.0 + 100.0]).unwrap(),
                    rate: if phase.is_some() { 0.1 + (i % 7) as f64 } else { 0.0 },
                    active_phase: phase,
                    passive_phase_prob: phase.map(|_| 0.3),
                    ref_phase: phase,
                    snow_fraction: if (i / 4) % 2 == 0 { 0.9 } else { 0.0 },
                    skin_temp: 265.3,
                    air_temp: 1.0 / 3.0 + 270.0,
                    latitude: -45.5,
                    longitude: 179.9,
                    timestamp: 1_430_000_000 + i as i64,
                }
            })
            .collect()
    }

    fn layout() -> ChannelLayout {
        ChannelLayout::new(vec!["89V".into(), "166V".into(), "183V".into()])
    }

    #[test]
    fn text_round_trip_is_exact() {
        let s = samples(20);
        let rows: Vec<SampleRow> = s.iter().map(SampleRow::from).collect();
        let mut buf = Vec::new();
        write_text_rows(&mut buf, &layout(), &rows).unwrap();
        let (l, back) = read_text_rows(buf.as_slice()).unwrap();
        assert_eq!(l, layout());
        assert_eq!(back, rows);
    }

    #[test]
    fn text_header_errors() {
        let bad = "#channels=2;order=a\n";
        assert!(read_text_rows(bad.as_bytes()).is_err());
        let missing = "sample_id,rate\n";
        assert!(read_text_rows(missing.as_bytes()).is_err());
        let short_row = "#channels=1;order=a\nsample_id,rate,active_phase,passive_prob,ref_phase,snow_fraction,skin_temp,air_temp,latitude,longitude,time,a\n1,0\n";
        let err = read_text_rows(short_row.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn query_rows_may_omit_truth() {
        let text = "#channels=1;order=a\nsample_id,rate,active_phase,passive_prob,ref_phase,snow_fraction,skin_temp,air_temp,latitude,longitude,time,a\n5,,,,,,,,10,20,0,250\n";
        let (_, rows) = read_text_rows(text.as_bytes()).unwrap();
        assert_eq!(rows[0].rate, None);
        assert!(rows[0].clone().into_matched().is_err());
    }

    #[test]
    fn binary_samples_round_trip() {
        let s = samples(9);
        let env = encode_binary_samples(&layout(), &s);
        let decoded = Envelope::decode(&env.encode()).unwrap();
        let (l, back) = decode_binary_samples(&decoded).unwrap();
        assert_eq!(l, layout());
        assert_eq!(back, s);
    }

    #[test]
    fn database_round_trip_is_bit_identical() {
        let mut cfg = BuildConfig::new(3, 40, 5);
        cfg.channel_order = layout().order;
        cfg.created_unix = 1_700_000_000;
        let db = build_balanced_database(samples(400), &cfg).unwrap();
        let bytes = encode_database(&db).encode();
        let back = decode_database(&Envelope::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, db);
        assert_eq!(encode_database(&back).encode(), bytes);
    }
}
