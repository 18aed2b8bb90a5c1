//! Call-record ingestion, the day × hour count matrix, calendar covariates and
//! contiguous block segmentation.
//!
//! Hours are 0-based inside the library (`0..24`, hour `h` covers the clock interval
//! `[h, h+1)`); the CSV formats use the 1-based labels `1..=24`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;
use std::ops::Range;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HOURS_PER_DAY: usize = 24;
pub const DAYS_PER_WEEK: usize = 7;
pub const WEEKS_PER_YEAR: usize = 53;

/// One dispatched call. Several records may share an `event_id`; only the earliest
/// timestamp of an event counts as an arrival.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub event_id: String,
    pub timestamp: NaiveDateTime,
}

const TIMESTAMP_FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M:%S%.f",
];

pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
}

/// Reads the `event_id,timestamp` CSV. Row numbers in errors count the header as row 1.
pub fn read_call_records<R: io::Read>(reader: R) -> Result<Vec<CallRecord>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != ["event_id", "timestamp"] {
        return Err(Error::Parse {
            row: 1,
            message: format!("expected header `event_id,timestamp`, found `{}`", names.join(",")),
        });
    }
    let mut out = Vec::new();
    for (idx, rec) in csv.records().enumerate() {
        let row = idx + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if rec.len() != 2 {
            return Err(Error::Parse { row, message: format!("expected 2 fields, found {}", rec.len()) });
        }
        let event_id = rec[0].trim();
        if event_id.is_empty() {
            return Err(Error::Parse { row, message: "empty event_id".into() });
        }
        let timestamp = parse_timestamp(&rec[1])
            .ok_or_else(|| Error::Parse { row, message: format!("unparseable timestamp `{}`", &rec[1]) })?;
        out.push(CallRecord { event_id: event_id.to_string(), timestamp });
    }
    Ok(out)
}

/// Inclusive date range of the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudyWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl StudyWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::Config(format!("empty study window {start}..={end}")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> {
        let end = self.end;
        self.start.iter_days().take_while(move |d| *d <= end)
    }
}

/// Day-level calendar covariates. Weekdays are numbered Monday = 1 … Sunday = 7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Covariates {
    pub day_of_week: u8,
    pub week_of_year: u8,
}

impl Covariates {
    pub fn from_date(date: NaiveDate) -> Self {
        Self {
            day_of_week: date.weekday().number_from_monday() as u8,
            week_of_year: week_of_year(date),
        }
    }

    pub(crate) fn dow_index(&self) -> usize {
        self.day_of_week as usize - 1
    }

    pub(crate) fn week_index(&self) -> usize {
        self.week_of_year as usize - 1
    }
}

/// `⌈day-of-year / 7⌉`, capped at 53. Week 1 starts on January 1 regardless of weekday.
pub fn week_of_year(date: NaiveDate) -> u8 {
    let doy = date.ordinal() as usize;
    doy.div_ceil(DAYS_PER_WEEK).min(WEEKS_PER_YEAR) as u8
}

pub const WEEKDAY_NAMES: [&str; DAYS_PER_WEEK] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

/// Day × hour count matrix over the retained days of a study window.
///
/// `day_dates` lists the retained days in increasing order; excluded days are kept
/// only by date. The linear hour index is `t = i * 24 + h` over retained days.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HourlyCountSeries {
    counts: Vec<[u32; HOURS_PER_DAY]>,
    day_dates: Vec<NaiveDate>,
    excluded: BTreeSet<NaiveDate>,
}

impl HourlyCountSeries {
    pub fn new(
        day_dates: Vec<NaiveDate>,
        counts: Vec<[u32; HOURS_PER_DAY]>,
        excluded: BTreeSet<NaiveDate>,
    ) -> Result<Self> {
        if day_dates.len() != counts.len() {
            return Err(Error::Data(format!(
                "{} dates but {} rows of counts",
                day_dates.len(),
                counts.len()
            )));
        }
        if let Some(w) = day_dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!("day dates not strictly increasing at {}", w[1])));
        }
        if let Some(d) = day_dates.iter().find(|d| excluded.contains(d)) {
            return Err(Error::Data(format!("{d} is both retained and excluded")));
        }
        Ok(Self { counts, day_dates, excluded })
    }

    pub fn n_days(&self) -> usize {
        self.day_dates.len()
    }

    pub fn n_hours(&self) -> usize {
        self.day_dates.len() * HOURS_PER_DAY
    }

    pub fn is_empty(&self) -> bool {
        self.day_dates.is_empty()
    }

    pub fn day_dates(&self) -> &[NaiveDate] {
        &self.day_dates
    }

    pub fn counts(&self) -> &[[u32; HOURS_PER_DAY]] {
        &self.counts
    }

    pub fn excluded(&self) -> &BTreeSet<NaiveDate> {
        &self.excluded
    }

    pub fn count(&self, day: usize, hour: usize) -> u32 {
        self.counts[day][hour]
    }

    /// Counts flattened in linear hour order.
    pub fn values(&self) -> Vec<f64> {
        self.counts.iter().flat_map(|row| row.iter().map(|&c| c as f64)).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().map(|&c| c as u64).sum()
    }

    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        self.day_dates.binary_search(&date).ok()
    }

    pub fn count_on(&self, date: NaiveDate, hour: usize) -> Option<u32> {
        self.position(date).map(|i| self.counts[i][hour])
    }

    pub fn covariates(&self) -> Vec<Covariates> {
        self.day_dates.iter().map(|&d| Covariates::from_date(d)).collect()
    }

    /// Moves the given retained days to the excluded set. Dates that are not retained
    /// days of this series are ignored.
    pub fn exclude<I: IntoIterator<Item = NaiveDate>>(&self, dates: I) -> Self {
        let drop: BTreeSet<NaiveDate> = dates.into_iter().filter(|d| self.position(*d).is_some()).collect();
        let mut out = Self { counts: Vec::new(), day_dates: Vec::new(), excluded: self.excluded.clone() };
        for (date, row) in self.day_dates.iter().zip(&self.counts) {
            if drop.contains(date) {
                out.excluded.insert(*date);
            } else {
                out.day_dates.push(*date);
                out.counts.push(*row);
            }
        }
        out
    }

    /// Restriction to the dates in `start..=end`, retained and excluded alike.
    pub fn restrict(&self, start: NaiveDate, end: NaiveDate) -> Self {
        let keep = |d: &NaiveDate| start <= *d && *d <= end;
        let mut out = Self {
            counts: Vec::new(),
            day_dates: Vec::new(),
            excluded: self.excluded.iter().copied().filter(keep).collect(),
        };
        for (date, row) in self.day_dates.iter().zip(&self.counts) {
            if keep(date) {
                out.day_dates.push(*date);
                out.counts.push(*row);
            }
        }
        out
    }

    /// Union of two series over disjoint dates.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        let mut rows: BTreeMap<NaiveDate, [u32; HOURS_PER_DAY]> = BTreeMap::new();
        for s in [self, other] {
            for (d, row) in s.day_dates.iter().zip(&s.counts) {
                if rows.insert(*d, *row).is_some() {
                    return Err(Error::Data(format!("{d} appears in both series")));
                }
            }
        }
        let excluded: BTreeSet<NaiveDate> =
            self.excluded.union(&other.excluded).copied().filter(|d| !rows.contains_key(d)).collect();
        let (day_dates, counts) = rows.into_iter().unzip();
        Self::new(day_dates, counts, excluded)
    }
}

/// Builds the hourly count matrix for every date in `window`.
///
/// Events are deduplicated on `event_id` and placed at their earliest timestamp;
/// events whose first record falls outside the window are dropped. Holidays inside
/// the window go to the excluded set.
pub fn ingest_calls<I>(records: I, window: StudyWindow, holidays: &[NaiveDate]) -> Result<HourlyCountSeries>
where
    I: IntoIterator<Item = CallRecord>,
{
    let mut first_seen: HashMap<String, NaiveDateTime> = HashMap::new();
    for rec in records {
        first_seen
            .entry(rec.event_id)
            .and_modify(|ts| *ts = (*ts).min(rec.timestamp))
            .or_insert(rec.timestamp);
    }

    let holidays: BTreeSet<NaiveDate> = holidays.iter().copied().filter(|d| window.contains(*d)).collect();
    let day_dates: Vec<NaiveDate> = window.dates().filter(|d| !holidays.contains(d)).collect();
    let mut counts = vec![[0u32; HOURS_PER_DAY]; day_dates.len()];
    for ts in first_seen.values() {
        if let Ok(i) = day_dates.binary_search(&ts.date()) {
            counts[i][ts.hour() as usize] += 1;
        }
    }
    HourlyCountSeries::new(day_dates, counts, holidays)
}

/// Days containing at least two consecutive zero-count hours. The scan stays within a
/// day; midnight is never bridged.
pub fn detect_gap_days(series: &HourlyCountSeries) -> BTreeSet<NaiveDate> {
    series
        .day_dates
        .iter()
        .zip(&series.counts)
        .filter(|(_, row)| row.windows(2).any(|w| w[0] + w[1] == 0))
        .map(|(d, _)| *d)
        .collect()
}

/// Day-of-week and week-of-year incidence structure for a set of days.
///
/// The design stores the per-day covariates; the incidence matrices `H1` (d × 7),
/// `H2` (d × 53) and `H = [H1 H2]` are materialized on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalendarDesign {
    covariates: Vec<Covariates>,
}

impl CalendarDesign {
    /// Unchecked construction; see [`build_design`] for the rank-checked entry point.
    pub fn from_covariates(covariates: Vec<Covariates>) -> Self {
        Self { covariates }
    }

    pub fn from_dates(dates: &[NaiveDate]) -> Self {
        Self::from_covariates(dates.iter().map(|&d| Covariates::from_date(d)).collect())
    }

    pub fn covariates(&self) -> &[Covariates] {
        &self.covariates
    }

    pub fn n_days(&self) -> usize {
        self.covariates.len()
    }

    /// Number of constraint columns `r`.
    pub const fn r() -> usize {
        DAYS_PER_WEEK + WEEKS_PER_YEAR
    }

    pub fn h1(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.covariates.len(), DAYS_PER_WEEK);
        for (i, c) in self.covariates.iter().enumerate() {
            h[(i, c.dow_index())] = 1.0;
        }
        h
    }

    pub fn h2(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.covariates.len(), WEEKS_PER_YEAR);
        for (i, c) in self.covariates.iter().enumerate() {
            h[(i, c.week_index())] = 1.0;
        }
        h
    }

    pub fn h(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.covariates.len(), Self::r());
        h.columns_mut(0, DAYS_PER_WEEK).copy_from(&self.h1());
        h.columns_mut(DAYS_PER_WEEK, WEEKS_PER_YEAR).copy_from(&self.h2());
        h
    }

    /// Number of represented days per week-of-year column.
    pub fn week_counts(&self) -> [usize; WEEKS_PER_YEAR] {
        let mut n = [0; WEEKS_PER_YEAR];
        for c in &self.covariates {
            n[c.week_index()] += 1;
        }
        n
    }

    /// Week-of-year columns (1-based) with no represented day. The smoothed model
    /// interpolates these through the cyclic spline.
    pub fn unobserved_weeks(&self) -> Vec<u8> {
        self.week_counts()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(w, _)| w as u8 + 1)
            .collect()
    }

    /// Checks that the day-of-week effects and the observed week effects are jointly
    /// identifiable: every weekday column is observed and the bipartite
    /// weekday/week graph induced by the days is connected. `[H1 H2]` always carries the
    /// single dependency `H1·1 = H2·1`, which the factor model removes with a centering
    /// constraint on the week block.
    pub fn check_rank(&self) -> Result<()> {
        let mut seen_dow = [false; DAYS_PER_WEEK];
        for c in &self.covariates {
            seen_dow[c.dow_index()] = true;
        }
        if let Some(missing) = seen_dow.iter().position(|s| !s) {
            return Err(Error::RankDeficient(format!(
                "day-of-week column {} ({}) is never observed",
                missing + 1,
                WEEKDAY_NAMES[missing]
            )));
        }
        // union-find over 7 weekday nodes followed by 53 week nodes
        let mut parent: Vec<usize> = (0..CalendarDesign::r()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for c in &self.covariates {
            let a = find(&mut parent, c.dow_index());
            let b = find(&mut parent, DAYS_PER_WEEK + c.week_index());
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        let observed_weeks = self.week_counts();
        for (w, &n) in observed_weeks.iter().enumerate() {
            if n > 0 && find(&mut parent, DAYS_PER_WEEK + w) != root {
                return Err(Error::RankDeficient(format!(
                    "week-of-year column {} is not linked to the day-of-week effects",
                    w + 1
                )));
            }
        }
        Ok(())
    }
}

/// Calendar design over the retained days of `series`, with the rank check applied.
pub fn build_design(series: &HourlyCountSeries) -> Result<CalendarDesign> {
    if series.is_empty() {
        return Err(Error::Data("cannot build a calendar design for an empty series".into()));
    }
    let design = CalendarDesign::from_dates(&series.day_dates);
    design.check_rank()?;
    Ok(design)
}

/// Covariate rows for each test day, using the same weekday ordering and week rule as
/// the training design. Week 1..=53 is always inside the cyclic week basis.
pub fn align_forecast_calendar(train: &CalendarDesign, test: &HourlyCountSeries) -> Result<Vec<Covariates>> {
    let _ = train;
    test.day_dates
        .iter()
        .map(|&d| {
            let c = Covariates::from_date(d);
            if c.week_of_year == 0 || c.week_of_year as usize > WEEKS_PER_YEAR {
                Err(Error::Data(format!("{d}: week index {} outside the training week basis", c.week_of_year)))
            } else {
                Ok(c)
            }
        })
        .collect()
}

/// Maximal runs of consecutive retained calendar days, as half-open ranges of the
/// linear hour index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockSegmentation {
    pub blocks: Vec<Range<usize>>,
}

impl BlockSegmentation {
    /// One block covering `n` hours.
    pub fn single(n: usize) -> Self {
        Self { blocks: if n == 0 { Vec::new() } else { vec![0..n] } }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Range<usize>> {
        self.blocks.iter()
    }

    pub fn total_hours(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// Whether `t` is the first hour of a block.
    pub fn is_block_start(&self, t: usize) -> bool {
        self.blocks.iter().any(|b| b.start == t)
    }
}

pub fn segment_blocks(series: &HourlyCountSeries) -> BlockSegmentation {
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=series.day_dates.len() {
        let breaks = i == series.day_dates.len() || series.day_dates[i] - series.day_dates[i - 1] != Duration::days(1);
        if breaks {
            blocks.push(start * HOURS_PER_DAY..i * HOURS_PER_DAY);
            start = i;
        }
    }
    BlockSegmentation { blocks }
}

/// Writes the `date,hour,count` CSV with hour labels `1..=24`.
pub fn write_counts_csv<W: io::Write>(series: &HourlyCountSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "hour", "count"])?;
    for (d, row) in series.day_dates.iter().zip(&series.counts) {
        let date = d.format("%Y-%m-%d").to_string();
        for (h, c) in row.iter().enumerate() {
            w.write_record([date.as_str(), &(h + 1).to_string(), &c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the excluded-day sidecar, one ISO date per line.
pub fn write_excluded<W: io::Write>(series: &HourlyCountSeries, mut writer: W) -> Result<()> {
    for d in &series.excluded {
        writeln!(writer, "{}", d.format("%Y-%m-%d"))?;
    }
    Ok(())
}

pub fn parse_date(raw: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d").ok()
}

pub fn read_excluded<R: io::BufRead>(reader: R) -> Result<BTreeSet<NaiveDate>> {
    let mut out = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d = parse_date(&line)
            .ok_or_else(|| Error::Parse { row: idx + 1, message: format!("unparseable date `{}`", line.trim()) })?;
        out.insert(d);
    }
    Ok(out)
}

/// Reads a `date,hour,count` CSV. Every listed date must carry all 24 hours exactly once.
pub fn read_counts_csv<R: io::Read>(reader: R, excluded: BTreeSet<NaiveDate>) -> Result<HourlyCountSeries> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let names: Vec<String> = csv.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if names != ["date", "hour", "count"] {
        return Err(Error::Parse { row: 1, message: format!("expected header `date,hour,count`, found `{}`", names.join(",")) });
    }
    let mut rows: BTreeMap<NaiveDate, [Option<u32>; HOURS_PER_DAY]> = BTreeMap::new();
    for (idx, rec) in csv.records().enumerate() {
        let row = idx + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let bad = |message: String| Error::Parse { row, message };
        let date = parse_date(&rec[0]).ok_or_else(|| bad(format!("unparseable date `{}`", &rec[0])))?;
        let hour: usize = rec[1].trim().parse().map_err(|_| bad(format!("unparseable hour `{}`", &rec[1])))?;
        if !(1..=HOURS_PER_DAY).contains(&hour) {
            return Err(bad(format!("hour {hour} outside 1..=24")));
        }
        let count: u32 = rec[2].trim().parse().map_err(|_| bad(format!("unparseable count `{}`", &rec[2])))?;
        let slot = &mut rows.entry(date).or_insert([None; HOURS_PER_DAY])[hour - 1];
        if slot.replace(count).is_some() {
            return Err(bad(format!("duplicate entry for {date} hour {hour}")));
        }
    }
    let mut day_dates = Vec::with_capacity(rows.len());
    let mut counts = Vec::with_capacity(rows.len());
    for (date, hours) in rows {
        let mut row = [0u32; HOURS_PER_DAY];
        for (h, v) in hours.iter().enumerate() {
            row[h] = v.ok_or_else(|| Error::Data(format!("{date}: missing hour {}", h + 1)))?;
        }
        day_dates.push(date);
        counts.push(row);
    }
    let excluded = excluded.into_iter().filter(|d| day_dates.binary_search(d).is_err()).collect();
    HourlyCountSeries::new(day_dates, counts, excluded)
}
