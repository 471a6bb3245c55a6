//! Static date embeddings.
//!
//! The nine Gregorian features are pure calendar arithmetic. Lunar-calendar,
//! solar-term and holiday features come from per-region tables loaded from
//! delimited text; a date outside a region's table (or a region with no table)
//! gets 0.0 for every table-driven feature.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate};

use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 23;

/// Day zero of `abs_day`; 2001-01-01 has `abs_day = 1 / 1826.25`.
pub fn abs_day_origin() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 12, 31).expect("valid origin")
}

/// A calendar date tagged with the region whose tables apply to it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DateKey {
    pub date: NaiveDate,
    pub region: String,
}

impl DateKey {
    pub fn new(year: i32, month: u32, day: u32, region: impl Into<String>) -> Result<Self> {
        let date = NaiveDate::from_ymd_opt(year, month, day).ok_or_else(|| {
            Error::Domain(format!("{year:04}-{month:02}-{day:02} is not a valid date"))
        })?;
        Ok(Self {
            date,
            region: region.into(),
        })
    }

    pub fn from_date(date: NaiveDate, region: impl Into<String>) -> Self {
        Self {
            date,
            region: region.into(),
        }
    }

    pub fn year(&self) -> i32 {
        self.date.year()
    }

    pub fn month(&self) -> u32 {
        self.date.month()
    }

    pub fn day(&self) -> u32 {
        self.date.day()
    }
}

impl fmt::Display for DateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.date, self.region)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LunarDate {
    pub year: i32,
    pub month: u32,
    pub day: u32,
    pub leap: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolarTerm {
    /// 0..=23, counted from the first term of the Gregorian year.
    pub index: u32,
    /// Day within the term, 1-based.
    pub day: u32,
}

/// One row of a region table as written in the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TableRow {
    pub lunar: Option<LunarDate>,
    pub solar_term: Option<SolarTerm>,
    pub holiday: bool,
    pub workday: bool,
}

/// Per-row quantities that need a scan over neighbouring rows.
///
/// `None` means the enclosing period is truncated by the table's coverage,
/// so the quantity is unknown.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct RowContext {
    lunar_year_passed: Option<u32>,
    lunar_year_total: Option<u32>,
    lunar_month_total: Option<u32>,
    term_total: Option<u32>,
    holiday_run: u32,
    holiday_remaining: u32,
    workday_run: u32,
    workday_remaining: u32,
}

/// Contiguous, date-indexed table for one region.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionTable {
    start: Option<NaiveDate>,
    rows: Vec<TableRow>,
    context: Vec<RowContext>,
}

impl RegionTable {
    /// Builds a table from `(date, row)` pairs in any order.
    ///
    /// Duplicate dates and gaps in coverage are rejected.
    pub fn from_rows(mut entries: Vec<(NaiveDate, TableRow)>) -> Result<Self> {
        if entries.is_empty() {
            return Ok(Self::default());
        }
        entries.sort_by_key(|(d, _)| *d);
        for pair in entries.windows(2) {
            let (a, b) = (pair[0].0, pair[1].0);
            if a == b {
                return Err(Error::Validation(format!("duplicate calendar row for {a}")));
            }
            if b - a != Duration::days(1) {
                return Err(Error::Validation(format!(
                    "calendar table has a gap between {a} and {b}"
                )));
            }
        }
        let start = entries[0].0;
        let rows: Vec<TableRow> = entries.into_iter().map(|(_, r)| r).collect();
        let context = derive_context(&rows);
        Ok(Self {
            start: Some(start),
            rows,
            context,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Inclusive coverage range, `None` for an empty table.
    pub fn coverage(&self) -> Option<(NaiveDate, NaiveDate)> {
        let start = self.start?;
        Some((start, start + Duration::days(self.rows.len() as i64 - 1)))
    }

    fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let start = self.start?;
        let offset = (date - start).num_days();
        if offset < 0 || offset as usize >= self.rows.len() {
            None
        } else {
            Some(offset as usize)
        }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.index_of(date).is_some()
    }

    pub fn row(&self, date: NaiveDate) -> Option<&TableRow> {
        self.index_of(date).map(|i| &self.rows[i])
    }

    pub fn lunar(&self, date: NaiveDate) -> Option<LunarDate> {
        self.row(date).and_then(|r| r.lunar)
    }
}

fn derive_context(rows: &[TableRow]) -> Vec<RowContext> {
    let n = rows.len();
    let mut ctx = vec![RowContext::default(); n];

    // Lunar months: runs of identical (year, month, leap).
    let month_key = |r: &TableRow| r.lunar.map(|l| (l.year, l.month, l.leap));
    for (start, end) in runs(rows, |a, b| {
        month_key(a).is_some() && month_key(a) == month_key(b)
    }) {
        if month_key(&rows[start]).is_none() || end == n {
            continue;
        }
        let total = rows[end - 1].lunar.map(|l| l.day);
        for c in &mut ctx[start..end] {
            c.lunar_month_total = total;
        }
    }

    // Lunar years: the run must begin on lunar 1/1 (non-leap) to count days.
    let year_key = |r: &TableRow| r.lunar.map(|l| l.year);
    for (start, end) in runs(rows, |a, b| {
        year_key(a).is_some() && year_key(a) == year_key(b)
    }) {
        let Some(first) = rows[start].lunar else {
            continue;
        };
        let starts_inside = first.month == 1 && first.day == 1 && !first.leap;
        let ends_inside = end < n;
        for (offset, c) in ctx[start..end].iter_mut().enumerate() {
            if starts_inside {
                c.lunar_year_passed = Some(offset as u32 + 1);
                if ends_inside {
                    c.lunar_year_total = Some((end - start) as u32);
                }
            }
        }
    }

    let term_key = |r: &TableRow| r.solar_term.map(|t| t.index);
    for (start, end) in runs(rows, |a, b| {
        term_key(a).is_some() && term_key(a) == term_key(b)
    }) {
        if term_key(&rows[start]).is_none() || end == n {
            continue;
        }
        let total = rows[end - 1].solar_term.map(|t| t.day);
        for c in &mut ctx[start..end] {
            c.term_total = total;
        }
    }

    for (start, end) in runs(rows, |a, b| a.holiday && b.holiday) {
        if !rows[start].holiday {
            continue;
        }
        let len = (end - start) as u32;
        for (offset, c) in ctx[start..end].iter_mut().enumerate() {
            c.holiday_run = len;
            c.holiday_remaining = len - offset as u32;
        }
    }
    for (start, end) in runs(rows, |a, b| a.workday && b.workday) {
        if !rows[start].workday {
            continue;
        }
        let len = (end - start) as u32;
        for (offset, c) in ctx[start..end].iter_mut().enumerate() {
            c.workday_run = len;
            c.workday_remaining = len - offset as u32;
        }
    }
    ctx
}

/// Maximal half-open runs `[start, end)` where `same(prev, next)` holds between
/// consecutive rows.
fn runs(rows: &[TableRow], same: impl Fn(&TableRow, &TableRow) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        if i == rows.len() || !same(&rows[i - 1], &rows[i]) {
            if i > start {
                out.push((start, i));
            }
            start = i;
        }
    }
    out
}

/// Region tables keyed by region id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalendarTables {
    regions: BTreeMap<String, RegionTable>,
}

static EMPTY_TABLE: RegionTable = RegionTable {
    start: None,
    rows: Vec::new(),
    context: Vec::new(),
};

impl CalendarTables {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, region: impl Into<String>, table: RegionTable) {
        self.regions.insert(region.into(), table);
    }

    pub fn regions(&self) -> impl Iterator<Item = &str> {
        self.regions.keys().map(String::as_str)
    }

    /// The table for `region`, or the empty table if none is loaded.
    pub fn region(&self, region: &str) -> &RegionTable {
        self.regions.get(region).unwrap_or(&EMPTY_TABLE)
    }

    /// Union of the coverage of every loaded region.
    pub fn coverage(&self) -> Option<(NaiveDate, NaiveDate)> {
        self.regions
            .values()
            .filter_map(RegionTable::coverage)
            .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
    }

    /// Embedding for a date already known to be valid.
    pub fn embed(&self, date: NaiveDate, region: &str) -> DateEmbedding {
        embed_date(date, self.region(region))
    }
}

/// Loads region tables from a single file (region id = file stem) or from every
/// `*.csv` file in a directory.
pub fn load_calendar_tables(path: &Path) -> Result<CalendarTables> {
    let mut tables = CalendarTables::default();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for file in files {
            let (region, table) = load_region_file(&file)?;
            tables.insert(region, table);
        }
    } else {
        let (region, table) = load_region_file(path)?;
        tables.insert(region, table);
    }
    Ok(tables)
}

fn load_region_file(path: &Path) -> Result<(String, RegionTable)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let region = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((region, parse_region_table(&text, path)?))
}

/// Parses the region table text format.
///
/// One row per date, comma separated:
/// `date,lunar_year,lunar_month,lunar_day,leap,term_index,term_day,holiday,workday`.
/// Lunar and solar-term groups may be left blank. Lines starting with `#` and
/// a leading header line beginning with `date` are skipped.
pub fn parse_region_table(text: &str, path: &Path) -> Result<RegionTable> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if entries.is_empty() && line.to_ascii_lowercase().starts_with("date") {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", fields.len())));
        }
        let date = NaiveDate::parse_from_str(fields[0], "%Y-%m-%d")
            .map_err(|e| err(format!("bad date {:?}: {e}", fields[0])))?;

        let lunar_fields = &fields[1..5];
        let lunar = if lunar_fields[..3].iter().all(|f| f.is_empty()) {
            None
        } else {
            let year = parse_int::<i32>(lunar_fields[0]).map_err(&err)?;
            let month = parse_int::<u32>(lunar_fields[1]).map_err(&err)?;
            let day = parse_int::<u32>(lunar_fields[2]).map_err(&err)?;
            let leap = if lunar_fields[3].is_empty() {
                false
            } else {
                parse_flag(lunar_fields[3]).map_err(&err)?
            };
            if !(1..=12).contains(&month) || !(1..=30).contains(&day) {
                return Err(err(format!("lunar date {year}/{month}/{day} out of range")));
            }
            Some(LunarDate {
                year,
                month,
                day,
                leap,
            })
        };

        let solar_term = if fields[5].is_empty() {
            None
        } else {
            let index = parse_int::<u32>(fields[5]).map_err(&err)?;
            let day = parse_int::<u32>(fields[6]).map_err(&err)?;
            if index > 23 || day == 0 {
                return Err(err(format!("solar term {index} day {day} out of range")));
            }
            Some(SolarTerm { index, day })
        };

        let holiday = parse_flag(fields[7]).map_err(&err)?;
        let workday = parse_flag(fields[8]).map_err(&err)?;
        entries.push((
            date,
            TableRow {
                lunar,
                solar_term,
                holiday,
                workday,
            },
        ));
    }
    RegionTable::from_rows(entries)
}

fn parse_int<N: std::str::FromStr>(s: &str) -> std::result::Result<N, String> {
    s.parse::<N>()
        .map_err(|_| format!("expected an integer, found {s:?}"))
}

fn parse_flag(s: &str) -> std::result::Result<bool, String> {
    match s {
        "" | "0" | "false" | "False" | "FALSE" => Ok(false),
        "1" | "true" | "True" | "TRUE" => Ok(true),
        other => Err(format!("expected a 0/1 flag, found {other:?}")),
    }
}

/// Names and positions of the embedding features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    AbsDay,
    Year,
    Day,
    YearDay,
    WeekOfYear,
    LunarYear,
    LunarMonth,
    LunarDay,
    LunarYearDay,
    DayOfYear,
    DayOfMonth,
    MonthOfYear,
    DayOfWeek,
    DayOfLunarYear,
    DayOfLunarMonth,
    MonthOfLunarYear,
    JieqiOfYear,
    JieqiDay,
    DayOfJieqi,
    Holidays,
    Workdays,
    ResidualHoliday,
    ResidualWorkday,
}

impl Feature {
    pub const ALL: [Feature; EMBEDDING_DIM] = [
        Feature::AbsDay,
        Feature::Year,
        Feature::Day,
        Feature::YearDay,
        Feature::WeekOfYear,
        Feature::LunarYear,
        Feature::LunarMonth,
        Feature::LunarDay,
        Feature::LunarYearDay,
        Feature::DayOfYear,
        Feature::DayOfMonth,
        Feature::MonthOfYear,
        Feature::DayOfWeek,
        Feature::DayOfLunarYear,
        Feature::DayOfLunarMonth,
        Feature::MonthOfLunarYear,
        Feature::JieqiOfYear,
        Feature::JieqiDay,
        Feature::DayOfJieqi,
        Feature::Holidays,
        Feature::Workdays,
        Feature::ResidualHoliday,
        Feature::ResidualWorkday,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::AbsDay => "abs_day",
            Feature::Year => "year",
            Feature::Day => "day",
            Feature::YearDay => "year_day",
            Feature::WeekOfYear => "weekofyear",
            Feature::LunarYear => "lunar_year",
            Feature::LunarMonth => "lunar_month",
            Feature::LunarDay => "lunar_day",
            Feature::LunarYearDay => "lunar_year_day",
            Feature::DayOfYear => "dayofyear",
            Feature::DayOfMonth => "dayofmonth",
            Feature::MonthOfYear => "monthofyear",
            Feature::DayOfWeek => "dayofweek",
            Feature::DayOfLunarYear => "dayoflunaryear",
            Feature::DayOfLunarMonth => "dayoflunarmonth",
            Feature::MonthOfLunarYear => "monthoflunaryear",
            Feature::JieqiOfYear => "jieqiofyear",
            Feature::JieqiDay => "jieqi_day",
            Feature::DayOfJieqi => "dayofjieqi",
            Feature::Holidays => "holidays",
            Feature::Workdays => "workdays",
            Feature::ResidualHoliday => "residual_holiday",
            Feature::ResidualWorkday => "residual_workday",
        }
    }

    /// Features computed from the Gregorian date alone.
    pub fn is_gregorian(self) -> bool {
        matches!(
            self,
            Feature::AbsDay
                | Feature::Year
                | Feature::Day
                | Feature::YearDay
                | Feature::WeekOfYear
                | Feature::DayOfYear
                | Feature::DayOfMonth
                | Feature::MonthOfYear
                | Feature::DayOfWeek
        )
    }

    /// Features of the form `(passed - 1) / (total - 1) - 0.5`, bounded by ±0.5.
    pub fn is_centered(self) -> bool {
        matches!(
            self,
            Feature::DayOfYear
                | Feature::DayOfMonth
                | Feature::MonthOfYear
                | Feature::DayOfWeek
                | Feature::DayOfLunarYear
                | Feature::DayOfLunarMonth
                | Feature::MonthOfLunarYear
                | Feature::JieqiOfYear
                | Feature::DayOfJieqi
        )
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// The static embedding of one date, in [`Feature::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DateEmbedding {
    pub date: NaiveDate,
    pub values: [f64; EMBEDDING_DIM],
}

impl DateEmbedding {
    pub fn get(&self, feature: Feature) -> f64 {
        self.values[feature.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// `(passed - 1) / (total - 1) - 0.5`; a single-unit period maps to 0.0.
pub fn centered(passed: u32, total: u32) -> f64 {
    if total <= 1 {
        return 0.0;
    }
    (passed as f64 - 1.0) / (total as f64 - 1.0) - 0.5
}

pub fn days_in_year(year: i32) -> u32 {
    if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366
    } else {
        365
    }
}

pub fn days_in_month(year: i32, month: u32) -> u32 {
    let (ny, nm) = if month == 12 {
        (year + 1, 1)
    } else {
        (year, month + 1)
    };
    let first_next = NaiveDate::from_ymd_opt(ny, nm, 1).expect("valid month start");
    first_next.pred_opt().expect("has predecessor").day()
}

pub fn build_date_embedding(date: &DateKey, tables: &CalendarTables) -> Result<DateEmbedding> {
    Ok(embed_date(date.date, tables.region(&date.region)))
}

fn embed_date(date: NaiveDate, table: &RegionTable) -> DateEmbedding {
    let mut v = [0.0; EMBEDDING_DIM];
    let set = |v: &mut [f64; EMBEDDING_DIM], f: Feature, x: f64| v[f.index()] = x;

    let year = date.year();
    let month = date.month();
    let dom = date.day();
    let doy = date.ordinal();
    let abs = (date - abs_day_origin()).num_days() as f64;

    set(&mut v, Feature::AbsDay, abs / (365.25 * 5.0));
    set(&mut v, Feature::Year, (year as f64 - 1998.5) / 25.0);
    set(&mut v, Feature::Day, dom as f64 / 31.0);
    set(&mut v, Feature::YearDay, doy as f64 / 366.0);
    set(
        &mut v,
        Feature::WeekOfYear,
        date.iso_week().week() as f64 / 54.0,
    );
    set(
        &mut v,
        Feature::DayOfYear,
        centered(doy, days_in_year(year)),
    );
    set(
        &mut v,
        Feature::DayOfMonth,
        centered(dom, days_in_month(year, month)),
    );
    set(&mut v, Feature::MonthOfYear, centered(month, 12));
    set(
        &mut v,
        Feature::DayOfWeek,
        centered(date.weekday().number_from_monday(), 7),
    );

    if let Some(i) = table.index_of(date) {
        let row = &table.rows[i];
        let ctx = &table.context[i];
        if let Some(lunar) = row.lunar {
            set(
                &mut v,
                Feature::LunarYear,
                (lunar.year as f64 - 1998.5) / 25.0,
            );
            set(&mut v, Feature::LunarMonth, lunar.month as f64 / 12.0);
            set(&mut v, Feature::LunarDay, lunar.day as f64 / 30.0);
            set(&mut v, Feature::MonthOfLunarYear, centered(lunar.month, 12));
            if let Some(total) = ctx.lunar_month_total {
                set(&mut v, Feature::DayOfLunarMonth, centered(lunar.day, total));
            }
            if let Some(passed) = ctx.lunar_year_passed {
                set(&mut v, Feature::LunarYearDay, passed as f64 / 384.0);
                if let Some(total) = ctx.lunar_year_total {
                    set(&mut v, Feature::DayOfLunarYear, centered(passed, total));
                }
            }
        }
        if let Some(term) = row.solar_term {
            set(&mut v, Feature::JieqiOfYear, centered(term.index + 1, 24));
            set(&mut v, Feature::JieqiDay, term.day as f64 / 15.0);
            if let Some(total) = ctx.term_total {
                set(&mut v, Feature::DayOfJieqi, centered(term.day, total));
            }
        }
        set(&mut v, Feature::Holidays, ctx.holiday_run as f64 / 7.0);
        set(&mut v, Feature::Workdays, ctx.workday_run as f64 / 7.0);
        set(
            &mut v,
            Feature::ResidualHoliday,
            ctx.holiday_remaining as f64 / 7.0,
        );
        set(
            &mut v,
            Feature::ResidualWorkday,
            ctx.workday_remaining as f64 / 7.0,
        );
    }

    DateEmbedding { date, values: v }
}

/// One embedding per calendar day in `[start, end]`, in date order.
pub fn build_embedding_range(
    start: &DateKey,
    end: &DateKey,
    tables: &CalendarTables,
) -> Result<Vec<DateEmbedding>> {
    if start.date > end.date {
        return Err(Error::Domain(format!(
            "range start {} is after end {}",
            start.date, end.date
        )));
    }
    let table = tables.region(&start.region);
    Ok(start
        .date
        .iter_days()
        .take_while(|d| *d <= end.date)
        .map(|d| embed_date(d, table))
        .collect())
}
