//! A seeded synthetic dataset whose signal is a function of the calendar.
//!
//! Each variate combines weekday level shifts, a holiday drop driven by a
//! generated holiday table, an annual sinusoid and an intraday profile, plus
//! Gaussian noise whose variance is a fixed fraction of the signal variance.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::calendar::{parse_region_table, CalendarTables, RegionTable};
use crate::data::SeriesDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub start: NaiveDate,
    pub days: usize,
    pub granularity: usize,
    pub n_variates: usize,
    /// Noise variance as a fraction of signal variance.
    pub noise_ratio: f64,
    pub seed: u64,
    pub region: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
            days: 730,
            granularity: 24,
            n_variates: 2,
            noise_ratio: 0.1,
            seed: 0,
            region: "synth".into(),
        }
    }
}

/// Fixed-date holidays: New Year (3 days), early May (3), early October (7),
/// Christmas (2).
pub fn is_synthetic_holiday(date: NaiveDate) -> bool {
    matches!(
        (date.month(), date.day()),
        (1, 1..=3) | (5, 1..=3) | (10, 1..=7) | (12, 25..=26)
    )
}

/// Calendar-table text covering `[from, to]`: holiday flags from
/// [`is_synthetic_holiday`], workdays are non-holiday weekdays, lunar and
/// solar-term columns left blank.
pub fn holiday_table_text(from: NaiveDate, to: NaiveDate) -> String {
    let mut s = String::from(
        "date,lunar_year,lunar_month,lunar_day,leap,term_index,term_day,holiday,workday\n",
    );
    for d in from.iter_days().take_while(|d| *d <= to) {
        let holiday = is_synthetic_holiday(d);
        let workday = !holiday && d.weekday().num_days_from_monday() < 5;
        writeln!(s, "{d},,,,,,,{},{}", holiday as u8, workday as u8).expect("string write");
    }
    s
}

/// Generated series plus the holiday table under `region`.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: SeriesDataset,
    pub tables: CalendarTables,
    /// Table text, for writing next to the series.
    pub table_text: String,
}

/// Noise-free value of variate `j` at intraday slot `g` of `date`.
pub fn signal(date: NaiveDate, g: usize, granularity: usize, j: usize) -> f64 {
    const WEEKDAY: [f64; 7] = [0.2, 0.35, 0.4, 0.3, 0.1, -0.7, -0.9];
    let holiday = is_synthetic_holiday(date);
    let weekend = date.weekday().num_days_from_monday() >= 5;
    let scale = 1.0 + 0.5 * j as f64;
    let level = if holiday {
        -1.1
    } else {
        WEEKDAY[date.weekday().num_days_from_monday() as usize]
    };
    let doy = date.ordinal() as f64;
    let annual = 0.9 * (2.0 * std::f64::consts::PI * doy / 365.25 + 0.8 * j as f64).sin();
    let hour = g as f64 / granularity as f64;
    let active = if holiday || weekend { 0.4 } else { 1.0 };
    let intraday = 0.6 * active * (2.0 * std::f64::consts::PI * (hour - 0.3)).sin();
    scale * (level + annual + intraday) + 5.0 * j as f64
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.days == 0 || cfg.granularity == 0 || cfg.n_variates == 0 {
        return Err(Error::Config(
            "synthetic dataset dimensions must be positive".into(),
        ));
    }
    let (gr, n) = (cfg.granularity, cfg.n_variates);
    let mut clean = Vec::with_capacity(cfg.days * gr * n);
    for d in 0..cfg.days {
        let date = cfg.start + Duration::days(d as i64);
        for g in 0..gr {
            for j in 0..n {
                clean.push(signal(date, g, gr, j));
            }
        }
    }
    let mut values = clean.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for j in 0..n {
        let col: Vec<f64> = clean.iter().skip(j).step_by(n).copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        let normal = Normal::new(0.0, (cfg.noise_ratio * var).sqrt())
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        for v in values.iter_mut().skip(j).step_by(n) {
            *v += normal.sample(&mut rng);
        }
    }
    let names = (0..n).map(|j| format!("v{j}")).collect();
    let dataset = SeriesDataset::new(cfg.start, gr, names, values, cfg.region.clone())?;

    // Cover generous padding on both sides so any forecast window fits.
    let from = cfg.start - Duration::days(60);
    let to = cfg.start + Duration::days(cfg.days as i64 + 400);
    let table_text = holiday_table_text(from, to);
    let table: RegionTable = parse_region_table(&table_text, Path::new("<synthetic>"))?;
    let mut tables = CalendarTables::empty();
    tables.insert(cfg.region.clone(), table);
    Ok(SyntheticData {
        dataset,
        tables,
        table_text,
    })
}

/// Writes the series as a timestamped CSV that the ingester reads back.
pub fn write_csv(dataset: &SeriesDataset, path: &Path) -> Result<()> {
    let gr = dataset.granularity();
    let step = 86_400 / gr as i64;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(e.to_string()))?;
    let mut header = vec!["date".to_string()];
    header.extend(dataset.variate_names().iter().cloned());
    w.write_record(&header)
        .map_err(|e| Error::Validation(e.to_string()))?;
    for d in 0..dataset.len() {
        let day = dataset.date(d).and_hms_opt(0, 0, 0).expect("midnight");
        let vals = dataset.day_values(d);
        for (g, row) in vals.chunks(dataset.n_variates()).enumerate() {
            let ts = day + Duration::seconds(step * g as i64);
            let mut rec = vec![ts.format("%Y-%m-%d %H:%M:%S").to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)
                .map_err(|e| Error::Validation(e.to_string()))?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_shaped() {
        let cfg = SyntheticConfig {
            days: 20,
            ..SyntheticConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset.values(), b.dataset.values());
        assert_eq!(
            (
                a.dataset.len(),
                a.dataset.granularity(),
                a.dataset.n_variates()
            ),
            (20, 24, 2)
        );
        let c = generate(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.dataset.values(), c.dataset.values());
    }

    #[test]
    fn noise_fraction_is_close() {
        let cfg = SyntheticConfig::default();
        let data = generate(&cfg).unwrap();
        let n = cfg.n_variates;
        for j in 0..n {
            let mut clean = Vec::new();
            for d in 0..cfg.days {
                let date = cfg.start + Duration::days(d as i64);
                for g in 0..cfg.granularity {
                    clean.push(signal(date, g, cfg.granularity, j));
                }
            }
            let noisy: Vec<f64> = data
                .dataset
                .values()
                .iter()
                .skip(j)
                .step_by(n)
                .copied()
                .collect();
            let var = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
            };
            let resid: Vec<f64> = noisy.iter().zip(&clean).map(|(a, b)| a - b).collect();
            let ratio = var(&resid) / var(&clean);
            assert!((ratio - 0.1).abs() < 0.01, "{ratio}");
        }
    }

    #[test]
    fn table_marks_holidays() {
        let data = generate(&SyntheticConfig::default()).unwrap();
        let t = data.tables.region("synth");
        let d = NaiveDate::from_ymd_opt(2018, 10, 3).unwrap();
        assert!(t.row(d).unwrap().holiday);
        assert!(!t.row(d).unwrap().workday);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = SyntheticConfig {
            days: 3,
            granularity: 4,
            ..SyntheticConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_csv(&data.dataset, &p).unwrap();
        let back = crate::data::ingest_csv(&p, &crate::data::CsvSchema::default()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.values().iter().zip(data.dataset.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
