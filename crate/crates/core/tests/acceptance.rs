//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs as its own binary (`harness = false`). Pass a substring as the first
//! argument to run a subset, e.g. `cargo test --test acceptance -- synthetic`.
//! The optional real-data check reads an ETTh1-format CSV from
//! `DATEFORMER_ETTH1` and is skipped when the variable is unset.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dateformer::autocorr::{circular_autocorrelation, stability_score};
use dateformer::calendar::{build_date_embedding, CalendarTables, DateKey, Feature};
use dateformer::config::PreparedData;
use dateformer::data::{self, CsvSchema, Split};
use dateformer::eval::{naive_baselines, rolling_evaluate, EvalOptions};
use dateformer::models::encoder::{pretrain_loss, EncoderModel, PretrainBatch};
use dateformer::models::{ModelBundle, ModelConfig};
use dateformer::numerics::{gradient_check_prefix, SeqShape, Var};
use dateformer::scheduler::{default_lookback, forecast, ForecastRequest};
use dateformer::synthetic::{generate, SyntheticConfig};
use dateformer::training::{
    pretrain_stage, run_pipeline, train_stage, warmup_stage, Stage, StageFlags, TrainConfig,
    TrainingLog,
};
use dateformer::{Graph, ParamStore, Tensor};

type Outcome = Result<String, String>;
type LossFn<'a> = &'a dyn Fn(&mut Graph, &ParamStore) -> dateformer::Result<Var>;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn synthetic_data(seed: u64) -> PreparedData {
    let syn = generate(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })
    .expect("synthetic data");
    let ds = data::normalize(data::split(syn.dataset, [0.7, 0.1, 0.2]).unwrap()).unwrap();
    PreparedData {
        dataset: ds,
        tables: syn.tables,
    }
}

fn e2e_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::small(),
        stages: StageFlags {
            pretrain: true,
            warmup: false,
        },
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------- autocorr

fn brute_circular(x: &[f64]) -> Vec<f64> {
    let l = x.len();
    (0..l)
        .map(|tau| (0..l).map(|t| x[t] * x[(t + tau) % l]).sum())
        .collect()
}

fn autocorrelation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let len = rng.gen_range(1..=512);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let fast = circular_autocorrelation(&x).map_err(|e| e.to_string())?;
        let slow = brute_circular(&x);
        let scale = slow[0].abs().max(f64::MIN_POSITIVE);
        for (a, b) in fast.values.iter().zip(&slow) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    ensure(worst <= 1e-9, || {
        format!("max error relative to lag-0 energy {worst:.3e}")
    })?;
    let s1 = stability_score(&[1.0, 1.0, 1.0, 1.0]).map_err(|e| e.to_string())?;
    let s2 = stability_score(&[1.0, 0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    ensure(s1 == 2.0 && s2 == 0.25, || format!("scores {s1} and {s2}"))?;
    Ok(format!(
        "200 vectors, worst relative error {worst:.2e}; scores 2.0 and 0.25"
    ))
}

// ---------------------------------------------------------------- calendar

/// Days since 1970-01-01 by the civil-from-days inverse (proleptic Gregorian).
fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

fn leap(y: i64) -> bool {
    (y % 4 == 0 && y % 100 != 0) || y % 400 == 0
}

fn month_len(y: i64, m: i64) -> i64 {
    [
        31,
        if leap(y) { 29 } else { 28 },
        31,
        30,
        31,
        30,
        31,
        31,
        30,
        31,
        30,
        31,
    ][(m - 1) as usize]
}

fn ordinal(y: i64, m: i64, d: i64) -> i64 {
    (1..m).map(|k| month_len(y, k)).sum::<i64>() + d
}

/// Monday = 1 .. Sunday = 7; 1970-01-01 was a Thursday.
fn iso_weekday(days: i64) -> i64 {
    (days + 3).rem_euclid(7) + 1
}

fn iso_week(y: i64, m: i64, d: i64) -> i64 {
    let days = days_from_civil(y, m, d);
    let wd = iso_weekday(days);
    // The week belongs to the year of its Thursday.
    let thursday = days - wd + 4;
    let ty = {
        let mut yy = y + 1;
        while days_from_civil(yy, 1, 1) > thursday {
            yy -= 1;
        }
        yy
    };
    (thursday - days_from_civil(ty, 1, 1)) / 7 + 1
}

fn centered_oracle(p: i64, t: i64) -> f64 {
    (p as f64 - 1.0) / (t as f64 - 1.0) - 0.5
}

fn calendar_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tables = CalendarTables::empty();
    let origin = days_from_civil(2000, 12, 31);
    let lo = days_from_civil(2001, 1, 1);
    let hi = days_from_civil(2023, 12, 31);
    let gregorian: Vec<Feature> = Feature::ALL
        .into_iter()
        .filter(|f| f.is_gregorian())
        .collect();
    let mut checked = 0;
    for i in 0..50 {
        // Pin a Monday and a month start among the samples.
        let days = match i {
            0 => days_from_civil(2001, 1, 1),
            1 => days_from_civil(2016, 2, 29),
            2 => days_from_civil(2023, 12, 31),
            _ => rng.gen_range(lo..=hi),
        };
        let date = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap() + chrono::Duration::days(days);
        let (y, m, d) = (date.year() as i64, date.month() as i64, date.day() as i64);
        let emb = build_date_embedding(&DateKey::from_date(date, ""), &tables)
            .map_err(|e| e.to_string())?;
        for &f in &gregorian {
            let expect = match f {
                Feature::AbsDay => (days - origin) as f64 / (365.25 * 5.0),
                Feature::Year => (y as f64 - 1998.5) / 25.0,
                Feature::Day => d as f64 / 31.0,
                Feature::YearDay => ordinal(y, m, d) as f64 / 366.0,
                Feature::WeekOfYear => iso_week(y, m, d) as f64 / 54.0,
                Feature::DayOfYear => {
                    centered_oracle(ordinal(y, m, d), if leap(y) { 366 } else { 365 })
                }
                Feature::DayOfMonth => centered_oracle(d, month_len(y, m)),
                Feature::MonthOfYear => centered_oracle(m, 12),
                Feature::DayOfWeek => centered_oracle(iso_weekday(days), 7),
                other => return Err(format!("unexpected Gregorian feature {}", other.name())),
            };
            let got = emb.get(f);
            ensure(got == expect, || {
                format!("{date} {}: got {got}, oracle {expect}", f.name())
            })?;
            checked += 1;
        }
        for f in Feature::ALL.into_iter().filter(|f| !f.is_gregorian()) {
            ensure(emb.get(f) == 0.0, || {
                format!("{date} {} is {} with empty tables", f.name(), emb.get(f))
            })?;
        }
        if iso_weekday(days) == 1 {
            ensure(emb.get(Feature::DayOfWeek) == -0.5, || {
                "Monday is not -0.5".into()
            })?;
        }
        if d == 1 {
            ensure(emb.get(Feature::DayOfMonth) == -0.5, || {
                "month start is not -0.5".into()
            })?;
        }
    }
    let a = build_date_embedding(&DateKey::new(2010, 3, 1, "").unwrap(), &tables).unwrap();
    let b = build_date_embedding(&DateKey::new(2010, 3, 2, "").unwrap(), &tables).unwrap();
    let step = b.get(Feature::AbsDay) - a.get(Feature::AbsDay);
    ensure((step - 1.0 / 1826.25).abs() < 1e-15, || {
        format!("abs_day step {step}")
    })?;
    Ok(format!(
        "50 dates, {checked} values across {} Gregorian features exact; table features 0.0",
        gregorian.len()
    ))
}

// ---------------------------------------------------------------- gradients

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        ff_mult: 2,
        encoder_layers: 1,
        llf_encoder_layers: 1,
        llf_decoder_layers: 1,
        preday: 2,
        postday: 2,
        dropout: 0.0,
        share_prelim: false,
    }
}

fn rand_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check_block(store: &ParamStore, prefix: &str, f: LossFn) -> Result<f64, String> {
    let mut store = store.clone();
    let report = gradient_check_prefix(&mut store, prefix, f, 1e-5).map_err(|e| e.to_string())?;
    Ok(report.max_rel_error)
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = small_cfg();
    let (gr, n) = (3, 2);
    let bundle = ModelBundle::new(cfg.clone(), gr, n, 5).map_err(|e| e.to_string())?;
    let enc = EncoderModel::new(cfg.clone(), n, 6).map_err(|e| e.to_string())?;
    let (b, l) = (2, 2);
    let residuals = rand_tensor(b * l * gr, n, &mut rng);
    let reps = rand_tensor(b * (l + 1), cfg.d_model, &mut rng);
    let target = rand_tensor(b * gr, n, &mut rng);
    let llf = bundle.llf.clone();
    let llf_loss = move |g: &mut Graph, s: &ParamStore| -> dateformer::Result<Var> {
        let r = g.constant(residuals.clone());
        let d = g.constant(reps.clone());
        let out = llf.forward(g, s, r, d, b, l)?;
        let t = g.constant(target.clone());
        g.mse(out.output, t)
    };
    let tokens = rand_tensor(6, cfg.d_model, &mut rng);
    let memory = rand_tensor(4, cfg.d_model, &mut rng);
    // Random linear probe; a squared norm after LayerNorm would be nearly flat.
    let probe = rand_tensor(6, cfg.d_model, &mut rng);
    let stack_enc = bundle.llf.encoder.clone();
    let attn = bundle.llf.encoder.layers[0].attn.clone();
    let dec_layer = bundle.llf.decoder.layers[0].clone();
    let (t1, probe1) = (tokens.clone(), probe.clone());
    let attn_loss = move |g: &mut Graph, s: &ParamStore| -> dateformer::Result<Var> {
        let x = g.constant(t1.clone());
        let (y, _) = attn.forward(g, s, x, x, SeqShape::new(2, 3), SeqShape::new(2, 3), None)?;
        let p = g.constant(probe1.clone());
        let y = g.mul(y, p)?;
        Ok(g.sum(y))
    };
    let (t2, probe2) = (tokens.clone(), probe.clone());
    let enc_loss = move |g: &mut Graph, s: &ParamStore| -> dateformer::Result<Var> {
        let x = g.constant(t2.clone());
        let y = stack_enc.forward(g, s, x, SeqShape::new(2, 3))?;
        let p = g.constant(probe2.clone());
        let y = g.mul(y, p)?;
        Ok(g.sum(y))
    };
    let (t3, m3, probe3) = (tokens.clone(), memory.clone(), probe.clone());
    let dec_loss = move |g: &mut Graph, s: &ParamStore| -> dateformer::Result<Var> {
        let x = g.constant(t3.clone());
        let m = g.constant(m3.clone());
        let (y, _, _) = dec_layer.forward(g, s, x, m, SeqShape::new(2, 3), SeqShape::new(2, 2))?;
        let p = g.constant(probe3.clone());
        let y = g.mul(y, p)?;
        Ok(g.sum(y))
    };
    let pre_batch = PretrainBatch {
        embeddings: rand_tensor(9, 23, &mut rng),
        centers: vec![2, 4, 6],
        mean: rand_tensor(3, n, &mut rng),
        acf: rand_tensor(3, n, &mut rng),
    };
    let encoder = enc.encoder.clone();
    let pre_loss = move |g: &mut Graph, s: &ParamStore| pretrain_loss(g, s, &encoder, &pre_batch);

    let mut results = Vec::new();
    let blocks: Vec<(&str, &ParamStore, LossFn)> = vec![
        ("llf.patch_embed", &bundle.store, &llf_loss),
        ("llf.encoder.layers.0.attn", &bundle.store, &attn_loss),
        ("llf.encoder", &bundle.store, &enc_loss),
        ("llf.decoder.layers.0", &bundle.store, &dec_loss),
        ("llf.decoder", &bundle.store, &llf_loss),
        ("llf.prelim", &bundle.store, &llf_loss),
        ("llf.logit", &bundle.store, &llf_loss),
        ("pretrain.mean_head", &enc.store, &pre_loss),
        ("pretrain.acf_head", &enc.store, &pre_loss),
        ("encoder.", &enc.store, &pre_loss),
    ];
    for (prefix, store, f) in blocks {
        let err = check_block(store, prefix, f)?;
        results.push(format!("{prefix} {err:.1e}"));
        ensure(err < 1e-4, || format!("{prefix}: relative error {err:.3e}"))?;
    }
    Ok(results.join(", "))
}

// --------------------------------------------------------------- structure

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cfg = ModelConfig {
        dropout: 0.0,
        ..small_cfg()
    };
    let bundle = ModelBundle::new(cfg.clone(), 4, 3, 1).map_err(|e| e.to_string())?;
    let mut worst_sum: f64 = 0.0;
    for trial in 0..20 {
        let l = 1 + trial % 9;
        let res = rand_tensor(l * 4, 3, &mut rng);
        let reps = rand_tensor(l + 1, cfg.d_model, &mut rng);
        let f = bundle
            .predict_next_day(&res, &reps)
            .map_err(|e| e.to_string())?;
        for j in 0..3 {
            let s: f64 = (0..=l).map(|t| f.weights.at(t, j)).sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
            for g in 0..4 {
                let c: Vec<f64> = (0..l)
                    .map(|t| res.at(t * 4 + g, j))
                    .chain([f.prelim.at(g, j)])
                    .collect();
                let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let o = f.output.at(g, j);
                ensure(o >= lo - 1e-12 && o <= hi + 1e-12, || {
                    format!("output {o} outside [{lo}, {hi}]")
                })?;
            }
        }
    }
    ensure(worst_sum <= 1e-6, || {
        format!("weight sums off by {worst_sum:.2e}")
    })?;

    let syn = generate(&SyntheticConfig {
        days: 80,
        granularity: 4,
        n_variates: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut worst_decomp: f64 = 0.0;
    for (h, l) in [(1, 7), (3, 7), (7, 12), (30, 26)] {
        let anchor = syn.dataset.date(40);
        let r = forecast(
            &bundle,
            &ForecastRequest {
                anchor,
                horizon: h,
                lookback: l,
            },
            &syn.dataset,
            &syn.tables,
        )
        .map_err(|e| e.to_string())?;
        for ((t, g), lo) in r
            .total
            .data()
            .iter()
            .zip(r.global.data())
            .zip(r.local.data())
        {
            worst_decomp = worst_decomp.max((t - g - lo).abs());
        }
    }
    ensure(worst_decomp <= 1e-12, || {
        format!("decomposition off by {worst_decomp:.2e}")
    })?;

    for trial in 0..20 {
        let preday = rng.gen_range(0..8);
        let postday = rng.gen_range(0..15);
        let n_in = preday + postday + 1 + rng.gen_range(0..20);
        let c = ModelConfig {
            preday,
            postday,
            ..small_cfg()
        };
        let m = EncoderModel::new(c, 2, trial).map_err(|e| e.to_string())?;
        let out = m
            .representations(&rand_tensor(n_in, 23, &mut rng))
            .map_err(|e| e.to_string())?;
        ensure(out.rows() == n_in - preday - postday, || {
            format!(
                "preday {preday}, postday {postday}, {n_in} inputs gave {} outputs",
                out.rows()
            )
        })?;
    }
    Ok(format!(
        "weight sums within {worst_sum:.1e}, envelope holds, decomposition within {worst_decomp:.1e}, 20 encoder lengths exact"
    ))
}

// ------------------------------------------------------------ end to end

struct E2e {
    report: String,
    anyscale: Result<String, String>,
}

fn synthetic_end_to_end_inner() -> Result<E2e, String> {
    let data = synthetic_data(0);
    let cfg = e2e_config();
    let start = Instant::now();
    let out = run_pipeline::<f64>(&cfg, &data, None).map_err(|e| e.to_string())?;
    let train_time = start.elapsed();
    let opts = EvalOptions {
        horizons: vec![7, 30],
        ..EvalOptions::default()
    };
    let report = rolling_evaluate(&out.bundle, &data.dataset, &data.tables, &opts)
        .map_err(|e| e.to_string())?;
    let h7 = report.horizon(7).unwrap();
    let h30 = report.horizon(30).unwrap();
    let m7 = h7.model.as_ref().ok_or("no H=7 windows")?.mse;
    let s7 = h7
        .seasonal_naive
        .as_ref()
        .ok_or("no seasonal-naive at H=7")?
        .mse;
    let m30 = h30.model.as_ref().ok_or("no H=30 windows")?.mse;
    let p30 = h30
        .persistence
        .as_ref()
        .ok_or("no persistence at H=30")?
        .mse;
    let summary = format!(
        "H=7 MSE {m7:.4} vs seasonal-naive {s7:.4} (ratio {:.3}); H=30 MSE {m30:.4} vs persistence {p30:.4}; trained in {:.0}s",
        m7 / s7,
        train_time.as_secs_f64()
    );

    let mut shapes = Vec::new();
    let anyscale = (|| {
        let test = data.dataset.split_range(Split::Test).unwrap();
        let anchor = data.dataset.date(test.start + 60);
        for h in [1, 3, 7, 30] {
            let req = ForecastRequest::new(anchor, h);
            let r = forecast(&out.bundle, &req, &data.dataset, &data.tables)
                .map_err(|e| format!("H={h}: {e}"))?;
            let want = [h * 24, 2];
            for t in [&r.global, &r.local, &r.total] {
                ensure(t.shape() == want, || {
                    format!("H={h}: shape {:?}", t.shape())
                })?;
            }
            shapes.push(format!("H={h}/L={} {}x24x2", default_lookback(h), h));
        }
        Ok(shapes.join(", "))
    })();

    if m7 <= 0.8 * s7 && m30 < p30 {
        Ok(E2e {
            report: summary,
            anyscale,
        })
    } else {
        Err(summary)
    }
}

fn synthetic_end_to_end() -> Outcome {
    let r = synthetic_end_to_end_inner()?;
    ANYSCALE.with(|a| *a.borrow_mut() = Some(r.anyscale.clone()));
    Ok(r.report)
}

thread_local! {
    static ANYSCALE: std::cell::RefCell<Option<Result<String, String>>> = const { std::cell::RefCell::new(None) };
}

fn train_once_run_anyscale() -> Outcome {
    if let Some(r) = ANYSCALE.with(|a| a.borrow().clone()) {
        return r;
    }
    // Standalone: a short training run is enough to check shapes.
    let data = synthetic_data(0);
    let cfg = TrainConfig {
        pretrain_epochs: Some(2),
        train_epochs: Some(2),
        ..e2e_config()
    };
    let out = run_pipeline::<f64>(&cfg, &data, None).map_err(|e| e.to_string())?;
    let test = data.dataset.split_range(Split::Test).unwrap();
    let anchor = data.dataset.date(test.start + 60);
    let mut shapes = Vec::new();
    for h in [1, 3, 7, 30] {
        let r = forecast(
            &out.bundle,
            &ForecastRequest::new(anchor, h),
            &data.dataset,
            &data.tables,
        )
        .map_err(|e| format!("H={h}: {e}"))?;
        ensure(r.total.shape() == [h * 24, 2], || {
            format!("H={h}: shape {:?}", r.total.shape())
        })?;
        shapes.push(format!("H={h}/L={}", default_lookback(h)));
    }
    Ok(shapes.join(", "))
}

// ----------------------------------------------------------------- ablation

fn ablation_switches() -> Outcome {
    let data = synthetic_data(1);
    let mut untrained = Vec::new();
    let mut pretrained = Vec::new();
    let mut lines = Vec::new();
    for (p, w) in [(true, true), (true, false), (false, true), (false, false)] {
        let cfg = TrainConfig {
            stages: StageFlags {
                pretrain: p,
                warmup: w,
            },
            pretrain_epochs: Some(30),
            warmup_epochs: Some(3),
            train_epochs: Some(3),
            ..e2e_config()
        };
        let out = run_pipeline::<f64>(&cfg, &data, None)
            .map_err(|e| format!("variant {}: {e}", cfg.stages.variant()))?;
        let log = &out.log;
        let ran = |s| !log.losses(s, "train").is_empty();
        ensure(
            ran(Stage::Pretrain) == p && ran(Stage::Warmup) == w && ran(Stage::Train),
            || format!("variant {} ran the wrong stages", cfg.stages.variant()),
        )?;
        if p {
            pretrained.push(
                log.best_val(Stage::Pretrain)
                    .ok_or("no pretrain validation")?,
            );
        } else {
            untrained.push(log.losses(Stage::Pretrain, "untrained")[0]);
        }
        lines.push(cfg.stages.variant());
    }
    let best_untrained = untrained.iter().cloned().fold(f64::INFINITY, f64::min);
    let worst_pretrained = pretrained.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ensure(worst_pretrained < best_untrained, || {
        format!("pretrained val loss {worst_pretrained:.4} not below untrained {best_untrained:.4}")
    })?;
    Ok(format!(
        "variants {} completed; pretrain val {worst_pretrained:.4} < untrained {best_untrained:.4}",
        lines.join("/")
    ))
}

// -------------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let data = synthetic_data(2);
    let cfg = TrainConfig {
        pretrain_batch: 64,
        pretrain_epochs: Some(1),
        warmup_epochs: Some(1),
        train_epochs: Some(1),
        ..e2e_config()
    };
    let run = || -> Result<TrainingLog, String> {
        let mut log = TrainingLog::default();
        let mut enc =
            EncoderModel::<f64>::new(cfg.model.clone(), 2, cfg.seed).map_err(|e| e.to_string())?;
        pretrain_stage(&cfg, &data, &mut enc, &mut log).map_err(|e| e.to_string())?;
        let mut b = ModelBundle::<f64>::new(cfg.model.clone(), 24, 2, cfg.seed)
            .map_err(|e| e.to_string())?;
        warmup_stage(&cfg, &data, &mut b, &mut log).map_err(|e| e.to_string())?;
        train_stage(&cfg, &data, &mut b, &mut log).map_err(|e| e.to_string())?;
        Ok(log)
    };
    let (a, b) = (run()?, run()?);
    let mut parts = Vec::new();
    for s in [Stage::Pretrain, Stage::Warmup, Stage::Train] {
        let (x, y) = (a.losses(s, "train"), b.losses(s, "train"));
        ensure(x.len() >= 5, || {
            format!("{s:?} logged only {} steps", x.len())
        })?;
        let same = x[..5]
            .iter()
            .zip(&y[..5])
            .all(|(p, q)| p.to_bits() == q.to_bits());
        ensure(same, || {
            format!("{s:?} losses differ: {:?} vs {:?}", &x[..5], &y[..5])
        })?;
        parts.push(format!("{s:?}"));
    }
    Ok(format!(
        "first 5 step losses bit-identical for {}",
        parts.join(", ")
    ))
}

// ----------------------------------------------------------------- real data

fn real_data_smoke() -> Outcome {
    let Some(path) = std::env::var_os("DATEFORMER_ETTH1").map(PathBuf::from) else {
        return Ok("SKIP (set DATEFORMER_ETTH1 to an ETTh1-format CSV)".into());
    };
    let schema = CsvSchema {
        granularity: Some(24),
        ..CsvSchema::default()
    };
    let raw = data::ingest_csv(&path, &schema).map_err(|e| e.to_string())?;
    let ds = data::normalize(data::split(raw, [0.6, 0.2, 0.2]).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let data = PreparedData {
        dataset: ds,
        tables: CalendarTables::empty(),
    };
    let cfg = TrainConfig {
        epochs: 5,
        ..e2e_config()
    };
    let out = run_pipeline::<f64>(&cfg, &data, None).map_err(|e| e.to_string())?;
    let opts = EvalOptions {
        horizons: vec![1],
        ..EvalOptions::default()
    };
    let r = rolling_evaluate(&out.bundle, &data.dataset, &data.tables, &opts)
        .map_err(|e| e.to_string())?;
    let m = r.horizons[0].model.as_ref().ok_or("no H=1 windows")?.mse;
    let p = naive_baselines(&data.dataset, &opts)
        .map_err(|e| e.to_string())?
        .horizons[0]
        .persistence
        .as_ref()
        .ok_or("no persistence")?
        .mse;
    ensure(m < p, || {
        format!("H=1 MSE {m:.4} not below persistence {p:.4}")
    })?;
    Ok(format!("H=1 MSE {m:.4} < persistence {p:.4}"))
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria = [
        Criterion {
            name: "autocorrelation oracle",
            budget: Some(Duration::from_secs(10)),
            run: autocorrelation_oracle,
        },
        Criterion {
            name: "calendar oracle",
            budget: Some(Duration::from_secs(5)),
            run: calendar_oracle,
        },
        Criterion {
            name: "gradient suite",
            budget: Some(Duration::from_secs(120)),
            run: gradient_suite,
        },
        Criterion {
            name: "structural invariants",
            budget: None,
            run: structural_invariants,
        },
        Criterion {
            name: "synthetic end-to-end",
            budget: Some(Duration::from_secs(15 * 60)),
            run: synthetic_end_to_end,
        },
        Criterion {
            name: "train once, run anyscale",
            budget: None,
            run: train_once_run_anyscale,
        },
        Criterion {
            name: "ablation switches",
            budget: None,
            run: ablation_switches,
        },
        Criterion {
            name: "determinism",
            budget: None,
            run: determinism,
        },
        Criterion {
            name: "real-data smoke (optional)",
            budget: None,
            run: real_data_smoke,
        },
    ];
    let mut failed = 0;
    for c in &criteria {
        if let Some(f) = &filter {
            if !c.name.contains(f.as_str()) {
                continue;
            }
        }
        let start = Instant::now();
        let mut outcome = (c.run)();
        let took = start.elapsed();
        if let (Ok(_), Some(budget)) = (&outcome, c.budget) {
            if took > budget {
                outcome = Err(format!(
                    "took {:.1}s, budget {:.0}s",
                    took.as_secs_f64(),
                    budget.as_secs_f64()
                ));
            }
        }
        match outcome {
            Ok(detail) if detail.starts_with("SKIP") => {
                println!("SKIP  {}: {}", c.name, detail.trim_start_matches("SKIP "))
            }
            Ok(detail) => println!("PASS  {} ({:.1}s): {detail}", c.name, took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {} ({:.1}s): {detail}", c.name, took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
