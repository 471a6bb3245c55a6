use dateformer::config::PreparedData;
use dateformer::data::{self, Split};
use dateformer::eval::{naive_baselines, rolling_evaluate, EvalOptions};
use dateformer::models::encoder::EncoderModel;
use dateformer::models::{ModelBundle, ModelConfig};
use dateformer::numerics::Checkpoint;
use dateformer::scheduler::{forecast, ForecastRequest};
use dateformer::synthetic::{generate, SyntheticConfig};
use dateformer::training::{checkpoint_paths, run_pipeline, Stage, StageFlags, TrainConfig};
use dateformer::Error;
use tempfile::TempDir;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        ff_mult: 2,
        llf_encoder_layers: 1,
        llf_decoder_layers: 1,
        ..ModelConfig::default()
    }
}

fn data(days: usize, n: usize) -> PreparedData {
    let syn = generate(&SyntheticConfig {
        days,
        granularity: 4,
        n_variates: n,
        ..SyntheticConfig::default()
    })
    .unwrap();
    PreparedData {
        dataset: data::normalize(data::split(syn.dataset, [0.7, 0.1, 0.2]).unwrap()).unwrap(),
        tables: syn.tables,
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        pretrain_batch: 64,
        batch: 16,
        epochs: 2,
        stages: StageFlags {
            pretrain: true,
            warmup: true,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoints_reload_to_identical_forecasts() {
    let dir = TempDir::new().unwrap();
    let d = data(150, 2);
    let out = run_pipeline::<f64>(&config(), &d, Some(dir.path())).unwrap();
    let (enc, dert, bundle) = checkpoint_paths(dir.path());
    assert!(enc.exists() && dert.exists() && bundle.exists());

    let reloaded = ModelBundle::<f64>::load(&bundle).unwrap();
    let anchor = d
        .dataset
        .date(d.dataset.split_range(Split::Test).unwrap().start + 5);
    let req = ForecastRequest::new(anchor, 7);
    let a = forecast(&out.bundle, &req, &d.dataset, &d.tables).unwrap();
    let b = forecast(&reloaded, &req, &d.dataset, &d.tables).unwrap();
    assert_eq!(a.total, b.total);
    assert_eq!(a.trace, b.trace);

    let e = EncoderModel::<f64>::load(&enc).unwrap();
    for (_, p) in e.store.iter() {
        let id = out.encoder.store.id(&p.name).unwrap();
        assert_eq!(&p.value, out.encoder.store.value(id), "{}", p.name);
    }
}

#[test]
fn checkpoint_bytes_round_trip_exactly() {
    let b = ModelBundle::<f64>::new(tiny_model(), 4, 3, 11).unwrap();
    let mut ck = Checkpoint::new(b.metadata("bundle"));
    ck.add_params(&b.store, &[""]);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.tensors, ck.tensors);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn encoder_transfers_across_variate_counts() {
    let dir = TempDir::new().unwrap();
    let src = data(120, 2);
    let cfg = TrainConfig {
        stages: StageFlags::default(),
        ..config()
    };
    run_pipeline::<f64>(&cfg, &src, Some(dir.path())).unwrap();
    let (enc, _, _) = checkpoint_paths(dir.path());

    // A three-variate dataset reuses the encoder but not the two-variate heads.
    let target = data(120, 3);
    let transfer_cfg = TrainConfig {
        encoder_checkpoint: Some(enc.clone()),
        ..cfg.clone()
    };
    let out = run_pipeline::<f64>(&transfer_cfg, &target, None).unwrap();
    let ck = Checkpoint::load(&enc).unwrap();
    let w = "encoder.input_proj.weight";
    let id = out.bundle.store.id(w).unwrap();
    // The train stage moved it a little from the transferred start.
    let moved = out.bundle.store.value(id).max_abs_diff(
        &dateformer::Tensor::new(ck.tensors[w].shape.clone(), ck.tensors[w].data.clone()).unwrap(),
    );
    assert!(moved < 0.1, "{moved}");
    assert!(out.log.losses(Stage::Pretrain, "train").is_empty());

    let wide = ModelConfig {
        d_model: 32,
        ..tiny_model()
    };
    let err = EncoderModel::<f64>::transfer(&ck, &wide, 3, 0).unwrap_err();
    assert!(matches!(err, Error::Transfer(_)));
}

#[test]
fn evaluation_reports_every_requested_horizon() {
    let d = data(200, 2);
    let cfg = TrainConfig {
        stages: StageFlags {
            pretrain: false,
            warmup: false,
        },
        ..config()
    };
    let out = run_pipeline::<f64>(&cfg, &d, None).unwrap();
    let opts = EvalOptions {
        horizons: vec![1, 7, 90],
        ..EvalOptions::default()
    };
    let r = rolling_evaluate(&out.bundle, &d.dataset, &d.tables, &opts).unwrap();
    // Test split is 40 days: H=90 cannot fit.
    assert!(r.horizon(90).unwrap().model.is_none());
    let h1 = r.horizon(1).unwrap().model.as_ref().unwrap();
    assert_eq!(h1.windows, 40 - 7);
    assert_eq!(h1.values, h1.windows * 4 * 2);
    let naive = naive_baselines(&d.dataset, &opts).unwrap();
    assert_eq!(
        naive.horizon(7).unwrap().persistence,
        r.horizon(7).unwrap().persistence
    );
}

#[test]
fn stage_switch_variants_log_the_right_stages() {
    let d = data(100, 1);
    for (p, w) in [(false, false), (false, true)] {
        let cfg = TrainConfig {
            stages: StageFlags {
                pretrain: p,
                warmup: w,
            },
            ..config()
        };
        let out = run_pipeline::<f64>(&cfg, &d, None).unwrap();
        assert_eq!(out.log.losses(Stage::Pretrain, "untrained").len(), 1);
        assert_eq!(!out.log.losses(Stage::Warmup, "train").is_empty(), w);
        assert!(!out.log.losses(Stage::Train, "train").is_empty());
    }
}
