mod common;

use audiocap_core::audio::FeatureTensor;
use audiocap_core::beam::StepScorer;
use audiocap_core::ingest::SplitSpec;
use audiocap_model::checkpoint::CONFIG_FILE;
use audiocap_model::decode::{caption_features, EnsembleScorer};
use audiocap_model::net::{batch_tensor, DecoderInput};
use audiocap_model::train::{recipe, sweep, LogLine};
use audiocap_model::{
    load_ensemble, train, Checkpoint, CropAveraging, DecodeSettings, LoadedModel, ModelError, TrainConfig,
};
use audiocap_nn::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn short(variant: &str, steps: u64) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        ..TrainConfig::desk(variant.parse().unwrap())
    }
}

fn random_input(m: &LoadedModel, seed: u64) -> FeatureTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = FeatureTensor::zeros(m.net.cfg.n_mels, m.net.cfg.frames + 20);
    x.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    x
}

#[test]
fn seeded_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short("Model1", 12);
    let (data, vocabs) = common::synthetic(dir.path(), 12, 2, SplitSpec { valid: 0, test: 0 }, &cfg);
    let run = |cfg: &TrainConfig| {
        let mut log = Vec::new();
        let out = train(&data, &vocabs, cfg, &mut log, None).unwrap();
        let model = out.last.to_model().unwrap();
        let caps: Vec<Vec<u32>> = data
            .train
            .iter()
            .map(|i| caption_features(std::slice::from_ref(&model), &i.features, &DecodeSettings::default(), 3).unwrap().tokens)
            .collect();
        (log, caps)
    };
    let (log_a, caps_a) = run(&cfg);
    let (log_b, caps_b) = run(&cfg);
    assert_eq!(log_a, log_b);
    assert_eq!(caps_a, caps_b);
    let lines: Vec<LogLine> = log_a
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    let (log_c, _) = run(&TrainConfig { seed: 1, ..cfg });
    assert_ne!(log_a, log_c);
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short("Model4single", 4);
    let (data, vocabs) = common::synthetic(&dir.path().join("corpus"), 8, 1, SplitSpec { valid: 0, test: 0 }, &cfg);
    let out = train(&data, &vocabs, &cfg, &mut std::io::sink(), None).unwrap();
    let ck_dir = dir.path().join("ck");
    out.best.save(&ck_dir, &vocabs).unwrap();
    let (loaded, v2) = Checkpoint::load(&ck_dir).unwrap();
    assert_eq!(v2, vocabs);
    assert_eq!(loaded.meta, out.best.meta);
    let a = out.best.to_model().unwrap();
    let b = loaded.to_model().unwrap();
    let x = data.train[0].features.as_single().window(0, a.net.cfg.frames);
    let ids = [vec![1, 4, 5, 2, 0, 0]];
    let forward = |m: &LoadedModel| {
        let mut g = Graph::inference(&m.store);
        let xin = g.constant(batch_tensor(&[&x]).unwrap());
        let f = m.net.forward(&mut g, xin, &DecoderInput { ids: &ids, mix: None }).unwrap();
        g.value(f.log_probs).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(forward(&a), forward(&b));

    let mut meta: serde_json::Value = serde_json::from_slice(&std::fs::read(ck_dir.join(CONFIG_FILE)).unwrap()).unwrap();
    meta["vocab_hash"] = "0000".into();
    std::fs::write(ck_dir.join(CONFIG_FILE), serde_json::to_vec(&meta).unwrap()).unwrap();
    assert!(matches!(Checkpoint::load(&ck_dir), Err(ModelError::Core(audiocap_core::Error::Config(_)))));
    assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
}

#[test]
fn ensemble_of_copies_matches_single_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short("Model1", 6);
    let (data, vocabs) = common::synthetic(dir.path(), 8, 1, SplitSpec { valid: 0, test: 0 }, &cfg);
    let model = train(&data, &vocabs, &cfg, &mut std::io::sink(), None)
        .unwrap()
        .last
        .to_model()
        .unwrap();
    let settings = DecodeSettings { tta: 3, ..DecodeSettings::default() };
    for seed in 0..20 {
        let x = random_input(&model, seed);
        let one = caption_features(std::slice::from_ref(&model), &x, &settings, seed).unwrap();
        for k in [2, 3] {
            let copies = vec![model.clone(); k];
            let many = caption_features(&copies, &x, &settings, seed).unwrap();
            assert_eq!(one.tokens, many.tokens);
            assert!((one.logprob - many.logprob).abs() < 1e-9);
        }
    }
}

#[test]
fn ensemble_step_is_mean_of_member_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short("Model1", 3);
    let (data, vocabs) = common::synthetic(dir.path(), 8, 1, SplitSpec { valid: 0, test: 0 }, &cfg);
    let a = train(&data, &vocabs, &cfg, &mut std::io::sink(), None).unwrap().last.to_model().unwrap();
    let b = train(&data, &vocabs, &short("Model3", 3), &mut std::io::sink(), None)
        .unwrap()
        .last
        .to_model()
        .unwrap();
    let x = random_input(&a, 5);
    for averaging in [CropAveraging::LogProb, CropAveraging::Prob] {
        let settings = DecodeSettings { tta: 2, averaging, ..DecodeSettings::default() };
        let step = |models: &[LoadedModel]| {
            let mut s = EnsembleScorer::new(models, &x, &settings, 9).unwrap();
            let st = s.initial_state().unwrap();
            let out = s.step(&[(&[1u32][..], &st), (&[1u32, 7][..], &st)]).unwrap();
            out.into_iter().map(|(lp, _)| lp).collect::<Vec<_>>()
        };
        let pair = step(&[a.clone(), b.clone()]);
        let sa = step(std::slice::from_ref(&a));
        let sb = step(std::slice::from_ref(&b));
        for h in 0..2 {
            for k in 4..a.net.cfg.c_cap {
                let want = 0.5 * (sa[h][k] + sb[h][k]);
                assert!((pair[h][k] - want).abs() < 1e-12);
            }
            assert_eq!(pair[h][0], f64::NEG_INFINITY);
            assert_eq!(pair[h][1], f64::NEG_INFINITY);
        }
    }
}

#[test]
fn sweep_writes_loadable_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let base = short("Model1", 3);
    let (data, vocabs) = common::synthetic(&dir.path().join("corpus"), 8, 1, SplitSpec { valid: 0, test: 0 }, &base);
    let variants: Vec<_> = ["Model1", "Model3", "Model4", "Model1"].iter().map(|v| v.parse().unwrap()).collect();
    let out = dir.path().join("sweep");
    let manifest = sweep(&variants, &base, &data, &vocabs, &out).unwrap();
    assert_eq!(manifest.members.len(), 4);
    assert_eq!(manifest.members[0].seed + 3, manifest.members[3].seed);
    assert_eq!(manifest.members[1].dir, "01_Model3");
    let (models, v) = load_ensemble(&manifest.dirs(&out)).unwrap();
    assert_eq!(v.words.hash(), vocabs.words.hash());
    let r = caption_features(&models, &data.train[0].features, &DecodeSettings::default(), 0).unwrap();
    assert!(r.tokens.len() <= models[0].net.cfg.n_steps);
    for m in &manifest.members {
        assert!(out.join(&m.dir).join("train_log.jsonl").exists());
    }
}

#[test]
fn recipes_have_listed_sizes() {
    assert_eq!(recipe("submission1").unwrap().len(), 20);
    assert_eq!(recipe("submission2").unwrap().len(), 50);
    let s3 = recipe("submission3").unwrap();
    assert_eq!(s3.len(), 12);
    assert_eq!(s3.iter().filter(|v| v.to_string() == "Model4").count(), 4);
    assert_eq!(recipe("submission4").unwrap().len(), 30);
    assert!(recipe("submission9").is_err());
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short("Model1", 5);
    let (mut data, vocabs) = common::synthetic(&dir.path().join("corpus"), 8, 1, SplitSpec { valid: 0, test: 0 }, &cfg);
    for item in &mut data.train {
        item.features.data.iter_mut().for_each(|v| *v = f32::NAN);
    }
    let dump = dir.path().join("dump");
    let err = train(&data, &vocabs, &cfg, &mut std::io::sink(), Some(&dump)).err().unwrap();
    match err {
        ModelError::NonFinite { step, dump: Some(path), .. } => {
            assert_eq!(step, 0);
            let body: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
            assert_eq!(body["batch"].as_array().unwrap().len(), cfg.batch_size);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn validation_keeps_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::desk("Model3".parse().unwrap())
    };
    let (data, vocabs) = common::synthetic(dir.path(), 14, 2, SplitSpec { valid: 4, test: 0 }, &cfg);
    assert_eq!(data.valid.len(), 4);
    let mut log = Vec::new();
    let out = train(&data, &vocabs, &cfg, &mut log, None).unwrap();
    let records = &out.last.meta.validation;
    assert_eq!(records.len(), 3);
    let best = records.iter().map(|r| r.cider).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.meta.best_score, Some(best));
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.matches("\"kind\":\"validation\"").count(), 3);
}
