use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vnsc::config::{KeyValues, ModelConfig, Scenario};
use vnsc::dsp::{MelConfig, MelSpectrogram};
use vnsc::training::{
    configs_from_kv, evaluate, load_checkpoint, make_toy_dataset, make_toy_dataset_with, reconstruction_losses,
    save_checkpoint, train_epoch, train_step, Example, OptimizerState, ToyConfig, TrainConfig,
};
use vnsc::{Model, VnscError};
use vnsc_tensor::{Graph, Tensor};

fn mini(scenario: Scenario) -> (ModelConfig, TrainConfig) {
    (ModelConfig::miniature(scenario), TrainConfig::for_scenario(scenario))
}

fn toy(cfg: &ModelConfig, seed: u64, n: usize, dur: f64) -> Vec<vnsc::training::Utterance> {
    make_toy_dataset_with(seed, n, dur, &ToyConfig { image_size: cfg.vision.image_size, ..ToyConfig::default() })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn toy_dataset_is_reproducible_and_seed_dependent() {
    let a = make_toy_dataset(3, 2, 0.5);
    let b = make_toy_dataset(3, 2, 0.5);
    assert_eq!(a[0].samples, b[0].samples);
    assert_eq!(a[1].lips, b[1].lips);
    assert_ne!(a[0].samples, make_toy_dataset(4, 2, 0.5)[0].samples);
    assert_eq!(a[0].samples.len(), 24_000);
    assert_eq!(a[0].lips.frames.shape(), &[30, 64, 64]);
    assert!(a[0].samples.iter().all(|s| s.abs() <= 1.0));
}

#[test]
fn toy_mouth_aperture_tracks_speech_amplitude() {
    for utt in make_toy_dataset(11, 4, 2.0) {
        let clip = &utt.lips;
        let (t, plane) = (clip.frames.dim(0), clip.frames.dim(1) * clip.frames.dim(2));
        let hop = 48_000 * clip.fps_den as usize / clip.fps_num as usize;
        let mut aperture = Vec::new();
        let mut rms = Vec::new();
        for f in 0..t {
            aperture.push(clip.frames.data()[f * plane..(f + 1) * plane].iter().map(|&p| p as f64).sum::<f64>());
            let win = &utt.samples[f * hop..((f + 1) * hop).min(utt.samples.len())];
            rms.push((win.iter().map(|&s| s as f64 * s as f64).sum::<f64>() / win.len() as f64).sqrt());
        }
        let r = pearson(&aperture, &rms);
        assert!(r > 0.5, "aperture/amplitude correlation {r}");
    }
}

#[test]
fn reconstruction_losses_match_direct_computation() {
    let mel = MelSpectrogram::new(MelConfig::default()).unwrap();
    let g = Graph::<f64>::inference();
    let spec = Tensor::from_fn(&[40, 6], |i| (i as f64 * 0.37).sin());
    let shifted = spec.map(|v| v + 0.5);
    let wave: Vec<f32> = (0..1200).map(|i| 0.4 * (i as f32 * 0.05).sin()).collect();
    let other: Vec<f32> = (0..1200).map(|i| 0.1 * (i as f32 * 0.13).sin()).collect();
    let as_var = |w: &[f32]| g.constant(Tensor::new(&[w.len()], w.iter().map(|&v| v as f64).collect()).unwrap());

    let (l_mdct, l_mel) =
        reconstruction_losses(&mel, &g.constant(spec.clone()), &g.constant(spec.clone()), &as_var(&wave), &as_var(&wave)).unwrap();
    assert_eq!((l_mdct.item(), l_mel.item()), (0.0, 0.0));

    let (l_mdct, l_mel) =
        reconstruction_losses(&mel, &g.constant(spec), &g.constant(shifted), &as_var(&wave), &as_var(&other)).unwrap();
    assert!((l_mdct.item() - 0.25).abs() < 1e-12);
    let (a, b) = (mel.compute(&wave).unwrap(), mel.compute(&other).unwrap());
    let direct = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.numel() as f64;
    assert!((l_mel.item() - direct).abs() < 1e-4 * direct.max(1.0), "{} vs {direct}", l_mel.item());
}

#[test]
fn examples_crop_spectra_and_align_lips() {
    let (cfg, _) = mini(Scenario::Va);
    let data = toy(&cfg, 1, 1, 0.5);
    let ex = Example::from_utterance(&cfg, &data[0], 100, 240).unwrap();
    assert_eq!(ex.spec.shape(), &[40, 240]);
    assert_eq!(ex.lips.as_ref().unwrap().shape(), &[1, 240, 8, 8]);
    // Past the end the crop is zero padded.
    let tail = Example::from_utterance(&cfg, &data[0], 560, 240).unwrap();
    assert_eq!(tail.spec.shape(), &[40, 240]);
    assert!(tail.spec.column(239).iter().all(|&v| v == 0.0));

    let (audio_cfg, _) = mini(Scenario::AudioOnly);
    assert!(Example::from_utterance(&audio_cfg, &data[0], 0, 240).unwrap().lips.is_none());

    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(
        Example::random_crop(&cfg, &data[0], 80, &mut r1).unwrap(),
        Example::random_crop(&cfg, &data[0], 80, &mut r2).unwrap()
    );
}

fn batches(cfg: &ModelConfig, n: usize) -> Vec<Vec<Example>> {
    let data = toy(cfg, 21, 2, 0.3);
    (0..n)
        .map(|i| {
            data.iter()
                .map(|u| Example::from_utterance(cfg, u, (i * 16) % 120, 120).unwrap())
                .collect()
        })
        .collect()
}

#[test]
fn training_is_deterministic() {
    let (cfg, train) = mini(Scenario::Vua);
    let run = || {
        let mut model = Model::new(cfg.clone(), 1).unwrap();
        let mut opt = OptimizerState::new(train.optimizer);
        let reports: Vec<_> = batches(&cfg, 4)
            .iter()
            .map(|b| train_step(&mut model, &mut opt, &train, b).unwrap())
            .collect();
        (model.params, reports)
    };
    let (p1, r1) = run();
    let (p2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(p1, p2);
    assert!(r1.iter().all(|r| r.l_distill > 0.0 && r.l_image > 0.0));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let (cfg, train) = mini(Scenario::Va);
    let all = batches(&cfg, 12);

    let mut model = Model::new(cfg.clone(), 2).unwrap();
    let mut opt = OptimizerState::new(train.optimizer);
    let straight: Vec<_> = all.iter().map(|b| train_step(&mut model, &mut opt, &train, b).unwrap()).collect();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Model::new(cfg.clone(), 2).unwrap();
    let mut first_opt = OptimizerState::new(train.optimizer);
    let mut resumed: Vec<_> = all[..5].iter().map(|b| train_step(&mut first, &mut first_opt, &train, b).unwrap()).collect();
    save_checkpoint(dir.path(), &first, &first_opt, &train).unwrap();
    drop(first);
    let (mut second, mut second_opt, second_train) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(second_train, train);
    resumed.extend(all[5..].iter().map(|b| train_step(&mut second, &mut second_opt, &second_train, b).unwrap()));

    assert_eq!(resumed, straight);
    assert_eq!(second.params, model.params);
    assert_eq!(second_opt, opt);
}

#[test]
fn first_step_initializes_codebooks() {
    let (cfg, train) = mini(Scenario::AudioOnly);
    let mut model = Model::new(cfg.clone(), 3).unwrap();
    let mut opt = OptimizerState::new(train.optimizer);
    assert!(!model.rvq_initialized());
    let before = model.codebooks().unwrap();
    train_step(&mut model, &mut opt, &train, &batches(&cfg, 1)[0]).unwrap();
    assert!(model.rvq_initialized());
    assert_ne!(model.codebooks().unwrap().codewords, before.codewords);
    assert_eq!(opt.step, 1);
}

#[test]
fn non_finite_loss_is_reported_not_applied() {
    let (cfg, train) = mini(Scenario::AudioOnly);
    let mut model = Model::new(cfg.clone(), 4).unwrap();
    let mut opt = OptimizerState::new(train.optimizer);
    let batch = &batches(&cfg, 1)[0];
    train_step(&mut model, &mut opt, &train, batch).unwrap();
    model.params.tensor_mut("decoder.post.conv.bias").unwrap().data_mut()[0] = f32::NAN;
    let before = model.params.clone();
    assert!(matches!(
        train_step(&mut model, &mut opt, &train, batch),
        Err(VnscError::NonFinite { .. })
    ));
    assert_eq!(opt.step, 1);
    assert_eq!(
        model.params.tensor("encoder.pre.conv.weight").unwrap(),
        before.tensor("encoder.pre.conv.weight").unwrap()
    );
}

#[test]
fn epochs_visit_every_utterance_and_decay_the_learning_rate() {
    let (cfg, mut train) = mini(Scenario::AudioOnly);
    train.batch_size = 2;
    train.crop_frames = 80;
    let data = toy(&cfg, 5, 5, 0.2);
    let mut model = Model::new(cfg, 5).unwrap();
    let mut opt = OptimizerState::new(train.optimizer);
    let mut steps = Vec::new();
    let reports = train_epoch(&mut model, &mut opt, &train, &data, |s, _| steps.push(s)).unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(steps, vec![1, 2, 3]);
    assert_eq!(opt.epoch, 1);
    assert!((opt.learning_rate() - train.optimizer.lr * train.optimizer.epoch_decay).abs() < 1e-15);
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let (cfg, train) = mini(Scenario::Va);
    let model = Model::new(cfg.clone(), 6).unwrap();
    let before = model.params.clone();
    let batch = &batches(&cfg, 1)[0];
    let a = evaluate(&model, &train, batch).unwrap();
    assert_eq!(a, evaluate(&model, &train, batch).unwrap());
    assert!(a.l_mdct > 0.0);
    assert_eq!(model.params, before);
}

#[test]
fn config_files_select_preset_and_override_keys() {
    let kv = KeyValues::parse("scenario = vua\npreset = miniature\nrvq_k = 16\nlr = 0.001\n").unwrap();
    let (model, train) = configs_from_kv(&kv).unwrap();
    assert_eq!(model.scenario, Scenario::Vua);
    assert_eq!(model.codec.d_s, 16);
    assert_eq!(model.rvq.entries, 16);
    assert_eq!(train.optimizer.lr, 0.001);
    assert_eq!(train.weights.distill, 1.0);
    for bad in ["preset = huge\n", "rvq_entries = 16\n"] {
        let kv = KeyValues::parse(bad).unwrap();
        assert!(matches!(configs_from_kv(&kv), Err(VnscError::Config(_))));
    }
}
