use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnsc::config::{ModelConfig, Scenario};
use vnsc::vision::{
    align_video, image_analyzer, image_analyzer_traced, image_reconstruction_loss, image_synthesizer, LipClip,
};
use vnsc::{Model, VnscError};
use vnsc_tensor::gradcheck::{check_gradients, GradCheckConfig};
use vnsc_tensor::{Graph, Session, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(0.0f32..1.0))
}

#[test]
fn miniature_analyzer_and_synthesizer_shapes() {
    let model = Model::new(ModelConfig::miniature(Scenario::Va), 1).unwrap();
    let v = &model.cfg.vision;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::<f32>::new();
    let s = Session::new(&g, &model.params, true);
    let lips = g.constant(random(&mut rng, &[1, 5, 8, 8]));
    let (feat, trace) = image_analyzer_traced(&s, v, &lips).unwrap();
    assert_eq!(trace, vec![vec![4, 5, 4, 4], vec![8, 5, 2, 2]]);
    assert_eq!(feat.shape(), &[8, 5]);
    let recon = image_synthesizer(&s, v, &feat).unwrap();
    assert_eq!(recon.shape(), &[1, 5, 8, 8]);
}

#[test]
fn standard_synthesizer_doubles_back_to_full_resolution() {
    let model = Model::new(ModelConfig::standard(Scenario::Va), 2).unwrap();
    let g = Graph::<f32>::inference();
    let s = Session::new(&g, &model.params, false);
    let feat = g.constant(Tensor::from_fn(&[64, 2], |i| i as f32 / 128.0));
    assert_eq!(image_synthesizer(&s, &model.cfg.vision, &feat).unwrap().shape(), &[1, 2, 64, 64]);
}

#[test]
fn zero_feature_and_zero_biases_give_a_zero_image() {
    let mut model = Model::new(ModelConfig::miniature(Scenario::Va), 3).unwrap();
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|p| p.name.starts_with("vision.synthesizer") && (p.name.ends_with(".bias") || p.name.ends_with(".beta")))
        .map(|p| p.name.clone())
        .collect();
    assert!(!names.is_empty());
    for n in &names {
        let shape = model.params.tensor(n).unwrap().shape().to_vec();
        model.params.set(n, Tensor::zeros(&shape)).unwrap();
    }
    let g = Graph::<f32>::new();
    let s = Session::new(&g, &model.params, true);
    let recon = image_synthesizer(&s, &model.cfg.vision, &g.constant(Tensor::zeros(&[8, 4]))).unwrap();
    assert!(recon.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn image_loss_gradient_through_synthesizer_matches_finite_differences() {
    let model = Model::new(ModelConfig::miniature(Scenario::Va), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target = random(&mut rng, &[1, 3, 8, 8]).cast::<f64>();
    let feat = Tensor::from_fn(&[8, 3], |_| rng.random_range(-1.0..1.0));
    check_gradients(
        |g, v| {
            let s = Session::new(g, &model.params, true);
            let recon = image_synthesizer(&s, &model.cfg.vision, &v[0]).expect("shape");
            Ok(image_reconstruction_loss(&g.constant(target.clone()), &recon).expect("shape").reshape(&[1])?)
        },
        &[("feature".into(), feat)],
        &GradCheckConfig::with_tolerance(1e-3),
    )
    .unwrap();
}

#[test]
fn analyzer_rejects_wrong_image_size() {
    let model = Model::new(ModelConfig::miniature(Scenario::Va), 5).unwrap();
    let g = Graph::<f32>::inference();
    let s = Session::new(&g, &model.params, false);
    assert!(image_analyzer(&s, &model.cfg.vision, &g.constant(Tensor::zeros(&[1, 4, 16, 16]))).is_err());
    let a = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
    let b = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
    assert!(image_reconstruction_loss(&a, &b).is_err());
}

#[test]
fn lip_clip_round_trips_on_the_pixel_grid() {
    let clip = LipClip {
        fps_num: 30000,
        fps_den: 1001,
        frames: Tensor::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f32 / 255.0),
    };
    let mut bytes = Vec::new();
    clip.write_to(&mut bytes).unwrap();
    assert_eq!(bytes.len(), 28 + 60);
    assert_eq!(LipClip::read_from(bytes.as_slice()).unwrap(), clip);
}

#[test]
fn malformed_lip_files_are_format_errors() {
    let clip = LipClip {
        fps_num: 60,
        fps_den: 1,
        frames: Tensor::zeros(&[2, 2, 2]),
    };
    let mut bytes = Vec::new();
    clip.write_to(&mut bytes).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut trailing = bytes.clone();
    trailing.push(0);
    for case in [&bytes[..20], &bytes[..bytes.len() - 1], &bad_magic[..], &trailing[..]] {
        assert!(matches!(LipClip::read_from(case), Err(VnscError::Format(_))));
    }
}

/// Source frame of output frame `n`: the latest video frame at or before
/// the 150 Hz sampling instant `floor(n / 8) / 150`, clamped to the clip.
fn oracle_source(n: usize, fps_num: u32, fps_den: u32, t: usize) -> usize {
    let instant = (n / 8) as f64 / 150.0;
    let frame = (instant * fps_num as f64 / fps_den as f64 + 1e-9).floor() as usize;
    frame.min(t - 1)
}

proptest! {
    #[test]
    fn aligned_frames_follow_sample_and_hold(
        rate in prop::sample::select(vec![(24u32, 1u32), (25, 1), (30, 1), (50, 1), (60, 1), (30000, 1001)]),
        t in 1usize..40,
        target in 1usize..800,
    ) {
        let frames = Tensor::from_fn(&[t, 1, 1], |i| i as f32);
        let out = align_video(&frames, rate.0, rate.1, target).unwrap();
        prop_assert_eq!(out.shape(), &[1, target, 1, 1]);
        for n in 0..target {
            prop_assert_eq!(out.data()[n] as usize, oracle_source(n, rate.0, rate.1, t));
        }
    }
}
