use lesionseg::augment::{augment_sample, AugmentSpec};
use lesionseg::dataset::{load_samples, Sample};
use lesionseg::ensemble::{predict_single, Ensemble, Member, Postprocess, Selection};
use lesionseg::geometry::lesion_geometry;
use lesionseg::imaging::to_grayscale3;
use lesionseg::metrics::jaccard;
use lesionseg::nn::{load_checkpoint, save_checkpoint, ModelCheckpoint, Network, NetworkConfig, TrainingMeta};
use lesionseg::rng::{derive_rng, RngState};
use lesionseg::synth::{write_dataset, SynthSpec};

fn net(seed: u64) -> Network<f32> {
    let cfg = NetworkConfig {
        stage_channels: vec![4, 8],
        bottleneck_channels: 8,
        ..NetworkConfig::default()
    };
    Network::new(cfg, &mut RngState::new(seed)).unwrap()
}

fn dataset(dir: &std::path::Path, n: usize) -> Vec<Sample> {
    let spec = SynthSpec { width: 40, height: 30, ..SynthSpec::default() };
    load_samples(&write_dataset(dir, n, &spec, 77).unwrap()).unwrap()
}

fn ensemble(threshold: f64, selection: Selection) -> Ensemble {
    Ensemble {
        members: vec![
            Member { network: net(1), input_size: (32, 24) },
            Member { network: net(2), input_size: (24, 16) },
            Member { network: net(3), input_size: (16, 16) },
        ],
        selection,
        threshold,
        postprocess: Postprocess::none(),
    }
}

#[test]
fn empty_predictions_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 5);
    let report = ensemble(1.0, Selection::Consensus).evaluate(&samples).unwrap();
    assert_eq!(report.mean_jaccard, 0.0);
    assert_eq!(report.count(), 5);
}

#[test]
fn oracle_dominates_every_member_and_is_order_independent() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 8);
    let ens = ensemble(0.5, Selection::Oracle);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let a = one.install(|| ens.evaluate(&samples)).unwrap();
    let b = three.install(|| ens.evaluate(&samples)).unwrap();
    assert_eq!(a, b);
    for r in &a.images {
        let best = r.member_jaccards.iter().cloned().fold(0.0, f64::max);
        assert_eq!(r.jaccard, best);
        assert!(r.member_jaccards.iter().all(|&j| r.jaccard >= j));
    }
    let sum: f64 = a.images.iter().map(|r| r.jaccard).sum();
    assert!((a.mean_jaccard - sum / a.count() as f64).abs() < 1e-12);
}

#[test]
fn single_member_equals_predict_single() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 3);
    let mut ens = ensemble(0.5, Selection::Single(2));
    ens.postprocess = Postprocess { erosion: Some((3, 3)), closing: None };
    for s in &samples {
        let p = ens.predict(&s.image, None).unwrap();
        let direct = predict_single(&ens.members[2].network, &s.image, (16, 16), 0.5).unwrap();
        assert_eq!(p.mask, ens.postprocess.apply(&direct).unwrap());
        assert_eq!(p.selected, 2);
    }
}

#[test]
fn checkpoint_file_replays_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(&dir.path().join("data"), 2);
    let ckpt = ModelCheckpoint {
        network: net(9),
        meta: TrainingMeta { epoch: 0, seed: 9, input_width: 32, input_height: 24 },
    };
    let path = dir.path().join("m.lsn");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for s in &samples {
        assert_eq!(
            predict_single(&ckpt.network, &s.image, (32, 24), 0.5).unwrap(),
            predict_single(&back.network, &s.image, (32, 24), 0.5).unwrap()
        );
    }
}

#[test]
fn augmentation_keeps_masks_aligned_with_lesions() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataset(dir.path(), 6);
    let spec = AugmentSpec { rcpv_apply_prob: 0.0, ..AugmentSpec::default() };
    for (i, s) in samples.iter().enumerate() {
        for epoch in 0..4 {
            let (img, mask) = augment_sample(&s.image, &s.mask, &spec, &mut derive_rng(1, epoch, i as u64)).unwrap();
            assert_eq!(img.dimensions(), s.image.dimensions());
            assert!(lesion_geometry(&mask).is_ok());
            // lesion pixels stay darker than the background on average
            let gray = to_grayscale3(&img).unwrap();
            let (mut inside, mut outside, mut ni, mut no) = (0.0, 0.0, 0.0, 0.0);
            for y in 0..mask.height() {
                for x in 0..mask.width() {
                    let v = gray.pixel(x, y)[0] as f64;
                    if mask.get(x, y) {
                        inside += v;
                        ni += 1.0;
                    } else {
                        outside += v;
                        no += 1.0;
                    }
                }
            }
            if no > 0.0 {
                assert!(inside / ni < outside / no);
            }
        }
    }
    let again = augment_sample(&samples[0].image, &samples[0].mask, &spec, &mut derive_rng(1, 0, 0)).unwrap();
    let first = augment_sample(&samples[0].image, &samples[0].mask, &spec, &mut derive_rng(1, 0, 0)).unwrap();
    assert_eq!(again, first);
    assert_eq!(jaccard(&again.1, &first.1).unwrap(), 1.0);
}
