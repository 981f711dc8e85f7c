use rand::Rng as _;

use skipclip::config::RunConfig;
use skipclip::encoders::{group_of, init_params, ParamGroup, SkipClipNet};
use skipclip::evaluation::{
    argmax_cell, average_probabilities, evaluate_ranking, export_heatmap, finetune, frame_heatmap,
    heatmap_grid, heatmap_pgm, kendall_tau, pairwise_ranking_accuracy, sliding_window_predict,
    CentroidOracle, FinetuneMode, FinetuneOptions, RankingEncoder, TrainedModel, WindowClassifier,
};
use skipclip::numerics::{skt, Tensor};
use skipclip::objectives::score;
use skipclip::rng;
use skipclip::sampling::SampleSpec;
use skipclip::videoio::{render_video, Split, SyntheticSpec, Video};
use skipclip::{Error, Result};

/// Kendall's τ-b written as sign products over all pairs.
fn tau_oracle(s: &[f64]) -> f64 {
    let sign = |v: f64| (v > 0.0) as i32 - (v < 0.0) as i32;
    let m = s.len();
    let (mut num, mut n0, mut n1) = (0i64, 0i64, 0i64);
    for i in 0..m {
        for j in 0..m {
            if i < j {
                // temporal order descends: earlier index should score higher
                let a = sign(s[i] - s[j]);
                num += a as i64;
                n0 += 1;
                n1 += (a != 0) as i64;
            }
        }
    }
    if n1 == 0 {
        return 0.0;
    }
    num as f64 / ((n0 * n1) as f64).sqrt()
}

#[test]
fn metric_examples() {
    assert_eq!(pairwise_ranking_accuracy(&[0.9, 0.5, 0.1]).unwrap(), 1.0);
    assert_eq!(pairwise_ranking_accuracy(&[0.1, 0.5, 0.9]).unwrap(), 0.0);
    assert!((pairwise_ranking_accuracy(&[3.0, 1.0, 2.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!((kendall_tau(&[3.0, 1.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(pairwise_ranking_accuracy(&[0.2, 0.2, 0.2]).unwrap(), 0.5);
    assert_eq!(kendall_tau(&[0.2, 0.2, 0.2]).unwrap(), 0.0);
    assert!(matches!(kendall_tau(&[1.0]).unwrap_err(), Error::InvalidArgument(_)));
}

#[test]
fn tau_matches_oracle_and_accuracy_without_ties() {
    let mut r = rng::stream(5, "tau", 0);
    for _ in 0..5000 {
        let m = r.gen_range(2..9);
        let tied = r.gen_bool(0.3);
        let s: Vec<f64> = (0..m)
            .map(|_| if tied { r.gen_range(0..3) as f64 } else { r.gen_range(-1.0..1.0) })
            .collect();
        let tau = kendall_tau(&s).unwrap();
        assert!((tau - tau_oracle(&s)).abs() < 1e-12, "{s:?}");
        if !tied {
            let acc = pairwise_ranking_accuracy(&s).unwrap();
            assert!((tau - (2.0 * acc - 1.0)).abs() < 1e-12);
        }
    }
}

fn held_out(spec: &SyntheticSpec, n: usize) -> Vec<Video> {
    (0..n).map(|i| render_video(spec, Split::Test, i).unwrap()).collect()
}

#[test]
fn centroid_oracle_ranks_perfectly() {
    let data = SyntheticSpec::default();
    let videos = held_out(&data, 16);
    let oracle = CentroidOracle::new((28, 28));
    let report = evaluate_ranking(&oracle, &videos, &SampleSpec::default(), 200, 3).unwrap();
    assert_eq!(report.num_examples, 200);
    assert_eq!(report.pairwise_accuracy, 1.0);
    assert_eq!(report.kendall_tau, 1.0);
}

/// Grids drawn from the pixel content alone, so scores carry no temporal signal.
struct Noise;

impl Noise {
    fn grid(x: &Tensor<f32>) -> Tensor<f32> {
        let key = x.data().iter().fold(0u64, |h, v| h.wrapping_mul(31).wrapping_add(v.to_bits() as u64));
        let mut r = rng::stream(key, "noise", 0);
        Tensor::new(vec![8, 2, 2], (0..32).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }
}

impl RankingEncoder for Noise {
    fn frame_size(&self) -> (usize, usize) {
        (28, 28)
    }
    fn context_grid(&self, context: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(Noise::grid(context))
    }
    fn target_grid(&self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(Noise::grid(frame))
    }
}

#[test]
fn uninformative_scores_rank_at_chance() {
    let videos = held_out(&SyntheticSpec::default(), 16);
    let report = evaluate_ranking(&Noise, &videos, &SampleSpec::default(), 600, 4).unwrap();
    assert!((report.pairwise_accuracy - 0.5).abs() <= 0.05, "{}", report.pairwise_accuracy);
    assert!(report.kendall_tau.abs() <= 0.1);
}

#[test]
fn ranking_report_is_deterministic() {
    let cfg = RunConfig::tiny();
    let videos = held_out(&cfg.data, 4);
    let model = TrainedModel::new(
        SkipClipNet::new(cfg.encoder.clone()).unwrap(),
        init_params(&cfg.encoder, 1).unwrap(),
    )
    .unwrap();
    let a = evaluate_ranking(&model, &videos, &cfg.sample, 30, 8).unwrap();
    let b = evaluate_ranking(&model, &videos, &cfg.sample, 30, 8).unwrap();
    assert_eq!(a, b);
    let c = evaluate_ranking(&model, &videos, &cfg.sample, 30, 9).unwrap();
    assert_ne!(a.examples, c.examples);
}

fn tiny_splits(cfg: &RunConfig) -> (Vec<Video>, Vec<Video>) {
    let train = (0..cfg.data.num_videos).map(|i| render_video(&cfg.data, Split::Train, i).unwrap()).collect();
    let test = held_out(&cfg.data, cfg.data.num_test_videos);
    (train, test)
}

#[test]
fn probe_leaves_the_encoders_untouched() {
    let cfg = RunConfig::tiny();
    let net = SkipClipNet::new(cfg.encoder.clone()).unwrap();
    let init = init_params(&cfg.encoder, 2).unwrap();
    let (train, test) = tiny_splits(&cfg);
    let opts = FinetuneOptions::from_config(&cfg, FinetuneMode::Probe, "random");
    let (report, tuned) = finetune(&net, &init, &train, &test, &opts).unwrap();
    for ((name, a), b) in init.names.iter().zip(&init.tensors).zip(&tuned.tensors) {
        if group_of(name) == ParamGroup::ClassifierHead {
            assert_ne!(a, b, "{name}");
        } else {
            assert_eq!(a, b, "{name}");
        }
    }
    assert!((0.0..=1.0).contains(&report.top1_accuracy));
    assert_eq!(report.num_test_videos, test.len());
    assert_eq!(report.per_class.iter().map(|c| c.total).sum::<usize>(), test.len());
    assert!(report.final_train_loss.is_finite());

    let (again, _) = finetune(&net, &init, &train, &test, &opts).unwrap();
    assert_eq!(report, again);
}

#[test]
fn full_fine_tuning_moves_only_the_context_side() {
    let cfg = RunConfig::tiny();
    let net = SkipClipNet::new(cfg.encoder.clone()).unwrap();
    let init = init_params(&cfg.encoder, 3).unwrap();
    let (train, test) = tiny_splits(&cfg);
    let opts = FinetuneOptions {
        epochs: 2,
        ..FinetuneOptions::from_config(&cfg, FinetuneMode::Full, "random")
    };
    let (_, tuned) = finetune(&net, &init, &train, &test, &opts).unwrap();
    let mut moved = 0;
    for ((name, a), b) in init.names.iter().zip(&init.tensors).zip(&tuned.tensors) {
        match group_of(name) {
            ParamGroup::Context => moved += (a != b) as usize,
            ParamGroup::ClassifierHead => {}
            _ => assert_eq!(a, b, "{name}"),
        }
    }
    assert!(moved > 0);
}

#[test]
fn unlabeled_splits_are_rejected() {
    let cfg = RunConfig::tiny();
    let net = SkipClipNet::new(cfg.encoder.clone()).unwrap();
    let init = init_params(&cfg.encoder, 0).unwrap();
    let (train, mut test) = tiny_splits(&cfg);
    test[1].motion_class = None;
    let opts = FinetuneOptions::from_config(&cfg, FinetuneMode::Probe, "random");
    match finetune(&net, &init, &train, &test, &opts).unwrap_err() {
        Error::Schema { field, .. } => assert_eq!(field, "test.entries[1].motion_class"),
        other => panic!("expected a schema error, got {other}"),
    }
}

/// Reads the window index from the first pixel and looks up a fixed answer.
struct Lookup(Vec<Vec<f64>>);

impl WindowClassifier for Lookup {
    fn frame_size(&self) -> (usize, usize) {
        (2, 2)
    }
    fn window_probs(&self, clip: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.0[(clip.data()[0] * 4.0).round() as usize].clone())
    }
}

/// Frame `f` is filled with `(f / window) / 4`.
fn indexed_video(n: usize, window: usize) -> Video {
    let data = (0..n).flat_map(|f| vec![(f / window) as f32 / 4.0; 4]).collect();
    Video::new(Tensor::new(vec![n, 1, 2, 2], data).unwrap(), "v", Some(0)).unwrap()
}

#[test]
fn sliding_window_examples() {
    let one = Lookup(vec![vec![0.1, 0.7, 0.2]]);
    let p = sliding_window_predict(&one, &indexed_video(16, 16), 16).unwrap();
    assert_eq!((p.windows, p.class), (1, 1));
    assert_eq!(p.probabilities, vec![0.1, 0.7, 0.2]);

    let two = Lookup(vec![vec![0.6, 0.4], vec![0.2, 0.8]]);
    let p = sliding_window_predict(&two, &indexed_video(32, 16), 16).unwrap();
    assert_eq!((p.windows, p.class), (2, 1));
    assert!((p.probabilities[0] - 0.4).abs() < 1e-15);

    let p = sliding_window_predict(&two, &indexed_video(33, 16), 16).unwrap();
    assert_eq!(p.windows, 2);

    let err = sliding_window_predict(&two, &indexed_video(15, 16), 16).unwrap_err();
    assert!(matches!(err, Error::VideoTooShort { n: 15, required: 16 }), "{err}");
    assert!(average_probabilities(&[]).is_err());
    assert!(average_probabilities(&[vec![0.5, 0.5], vec![1.0]]).is_err());
}

#[test]
fn averaged_probabilities_stay_normalized() {
    let cfg = RunConfig::tiny();
    let model = TrainedModel::new(
        SkipClipNet::new(cfg.encoder.clone()).unwrap(),
        init_params(&cfg.encoder, 4).unwrap(),
    )
    .unwrap();
    for v in held_out(&cfg.data, 4) {
        let p = sliding_window_predict(&model, &v, cfg.run.clip_window).unwrap();
        assert_eq!(p.windows, v.num_frames() / cfg.run.clip_window);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.probabilities.iter().all(|&q| q >= 0.0));
    }
}

#[test]
fn heatmap_examples() {
    let mut r = rng::stream(6, "heat", 0);
    let h = Tensor::new(vec![5, 3, 4], (0..60).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let same = heatmap_grid(&h, &h).unwrap();
    assert_eq!(same.shape(), &[3, 4]);
    assert!(same.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));

    let z = Tensor::new(vec![5, 3, 4], (0..60).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let grid = heatmap_grid(&h, &z).unwrap();
    let mut acc = 0f32;
    for &v in grid.data() {
        acc += v;
    }
    assert_eq!(acc / 12.0, score(&h, &z).unwrap().0);
    let (ar, ac) = argmax_cell(&grid);
    assert!(grid.data().iter().all(|&v| v <= grid.data()[ar * 4 + ac]));
}

#[test]
fn heatmaps_on_real_frames_export_cleanly() {
    let cfg = RunConfig::tiny();
    let model = TrainedModel::new(
        SkipClipNet::new(cfg.encoder.clone()).unwrap(),
        init_params(&cfg.encoder, 5).unwrap(),
    )
    .unwrap();
    let video = render_video(&cfg.data, Split::Test, 0).unwrap();
    let lead = cfg.sample.context_len - 1 + cfg.sample.rate;
    let hm = frame_heatmap(&model, &video, &cfg.sample, lead).unwrap();
    assert_eq!(hm.context_start, 0);
    let [_, gh, gw] = cfg.encoder.output_grid().unwrap();
    assert_eq!(hm.grid.shape(), &[gh, gw]);
    assert!(frame_heatmap(&model, &video, &cfg.sample, lead - 1).is_err());

    let dir = tempfile::tempdir().unwrap();
    let (pgm, raw) = export_heatmap(&hm.grid, (16, 16), dir.path(), "f").unwrap();
    let bytes = std::fs::read(pgm).unwrap();
    assert_eq!(bytes, heatmap_pgm(&hm.grid, (16, 16)).unwrap());
    assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(bytes.len(), b"P5\n16 16\n255\n".len() + 256);
    assert_eq!(skt::read_tensor(&raw).unwrap(), hm.grid);
}
