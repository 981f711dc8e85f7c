//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Runs the desk-scale pretraining three times
//! per objective, so expect it to take a while on one core.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng as _;

use skipclip::config::RunConfig;
use skipclip::encoders::{init_params, SkipClipNet};
use skipclip::evaluation::{
    evaluate_ranking, finetune, heatmap_grid, sliding_window_predict, FinetuneMode,
    FinetuneOptions, ProbeReport, RankingReport, TrainedModel, WindowClassifier,
};
use skipclip::numerics::{FdOptions, Tensor};
use skipclip::objectives::{contrastive_loss, rank_loss, score};
use skipclip::rng;
use skipclip::sampling::{AugmentationSpec, SampleSpec, Sampler};
use skipclip::training::{
    gradcheck_objective, lr_at_epoch, pretrain, Checkpoint, MetricsRecorder, Schedule,
};
use skipclip::videoio::{render_video, Split, Video};
use skipclip::Result;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, outcome: Result<Outcome>) -> bool {
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn splits(cfg: &RunConfig) -> Result<(Vec<Video>, Vec<Video>)> {
    let train = (0..cfg.data.num_videos)
        .map(|i| render_video(&cfg.data, Split::Train, i))
        .collect::<Result<_>>()?;
    let test = (0..cfg.data.num_test_videos)
        .map(|i| render_video(&cfg.data, Split::Test, i))
        .collect::<Result<_>>()?;
    Ok((train, test))
}

fn gradient_check() -> Result<Outcome> {
    let cfg = RunConfig::tiny();
    let start = Instant::now();
    let (mut worst, mut skipped, mut failed) = (0f64, 0, 0);
    for i in 0..20 {
        let r = gradcheck_objective(&cfg, i, &FdOptions::default())?;
        worst = worst.max(r.max_rel_error);
        skipped += r.skipped_kinks;
        failed += (!r.passed()) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: failed == 0 && worst <= 1e-4 && secs < 60.0,
        detail: format!("20 instances, max rel error {worst:.2e}, {skipped} kink probes skipped, {secs:.1}s"),
    })
}

fn rank_oracle(s: &[f64], margin: f64) -> f64 {
    let mut total = 0.0;
    for (a, &sa) in s.iter().enumerate() {
        for (b, &sb) in s.iter().enumerate() {
            if a < b {
                let v = sb - sa + margin;
                total += if v > 0.0 { v } else { 0.0 };
            }
        }
    }
    total
}

fn contrastive_oracle(targets: &[f64], negatives: &[f64], margin: f64) -> f64 {
    let mut sum = 0.0;
    for &n in negatives {
        sum += n;
    }
    let mean = sum / negatives.len() as f64;
    targets.iter().fold(0.0, |acc, &s| {
        let v = mean - s + margin;
        acc + if v > 0.0 { v } else { 0.0 }
    })
}

fn loss_oracles() -> Result<Outcome> {
    let mut r = rng::stream(100, "acceptance-oracle", 0);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let m = r.gen_range(2..10);
        let s: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
        let q = r.gen_range(1..10);
        let neg: Vec<f64> = (0..q).map(|_| r.gen_range(-1.0..1.0)).collect();
        let margin = r.gen_range(0.0..0.3);
        mismatches += (rank_loss(&s, margin)? != rank_oracle(&s, margin)) as usize;
        mismatches += (contrastive_loss(&s, &neg, margin)? != contrastive_oracle(&s, &neg, margin)) as usize;
    }
    Ok(Outcome {
        pass: mismatches == 0,
        detail: format!("10000 vectors, {mismatches} mismatches"),
    })
}

fn scoring_contract() -> Result<Outcome> {
    let cfg = RunConfig::default();
    let model = TrainedModel::new(SkipClipNet::new(cfg.encoder.clone())?, init_params(&cfg.encoder, 7)?)?;
    let (_, test) = splits(&RunConfig {
        data: skipclip::videoio::SyntheticSpec {
            num_videos: cfg.data.num_motion_classes,
            num_test_videos: 8,
            ..cfg.data.clone()
        },
        ..cfg.clone()
    })?;
    let mut r = rng::stream(101, "acceptance-score", 0);
    let mut failures = Vec::new();
    let mut worst_scale = 0f64;
    for i in 0..300 {
        let h: Tensor<f64> = Tensor::new(vec![6, 3, 3], (0..54).map(|_| r.gen_range(-1.0..1.0)).collect())?;
        let z: Tensor<f64> = Tensor::new(vec![6, 3, 3], (0..54).map(|_| r.gen_range(-1.0..1.0)).collect())?;
        let s = score(&h, &z)?.0;
        if score(&h, &h)?.0 != 1.0 || score(&h, &h.map(|v| -v))?.0 != -1.0 {
            failures.push(format!("self-score at {i}"));
        }
        if !(-1.0..=1.0).contains(&s) {
            failures.push(format!("bounds at {i}"));
        }
        let mut scaled = z.clone();
        let alpha: Vec<f64> = (0..9).map(|_| r.gen_range(0.01..100.0)).collect();
        for (k, v) in scaled.data_mut().iter_mut().enumerate() {
            *v *= alpha[k % 9];
        }
        worst_scale = worst_scale.max((score(&h, &scaled)?.0 - s).abs());
    }
    // Heatmap mean against score on real encoder grids.
    let crop = AugmentationSpec::default().crop;
    for v in &test {
        let [_, fh, fw] = v.frame_shape();
        let rec = skipclip::sampling::AugmentRecord::center((fh, fw), crop)?;
        let h = skipclip::evaluation::RankingEncoder::context_grid(&model, &rec.apply(&v.clip(0, cfg.sample.context_len)))?;
        let z = skipclip::evaluation::RankingEncoder::target_grid(&model, &rec.apply(&v.frame(30)))?;
        let grid = heatmap_grid(&h, &z)?;
        let mut acc = 0f32;
        for &c in grid.data() {
            acc += c;
        }
        if acc / grid.numel() as f32 != score(&h, &z)?.0 {
            failures.push(format!("heatmap mean on {}", v.id));
        }
    }
    Ok(Outcome {
        pass: failures.is_empty() && worst_scale < 1e-5,
        detail: if failures.is_empty() {
            format!("300 random grids + {} encoder grids, scale drift {worst_scale:.1e}", test.len())
        } else {
            failures.join(", ")
        },
    })
}

/// A video whose pixel values encode (frame, row, col) exactly.
fn coded_video(id: &str, n: usize, h: usize, w: usize) -> Result<Video> {
    let scale = (n * h * w) as f32;
    let data = (0..n * h * w).map(|i| i as f32 / scale).collect();
    Video::new(Tensor::new(vec![n, 1, h, w], data)?, id, Some(0))
}

fn decode(v: f32, n: usize, h: usize, w: usize) -> (usize, usize, usize) {
    let i = (v * (n * h * w) as f32).round() as usize;
    (i / (h * w), (i / w) % h, i % w)
}

fn sampling_invariants() -> Result<Outcome> {
    let (n, h, w) = (60, 10, 10);
    let videos = (0..6).map(|i| coded_video(&format!("v{i}"), n, h, w)).collect::<Result<Vec<_>>>()?;
    let sampler = Sampler::new(SampleSpec::default(), AugmentationSpec { crop: (8, 8), ..Default::default() });
    let spec = &sampler.sample;
    let mut bad = [0usize; 5];
    for i in 0..10_000u64 {
        let mut r = rng::stream(102, "acceptance-sampler", i);
        let vid = r.gen_range(0..videos.len());
        let ex = sampler.example(&videos, vid, &mut r)?;
        let t = ex.seek_index;
        let source = |idx: usize| if ex.reversed { n - 1 - idx } else { idx };
        bad[0] += ex.target_indices.windows(2).any(|p| p[1] - p[0] != spec.rate) as usize;
        bad[1] += (ex.target_indices[0] < t + spec.context_len) as usize;
        bad[2] += ex.negative_ids.contains(&ex.video_id) as usize;
        let expect_x = if ex.augment.flip { ex.augment.crop_x + 7 } else { ex.augment.crop_x };
        let mut frames_ok = true;
        let mut crops_ok = true;
        for (clip, &idx) in ex.targets.iter().zip(&ex.target_indices) {
            let (f, y, x) = decode(clip.data()[0], n, h, w);
            frames_ok &= f == source(idx);
            crops_ok &= (y, x) == (ex.augment.crop_y, expect_x);
        }
        for k in 0..spec.context_len {
            let (f, y, x) = decode(ex.context.index_outer(k).data()[0], n, h, w);
            frames_ok &= f == source(t + k);
            crops_ok &= (y, x) == (ex.augment.crop_y, expect_x);
        }
        bad[3] += !crops_ok as usize;
        bad[4] += !frames_ok as usize;
    }
    Ok(Outcome {
        pass: bad.iter().all(|&b| b == 0),
        detail: format!(
            "10000 examples; violations: spacing {}, order {}, negative id {}, crop/flip {}, reversal {}",
            bad[0], bad[1], bad[2], bad[3], bad[4]
        ),
    })
}

fn null_calibration(cfg: &RunConfig, test: &[Video]) -> Result<Outcome> {
    let mut accs = Vec::new();
    for &seed in &SEEDS {
        let model = TrainedModel::new(SkipClipNet::new(cfg.encoder.clone())?, init_params(&cfg.encoder, seed + 1000)?)?;
        accs.push(evaluate_ranking(&model, test, &cfg.sample, 512, seed)?.pairwise_accuracy);
    }
    Ok(Outcome {
        pass: accs.iter().all(|a| (a - 0.5).abs() <= 0.05),
        detail: format!("512 examples per encoder, accuracy {}", fmt_list(&accs)),
    })
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" / ")
}

struct SeedRun {
    seed: u64,
    ranking: RankingReport,
    probe_full: ProbeReport,
    probe_rank_only: ProbeReport,
    probe_random: ProbeReport,
}

fn seeded(base: &RunConfig, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.run.seed = seed;
    cfg.run.deterministic = true;
    cfg
}

fn probe(cfg: &RunConfig, params: &skipclip::encoders::EncoderParams<f32>, init: &str, train: &[Video], test: &[Video]) -> Result<ProbeReport> {
    let net = SkipClipNet::new(cfg.encoder.clone())?;
    let opts = FinetuneOptions::from_config(cfg, FinetuneMode::Probe, init);
    Ok(finetune(&net, params, train, test, &opts)?.0)
}

fn run_seed(base: &RunConfig, seed: u64, train: &[Video], test: &[Video]) -> Result<SeedRun> {
    let cfg = seeded(base, seed);
    let t0 = Instant::now();
    let full = pretrain(&cfg, train, None, cfg.optim.epochs, &mut ())?;
    let model = TrainedModel::new(SkipClipNet::new(cfg.encoder.clone())?, full.params.clone())?;
    let ranking = evaluate_ranking(&model, test, &cfg.sample, cfg.run.eval_examples, seed)?;
    let probe_full = probe(&cfg, &full.params, "checkpoint", train, test)?;

    let mut rank_cfg = cfg.clone();
    rank_cfg.loss.enable_contrastive = false;
    rank_cfg.loss.enable_rotation = false;
    let rank_only = pretrain(&rank_cfg, train, None, cfg.optim.epochs, &mut ())?;
    let probe_rank_only = probe(&cfg, &rank_only.params, "checkpoint", train, test)?;

    let probe_random = probe(&cfg, &init_params(&cfg.encoder, seed)?, "random", train, test)?;
    eprintln!("seed {seed} finished in {:.0}s", t0.elapsed().as_secs_f64());
    Ok(SeedRun {
        seed,
        ranking,
        probe_full,
        probe_rank_only,
        probe_random,
    })
}

fn learnability(runs: &[SeedRun]) -> Outcome {
    let acc: Vec<f64> = runs.iter().map(|r| r.ranking.pairwise_accuracy).collect();
    let tau: Vec<f64> = runs.iter().map(|r| r.ranking.kendall_tau).collect();
    let (ma, mt) = (median(acc.clone()), median(tau.clone()));
    Outcome {
        pass: ma > 0.75 && mt > 0.5,
        detail: format!("median accuracy {ma:.4} (seeds {}), median tau {mt:.4} (seeds {})", fmt_list(&acc), fmt_list(&tau)),
    }
}

fn transfer(runs: &[SeedRun]) -> Outcome {
    let gaps: Vec<f64> = runs
        .iter()
        .map(|r| r.probe_full.top1_accuracy - r.probe_random.top1_accuracy)
        .collect();
    let m = median(gaps.clone());
    Outcome {
        pass: m >= 0.10,
        detail: format!("median probe gap {:.1} points (seeds {})", m * 100.0, fmt_list(&gaps)),
    }
}

fn ablation(runs: &[SeedRun]) -> Outcome {
    println!("     seed | full objective | rank only | random init");
    for r in runs {
        println!(
            "     {:>4} | {:>14.4} | {:>9.4} | {:>11.4}",
            r.seed, r.probe_full.top1_accuracy, r.probe_rank_only.top1_accuracy, r.probe_random.top1_accuracy
        );
    }
    let wins = runs
        .iter()
        .filter(|r| r.probe_full.top1_accuracy >= r.probe_rank_only.top1_accuracy)
        .count();
    Outcome {
        pass: wins >= 2,
        detail: format!("full >= rank-only in {wins} of {} seeds", runs.len()),
    }
}

fn cpc_mode() -> Result<Outcome> {
    let mut cfg = RunConfig::tiny();
    cfg.run.deterministic = true;
    cfg.loss.enable_rank = false;
    cfg.loss.enable_rotation = false;
    let (train, _) = splits(&cfg)?;
    let mut log = MetricsRecorder::default();
    pretrain(&cfg, &train, None, 4, &mut log)?;
    let equal = log.steps.iter().filter(|m| m.loss_total == m.loss_contrastive).count();
    Ok(Outcome {
        pass: !log.steps.is_empty() && equal == log.steps.len(),
        detail: format!("{equal} of {} logged steps exact", log.steps.len()),
    })
}

fn pipeline(cfg: &RunConfig, train: &[Video], test: &[Video]) -> Result<(Checkpoint, RankingReport, ProbeReport)> {
    let ckpt = pretrain(cfg, train, None, cfg.optim.epochs, &mut ())?;
    let model = TrainedModel::new(SkipClipNet::new(cfg.encoder.clone())?, ckpt.params.clone())?;
    let ranking = evaluate_ranking(&model, test, &cfg.sample, cfg.run.eval_examples, cfg.run.seed)?;
    let probe = probe(cfg, &ckpt.params, "checkpoint", train, test)?;
    Ok((ckpt, ranking, probe))
}

fn determinism() -> Result<Outcome> {
    let cfg = seeded(&RunConfig::tiny(), 5);
    let (train, test) = splits(&cfg)?;
    let a = pipeline(&cfg, &train, &test)?;
    let b = pipeline(&cfg, &train, &test)?;
    let bits = |c: &Checkpoint| -> Vec<u32> {
        c.params.tensors.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    };
    let same_ckpt = a.0 == b.0 && bits(&a.0) == bits(&b.0);
    let same_reports = serde_json::to_string(&a.1).unwrap() == serde_json::to_string(&b.1).unwrap()
        && serde_json::to_string(&a.2).unwrap() == serde_json::to_string(&b.2).unwrap();
    Ok(Outcome {
        pass: same_ckpt && same_reports,
        detail: format!("checkpoints identical: {same_ckpt}, reports identical: {same_reports}"),
    })
}

struct Lookup(Vec<Vec<f64>>);

impl WindowClassifier for Lookup {
    fn frame_size(&self) -> (usize, usize) {
        (2, 2)
    }
    fn window_probs(&self, clip: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.0[(clip.data()[0] * 4.0).round() as usize].clone())
    }
}

fn indexed_video(n: usize, window: usize) -> Result<Video> {
    let data = (0..n).flat_map(|f| vec![(f / window) as f32 / 4.0; 4]).collect();
    Video::new(Tensor::new(vec![n, 1, 2, 2], data)?, "v", Some(0))
}

fn protocol_fidelity() -> Result<Outcome> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
    let p = Schedule::pretrain();
    let f = Schedule::finetune();
    let lr_ok = close(lr_at_epoch(&p, 0), 3e-4)
        && close(lr_at_epoch(&p, 199), 3e-4)
        && close(lr_at_epoch(&p, 200), 3e-5)
        && close(lr_at_epoch(&f, 0), 5e-4)
        && close(lr_at_epoch(&f, 15), 2.5e-4)
        && close(lr_at_epoch(&f, 45), 6.25e-5)
        && close(lr_at_epoch(&f, 60), 3.125e-5)
        && close(lr_at_epoch(&f, 75), 3.125e-5);

    let one = Lookup(vec![vec![0.1, 0.7, 0.2]]);
    let p1 = sliding_window_predict(&one, &indexed_video(16, 16)?, 16)?;
    let two = Lookup(vec![vec![0.6, 0.4], vec![0.2, 0.8]]);
    let p2 = sliding_window_predict(&two, &indexed_video(32, 16)?, 16)?;
    let window_ok = p1.probabilities == vec![0.1, 0.7, 0.2]
        && p1.class == 1
        && p2.windows == 2
        && (p2.probabilities[0] - 0.4).abs() < 1e-15
        && (p2.probabilities[1] - 0.6).abs() < 1e-15
        && p2.class == 1;
    Ok(Outcome {
        pass: lr_ok && window_ok,
        detail: format!("schedule spot epochs ok: {lr_ok}, sliding-window averages ok: {window_ok}"),
    })
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut all = true;
    all &= report(1, "gradient correctness", gradient_check());
    all &= report(2, "loss-oracle equivalence", loss_oracles());
    all &= report(3, "scoring contract", scoring_contract());
    all &= report(4, "sampling invariants", sampling_invariants());

    let base = RunConfig::default();
    let data = splits(&base);
    let runs: Result<Vec<SeedRun>> = data.as_ref().map_err(|e| skipclip::Error::InvalidArgument(e.to_string())).and_then(
        |(train, test)| SEEDS.iter().map(|&s| run_seed(&base, s, train, test)).collect(),
    );
    let null = match &data {
        Ok((_, test)) => null_calibration(&base, test),
        Err(e) => Err(skipclip::Error::InvalidArgument(e.to_string())),
    };
    all &= report(5, "null calibration", null);
    match &runs {
        Ok(runs) => {
            all &= report(6, "pretext learnability", Ok(learnability(runs)));
            all &= report(7, "transfer over random init", Ok(transfer(runs)));
            all &= report(8, "ablation direction", Ok(ablation(runs)));
        }
        Err(e) => {
            for (id, name) in [(6, "pretext learnability"), (7, "transfer over random init"), (8, "ablation direction")] {
                all &= report(id, name, Err(skipclip::Error::InvalidArgument(e.to_string())));
            }
        }
    }
    all &= report(9, "contrastive-only mode", cpc_mode());
    all &= report(10, "determinism", determinism());
    all &= report(11, "protocol fidelity", protocol_fidelity());
    println!("acceptance finished in {:.0}s", start.elapsed().as_secs_f64());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
