//! Scratch pilot for sizing the end-to-end overfit experiment. Not shipped.

use std::time::Instant;

use deshadow_core::fixtures::{overfit_pairs, separable_patch_examples};
use deshadow_core::net::AblationVariant;
use deshadow_core::training::{
    train_cpm, CanetTrainer, StepResult, TrainConfig, TrainLogger,
};

fn lr_arg() -> f64 {
    std::env::var("PILOT_LR")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-3)
}

fn run(
    variant: AblationVariant,
    seed: u64,
    steps: u64,
    cpm: Option<deshadow_core::cpm::CpmNet>,
    check_every: u64,
) -> f64 {
    let mut cfg = TrainConfig::desk_profile();
    cfg.variant = variant;
    cfg.seed = seed;
    cfg.lr = lr_arg();
    if std::env::var("PILOT_WIDE").is_ok() {
        cfg.backbone.widths = vec![12, 16, 24];
        cfg.stage2_widths = vec![12, 16];
    }
    if let Ok(s2) = std::env::var("PILOT_S2") {
        cfg.stage2_widths = s2.split(',').map(|v| v.parse().unwrap()).collect();
    }
    if let Ok(lper) = std::env::var("PILOT_LPER") {
        cfg.loss_weights.lambda_per = lper.parse().unwrap();
    }
    if let Ok(lgrad) = std::env::var("PILOT_LGRAD") {
        cfg.loss_weights.lambda_grad = lgrad.parse().unwrap();
    }
    let mut tr = CanetTrainer::new(&cfg, overfit_pairs(), cpm).expect("trainer");
    let t0 = Instant::now();
    let mut last = f64::NAN;
    for i in 0..steps {
        match tr.step_once().expect("step") {
            StepResult::Stepped(log) => {
                if (i + 1) % check_every == 0 {
                    last = tr.validation_rmse().expect("rmse");
                    println!(
                        "{variant} seed={seed} step={} loss={:.4} rmse={:.3} ({:.2} s/step)",
                        i + 1,
                        log.total,
                        last,
                        t0.elapsed().as_secs_f64() / (i + 1) as f64
                    );
                }
            }
            StepResult::Diverged { step, observed } => {
                println!("{variant} seed={seed} DIVERGED at {step}: {observed}");
                return f64::INFINITY;
            }
        }
    }
    if last.is_nan() {
        last = tr.validation_rmse().expect("rmse");
    }
    println!(
        "{variant} seed={seed}: final rmse {last:.3} after {steps} steps, {:.1}s total",
        t0.elapsed().as_secs_f64()
    );
    last
}

fn fixture_cpm() -> deshadow_core::cpm::CpmNet {
    use deshadow_core::dataset::{build_pair_corpus, ingest_dataset, DatasetLayout, Split};
    use deshadow_core::training::materialize_corpus;
    let root = std::fs::canonicalize("fixtures/istd_mini").expect("root");
    let records: Vec<_> = ingest_dataset(&root, DatasetLayout::Istd)
        .expect("ingest")
        .records
        .into_iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    let corpus = build_pair_corpus(&records, 32, 7).expect("corpus");
    let examples = materialize_corpus(&corpus, &root).expect("materialize");
    let mut cfg = TrainConfig::desk_profile();
    cfg.checkpoint_dir = std::env::temp_dir().join("pilot_cpm");
    cfg.epochs_cpm = 10;
    let t0 = Instant::now();
    let out = train_cpm(&cfg, &examples, &mut TrainLogger::disabled(), None).expect("cpm");
    println!(
        "cpm on fixture corpus: {:.0}s, held acc {:.2}",
        t0.elapsed().as_secs_f64(),
        out.epochs.last().unwrap().held_accuracy
    );
    out.net
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("timing");
    match mode {
        "timing" => {
            run(AblationVariant::Full, 0, 50, None, 10);
        }
        "full" => {
            run(AblationVariant::Full, 0, 500, None, 25);
        }
        "full-cpm" => {
            let net = fixture_cpm();
            run(AblationVariant::Full, 0, 500, Some(net), 25);
        }
        "dense" => {
            run(AblationVariant::DenseUnetOnly, 0, 500, None, 25);
        }
        "stages" => {
            // where is full bottlenecked: stage-1 LAB recon or stage-2 refinement?
            use deshadow_core::eval::rmse_lab;
            use ndarray::Array2;
            let mut cfg = TrainConfig::desk_profile();
            cfg.lr = lr_arg();
            cfg.backbone.widths = vec![12, 16, 24];
            cfg.stage2_widths = vec![12, 16];
            let pairs = overfit_pairs();
            let mut tr = CanetTrainer::new(&cfg, pairs.clone(), None).expect("trainer");
            for i in 0..500u64 {
                if let StepResult::Diverged { .. } = tr.step_once().expect("step") {
                    println!("diverged");
                    return;
                }
                if (i + 1) % 100 == 0 {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for (sh, gt) in &pairs {
                        let out = tr.pipeline().remove_shadow(sh).expect("fw");
                        let mask = Array2::from_elem((sh.height(), sh.width()), true);
                        let lab1 = deshadow_core::imaging::ImagePlane::from_array(
                            out.stage_one.lab_recombined.clone(),
                            deshadow_core::imaging::ColorSpace::Lab,
                        )
                        .expect("plane");
                        s1 += rmse_lab(&lab1, gt, &mask).expect("rmse").all;
                        s2 += rmse_lab(&out.final_rgb, gt, &mask).expect("rmse").all;
                    }
                    println!("step {}: stage1 {:.3} final {:.3}", i + 1, s1 / 2.0, s2 / 2.0);
                }
            }
        }
        "match-count" => {
            // do production-corpus-trained matcher weights yield real matches?
            use deshadow_core::dataset::{build_pair_corpus, ingest_dataset, DatasetLayout, Split};
            use deshadow_core::net::CanetPipeline;
            use deshadow_core::training::materialize_corpus;
            let root = std::fs::canonicalize("fixtures/istd_mini").expect("root");
            let root = root.as_path();
            let records: Vec<_> = ingest_dataset(root, DatasetLayout::Istd)
                .expect("ingest")
                .records
                .into_iter()
                .filter(|r| r.split == Split::Train)
                .collect();
            let corpus = build_pair_corpus(&records, 32, 7).expect("corpus");
            let examples = materialize_corpus(&corpus, root).expect("materialize");
            let mut cfg = TrainConfig::desk_profile();
            cfg.checkpoint_dir = std::env::temp_dir().join("pilot_cpm2");
            cfg.epochs_cpm = 10;
            let t0 = Instant::now();
            let out = train_cpm(&cfg, &examples, &mut TrainLogger::disabled(), None).expect("cpm");
            println!(
                "cpm on fixture corpus: {} examples, {} epochs, {:.0}s, held acc {:.2}",
                examples.len(),
                out.epochs.len(),
                t0.elapsed().as_secs_f64(),
                out.epochs.last().unwrap().held_accuracy
            );
            let mut cfg2 = TrainConfig::desk_profile();
            cfg2.backbone.widths = vec![12, 16, 24];
            cfg2.stage2_widths = vec![12, 16];
            let mut pipe = CanetPipeline::init(cfg2.to_pipeline_config(), 0).expect("pipe");
            if let deshadow_core::net::Matcher::Cpm(slot) = &mut pipe.matcher {
                *slot = out.net;
            }
            for (i, (sh, _)) in overfit_pairs().iter().enumerate() {
                let set = pipe.compute_matchset(sh).expect("matchset");
                let pairs: usize = set.queries.iter().map(|q| q.matches.len()).sum();
                println!("pair {i}: {} queries, {} matched pairs", set.queries.len(), pairs);
                let lab = deshadow_core::imaging::rgb_to_lab(sh).expect("lab");
                let lp = lab.lightness().expect("l");
                let ld = lp.data();
                let grid = deshadow_core::cpm::grid_patches(sh.height(), sh.width(), 16)
                    .expect("grid");
                let mut all: Vec<f64> = ld.iter().copied().collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let med = all[all.len() / 2];
                let means: Vec<String> = grid
                    .iter()
                    .map(|p| {
                        let m = ld
                            .slice(ndarray::s![p.row..p.row + 16, p.col..p.col + 16])
                            .mean()
                            .unwrap();
                        format!("{m:.0}")
                    })
                    .collect();
                println!(
                    "  median L {med:.1} (query<{:.1} src>{:.1}); patch means {}",
                    0.75 * med,
                    0.95 * med,
                    means.join(" ")
                );
            }
        }
        "seeds" => {
            let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(120);
            let mut wins = 0;
            for seed in 0..5u64 {
                let full = run(AblationVariant::Full, seed, steps, None, steps);
                let dense = run(AblationVariant::DenseUnetOnly, seed, steps, None, steps);
                let win = full <= dense;
                wins += i32::from(win);
                println!("seed {seed}: full {full:.3} vs dense {dense:.3} -> {}", if win { "WIN" } else { "LOSS" });
            }
            println!("wins: {wins}/5");
        }
        other => eprintln!("unknown mode {other}"),
    }
}
