//! Manual benchmark-tuning probes; run with `--ignored --nocapture`.

use std::time::Instant;

use geodistill::distill::Toggles;
use geodistill::trainer::{
    bench_scene, evaluate_scene, group_toggles, train, BenchConfig, TrainConfig,
};

#[test]
#[ignore]
fn probe_clean_limit_training() {
    let bench = BenchConfig {
        seeds: vec![0],
        total_points: 6000,
        camera_count: 12,
        image_size: 96,
        corruption: geodistill::synthbench::CorruptionSpec::none(),
        ..BenchConfig::default()
    };
    let cfg = TrainConfig {
        seed: 0,
        steps: 2000,
        lr: 3e-3,
        hidden: 36,
        toggles: Toggles {
            sd: false,
            usd: true,
            imr: false,
            iirc: false,
        },
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let train_set = vec![
        bench_scene(&bench, &cfg.prep, 10).unwrap(),
        bench_scene(&bench, &cfg.prep, 11).unwrap(),
    ];
    let eval_set = vec![bench_scene(&bench, &cfg.prep, 900).unwrap()];
    println!(
        "prep: {:?}, {} points, {} superpoints",
        t0.elapsed(),
        train_set[0].inputs.f2d.rows(),
        train_set[0].inputs.part.n_superpoints()
    );
    let t1 = Instant::now();
    let out = train(&train_set, &cfg).unwrap();
    println!("train {} steps: {:?}", cfg.steps, t1.elapsed());
    for (i, s) in eval_set.iter().enumerate() {
        let m = evaluate_scene(&out.params, s).unwrap();
        println!("eval scene {i}: miou {:.4} macc {:.4}", m.miou, m.macc);
    }
    for s in &train_set {
        let m = evaluate_scene(&out.params, s).unwrap();
        println!("train scene: miou {:.4} macc {:.4}", m.miou, m.macc);
    }
    for log in out.log.iter().step_by(200) {
        println!("step {} l_final {:.4}", log.step, log.report.l_final);
    }
}

#[test]
#[ignore]
fn probe_ablation_single_seed() {
    let bench = BenchConfig {
        seeds: vec![0],
        total_points: 6000,
        ..BenchConfig::default()
    };
    let mut cfg = TrainConfig {
        steps: 1500,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    for (l2, l3) in [(0.1, 0.1)] {
    cfg.distill.lambda2 = l2;
    cfg.distill.lambda3 = l3;
    println!("lambda2 {l2} lambda3 {l3}:");
    for seed in [0u64, 1] {
        let mut c0 = cfg.clone();
        c0.seed = seed;
        let train_set: Vec<_> = (0..2)
            .map(|i| bench_scene(&bench, &c0.prep, seed * 1000 + 10 + i).unwrap())
            .collect();
        let eval_set: Vec<_> = (0..2)
            .map(|i| bench_scene(&bench, &c0.prep, seed * 1000 + 900 + i).unwrap())
            .collect();
        for name in ["A", "D", "E", "F", "G", "H", "I"] {
            let mut c = c0.clone();
            c.toggles = group_toggles(name).unwrap();
            let t = Instant::now();
            let out = train(&train_set, &c).unwrap();
            let mut miou = 0.0;
            for s in &eval_set {
                miou += evaluate_scene(&out.params, s).unwrap().miou / eval_set.len() as f64;
            }
            println!("seed {seed} group {name}: miou {miou:.4} ({:?})", t.elapsed());
        }
    }
    }
}

#[test]
#[ignore]
fn probe_clean_limit_no_boxes() {
    use geodistill::synthbench::{PrimitiveSpec, SceneSpec, Shape};
    let mut spec = SceneSpec::benchmark(0);
    spec.primitives = vec![
        PrimitiveSpec { shape: Shape::Plane, center: [0.0, 0.0, 0.0], scale: [3.6, 3.6, 1.0], class_id: 0 },
        PrimitiveSpec { shape: Shape::Sphere, center: [-1.0, -1.0, 0.8], scale: [0.35; 3], class_id: 1 },
        PrimitiveSpec { shape: Shape::Sphere, center: [1.1, -0.9, 1.0], scale: [0.3; 3], class_id: 1 },
        PrimitiveSpec { shape: Shape::Sphere, center: [0.1, 1.2, 0.7], scale: [0.4; 3], class_id: 1 },
        PrimitiveSpec { shape: Shape::Cylinder, center: [-1.1, 1.0, 0.9], scale: [0.3, 0.3, 0.45], class_id: 2 },
        PrimitiveSpec { shape: Shape::Cylinder, center: [1.2, 1.1, 0.8], scale: [0.35, 0.35, 0.4], class_id: 2 },
        PrimitiveSpec { shape: Shape::Cylinder, center: [0.0, -1.3, 1.1], scale: [0.28, 0.28, 0.5], class_id: 2 },
    ];
    spec.n_classes = 3;
    spec.total_points = 6000;
    spec.camera_count = 12;
    spec.image_size = 96;
    let cfg = TrainConfig {
        seed: 0,
        steps: 2000,
        lr: 3e-3,
        hidden: 48,
        toggles: Toggles { sd: false, usd: true, imr: false, iirc: false },
        ..TrainConfig::default()
    };
    let scene = geodistill::synthbench::generate(&spec, 3).unwrap();
    let rendered = geodistill::synthbench::render_views(&scene, &spec, 3).unwrap();
    let prep = geodistill::trainer::prepare_scene(&scene, &rendered.views, None, &cfg.prep).unwrap();
    let t = Instant::now();
    let out = train(&[prep.clone()], &cfg).unwrap();
    let m = evaluate_scene(&out.params, &prep).unwrap();
    println!("train scene miou {:.4} macc {:.4} ({:?})", m.miou, m.macc, t.elapsed());
    println!("per-class iou {:?}", m.per_class_iou);
    for log in out.log.iter().step_by(400) {
        println!("step {} l_final {:.4}", log.step, log.report.l_final);
    }
}

#[test]
#[ignore]
fn probe_usd_weight_gap() {
    use geodistill::distill::usd_weights_eval;
    let bench = BenchConfig {
        total_points: 6000,
        image_size: 128,
        ..BenchConfig::default()
    };
    let cfg = TrainConfig {
        steps: 1750,
        lr: 3e-3,
        toggles: group_toggles("E").unwrap(),
        ..TrainConfig::default()
    };
    for seed in 0..5u64 {
        let mut c = cfg.clone();
        c.seed = seed;
        let scenes: Vec<_> = (0..2)
            .map(|i| bench_scene(&bench, &c.prep, seed * 1000 + i).unwrap())
            .collect();
        let out = train(&scenes, &c).unwrap();
        let (mut w_flag, mut n_flag, mut w_clean, mut n_clean) = (0.0, 0usize, 0.0, 0usize);
        for s in &scenes {
            let w = usd_weights_eval(&out.params, &s.inputs.f3dg, &s.inputs.f2d, &s.inputs.part)
                .unwrap();
            for (i, &wi) in w.iter().enumerate() {
                if s.inputs.hits[i] == 0 {
                    continue;
                }
                if s.corrupted_frac[i] > 0.5 {
                    w_flag += wi;
                    n_flag += 1;
                } else {
                    w_clean += wi;
                    n_clean += 1;
                }
            }
        }
        println!(
            "seed {seed}: flagged {} pts mean W {:.4}; clean {} pts mean W {:.4}; gap {:.4}",
            n_flag,
            w_flag / n_flag as f64,
            n_clean,
            w_clean / n_clean as f64,
            w_clean / n_clean as f64 - w_flag / n_flag as f64
        );
    }
}

fn heldout_mask_iou(params: &geodistill::ParamStore, scene: &geodistill::trainer::PreparedScene, seed: u64) -> f64 {
    use geodistill::distill::{imr_reconstruct, mask_out};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut used = 0usize;
    for mask in &scene.inputs.masks.masks {
        if mask.iter().filter(|&&b| b).count() < 4 {
            continue;
        }
        let partial = mask_out(mask, 0.5, &mut rng);
        let mut tape = geodistill::Tape::new();
        let g = tape.constant(scene.inputs.f3dg.clone());
        let sem = params.adapter_forward(&mut tape, g).unwrap();
        let pred = imr_reconstruct(&mut tape, params, sem, &partial).unwrap();
        let v = tape.value(pred);
        let (lo, hi) = v.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let thr = lo + 0.5 * (hi - lo);
        let (mut inter, mut uni) = (0usize, 0usize);
        for (i, &m) in mask.iter().enumerate() {
            let p = v.data()[i] >= thr;
            if p && m { inter += 1; }
            if p || m { uni += 1; }
        }
        if uni > 0 {
            total += inter as f64 / uni as f64;
            used += 1;
        }
    }
    total / used as f64
}

#[test]
#[ignore]
fn probe_imr_signal() {
    let bench = BenchConfig {
        total_points: 6000,
        ..BenchConfig::default()
    };
    let mut cfg = TrainConfig {
        steps: 500,
        lr: 3e-3,
        toggles: group_toggles("F").unwrap(),
        ..TrainConfig::default()
    };
    cfg.distill.lambda2 = 1.0;
    let scenes: Vec<_> = (0..2)
        .map(|i| bench_scene(&bench, &cfg.prep, 10 + i).unwrap())
        .collect();
    let heldout = bench_scene(&bench, &cfg.prep, 910).unwrap();
    let mut l_mask = Vec::new();
    let mut iou0 = None;
    let out = geodistill::trainer::train_with_callback(&scenes, &cfg, None, |step, params, rep| {
        if step == 0 {
            iou0 = Some(heldout_mask_iou(params, &heldout, 77));
        }
        l_mask.push(rep.l_mask);
    })
    .unwrap();
    let iou_end = heldout_mask_iou(&out.params, &heldout, 77);
    let ma: Vec<f64> = (0..=l_mask.len() - 100)
        .map(|i| l_mask[i..i + 100].iter().sum::<f64>() / 100.0)
        .collect();
    let nonincreasing = ma.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    let max_uptick = ma.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    println!(
        "l_mask ma first {:.4} last {:.4} nonincreasing {nonincreasing} max_uptick {max_uptick:.2e}; heldout IoU step0 {:.4} -> {:.4}",
        ma[0], ma[ma.len() - 1], iou0.unwrap(), iou_end
    );
}

fn weight_gap(params: &geodistill::ParamStore, scenes: &[geodistill::trainer::PreparedScene]) -> f64 {
    weight_gap_at(params, scenes, 0.5)
}

fn weight_gap_at(params: &geodistill::ParamStore, scenes: &[geodistill::trainer::PreparedScene], thr: f64) -> f64 {
    use geodistill::distill::usd_weights_eval;
    let (mut wf, mut nf, mut wc, mut nc) = (0.0, 0usize, 0.0, 0usize);
    // means printed alongside for diagnosis
    for s in scenes {
        let w = usd_weights_eval(params, &s.inputs.f3dg, &s.inputs.f2d, &s.inputs.part).unwrap();
        for (i, &wi) in w.iter().enumerate() {
            if s.inputs.hits[i] == 0 {
                continue;
            }
            if s.corrupted_frac[i] > thr {
                wf += wi;
                nf += 1;
            } else {
                wc += wi;
                nc += 1;
            }
        }
    }
    wc / nc as f64 - wf / nf as f64
}

fn gap_trajectory(scenes: &[geodistill::trainer::PreparedScene], cfg: &TrainConfig) {
    let t = Instant::now();
    let out = geodistill::trainer::train_with_callback(scenes, cfg, None, |step, params, _| {
        if (step + 1) % 250 == 0 {
            print!("  step {}:", step + 1);
            for thr in [0.5, 0.7, 0.9] {
                print!(" gap@{thr} {:+.4}", weight_gap_at(params, scenes, thr));
            }
            println!();
            let mut mw = 0.0;
            let mut n = 0usize;
            for s in scenes.iter() {
                let w = geodistill::distill::usd_weights_eval(params, &s.inputs.f3dg, &s.inputs.f2d, &s.inputs.part).unwrap();
                mw += w.iter().sum::<f64>();
                n += w.len();
            }
            println!("    mean W {:.3}", mw / n as f64);
        }
    })
    .unwrap();
    let mut miou = 0.0;
    for s in scenes {
        miou += evaluate_scene(&out.params, s).unwrap().miou / scenes.len() as f64;
    }
    println!("  final train miou {miou:.4} ({:?})", t.elapsed());
}

#[test]
#[ignore]
fn probe_gap_trajectory_default() {
    let bench = BenchConfig {
        total_points: 6000,
        ..BenchConfig::default()
    };
    let cfg = TrainConfig {
        steps: 3000,
        lr: 3e-3,
        toggles: group_toggles("E").unwrap(),
        ..TrainConfig::default()
    };
    let scenes: Vec<_> = (0..2)
        .map(|i| bench_scene(&bench, &cfg.prep, 10 + i).unwrap())
        .collect();
    println!("default layout:");
    gap_trajectory(&scenes, &cfg);
}

fn balanced_spec(seed: u64, bench: &BenchConfig) -> geodistill::synthbench::SceneSpec {
    use geodistill::synthbench::{PrimitiveSpec, SceneSpec, Shape};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xba1a);
    let mut primitives = vec![PrimitiveSpec {
        shape: Shape::Plane,
        center: [0.0, 0.0, 0.0],
        scale: [2.8, 2.8, 1.0],
        class_id: 0,
    }];
    let mut kinds = vec![
        (Shape::Sphere, 1u32),
        (Shape::Sphere, 1),
        (Shape::Cylinder, 2),
        (Shape::Cylinder, 2),
        (Shape::Box, 3),
        (Shape::Box, 3),
    ];
    for _ in 0..rng.gen_range(1..=3usize) {
        use rand::seq::SliceRandom;
        kinds.push(*[(Shape::Sphere, 1), (Shape::Cylinder, 2), (Shape::Box, 3)].choose(&mut rng).unwrap());
    }
    let mut centers: Vec<[f64; 2]> = Vec::new();
    for (shape, class_id) in kinds {
        let mut xy = [0.0f64; 2];
        for _ in 0..200 {
            xy = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if centers.iter().all(|c| (c[0] - xy[0]).powi(2) + (c[1] - xy[1]).powi(2) > 0.95) {
                break;
            }
        }
        centers.push(xy);
        let z = rng.gen_range(0.6..1.2);
        let scale = match shape {
            Shape::Sphere => {
                let r = rng.gen_range(0.32..0.45);
                [r, r, r]
            }
            Shape::Cylinder => {
                let r = rng.gen_range(0.3..0.4);
                [r, r, rng.gen_range(0.45..0.6)]
            }
            Shape::Box => [
                rng.gen_range(0.3..0.5),
                rng.gen_range(0.3..0.5),
                rng.gen_range(0.3..0.5),
            ],
            Shape::Plane => unreachable!(),
        };
        primitives.push(PrimitiveSpec { shape, center: [xy[0], xy[1], z], scale, class_id });
    }
    let mut spec = SceneSpec::benchmark(seed);
    spec.primitives = primitives;
    spec.total_points = bench.total_points;
    spec.camera_count = bench.camera_count;
    spec.image_size = bench.image_size;
    spec.corruption = bench.corruption;
    spec
}

fn balanced_scene(bench: &BenchConfig, prep: &geodistill::trainer::PrepConfig, seed: u64) -> geodistill::trainer::PreparedScene {
    let spec = balanced_spec(seed, bench);
    let scene = geodistill::synthbench::generate(&spec, seed).unwrap();
    let rendered = geodistill::synthbench::render_views(&scene, &spec, seed ^ 0x51de).unwrap();
    geodistill::trainer::prepare_scene(&scene, &rendered.views, Some(&rendered.bleed_flags), prep).unwrap()
}

#[test]
#[ignore]
fn probe_gap_trajectory_balanced() {
    let bench = BenchConfig {
        total_points: 6000,
        ..BenchConfig::default()
    };
    let cfg = TrainConfig {
        steps: 3000,
        lr: 3e-3,
        toggles: group_toggles("E").unwrap(),
        ..TrainConfig::default()
    };
    let scenes: Vec<_> = (0..2).map(|i| balanced_scene(&bench, &cfg.prep, 10 + i)).collect();
    let frac: f64 = scenes
        .iter()
        .map(|s| {
            let fl = s.gt_class.iter().filter(|&&c| c == 0).count();
            fl as f64 / s.gt_class.len() as f64
        })
        .sum::<f64>()
        / scenes.len() as f64;
    println!("balanced layout (floor frac {frac:.2}):");
    gap_trajectory(&scenes, &cfg);
}

#[test]
#[ignore]
fn probe_gap_no_wd() {
    let bench = BenchConfig {
        total_points: 6000,
        ..BenchConfig::default()
    };
    let scenes: Vec<_> = (0..2)
        .map(|i| bench_scene(&bench, &geodistill::trainer::PrepConfig::default(), 10 + i).unwrap())
        .collect();
    for (lr, wd) in [(3e-3, 0.0), (6e-3, 0.0), (6e-3, 1e-2)] {
        let cfg = TrainConfig {
            steps: 4000,
            lr,
            weight_decay: wd,
            toggles: group_toggles("E").unwrap(),
            ..TrainConfig::default()
        };
        println!("lr {lr} wd {wd}:");
        gap_trajectory(&scenes, &cfg);
    }
}

#[test]
#[ignore]
fn probe_gap_capacity_diversity() {
    let bench = BenchConfig {
        total_points: 6000,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let pool: Vec<_> = (0..6).map(|i| bench_scene(&bench, &prep, 10 + i).unwrap()).collect();
    for (label, hidden, n_scenes) in [
        ("hidden 8, 2 scenes", 8usize, 2usize),
        ("hidden 18, 6 scenes", 18, 6),
        ("hidden 8, 6 scenes", 8, 6),
    ] {
        let cfg = TrainConfig {
            steps: 3000,
            lr: 3e-3,
            hidden,
            toggles: group_toggles("E").unwrap(),
            ..TrainConfig::default()
        };
        println!("{label}:");
        gap_trajectory(&pool[..n_scenes], &cfg);
    }
}

#[test]
#[ignore]
fn probe_gap_strong_wd() {
    let bench = BenchConfig {
        total_points: 6000,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let scenes: Vec<_> = (0..2).map(|i| bench_scene(&bench, &prep, 10 + i).unwrap()).collect();
    for wd in [0.3, 0.5] {
        let cfg = TrainConfig {
            steps: 3000,
            lr: 3e-3,
            weight_decay: wd,
            toggles: group_toggles("E").unwrap(),
            ..TrainConfig::default()
        };
        println!("wd {wd}:");
        gap_trajectory(&scenes, &cfg);
    }
}

#[test]
#[ignore]
fn probe_gap_eps() {
    let bench = BenchConfig {
        total_points: 6000,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let scenes: Vec<_> = (0..2).map(|i| bench_scene(&bench, &prep, 10 + i).unwrap()).collect();
    for (eps, wd) in [(1e-8, 1e-2), (1e-8, 2e-2)] {
        let cfg = TrainConfig {
            steps: 3500,
            lr: 3e-3,
            weight_decay: wd,
            eps,
            toggles: group_toggles("E").unwrap(),
            ..TrainConfig::default()
        };
        println!("eps {eps:e} wd {wd}:");
        gap_trajectory(&scenes, &cfg);
    }
}

#[test]
#[ignore]
fn probe_gap_diag() {
    let bench = BenchConfig {
        total_points: 6000,
        image_size: 128,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let scenes: Vec<_> = (0..2).map(|i| bench_scene(&bench, &prep, 10 + i).unwrap()).collect();
    let cfg = TrainConfig {
        steps: 1750,
        lr: 3e-3,
        toggles: group_toggles("E").unwrap(),
        ..TrainConfig::default()
    };
    let out = geodistill::trainer::train(&scenes, &cfg).unwrap();
    let (mut wf, mut wc) = (Vec::new(), Vec::new());
    for s in &scenes {
        let w = geodistill::distill::usd_weights_eval(&out.params, &s.inputs.f3dg, &s.inputs.f2d, &s.inputs.part).unwrap();
        for (i, &wi) in w.iter().enumerate() {
            if s.inputs.hits[i] == 0 { continue; }
            if s.corrupted_frac[i] > 0.5 { wf.push(wi); } else { wc.push(wi); }
        }
    }
    for thr in [0.0f64, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5] {
        let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for s in &scenes {
            let w = geodistill::distill::usd_weights_eval(&out.params, &s.inputs.f3dg, &s.inputs.f2d, &s.inputs.part).unwrap();
            for (i, &wi) in w.iter().enumerate() {
                if s.inputs.hits[i] == 0 { continue; }
                if s.corrupted_frac[i] > thr { a += wi; na += 1; } else { b += wi; nb += 1; }
            }
        }
        println!("thr {thr}: flagged n {na} mean {:.4}; clean n {nb} mean {:.4}; gap {:+.4}", a / na as f64, b / nb as f64, b / nb as f64 - a / na as f64);
    }
    for (name, v) in [("flagged", &mut wf), ("clean", &mut wc)] {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| v[((v.len() - 1) as f64 * p) as usize];
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let mlogit = v.iter().map(|w| (w / (1.0 - w)).ln()).sum::<f64>() / v.len() as f64;
        println!(
            "{name}: n {} mean {:.4} mean-logit {:+.3} q10 {:.4} q25 {:.4} q50 {:.4} q75 {:.4} q90 {:.4}",
            v.len(), mean, mlogit, q(0.1), q(0.25), q(0.5), q(0.75), q(0.9)
        );
    }
}

#[test]
#[ignore]
fn probe_gap_decompose() {
    use geodistill::superpoint::{broadcast, pool_mean};
    let bench = BenchConfig {
        total_points: 6000,
        image_size: 128,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let cfg = TrainConfig {
        steps: 1500,
        lr: 1e-2,
        toggles: group_toggles("E").unwrap(),
        ..TrainConfig::default()
    };
    for seed in [0u64, 2] {
        let mut c = cfg.clone();
        c.seed = seed;
        let scenes: Vec<_> = (0..2)
            .map(|i| bench_scene(&bench, &prep, seed * 1000 + i).unwrap())
            .collect();
        println!("seed {seed}:");
        let out = geodistill::trainer::train_with_callback(&scenes, &c, None, |step, params, _| {
            if (step + 1) % 150 == 0 {
                report(params, &scenes, step + 1);
            }
        })
        .unwrap();
        let a = out.params.get("uncertainty.w").unwrap().clone();
        let b = out.params.get("uncertainty.b").unwrap().data()[0];
        let _ = (a, b);
    }
}

fn report(params: &geodistill::ParamStore, scenes: &[geodistill::trainer::PreparedScene], step: usize) {
    use geodistill::superpoint::{broadcast, pool_mean};
    let a = params.get("uncertainty.w").unwrap().clone();
    let b = params.get("uncertainty.b").unwrap().data()[0];
    let c1 = scenes[0].inputs.f3dg.cols();
    let mut acc = std::collections::BTreeMap::new();
    {
        for s in scenes {
            let sg = pool_mean(&s.inputs.f3dg, &s.inputs.part).unwrap();
            let sf = pool_mean(&s.inputs.f2d, &s.inputs.part).unwrap();
            let bg = broadcast(&sg, &s.inputs.part).unwrap();
            let bf = broadcast(&sf, &s.inputs.part).unwrap();
            for i in 0..s.inputs.f3dg.rows() {
                if s.inputs.hits[i] == 0 { continue; }
                let mut zg = 0.0;
                for j in 0..c1 {
                    zg += (bg.get(i, j) - s.inputs.f3dg.get(i, j)) * a.get(j, 0);
                }
                let mut zf = 0.0;
                for j in 0..s.inputs.f2d.cols() {
                    zf += (bf.get(i, j) - s.inputs.f2d.get(i, j)) * a.get(c1 + j, 0);
                }
                let key = if s.corrupted_frac[i] > 0.5 { "flagged" } else { "clean" };
                let e = acc.entry(key).or_insert((0.0, 0.0, 0.0, 0usize));
                e.0 += zg;
                e.1 += zf;
                e.2 += 1.0 / (1.0 + (-(zg + zf + b)).exp());
                e.3 += 1;
            }
        }
    }
    let f = acc["flagged"];
    let c = acc["clean"];
    println!(
        "  step {step} bias {b:+.3}: clean zg {:+.3} zf {:+.3} W {:.4} | flagged zg {:+.3} zf {:+.3} W {:.4} | gap {:+.4}",
        c.0 / c.3 as f64, c.1 / c.3 as f64, c.2 / c.3 as f64,
        f.0 / f.3 as f64, f.1 / f.3 as f64, f.2 / f.3 as f64,
        c.2 / c.3 as f64 - f.2 / f.3 as f64
    );
}

fn curated_spec(variant: u64, bench: &BenchConfig) -> geodistill::synthbench::SceneSpec {
    use geodistill::synthbench::{PrimitiveSpec, SceneSpec, Shape};
    let mut spec = SceneSpec::benchmark(variant);
    // well-separated objects over the floor: bleed happens mostly against
    // the floor backdrop, not between objects
    let objs: Vec<(Shape, u32, [f64; 3], [f64; 3])> = match variant % 4 {
        0 => vec![
            (Shape::Sphere, 1, [-1.2, -1.2, 0.8], [0.35, 0.35, 0.35]),
            (Shape::Sphere, 1, [1.3, -1.1, 1.0], [0.3, 0.3, 0.3]),
            (Shape::Cylinder, 2, [-1.3, 1.2, 0.9], [0.3, 0.3, 0.45]),
            (Shape::Cylinder, 2, [1.2, 1.3, 0.8], [0.35, 0.35, 0.4]),
            (Shape::Box, 3, [0.0, -1.5, 0.9], [0.35, 0.35, 0.35]),
            (Shape::Box, 3, [0.0, 1.5, 1.0], [0.4, 0.4, 0.4]),
        ],
        1 => vec![
            (Shape::Sphere, 1, [0.0, -1.4, 0.9], [0.4, 0.4, 0.4]),
            (Shape::Sphere, 1, [-1.4, 0.0, 0.75], [0.32, 0.32, 0.32]),
            (Shape::Cylinder, 2, [1.4, 0.0, 0.85], [0.32, 0.32, 0.5]),
            (Shape::Cylinder, 2, [0.0, 1.4, 1.0], [0.28, 0.28, 0.45]),
            (Shape::Box, 3, [-1.1, -1.1, 1.05], [0.35, 0.35, 0.35]),
            (Shape::Box, 3, [1.1, 1.1, 0.85], [0.38, 0.38, 0.38]),
        ],
        2 => vec![
            (Shape::Sphere, 1, [1.2, 1.2, 0.85], [0.36, 0.36, 0.36]),
            (Shape::Sphere, 1, [-1.3, 1.1, 0.95], [0.3, 0.3, 0.3]),
            (Shape::Cylinder, 2, [1.3, -1.2, 0.9], [0.3, 0.3, 0.5]),
            (Shape::Cylinder, 2, [-1.2, -1.3, 0.8], [0.34, 0.34, 0.42]),
            (Shape::Box, 3, [1.5, 0.0, 0.95], [0.36, 0.36, 0.36]),
            (Shape::Box, 3, [-1.5, 0.0, 1.0], [0.4, 0.4, 0.4]),
        ],
        _ => vec![
            (Shape::Sphere, 1, [0.0, 1.5, 0.8], [0.38, 0.38, 0.38]),
            (Shape::Sphere, 1, [1.4, -0.6, 0.9], [0.33, 0.33, 0.33]),
            (Shape::Cylinder, 2, [-1.4, -0.6, 0.95], [0.3, 0.3, 0.48]),
            (Shape::Cylinder, 2, [0.6, -1.4, 0.85], [0.3, 0.3, 0.42]),
            (Shape::Box, 3, [-0.7, 1.3, 1.0], [0.37, 0.37, 0.37]),
            (Shape::Box, 3, [-1.3, 0.7, 0.85], [0.36, 0.36, 0.36]),
        ],
    };
    spec.primitives = vec![PrimitiveSpec {
        shape: Shape::Plane,
        center: [0.0, 0.0, 0.0],
        scale: [3.6, 3.6, 1.0],
        class_id: 0,
    }];
    for (shape, class_id, center, scale) in objs {
        spec.primitives.push(PrimitiveSpec { shape, center, scale, class_id });
    }
    spec.total_points = bench.total_points;
    spec.camera_count = bench.camera_count;
    spec.image_size = bench.image_size;
    spec.corruption = bench.corruption;
    spec
}

#[test]
#[ignore]
fn probe_gap_curated() {
    let bench = BenchConfig {
        total_points: 6000,
        image_size: 128,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let cfg = TrainConfig {
        steps: 1750,
        lr: 3e-3,
        toggles: group_toggles("E").unwrap(),
        ..TrainConfig::default()
    };
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let mut c = cfg.clone();
        c.seed = seed;
        let scenes: Vec<_> = (0..2u64)
            .map(|k| {
                let spec = curated_spec(k, &bench);
                let gen_seed = seed * 31 + k;
                let scene = geodistill::synthbench::generate(&spec, gen_seed).unwrap();
                let rendered =
                    geodistill::synthbench::render_views(&scene, &spec, gen_seed ^ 0x51de).unwrap();
                geodistill::trainer::prepare_scene(&scene, &rendered.views, Some(&rendered.bleed_flags), &prep)
                    .unwrap()
            })
            .collect();
        let out = train(&scenes, &c).unwrap();
        let gap = weight_gap_at(&out.params, &scenes, 0.5);
        println!("seed {seed}: gap {gap:+.4}");
        gaps.push(gap);
    }
    println!("mean gap {:+.4}", gaps.iter().sum::<f64>() / gaps.len() as f64);
}

#[test]
#[ignore]
fn probe_imr_sweep() {
    let bench = BenchConfig {
        total_points: 6000,
        ..BenchConfig::default()
    };
    for (lr, l2, hidden, n_scenes) in [
        (3e-3, 0.25, 48usize, 2usize),
        (3e-3, 0.4, 0, 2),
        (6e-3, 0.25, 0, 2),
        (3e-3, 0.25, 0, 3),
    ] {
        let mut cfg = TrainConfig {
            steps: 500,
            lr,
            hidden,
            toggles: group_toggles("F").unwrap(),
            ..TrainConfig::default()
        };
        cfg.distill.lambda2 = l2;
        let scenes: Vec<_> = (0..n_scenes as u64)
            .map(|i| bench_scene(&bench, &cfg.prep, 10 + i).unwrap())
            .collect();
        let heldout = bench_scene(&bench, &cfg.prep, 910).unwrap();
        let mut l_mask = Vec::new();
        let mut iou0 = None;
        let out = geodistill::trainer::train_with_callback(&scenes, &cfg, None, |step, params, rep| {
            if step == 0 {
                iou0 = Some(heldout_mask_iou(params, &heldout, 77));
            }
            l_mask.push(rep.l_mask);
        })
        .unwrap();
        let iou_end = heldout_mask_iou(&out.params, &heldout, 77);
        let ma: Vec<f64> = (0..=l_mask.len() - 100)
            .map(|i| l_mask[i..i + 100].iter().sum::<f64>() / 100.0)
            .collect();
        let max_uptick = ma.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        println!(
            "lr {lr} l2 {l2} hidden {hidden} scenes {n_scenes}: ma {:.4}->{:.4} max_uptick {max_uptick:.2e}; IoU {:.4} -> {:.4} (delta {:+.4})",
            ma[0], ma[ma.len() - 1], iou0.unwrap(), iou_end, iou_end - iou0.unwrap()
        );
    }
}

fn curated_scene(variant: u64, gen_seed: u64, bench: &BenchConfig, prep: &geodistill::trainer::PrepConfig) -> geodistill::trainer::PreparedScene {
    let spec = curated_spec(variant, bench);
    let scene = geodistill::synthbench::generate(&spec, gen_seed).unwrap();
    let rendered = geodistill::synthbench::render_views(&scene, &spec, gen_seed ^ 0x51de).unwrap();
    geodistill::trainer::prepare_scene(&scene, &rendered.views, Some(&rendered.bleed_flags), prep).unwrap()
}

#[test]
#[ignore]
fn probe_ablation_curated() {
    let bench = BenchConfig {
        total_points: 6000,
        image_size: 128,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let mut cfg0 = TrainConfig {
        steps: 1500,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    for (l2, l3) in [(0.2, 0.03)] {
    cfg0.distill.lambda2 = l2;
    cfg0.distill.lambda3 = l3;
    println!("lambda2 {l2} lambda3 {l3}:");
    for seed in [0u64, 1] {
        let train_set: Vec<_> = (0..2u64).map(|k| curated_scene(k, seed * 31 + k, &bench, &prep)).collect();
        let eval_set: Vec<_> = (2..4u64).map(|k| curated_scene(k, seed * 31 + k, &bench, &prep)).collect();
        for name in ["A", "D", "E", "F", "G", "H", "I"] {
            let mut c = cfg0.clone();
            c.seed = seed;
            c.toggles = group_toggles(name).unwrap();
            let t = Instant::now();
            let out = train(&train_set, &c).unwrap();
            let mut miou = 0.0;
            for s in &eval_set {
                miou += evaluate_scene(&out.params, s).unwrap().miou / eval_set.len() as f64;
            }
            println!("seed {seed} group {name}: miou {miou:.4} ({:?})", t.elapsed());
        }
    }
    }
}

fn wall_scene(
    variant: u64,
    gen_seed: u64,
    bench: &BenchConfig,
    prep: &geodistill::trainer::PrepConfig,
) -> geodistill::trainer::PreparedScene {
    let spec = wall_spec(variant, bench);
    let scene = geodistill::synthbench::generate(&spec, gen_seed).unwrap();
    let rendered = geodistill::synthbench::render_views(&scene, &spec, gen_seed ^ 0x51de).unwrap();
    geodistill::trainer::prepare_scene(&scene, &rendered.views, Some(&rendered.bleed_flags), prep).unwrap()
}

#[test]
#[ignore]
fn probe_ablation_wall() {
    let bench = BenchConfig {
        total_points: 6000,
        image_size: 128,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let mut cfg0 = TrainConfig {
        steps: 1500,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    for (l2, l3) in [(0.2, 0.03)] {
        cfg0.distill.lambda2 = l2;
        cfg0.distill.lambda3 = l3;
        println!("lambda2 {l2} lambda3 {l3}:");
        for seed in [0u64, 1] {
            let train_set: Vec<_> =
                (0..2u64).map(|k| wall_scene(k, seed * 31 + k, &bench, &prep)).collect();
            let eval_set: Vec<_> =
                (2..4u64).map(|k| wall_scene(k, seed * 31 + k, &bench, &prep)).collect();
            for name in ["A", "D", "E", "F", "G", "H", "I"] {
                let mut c = cfg0.clone();
                c.seed = seed;
                c.toggles = group_toggles(name).unwrap();
                let t = Instant::now();
                let out = train(&train_set, &c).unwrap();
                let mut miou = 0.0;
                for s in &eval_set {
                    miou += evaluate_scene(&out.params, s).unwrap().miou / eval_set.len() as f64;
                }
                println!("seed {seed} group {name}: miou {miou:.4} ({:?})", t.elapsed());
            }
        }
    }
}

fn pillar_scene(
    variant: u64,
    gen_seed: u64,
    bench: &BenchConfig,
    prep: &geodistill::trainer::PrepConfig,
) -> geodistill::trainer::PreparedScene {
    let spec = pillar_spec(variant, bench);
    let scene = geodistill::synthbench::generate(&spec, gen_seed).unwrap();
    let rendered = geodistill::synthbench::render_views(&scene, &spec, gen_seed ^ 0x51de).unwrap();
    geodistill::trainer::prepare_scene(&scene, &rendered.views, Some(&rendered.bleed_flags), prep).unwrap()
}

#[test]
#[ignore]
fn probe_ablation_pillar() {
    let bench = BenchConfig {
        total_points: 6000,
        image_size: 128,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let mut cfg0 = TrainConfig {
        steps: 700,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    for (l2, l3) in [(0.3, 0.05)] {
        cfg0.distill.lambda2 = l2;
        cfg0.distill.lambda3 = l3;
        println!("lambda2 {l2} lambda3 {l3}:");
        for seed in [0u64, 1] {
            let train_set: Vec<_> =
                (0..2u64).map(|k| pillar_scene(k, seed * 31 + k, &bench, &prep)).collect();
            let eval_set: Vec<_> =
                (2..4u64).map(|k| pillar_scene(k, seed * 31 + k, &bench, &prep)).collect();
            for name in ["A", "D", "E", "F", "G", "H", "I"] {
                let mut c = cfg0.clone();
                c.seed = seed;
                c.toggles = group_toggles(name).unwrap();
                let t = Instant::now();
                let out = train(&train_set, &c).unwrap();
                let mut miou = 0.0;
                for s in &eval_set {
                    miou += evaluate_scene(&out.params, s).unwrap().miou / eval_set.len() as f64;
                }
                println!("seed {seed} group {name}: miou {miou:.4} ({:?})", t.elapsed());
            }
        }
    }
}

fn curated_spec_boxless(variant: u64, bench: &BenchConfig) -> geodistill::synthbench::SceneSpec {
    use geodistill::synthbench::Shape;
    let mut spec = curated_spec(variant, bench);
    for p in spec.primitives.iter_mut() {
        if matches!(p.shape, Shape::Box) {
            // alternate replacement keeps both object classes populated
            if p.center[0] + p.center[1] > 0.0 {
                p.shape = Shape::Sphere;
                let r = p.scale[0];
                p.scale = [r, r, r];
                p.class_id = 1;
            } else {
                p.shape = Shape::Cylinder;
                p.scale[2] *= 1.3;
                p.class_id = 2;
            }
        }
    }
    spec.n_classes = 3;
    spec
}

#[test]
#[ignore]
fn probe_ablation_boxless() {
    let bench = BenchConfig {
        total_points: 6000,
        image_size: 128,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let mut cfg0 = TrainConfig {
        steps: 700,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    cfg0.distill.lambda2 = 0.1;
    cfg0.distill.lambda3 = 0.1;
    for seed in [0u64, 1] {
        let mk = |k: u64| {
            let spec = curated_spec_boxless(k, &bench);
            let gen_seed = seed * 31 + k;
            let scene = geodistill::synthbench::generate(&spec, gen_seed).unwrap();
            let rendered = geodistill::synthbench::render_views(&scene, &spec, gen_seed ^ 0x51de).unwrap();
            geodistill::trainer::prepare_scene(&scene, &rendered.views, Some(&rendered.bleed_flags), &prep).unwrap()
        };
        let train_set: Vec<_> = (0..2u64).map(mk).collect();
        let eval_set: Vec<_> = (2..4u64).map(mk).collect();
        for name in ["A", "D", "E", "F", "G", "H", "I"] {
            let mut c = cfg0.clone();
            c.seed = seed;
            c.toggles = group_toggles(name).unwrap();
            let t = Instant::now();
            let out = train(&train_set, &c).unwrap();
            let mut miou = 0.0;
            for s in &eval_set {
                miou += evaluate_scene(&out.params, s).unwrap().miou / eval_set.len() as f64;
            }
            println!("seed {seed} group {name}: miou {miou:.4} ({:?})", t.elapsed());
        }
    }
}

fn hard_boxless_spec(variant: u64, bench: &BenchConfig) -> geodistill::synthbench::SceneSpec {
    use geodistill::synthbench::{PrimitiveSpec, SceneSpec, Shape};
    let mut spec = SceneSpec::benchmark(variant);
    // 3 spheres + 3 cylinders with mixed sizes and heights; the small
    // instances have a high boundary-to-interior pixel ratio, so bleed
    // corrupts a larger fraction of their 2D hits
    let objs: Vec<(Shape, u32, [f64; 3], [f64; 3])> = match variant % 4 {
        0 => vec![
            (Shape::Sphere, 1, [-1.2, -1.2, 0.8], [0.35, 0.35, 0.35]),
            (Shape::Sphere, 1, [1.3, -1.1, 0.5], [0.22, 0.22, 0.22]),
            (Shape::Sphere, 1, [0.1, 0.2, 1.1], [0.28, 0.28, 0.28]),
            (Shape::Cylinder, 2, [-1.3, 1.2, 0.9], [0.3, 0.3, 0.45]),
            (Shape::Cylinder, 2, [1.2, 1.3, 0.45], [0.2, 0.2, 0.3]),
            (Shape::Cylinder, 2, [0.0, -1.5, 0.9], [0.26, 0.26, 0.5]),
        ],
        1 => vec![
            (Shape::Sphere, 1, [0.0, -1.4, 0.9], [0.38, 0.38, 0.38]),
            (Shape::Sphere, 1, [-1.4, 0.0, 0.45], [0.2, 0.2, 0.2]),
            (Shape::Sphere, 1, [0.9, 0.9, 1.0], [0.27, 0.27, 0.27]),
            (Shape::Cylinder, 2, [1.4, 0.0, 0.85], [0.32, 0.32, 0.5]),
            (Shape::Cylinder, 2, [0.0, 1.4, 0.5], [0.18, 0.18, 0.32]),
            (Shape::Cylinder, 2, [-1.1, -1.1, 1.0], [0.27, 0.27, 0.45]),
        ],
        2 => vec![
            (Shape::Sphere, 1, [1.2, 1.2, 0.85], [0.34, 0.34, 0.34]),
            (Shape::Sphere, 1, [-1.3, 1.1, 0.5], [0.21, 0.21, 0.21]),
            (Shape::Sphere, 1, [-0.2, -0.3, 1.05], [0.29, 0.29, 0.29]),
            (Shape::Cylinder, 2, [1.3, -1.2, 0.9], [0.3, 0.3, 0.5]),
            (Shape::Cylinder, 2, [-1.2, -1.3, 0.45], [0.19, 0.19, 0.3]),
            (Shape::Cylinder, 2, [0.1, 1.5, 0.95], [0.26, 0.26, 0.46]),
        ],
        _ => vec![
            (Shape::Sphere, 1, [0.0, 1.5, 0.8], [0.36, 0.36, 0.36]),
            (Shape::Sphere, 1, [1.4, -0.6, 0.45], [0.22, 0.22, 0.22]),
            (Shape::Sphere, 1, [-0.9, -0.9, 1.05], [0.28, 0.28, 0.28]),
            (Shape::Cylinder, 2, [-1.4, -0.6, 0.95], [0.3, 0.3, 0.48]),
            (Shape::Cylinder, 2, [0.6, -1.4, 0.5], [0.2, 0.2, 0.34]),
            (Shape::Cylinder, 2, [-0.7, 1.1, 0.9], [0.27, 0.27, 0.44]),
        ],
    };
    spec.primitives = vec![PrimitiveSpec {
        shape: Shape::Plane,
        center: [0.0, 0.0, 0.0],
        scale: [3.6, 3.6, 1.0],
        class_id: 0,
    }];
    for (shape, class_id, center, scale) in objs {
        spec.primitives.push(PrimitiveSpec { shape, center, scale, class_id });
    }
    spec.n_classes = 3;
    spec.total_points = bench.total_points;
    spec.camera_count = bench.camera_count;
    spec.image_size = bench.image_size;
    spec.corruption = bench.corruption;
    spec
}

fn hard_boxless_scene(
    variant: u64,
    gen_seed: u64,
    bench: &BenchConfig,
    prep: &geodistill::trainer::PrepConfig,
) -> geodistill::trainer::PreparedScene {
    let spec = hard_boxless_spec(variant, bench);
    let scene = geodistill::synthbench::generate(&spec, gen_seed).unwrap();
    let rendered = geodistill::synthbench::render_views(&scene, &spec, gen_seed ^ 0x51de).unwrap();
    geodistill::trainer::prepare_scene(&scene, &rendered.views, Some(&rendered.bleed_flags), prep).unwrap()
}

#[test]
#[ignore]
fn probe_ablation_hard_boxless() {
    let bench = BenchConfig {
        total_points: 6000,
        camera_count: 7,
        image_size: 128,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let mut cfg0 = TrainConfig {
        steps: 1500,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    cfg0.distill.lambda2 = 0.2;
    cfg0.distill.lambda3 = 0.03;
    for seed in [0u64, 1] {
        let train_set: Vec<_> =
            (0..2u64).map(|k| hard_boxless_scene(k, seed * 31 + k, &bench, &prep)).collect();
        let eval_set: Vec<_> =
            (2..4u64).map(|k| hard_boxless_scene(k, seed * 31 + k, &bench, &prep)).collect();
        for name in ["A", "D", "E", "F", "G", "H", "I"] {
            let mut c = cfg0.clone();
            c.seed = seed;
            c.toggles = group_toggles(name).unwrap();
            let t = Instant::now();
            let out = train(&train_set, &c).unwrap();
            let mut miou = 0.0;
            for s in &eval_set {
                miou += evaluate_scene(&out.params, s).unwrap().miou / eval_set.len() as f64;
            }
            println!("seed {seed} group {name}: miou {miou:.4} ({:?})", t.elapsed());
        }
    }
}

fn pocket_spec(variant: u64, bench: &BenchConfig) -> geodistill::synthbench::SceneSpec {
    use geodistill::synthbench::{PrimitiveSpec, Shape};
    let mut spec = curated_spec_boxless(variant, bench);
    // tuck small instances low beside large ones: occluded from the
    // high cameras, bleed-corrupted from the low ones
    let mut small = Vec::new();
    let mut seen = (false, false);
    for p in &spec.primitives {
        match p.shape {
            Shape::Sphere if !seen.0 => {
                seen.0 = true;
                small.push(PrimitiveSpec {
                    shape: Shape::Sphere,
                    center: [p.center[0] * 0.72, p.center[1] * 0.72, 0.17],
                    scale: [0.17, 0.17, 0.17],
                    class_id: 1,
                });
            }
            Shape::Cylinder if !seen.1 => {
                seen.1 = true;
                small.push(PrimitiveSpec {
                    shape: Shape::Cylinder,
                    center: [p.center[0] * 0.72, p.center[1] * 0.72, 0.2],
                    scale: [0.15, 0.15, 0.2],
                    class_id: 2,
                });
            }
            _ => {}
        }
    }
    spec.primitives.extend(small);
    spec
}

#[test]
#[ignore]
fn probe_ablation_pockets() {
    let bench = BenchConfig {
        total_points: 6000,
        image_size: 128,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let mut cfg0 = TrainConfig {
        steps: 700,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    cfg0.distill.lambda2 = 0.1;
    cfg0.distill.lambda3 = 0.1;
    for seed in [0u64, 1] {
        let mk = |k: u64| {
            let spec = pocket_spec(k, &bench);
            let gen_seed = seed * 31 + k;
            let scene = geodistill::synthbench::generate(&spec, gen_seed).unwrap();
            let rendered = geodistill::synthbench::render_views(&scene, &spec, gen_seed ^ 0x51de).unwrap();
            geodistill::trainer::prepare_scene(&scene, &rendered.views, Some(&rendered.bleed_flags), &prep).unwrap()
        };
        let train_set: Vec<_> = (0..2u64).map(mk).collect();
        let eval_set: Vec<_> = (2..4u64).map(mk).collect();
        for name in ["A", "D", "E", "F", "G", "H", "I"] {
            let mut c = cfg0.clone();
            c.seed = seed;
            c.toggles = group_toggles(name).unwrap();
            let t = Instant::now();
            let out = train(&train_set, &c).unwrap();
            let mut miou = 0.0;
            let mut per: Vec<Vec<f64>> = Vec::new();
            for s in &eval_set {
                let m = evaluate_scene(&out.params, s).unwrap();
                miou += m.miou / eval_set.len() as f64;
                per.push(m.per_class_iou.iter().map(|x| x.unwrap_or(-1.0)).collect());
            }
            println!(
                "seed {seed} group {name}: miou {miou:.4} per-class {:?} ({:?})",
                per.iter()
                    .map(|v| v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
                t.elapsed()
            );
        }
    }
}

#[test]
#[ignore]
fn probe_gram_structure() {
    let bench = BenchConfig {
        total_points: 6000,
        image_size: 128,
        ..BenchConfig::default()
    };
    let prep = geodistill::trainer::PrepConfig::default();
    let specs: [(&str, fn(u64, &BenchConfig) -> geodistill::synthbench::SceneSpec); 3] =
        [("curated", curated_spec), ("pillar", pillar_spec), ("wall", wall_spec)];
    for (label, spec_fn) in specs {
    println!("{label}:");
    for k in 0..2u64 {
        let spec = spec_fn(k, &bench);
        let scene = geodistill::synthbench::generate(&spec, k).unwrap();
        let rendered = geodistill::synthbench::render_views(&scene, &spec, k ^ 0x51de).unwrap();
        let s = geodistill::trainer::prepare_scene(&scene, &rendered.views, Some(&rendered.bleed_flags), &prep).unwrap();
        // normalized mean geometric descriptor per instance mask
        let masks = &s.inputs.masks.masks;
        let c1 = s.inputs.f3dg.cols();
        let mut embs: Vec<(u32, Vec<f64>)> = Vec::new();
        for (mi, mask) in masks.iter().enumerate() {
            let mut e = vec![0.0; c1];
            let mut n = 0usize;
            let mut class_votes = std::collections::BTreeMap::new();
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    for j in 0..c1 {
                        e[j] += s.inputs.f3dg.get(i, j);
                    }
                    n += 1;
                    *class_votes.entry(s.gt_class[i]).or_insert(0usize) += 1;
                }
            }
            if n == 0 { continue; }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let class = *class_votes.iter().max_by_key(|(_, v)| **v).unwrap().0;
            embs.push((class, e.iter().map(|x| x / norm).collect()));
            let _ = mi;
        }
        let (mut win, mut nw, mut cross, mut ncr) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let cos: f64 = embs[i].1.iter().zip(&embs[j].1).map(|(a, b)| a * b).sum();
                if embs[i].0 == embs[j].0 {
                    win += cos;
                    nw += 1;
                } else {
                    cross += cos;
                    ncr += 1;
                }
            }
        }
        println!(
            "variant {k}: {} instances; within-class cos {:.3} (n {nw}), cross-class cos {:.3} (n {ncr})",
            embs.len(), win / nw as f64, cross / ncr as f64
        );
        // pairwise by class for detail
        let mut by: std::collections::BTreeMap<(u32, u32), (f64, usize)> = std::collections::BTreeMap::new();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let cos: f64 = embs[i].1.iter().zip(&embs[j].1).map(|(a, b)| a * b).sum();
                let key = (embs[i].0.min(embs[j].0), embs[i].0.max(embs[j].0));
                let e = by.entry(key).or_insert((0.0, 0));
                e.0 += cos;
                e.1 += 1;
            }
        }
        for ((a, b), (sum, n)) in by {
            println!("  class {a}-{b}: mean cos {:.3} (n {n})", sum / n as f64);
        }
    }
    }
}

fn wall_spec(variant: u64, bench: &BenchConfig) -> geodistill::synthbench::SceneSpec {
    use geodistill::synthbench::Shape;
    let mut spec = curated_spec(variant, bench);
    // wall slabs: large planar faces with horizontal normals — distinct
    // from the floor (vertical normal) and from curved objects
    let mut flip = false;
    for p in spec.primitives.iter_mut() {
        if matches!(p.shape, Shape::Box) {
            p.scale = if flip { [0.8, 0.07, 0.5] } else { [0.07, 0.8, 0.5] };
            p.center[2] = 0.5;
            flip = !flip;
        }
    }
    spec
}

fn pillar_spec(variant: u64, bench: &BenchConfig) -> geodistill::synthbench::SceneSpec {
    use geodistill::synthbench::Shape;
    let mut spec = curated_spec(variant, bench);
    // tall thin boxes: side faces dominate the pooled descriptor
    // (planarity-heavy, horizontal normals) instead of reading sphere-like
    for p in spec.primitives.iter_mut() {
        if matches!(p.shape, Shape::Box) {
            p.scale = [0.22, 0.22, 0.75];
            p.center[2] = 0.75;
        }
    }
    spec
}
