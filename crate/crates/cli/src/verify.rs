//! Fast invariant suite behind `fssam2 verify`.

use std::time::Instant;

use fssam2::data::{generate_synthetic_episode, Similarity};
use fssam2::eval::{iou_accumulate, EvalSpec, MetricsReport, OraclePredictor};
use fssam2::lora::{merge_lora, select_trainable, Strategy, StrategyRanks};
use fssam2::train::{
    adamw_step, bce_loss, cosine_lr, dice_loss, AdamWParams, OptimizerState, DICE_SMOOTH,
};
use fssam2::{
    evaluate, finite_difference_gradcheck, BinaryMask, EpisodeSource, EvalMode, FsSam2,
    ModelConfig, SyntheticConfig, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(), String>;
type DiceFn = fn(&mut Tape, Var, &BinaryMask) -> fssam2::Result<Var>;

/// Dice with the factor 2 dropped from the numerator.
fn broken_dice(tape: &mut Tape, logits: Var, target: &BinaryMask) -> fssam2::Result<Var> {
    let p = tape.sigmoid(logits);
    let t = tape.constant(target.to_tensor());
    let pt = tape.mul(p, t)?;
    let inter = tape.sum(pt);
    let num = tape.affine(inter, 1.0, DICE_SMOOTH);
    let p_sum = tape.sum(p);
    let den = tape.affine(p_sum, 1.0, target.count() as f64 + DICE_SMOOTH);
    let ratio = tape.div(num, den)?;
    Ok(tape.affine(ratio, -1.0, 1.0))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

fn random_mask(seed: u64, size: usize) -> BinaryMask {
    let mut r = rng(seed);
    let (y0, x0) = (r.gen_range(0..size / 2), r.gen_range(0..size / 2));
    let (h, w) = (r.gen_range(2..=size / 2), r.gen_range(2..=size / 2));
    BinaryMask::from_fn(size, size, |y, x| {
        (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x)
    })
}

fn support(seed: u64, size: usize, k: usize) -> Vec<(Tensor, BinaryMask)> {
    (0..k as u64)
        .map(|i| {
            (
                random(seed * 31 + i, &[3, size, size]),
                random_mask(seed * 31 + i, size),
            )
        })
        .collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: fssam2::Error) -> String {
    e.to_string()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn scalar_loss(f: DiceFn, z: &Tensor, t: &BinaryMask) -> Result<f64, String> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let out = f(&mut tape, v, t).map_err(err)?;
    Ok(tape.value(out).data()[0])
}

fn two_by_two() -> (Tensor, BinaryMask, [f64; 4]) {
    let z = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 0.0, 2.0]).expect("2×2");
    let t = BinaryMask::from_fn(2, 2, |y, x| y == x);
    (z, t, [1.0, 0.0, 0.0, 1.0])
}

fn check_bce() -> Check {
    let (z, t, tv) = two_by_two();
    let want = z
        .data()
        .iter()
        .zip(tv)
        .map(|(&z, t)| -(t * sigmoid(z).ln() + (1.0 - t) * (1.0 - sigmoid(z)).ln()))
        .sum::<f64>()
        / 4.0;
    let got = scalar_loss(bce_loss, &z, &t)?;
    ensure((got - want).abs() < 1e-12, || {
        format!("bce {got} vs {want}")
    })
}

fn check_dice(dice: DiceFn) -> Check {
    for seed in 0..20u64 {
        let (z, t) = if seed == 0 {
            let (z, t, _) = two_by_two();
            (z, t)
        } else {
            let z = random(seed, &[1, 6, 6]);
            (z.clone(), random_mask(seed, 6))
        };
        let p: Vec<f64> = z.data().iter().map(|&v| sigmoid(v)).collect();
        let inter: f64 = p
            .iter()
            .zip(t.bits())
            .filter(|(_, &b)| b)
            .map(|(p, _)| p)
            .sum();
        let want = 1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + t.count() as f64 + 1.0);
        let got = scalar_loss(dice, &z, &t)?;
        ensure((got - want).abs() < 1e-12, || {
            format!("case {seed}: dice {got} vs {want}")
        })?;
    }
    Ok(())
}

fn check_loss_gradcheck(dice: DiceFn) -> Check {
    let t = random_mask(3, 6);
    let report = finite_difference_gradcheck(
        |tape, v| {
            let b = bce_loss(tape, v[0], &t)?;
            let d = dice(tape, v[0], &t)?;
            tape.add(b, d)
        },
        &[random(4, &[1, 6, 6])],
        1e-5,
    )
    .map_err(err)?;
    ensure(report.max_relative_error < 1e-6, || format!("{report:?}"))
}

fn check_model_gradcheck() -> Check {
    let model = FsSam2::new(ModelConfig::tiny(), 1).map_err(err)?;
    let params: Vec<Tensor> = model
        .store()
        .iter()
        .enumerate()
        .map(|(i, (_, p))| {
            let noise = random(100 + i as u64, p.value.shape());
            let data = p
                .value
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + 0.2 * b)
                .collect();
            Tensor::new(p.value.shape().to_vec(), data).expect("same shape")
        })
        .collect();
    let q = random(5, &[3, 16, 16]);
    let s = support(6, 16, 2);
    let w = random(7, &[1, 16, 16]);
    let report = finite_difference_gradcheck(
        |tape, vars| {
            let bound = model.bind_vars(vars.to_vec());
            let z = model.forward(tape, &bound, &q, &s)?;
            let wv = tape.constant(w.clone());
            let p = tape.mul(z, wv)?;
            Ok(tape.sum(p))
        },
        &params,
        1e-4,
    )
    .map_err(err)?;
    ensure(report.max_relative_error < 1e-4, || format!("{report:?}"))
}

fn adapted_model(randomize: bool) -> Result<(FsSam2, FsSam2), String> {
    let base = FsSam2::new(ModelConfig::tiny(), 2).map_err(err)?;
    let mut adapted = base.clone();
    select_trainable(
        &mut adapted,
        Strategy::LoraEncMemDec,
        &StrategyRanks::default(),
        3,
    )
    .map_err(err)?;
    if randomize {
        let mut r = rng(8);
        let bs: Vec<_> = adapted.adapters().iter().map(|a| a.b).collect();
        for b in bs {
            for v in adapted.store_mut().get_mut(b).value.data_mut() {
                *v = r.gen_range(-0.2..0.2);
            }
        }
    }
    Ok((base, adapted))
}

fn check_lora_neutral() -> Check {
    let (base, adapted) = adapted_model(false)?;
    for seed in 0..5 {
        let q = random(10 + seed, &[3, 16, 16]);
        let s = support(20 + seed, 16, 2);
        let a = base.segment(&q, &s).map_err(err)?.logits;
        let b = adapted.segment(&q, &s).map_err(err)?.logits;
        ensure(a == b, || {
            format!("episode {seed}: logits differ by {}", a.max_abs_diff(&b))
        })?;
    }
    Ok(())
}

fn check_lora_merge() -> Check {
    let (base, adapted) = adapted_model(true)?;
    let mut merged = adapted.clone();
    merge_lora(&mut merged).map_err(err)?;
    ensure(merged.store().numel() == base.store().numel(), || {
        "merged parameter count changed".into()
    })?;
    for seed in 0..10 {
        let q = random(30 + seed, &[3, 16, 16]);
        let s = support(40 + seed, 16, 1 + seed as usize % 3);
        let a = adapted.segment(&q, &s).map_err(err)?.logits;
        let b = merged.segment(&q, &s).map_err(err)?.logits;
        let d = a.max_abs_diff(&b);
        ensure(d < 1e-9, || {
            format!("episode {seed}: merged differs by {d}")
        })?;
    }
    Ok(())
}

fn check_support_sets(duplicate: bool) -> Check {
    let model = FsSam2::new(ModelConfig::tiny(), 4).map_err(err)?;
    for k in [1usize, 2, 5] {
        let q = random(50 + k as u64, &[3, 16, 16]);
        let s = support(60 + k as u64, 16, k);
        let base = model.segment(&q, &s).map_err(err)?.logits;
        let other: Vec<_> = if duplicate {
            s.iter()
                .flat_map(|e| std::iter::repeat_n(e.clone(), 3))
                .collect()
        } else {
            s.iter().rev().cloned().collect()
        };
        let got = model.segment(&q, &other).map_err(err)?.logits;
        let d = base.max_abs_diff(&got);
        ensure(d < 1e-9, || format!("K={k}: logits moved by {d}"))?;
    }
    Ok(())
}

fn check_accumulation() -> Check {
    let mut report = MetricsReport::new(None, 1, 0, &[1]);
    let pred = BinaryMask::from_fn(1, 6, |_, x| x < 4);
    let truth = BinaryMask::from_fn(1, 6, |_, x| (2..6).contains(&x));
    iou_accumulate(&mut report, 1, &pred, &truth).map_err(err)?;
    let full = BinaryMask::from_fn(1, 6, |_, x| x < 4);
    iou_accumulate(&mut report, 1, &full, &full).map_err(err)?;
    let iou = report.class_iou(1).ok_or("class 1 missing")?;
    ensure((iou - 0.6).abs() < 1e-15, || {
        format!("accumulated IoU {iou}, expected 0.6")
    })
}

fn check_recount() -> Check {
    let classes = [1u32, 2, 3];
    let mut report = MetricsReport::new(None, 1, 0, &classes);
    let mut sums = [(0u64, 0u64); 3];
    let mut r = rng(9);
    for i in 0..100 {
        let c = classes[i % 3];
        let truth = random_mask(200 + i as u64, 8);
        let pred =
            BinaryMask::new(8, 8, (0..64).map(|_| r.gen_bool(0.3)).collect()).map_err(err)?;
        iou_accumulate(&mut report, c, &pred, &truth).map_err(err)?;
        for (p, t) in pred.bits().iter().zip(truth.bits()) {
            sums[i % 3].0 += u64::from(*p && *t);
            sums[i % 3].1 += u64::from(*p || *t);
        }
    }
    let want = sums.iter().map(|(i, u)| *i as f64 / *u as f64).sum::<f64>() / 3.0;
    let got = report.miou().ok_or("mIoU undefined")?;
    ensure(got == want, || format!("mIoU {got} vs recount {want}"))
}

fn check_oracle_eval() -> Check {
    let synth = SyntheticConfig {
        image_size: 16,
        ..Default::default()
    };
    let source = EpisodeSource::Synthetic {
        config: synth,
        similarity: Similarity::Independent,
    };
    let spec = EvalSpec {
        classes: &[1, 2, 3],
        fold: None,
        k: 1,
        n_episodes: 12,
        seed: 0,
        jobs: 1,
    };
    let m = evaluate(&OraclePredictor, &source, EvalMode::Standard, &spec)
        .map_err(err)?
        .miou();
    ensure(m == Some(1.0), || format!("oracle mIoU {m:?}"))
}

fn check_adamw() -> Check {
    let hp = AdamWParams::default();
    let (mut theta, mut m, mut v) = (1.0f64, 0.0, 0.0);
    let mut params = vec![Tensor::scalar(1.0)];
    let mut state = OptimizerState::for_params(&params);
    for t in 1..=10 {
        let g = 2.0 * theta;
        theta -= 0.1 * hp.weight_decay * theta;
        m = hp.beta1 * m + (1.0 - hp.beta1) * g;
        v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
        theta -=
            0.1 * (m / (1.0 - hp.beta1.powi(t))) / ((v / (1.0 - hp.beta2.powi(t))).sqrt() + hp.eps);
        let grad = Tensor::scalar(2.0 * params[0].data()[0]);
        adamw_step(&mut params, &[grad], &mut state, 0.1, &hp).map_err(err)?;
        let got = params[0].data()[0];
        ensure((got - theta).abs() < 1e-12, || {
            format!("step {t}: {got} vs {theta}")
        })?;
    }
    Ok(())
}

fn check_cosine() -> Check {
    ensure(cosine_lr(0, 40, 3e-4, 1e-6) == 3e-4, || "t = 0".into())?;
    ensure(cosine_lr(40, 40, 3e-4, 1e-6) == 1e-6, || "t = T".into())?;
    ensure(cosine_lr(41, 40, 3e-4, 1e-6) == 1e-6, || "t > T".into())?;
    let mid = cosine_lr(20, 40, 3e-4, 1e-6);
    ensure((mid - (3e-4 + 1e-6) / 2.0).abs() < 1e-18, || {
        format!("midpoint {mid}")
    })
}

fn check_video_like_episodes() -> Check {
    let cfg = SyntheticConfig::default();
    let mut r = rng(11);
    for class in cfg.class_ids() {
        let ep = generate_synthetic_episode(&cfg, class, 2, Similarity::VideoLike, &mut r)
            .map_err(err)?;
        ep.validate().map_err(err)?;
        ensure(!ep.query_mask.is_empty(), || {
            format!("class {class}: empty query mask")
        })?;
    }
    Ok(())
}

/// Runs every check, printing one line each; fails if any check fails.
pub fn run(mutate: Option<&str>) -> anyhow::Result<()> {
    let dice: DiceFn = match mutate {
        Some("dice") => broken_dice,
        _ => dice_loss,
    };
    let checks: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("bce_scalar_oracle", Box::new(check_bce)),
        ("dice_scalar_oracle", Box::new(move || check_dice(dice))),
        (
            "loss_gradcheck",
            Box::new(move || check_loss_gradcheck(dice)),
        ),
        ("model_gradcheck", Box::new(check_model_gradcheck)),
        ("lora_zero_init_neutral", Box::new(check_lora_neutral)),
        ("lora_merge_equivalence", Box::new(check_lora_merge)),
        (
            "support_permutation",
            Box::new(|| check_support_sets(false)),
        ),
        ("support_duplication", Box::new(|| check_support_sets(true))),
        ("iou_accumulation", Box::new(check_accumulation)),
        ("miou_recount", Box::new(check_recount)),
        ("oracle_evaluation", Box::new(check_oracle_eval)),
        ("adamw_scalar_reference", Box::new(check_adamw)),
        ("cosine_endpoints", Box::new(check_cosine)),
        ("synthetic_episodes", Box::new(check_video_like_episodes)),
    ];
    let mut failed = Vec::new();
    for (name, check) in &checks {
        let start = Instant::now();
        match check() {
            Ok(()) => println!("PASS {name} ({:.2?})", start.elapsed()),
            Err(reason) => {
                println!("FAIL {name}: {reason}");
                failed.push(*name);
            }
        }
    }
    println!(
        "{} of {} checks passed",
        checks.len() - failed.len(),
        checks.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(crate::check_failed(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}
