mod common;

use common::{box_mask, jitter, random_image, random_tensor, support};
use fssam2::model::FeatureMap;
use fssam2::nn::Bound;
use fssam2::{
    finite_difference_gradcheck, BinaryMask, Error, FsSam2, ModelConfig, Tape, Tensor, Var,
};

fn bound_constants(model: &FsSam2, tape: &mut Tape) -> Bound {
    let vars = model
        .store()
        .iter()
        .map(|(_, p)| tape.constant(p.value.clone()))
        .collect();
    model.bind_vars(vars)
}

fn gradcheck_config() -> ModelConfig {
    ModelConfig::tiny()
}

/// Parameters of `model` with noise so zero biases carry gradient signal.
fn params_of(model: &FsSam2, seed: u64) -> Vec<Tensor> {
    let mut m = model.clone();
    jitter(&mut m, seed, 0.2);
    m.store().iter().map(|(_, p)| p.value.clone()).collect()
}

fn project(tape: &mut Tape, out: Var, seed: u64) -> fssam2::Result<Var> {
    let r = tape.constant(random_tensor(seed, tape.shape(out)));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

#[test]
fn default_shapes() {
    let model = FsSam2::new(ModelConfig::default(), 0).unwrap();
    let mut tape = Tape::new();
    let bound = bound_constants(&model, &mut tape);
    let q = model
        .encode_image(&mut tape, &bound, &random_image(1, 64))
        .unwrap();
    assert_eq!((q.h, q.w), (8, 8));
    assert_eq!(tape.shape(q.tokens), &[64, 64]);

    let mem = model
        .encode_memory(&mut tape, &bound, &q, &box_mask(2, 64))
        .unwrap();
    assert_eq!(tape.shape(mem), &[64, 32]);

    let bank = model
        .build_memory_bank(&mut tape, &[mem, mem, mem])
        .unwrap();
    assert_eq!(tape.shape(bank.tokens), &[192, 32]);
    assert_eq!(bank.offsets, vec![0, 64, 128]);

    let cond = model.memory_attend(&mut tape, &bound, &q, &bank).unwrap();
    assert_eq!(tape.shape(cond.tokens), &[64, 64]);
    let logits = model.decode_mask(&mut tape, &bound, &cond).unwrap();
    assert_eq!(tape.shape(logits), &[1, 64, 64]);
}

#[test]
fn single_frame_bank_is_entry_plus_positions() {
    let model = FsSam2::new(ModelConfig::tiny(), 0).unwrap();
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::zeros(&[16, 8]));
    let bank = model.build_memory_bank(&mut tape, &[e]).unwrap();
    let pos = fssam2::nn::sinusoidal_positions(4, 4, 8).unwrap();
    assert_eq!(tape.value(bank.tokens), &pos);
    assert_eq!(bank.offsets, vec![0]);
}

#[test]
fn contract_and_shape_errors() {
    let cfg = ModelConfig::tiny();
    let model = FsSam2::new(cfg.clone(), 0).unwrap();
    let q = random_image(0, 16);
    assert!(matches!(model.segment(&q, &[]), Err(Error::Contract(_))));
    assert!(matches!(
        model.segment(&random_image(0, 32), &support(1, 16, 1)),
        Err(Error::Shape(_))
    ));
    let bad_mask = vec![(random_image(1, 16), BinaryMask::empty(8, 8))];
    assert!(matches!(model.segment(&q, &bad_mask), Err(Error::Shape(_))));

    let mut tape = Tape::new();
    assert!(matches!(
        model.build_memory_bank(&mut tape, &[]),
        Err(Error::Contract(_))
    ));
    let a = tape.constant(Tensor::zeros(&[16, 8]));
    let b = tape.constant(Tensor::zeros(&[9, 8]));
    assert!(matches!(
        model.build_memory_bank(&mut tape, &[a, b]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let model = FsSam2::new(ModelConfig::desk(), 3).unwrap();
    let q = random_image(4, 32);
    let s = support(5, 32, 2);
    let a = model.segment(&q, &s).unwrap();
    let b = model.segment(&q.clone(), &s.clone()).unwrap();
    assert_eq!(a, b);
    assert_eq!(FsSam2::new(ModelConfig::desk(), 3).unwrap(), model);
    assert_ne!(FsSam2::new(ModelConfig::desk(), 4).unwrap(), model);
}

#[test]
fn mask_is_positive_logits() {
    let mut model = FsSam2::new(ModelConfig::desk(), 6).unwrap();
    jitter(&mut model, 7, 0.5);
    for seed in 0..5 {
        let out = model
            .segment(&random_image(seed, 32), &support(seed + 10, 32, 1))
            .unwrap();
        assert_eq!(out.logits.shape(), &[1, 32, 32]);
        for (i, &bit) in out.mask.bits().iter().enumerate() {
            assert_eq!(bit, out.logits.data()[i] > 0.0);
        }
    }
}

#[test]
fn memory_tokens_depend_on_mask() {
    let model = FsSam2::new(ModelConfig::default(), 8).unwrap();
    let mut tape = Tape::new();
    let bound = bound_constants(&model, &mut tape);
    let feat = model
        .encode_image(&mut tape, &bound, &random_image(9, 64))
        .unwrap();
    let zero = model
        .encode_memory(&mut tape, &bound, &feat, &BinaryMask::empty(64, 64))
        .unwrap();
    let one = model
        .encode_memory(&mut tape, &bound, &feat, &BinaryMask::full(64, 64))
        .unwrap();
    assert!(tape.value(zero).l2_distance(tape.value(one)) > 0.0);
}

#[test]
fn flipping_support_mask_changes_query_logits() {
    let model = FsSam2::new(ModelConfig::desk(), 10).unwrap();
    let q = random_image(11, 32);
    let mut s = support(12, 32, 1);
    let a = model.segment(&q, &s).unwrap();
    s[0].1 = s[0].1.inverted();
    let b = model.segment(&q, &s).unwrap();
    assert!(a.logits.l2_distance(&b.logits) > 0.0);
}

#[test]
fn support_order_and_duplication_do_not_matter() {
    let mut model = FsSam2::new(ModelConfig::desk(), 13).unwrap();
    jitter(&mut model, 14, 0.3);
    let q = random_image(15, 32);

    let five = support(16, 32, 5);
    let base = model.segment(&q, &five).unwrap();
    for perm in [[4, 3, 2, 1, 0], [1, 3, 0, 4, 2], [2, 0, 4, 1, 3]] {
        let permuted: Vec<_> = perm.iter().map(|&i| five[i].clone()).collect();
        let out = model.segment(&q, &permuted).unwrap();
        assert!(out.logits.max_abs_diff(&base.logits) <= 1e-9);
    }

    let one = support(17, 32, 1);
    let single = model.segment(&q, &one).unwrap();
    for k in [2, 3, 5] {
        let dup = vec![one[0].clone(); k];
        let out = model.segment(&q, &dup).unwrap();
        assert!(out.logits.max_abs_diff(&single.logits) <= 1e-9, "K={k}");
    }
}

#[test]
fn duplicated_bank_leaves_memory_attention_unchanged() {
    let mut model = FsSam2::new(ModelConfig::desk(), 18).unwrap();
    jitter(&mut model, 19, 0.3);
    let mut tape = Tape::new();
    let bound = bound_constants(&model, &mut tape);
    let q = model
        .encode_image(&mut tape, &bound, &random_image(20, 32))
        .unwrap();
    let s = model
        .encode_image(&mut tape, &bound, &random_image(21, 32))
        .unwrap();
    let m = model
        .encode_memory(&mut tape, &bound, &s, &box_mask(22, 32))
        .unwrap();
    let single = model.build_memory_bank(&mut tape, &[m]).unwrap();
    let base = model.memory_attend(&mut tape, &bound, &q, &single).unwrap();
    for k in [2, 3] {
        let bank = model.build_memory_bank(&mut tape, &vec![m; k]).unwrap();
        let out = model.memory_attend(&mut tape, &bound, &q, &bank).unwrap();
        assert_eq!(tape.shape(out.tokens), tape.shape(q.tokens));
        assert!(tape.value(out.tokens).max_abs_diff(tape.value(base.tokens)) <= 1e-9);
    }
}

#[test]
fn any_k_without_reconfiguration() {
    let model = FsSam2::new(ModelConfig::tiny(), 23).unwrap();
    let q = random_image(24, 16);
    for k in 1..=6 {
        let out = model.segment(&q, &support(25, 16, k)).unwrap();
        assert_eq!(out.logits.shape(), &[1, 16, 16]);
    }
}

fn gradcheck_stage<F>(stage: F)
where
    F: Fn(&FsSam2, &mut Tape, &Bound) -> fssam2::Result<Var>,
{
    gradcheck_stage_eps(stage, 1e-5)
}

fn gradcheck_stage_eps<F>(stage: F, eps: f64)
where
    F: Fn(&FsSam2, &mut Tape, &Bound) -> fssam2::Result<Var>,
{
    let model = FsSam2::new(gradcheck_config(), 30).unwrap();
    let params = params_of(&model, 31);
    let report = finite_difference_gradcheck(
        |tape, vars| {
            let bound = model.bind_vars(vars.to_vec());
            let out = stage(&model, tape, &bound)?;
            project(tape, out, 32)
        },
        &params,
        eps,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
    assert!(report.checked > 0);
}

#[test]
fn encode_image_gradcheck() {
    gradcheck_stage(|m, tape, bound| {
        Ok(m.encode_image(tape, bound, &random_image(33, 16))?.tokens)
    });
}

#[test]
fn encode_memory_gradcheck() {
    gradcheck_stage(|m, tape, bound| {
        let feat = m.encode_image(tape, bound, &random_image(34, 16))?;
        m.encode_memory(tape, bound, &feat, &box_mask(35, 16))
    });
}

#[test]
fn memory_attend_gradcheck() {
    gradcheck_stage(|m, tape, bound| {
        let q = m.encode_image(tape, bound, &random_image(36, 16))?;
        let entries = [
            tape.constant(random_tensor(37, &[16, 8])),
            tape.constant(random_tensor(38, &[16, 8])),
        ];
        let bank = m.build_memory_bank(tape, &entries)?;
        Ok(m.memory_attend(tape, bound, &q, &bank)?.tokens)
    });
}

#[test]
fn decode_mask_gradcheck() {
    gradcheck_stage(|m, tape, bound| {
        let tokens = tape.constant(random_tensor(39, &[16, 8]));
        m.decode_mask(tape, bound, &FeatureMap { tokens, h: 4, w: 4 })
    });
}

#[test]
fn end_to_end_gradcheck() {
    let q = random_image(40, 16);
    let s = support(41, 16, 2);
    // A few memory-encoder weights feed almost-dead ReLU channels; their
    // gradients are ~1e-9, so a smaller step drowns them in round-off.
    gradcheck_stage_eps(|m, tape, bound| m.forward(tape, bound, &q, &s), 1e-4);
}
