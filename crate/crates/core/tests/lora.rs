mod common;

use std::collections::BTreeSet;

use common::{jitter, random_image, random_tensor, rng, support};
use fssam2::lora::{
    attach_lora, count_lora_params, lora_forward, merge_lora, merge_weights, select_trainable,
    LoraConfig, Strategy, StrategyRanks,
};
use fssam2::nn::{Bound, BoundAdapter, Group, Linear, ParamStore, ProjKind};
use fssam2::{Error, FsSam2, ModelConfig, Tape, Tensor};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;
use rand::Rng;

/// Gives every adapter a non-zero B so merged and factored paths differ
/// from the base model.
fn randomize_b(model: &mut FsSam2, seed: u64) {
    let mut r = rng(seed);
    let bs: Vec<_> = model.adapters().iter().map(|a| a.b).collect();
    for b in bs {
        for v in model.store_mut().get_mut(b).value.data_mut() {
            *v = r.gen_range(-0.2..0.2);
        }
    }
}

fn hand_layer() -> (ParamStore, Linear) {
    let mut store = ParamStore::new();
    let layer = Linear::new(
        &mut store,
        &mut rng(0),
        "l",
        Group::ImageEncoder,
        2,
        2,
        true,
        Some(ProjKind::Q),
    )
    .unwrap();
    store.get_mut(layer.weight).value = Tensor::eye(2);
    (store, layer)
}

fn run_adapted(
    store: &ParamStore,
    layer: &Linear,
    a: &Tensor,
    b: &Tensor,
    scale: f64,
    x: &Tensor,
) -> fssam2::Result<Tensor> {
    let mut tape = Tape::new();
    let bound = Bound::from_store(store, &mut tape);
    let adapter = BoundAdapter {
        target: layer.name.clone(),
        a: tape.constant(a.clone()),
        b: tape.constant(b.clone()),
        scale,
    };
    let xv = tape.constant(x.clone());
    let y = lora_forward(&mut tape, &bound, layer, &adapter, xv)?;
    Ok(tape.value(y).clone())
}

#[test]
fn hand_computed_low_rank_update() {
    let (store, layer) = hand_layer();
    let a = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[&[2.0], &[0.0]]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap();
    let y = run_adapted(&store, &layer, &a, &b, 1.0, &x).unwrap();
    assert_eq!(y.data(), &[9.0, 5.0]);
}

#[test]
fn zero_b_or_zero_scale_gives_base_output() {
    let (store, layer) = hand_layer();
    let x = random_tensor(1, &[4, 2]);
    let a = random_tensor(2, &[1, 2]);
    let y0 = run_adapted(&store, &layer, &a, &Tensor::zeros(&[2, 1]), 1.0, &x).unwrap();
    let y1 = run_adapted(&store, &layer, &a, &random_tensor(3, &[2, 1]), 0.0, &x).unwrap();
    assert_eq!(y0, x);
    assert_eq!(y1, x);
}

#[test]
fn mismatched_target_is_a_wiring_error() {
    let (store, layer) = hand_layer();
    let mut tape = Tape::new();
    let bound = Bound::from_store(&store, &mut tape);
    let adapter = BoundAdapter {
        target: "other".into(),
        a: tape.constant(Tensor::zeros(&[1, 2])),
        b: tape.constant(Tensor::zeros(&[2, 1])),
        scale: 1.0,
    };
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(
        lora_forward(&mut tape, &bound, &layer, &adapter, x),
        Err(Error::Wiring { .. })
    ));
}

#[test]
fn merged_layer_matches_factored_layer() {
    let mut store = ParamStore::new();
    let layer = Linear::new(
        &mut store,
        &mut rng(4),
        "l",
        Group::MemoryAttention,
        12,
        10,
        true,
        Some(ProjKind::V),
    )
    .unwrap();
    let a = random_tensor(5, &[3, 12]);
    let b = random_tensor(6, &[10, 3]);
    let x = random_tensor(7, &[100, 12]);
    let factored = run_adapted(&store, &layer, &a, &b, 0.7, &x).unwrap();

    let merged_w = merge_weights(store.value(layer.weight), &a, &b, 0.7).unwrap();
    store.get_mut(layer.weight).value = merged_w;
    let mut tape = Tape::new();
    let bound = Bound::from_store(&store, &mut tape);
    let xv = tape.constant(x);
    let y = layer.forward(&mut tape, &bound, xv).unwrap();
    assert!(tape.value(y).max_abs_diff(&factored) < 1e-9);
}

#[test]
fn encoder_rank_four_count_on_default_model() {
    let mut model = FsSam2::new(ModelConfig::default(), 0).unwrap();
    let cfg = LoraConfig::default().with_rank(Group::ImageEncoder, 4);
    let trainable = attach_lora(&mut model, &cfg, 1).unwrap();
    let n: usize = trainable
        .iter()
        .map(|&id| model.store().value(id).numel())
        .sum();
    assert_eq!(n, 8192);
    assert_eq!(n, count_lora_params(&[(64, 64); 16], 4));
    assert_eq!(trainable.len(), 32);
    assert_eq!(model.store().trainable_ids(), trainable);
}

#[test]
fn empty_config_changes_nothing() {
    let mut model = FsSam2::new(ModelConfig::tiny(), 2).unwrap();
    let (q, s) = (random_image(3, 16), support(4, 16, 2));
    let before = model.segment(&q, &s).unwrap();
    let trainable = attach_lora(&mut model, &LoraConfig::default(), 5).unwrap();
    assert!(trainable.is_empty());
    assert_eq!(model.segment(&q, &s).unwrap(), before);
}

#[test]
fn unknown_group_and_oversized_rank_are_config_errors() {
    assert!(matches!(
        LoraConfig::parse_ranks("prompt_encoder=4"),
        Err(Error::Config(_))
    ));
    let mut model = FsSam2::new(ModelConfig::tiny(), 0).unwrap();
    let cfg = LoraConfig::default().with_rank(Group::MemoryAttention, 8);
    assert!(matches!(
        attach_lora(&mut model, &cfg, 0),
        Err(Error::Config(_))
    ));
    let cfg = LoraConfig::default().with_rank(Group::MemoryAttention, 0);
    assert!(matches!(
        attach_lora(&mut model, &cfg, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn attaching_is_neutral_for_every_strategy() {
    let base = FsSam2::new(ModelConfig::desk(), 6).unwrap();
    let (q, s) = (random_image(7, 32), support(8, 32, 3));
    let expected = base.segment(&q, &s).unwrap();
    for strategy in Strategy::ALL {
        let mut model = base.clone();
        select_trainable(&mut model, strategy, &StrategyRanks::default(), 9).unwrap();
        assert_eq!(model.segment(&q, &s).unwrap(), expected, "{strategy}");
    }
}

#[test]
fn merged_model_matches_factored_model() {
    let mut model = FsSam2::new(ModelConfig::desk(), 10).unwrap();
    select_trainable(
        &mut model,
        Strategy::LoraEncMemDec,
        &StrategyRanks::default(),
        11,
    )
    .unwrap();
    randomize_b(&mut model, 12);
    let mut merged = model.clone();
    merge_lora(&mut merged).unwrap();
    assert!(merged.adapters().is_empty());
    assert_eq!(merged.store().len(), merged.base_len());
    assert_eq!(
        merged.base_numel(),
        FsSam2::new(ModelConfig::desk(), 10).unwrap().base_numel()
    );
    for seed in 0..4 {
        let (q, s) = (random_image(seed, 32), support(seed + 20, 32, 2));
        let a = model.segment(&q, &s).unwrap();
        let b = merged.segment(&q, &s).unwrap();
        assert!(a.logits.max_abs_diff(&b.logits) < 1e-9);
    }
    let snapshot = merged.clone();
    merge_lora(&mut merged).unwrap();
    assert_eq!(merged, snapshot);
}

#[test]
fn gradients_reach_only_trainable_tensors() {
    for strategy in [
        Strategy::LoraEncMem,
        Strategy::FullMemory,
        Strategy::LoraEncFullMemory,
    ] {
        let mut model = FsSam2::new(ModelConfig::tiny(), 13).unwrap();
        let trainable =
            select_trainable(&mut model, strategy, &StrategyRanks::default(), 14).unwrap();
        randomize_b(&mut model, 15);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let logits = model
            .forward(
                &mut tape,
                &bound,
                &random_image(16, 16),
                &support(17, 16, 2),
            )
            .unwrap();
        let loss = tape.sum(logits);
        let grads = tape.backward(loss).unwrap();
        let trainable: BTreeSet<_> = trainable.into_iter().collect();
        for (id, p) in model.store().iter() {
            let has = grads.get(bound.var(id)).is_some();
            assert_eq!(has, trainable.contains(&id), "{strategy}: {}", p.name);
        }
    }
}

#[test]
fn strategy_trainable_sets() {
    let ranks = StrategyRanks::default();
    let fresh = || FsSam2::new(ModelConfig::default(), 18).unwrap();
    let count = |m: &FsSam2, ids: &[fssam2::nn::ParamId]| -> usize {
        ids.iter().map(|&i| m.store().value(i).numel()).sum()
    };

    let mut m = fresh();
    assert!(select_trainable(&mut m, Strategy::None, &ranks, 0)
        .unwrap()
        .is_empty());
    assert!(m.store().trainable_ids().is_empty());

    let mut m = fresh();
    let ids = select_trainable(&mut m, Strategy::FullMemory, &ranks, 0).unwrap();
    assert_eq!(
        count(&m, &ids),
        m.group_numel(Group::MemoryEncoder) + m.group_numel(Group::MemoryAttention)
    );

    let sizes: Vec<(Strategy, BTreeSet<String>, usize)> =
        [Strategy::LoraEnc, Strategy::LoraMem, Strategy::LoraEncMem]
            .into_iter()
            .map(|s| {
                let mut m = fresh();
                let ids = select_trainable(&mut m, s, &ranks, 0).unwrap();
                let names = ids.iter().map(|&i| m.store().get(i).name.clone()).collect();
                (s, names, count(&m, &ids))
            })
            .collect();
    let (_, enc, n_enc) = &sizes[0];
    let (_, mem, n_mem) = &sizes[1];
    let (_, both, n_both) = &sizes[2];
    assert!(enc.is_disjoint(mem));
    assert_eq!(&enc.union(mem).cloned().collect::<BTreeSet<_>>(), both);
    assert_eq!(n_enc + n_mem, *n_both);
}

#[test]
fn effective_ranks_follow_nominal_values_where_they_fit() {
    let model = FsSam2::new(ModelConfig::default(), 0).unwrap();
    let cfg = Strategy::LoraEncMemDec.lora_config(&model, &StrategyRanks::default());
    assert_eq!(cfg.rank_by_group[&Group::ImageEncoder], 4);
    assert_eq!(cfg.rank_by_group[&Group::MaskDecoder], 32);
    // Memory encoder out_proj is 64→32, so rank 32 is capped to 16.
    assert_eq!(cfg.rank_by_group[&Group::MemoryEncoder], 16);
}

fn arb_config() -> impl proptest::strategy::Strategy<Value = LoraConfig> {
    (
        proptest::sample::subsequence(ProjKind::ALL.to_vec(), 1..=4),
        proptest::collection::vec(proptest::option::of(1usize..4), 4),
        -2.0f64..2.0,
    )
        .prop_map(|(targets, ranks, scale)| {
            let mut cfg = LoraConfig {
                targets: targets.into_iter().collect(),
                scale,
                ..LoraConfig::default()
            };
            for (g, r) in Group::ALL.into_iter().zip(ranks) {
                if let Some(r) = r {
                    cfg.rank_by_group.insert(g, r);
                }
            }
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn count_matches_enumeration(cfg in arb_config(), seed in any::<u64>()) {
        let mut model = FsSam2::new(ModelConfig::tiny(), seed).unwrap();
        let manifest: Vec<(Group, usize, usize)> = model
            .linears()
            .into_iter()
            .filter(|l| cfg.covers(l))
            .map(|l| (l.group, l.d_in, l.d_out))
            .collect();
        let trainable = attach_lora(&mut model, &cfg, seed).unwrap();
        let enumerated: usize = trainable.iter().map(|&id| model.store().value(id).numel()).sum();
        let formula: usize = Group::ALL
            .into_iter()
            .filter_map(|g| cfg.rank_by_group.get(&g).map(|&r| (g, r)))
            .map(|(g, r)| {
                let layers: Vec<_> = manifest.iter().filter(|m| m.0 == g).map(|m| (m.1, m.2)).collect();
                count_lora_params(&layers, r)
            })
            .sum();
        prop_assert_eq!(enumerated, formula);
        prop_assert_eq!(model.store().trainable_ids(), trainable);
    }

    #[test]
    fn attach_is_neutral(cfg in arb_config(), seed in 0u64..1000) {
        let mut model = FsSam2::new(ModelConfig::tiny(), seed).unwrap();
        jitter(&mut model, seed, 0.2);
        let (q, s) = (random_image(seed, 16), support(seed, 16, 1));
        let before = model.segment(&q, &s).unwrap();
        attach_lora(&mut model, &cfg, seed).unwrap();
        prop_assert_eq!(model.segment(&q, &s).unwrap(), before);
    }
}
