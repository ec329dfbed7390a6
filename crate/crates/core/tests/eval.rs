use bt_adapter::data::{gen_dataset, DataConfig, Split};
use bt_adapter::eval::{
    classify_zero_shot, evaluate, eval_csv, recall_at_k, retrieve, strategy_accounting, SimilarityMatrix, Strategy,
};
use bt_adapter::{BtModel, ModelConfig, Tensor};
use proptest::prelude::*;

fn sim(rows: Vec<Vec<f64>>) -> SimilarityMatrix {
    let n = rows.len();
    SimilarityMatrix::new(Tensor::from_rows(&rows).unwrap(), (0..n).collect()).unwrap()
}

#[test]
fn gallery_of_one_and_single_class() {
    assert_eq!(recall_at_k(&sim(vec![vec![-0.3]]), 1).unwrap(), 1.0);
    let cfg = ModelConfig::default();
    let data = gen_dataset(&cfg, &DataConfig::default(), 1).unwrap();
    let model = BtModel::new(cfg, 1).unwrap();
    let s = &data.samples[0];
    let acc = classify_zero_shot(&model, &[&s.video], &[&s.caption], &[0], 1).unwrap();
    assert_eq!(acc, 1.0);
    assert!(classify_zero_shot(&model, &[&s.video], &[&s.caption, &s.caption], &[0], 1).is_err());
}

#[test]
fn twin_captions_as_classes_sit_at_the_floor() {
    let cfg = ModelConfig::default();
    let mut accs = Vec::new();
    for seed in 1..=5 {
        let data = gen_dataset(&cfg, &DataConfig::default(), seed).unwrap();
        let model = BtModel::new(cfg.clone(), seed).unwrap();
        for (a, b) in data.twin_pairs(Split::HeldOut) {
            let (sa, sb) = (&data.samples[a], &data.samples[b]);
            let caps: [&[u32]; 2] = [&sa.caption, &sb.caption];
            let acc = classify_zero_shot(&model, &[&sa.video, &sb.video], &caps, &[0, 1], 1).unwrap();
            accs.push(acc);
            assert_eq!(classify_zero_shot(&model, &[&sa.video, &sb.video], &caps, &[0, 1], 2).unwrap(), 1.0);
        }
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(mean <= 0.55, "{mean}");
}

#[test]
fn duplicated_videos_give_identical_columns() {
    let cfg = ModelConfig::default();
    let data = gen_dataset(&cfg, &DataConfig::default(), 2).unwrap();
    let model = BtModel::new(cfg, 2).unwrap();
    let v = &data.samples[4].video;
    let emb = model.encode_videos(&[v, &data.samples[5].video, v]).unwrap();
    assert_eq!(emb.row(0), emb.row(2));
    let retr = retrieve(&model, &data, Split::HeldOut).unwrap();
    assert_eq!(retr.queries(), 16);
    for q in 0..retr.queries() {
        for g in 0..retr.gallery() {
            assert!(retr.get(q, g).abs() <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn metrics_are_reproducible_to_the_bit() {
    let cfg = ModelConfig::default();
    let data = gen_dataset(&cfg, &DataConfig::default(), 3).unwrap();
    let a = eval_csv(&evaluate(&BtModel::new(cfg.clone(), 3).unwrap(), &data, 3, "h").unwrap());
    let b = eval_csv(&evaluate(&BtModel::new(cfg, 3).unwrap(), &data, 3, "h").unwrap());
    assert_eq!(a, b);
    assert!(a.starts_with("metric,split,k,value,seed,checkpoint_hash\n"));
}

#[test]
fn strategy_closed_forms() {
    let cfg = ModelConfig {
        frames: 8,
        patches: 256,
        ..ModelConfig::default()
    };
    let r = strategy_accounting(&cfg).unwrap();
    let tokens: Vec<usize> = Strategy::ALL.iter().map(|&s| r.row(s).tokens).collect();
    assert_eq!(tokens, vec![264, 2048, 2048, 256]);
    assert_eq!(r.row(Strategy::StPooling).backbone_frozen, Some(true));
    assert_eq!(r.row(Strategy::JointSt).backbone_frozen, Some(false));
    assert_eq!(r.row(Strategy::SeparateSt).backbone_frozen, None);
    assert_eq!(r.row(Strategy::BtAdapter).backbone_frozen, Some(true));

    let one = strategy_accounting(&ModelConfig {
        frames: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_eq!(one.row(Strategy::StPooling).tokens, 17);
    assert_eq!(one.row(Strategy::BtAdapter).tokens, 16);
}

#[test]
fn branch_is_cheaper_than_full_finetuning_when_shallow() {
    for layers in 2..=8 {
        for branch_layers in 1..=layers / 2 {
            for width in [16, 32, 64] {
                let cfg = ModelConfig {
                    layers,
                    branch_layers,
                    width,
                    ..ModelConfig::default()
                };
                let r = strategy_accounting(&cfg).unwrap();
                let bt = r.row(Strategy::BtAdapter).trainable;
                assert!(bt < r.row(Strategy::JointSt).trainable, "L={layers} K={branch_layers} D={width}");
                assert!(bt < r.row(Strategy::SeparateSt).trainable);
            }
        }
    }
}

proptest! {
    #[test]
    fn recall_never_falls_with_k(
        n in 1usize..8,
        vals in proptest::collection::vec(-1.0f64..1.0, 64),
    ) {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vals[i * 8..i * 8 + n].to_vec()).collect();
        let s = sim(rows);
        let r: Vec<f64> = (1..=n).map(|k| recall_at_k(&s, k).unwrap()).collect();
        for w in r.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert_eq!(r[n - 1], 1.0);
    }
}
