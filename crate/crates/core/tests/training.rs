use bt_adapter::adapter;
use bt_adapter::backbone;
use bt_adapter::checkpoint::{self, graft_branch, load_checkpoint, save_checkpoint};
use bt_adapter::data::{gen_dataset, Corpus, DataConfig, Split};
use bt_adapter::eval::{held_out_twin_recall, pair_cosine};
use bt_adapter::model::reverse_frames;
use bt_adapter::params::Group;
use bt_adapter::trainer::{train, StepRecord, TrainOptions};
use bt_adapter::{BtModel, Error, ModelConfig};

fn corpus(cfg: &ModelConfig, seed: u64) -> Corpus {
    gen_dataset(cfg, &DataConfig::default(), seed).unwrap()
}

fn run(cfg: &ModelConfig, seed: u64, steps: u64) -> (BtModel, Vec<StepRecord>) {
    let data = corpus(cfg, seed);
    let mut model = BtModel::new(cfg.clone(), seed).unwrap();
    let mut log = Vec::new();
    let opts = TrainOptions {
        steps,
        seed,
        checkpoint_every: None,
    };
    train(&mut model, &data, &opts, &mut log).unwrap();
    (model, log)
}

#[test]
fn trainable_set_is_branch_and_heads_only() {
    let model = BtModel::new(ModelConfig::default(), 0).unwrap();
    assert_eq!(model.trainable_count(), 285_892);
    for (name, p) in model.params().iter() {
        let expected = p.group != Group::Backbone;
        assert_eq!(p.trainable(), expected, "{name}");
        assert_eq!(name.starts_with("visual.") || name.starts_with("text."), !expected, "{name}");
    }
    assert!(model.params().get(adapter::TOKEN_PROJ).unwrap().trainable());
    assert!(!model.params().get(backbone::VISUAL_PROJ).unwrap().trainable());
    assert_eq!(BtModel::new(ModelConfig::default(), 9).unwrap().trainable_count(), 285_892);
}

#[test]
fn zero_steps_leaves_the_initialisation() {
    let cfg = ModelConfig::default();
    let (model, log) = run(&cfg, 2, 0);
    assert!(log.is_empty());
    let init = BtModel::new(cfg, 2).unwrap();
    assert_eq!(
        checkpoint::to_bytes(&model, 0).unwrap(),
        checkpoint::to_bytes(&init, 0).unwrap()
    );
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = ModelConfig::default();
    let (a, la) = run(&cfg, 3, 12);
    let (b, lb) = run(&cfg, 3, 12);
    assert_eq!(la, lb);
    assert_eq!(
        checkpoint::to_bytes(&a, 12).unwrap(),
        checkpoint::to_bytes(&b, 12).unwrap()
    );
    let (c, _) = run(&cfg, 4, 12);
    assert_ne!(a.group_hash(Group::Branch), c.group_hash(Group::Branch));
}

#[test]
fn training_learns_order_and_keeps_the_backbone() {
    let cfg = ModelConfig::default();
    let seed = 1;
    let data = corpus(&cfg, seed);
    let init = BtModel::new(cfg.clone(), seed).unwrap();
    let (model, log) = run(&cfg, seed, 250);

    assert_eq!(model.group_hash(Group::Backbone), init.group_hash(Group::Backbone));
    assert!(model.params().tensor(backbone::VISUAL_PROJ).unwrap().bit_eq(
        init.params().tensor(backbone::VISUAL_PROJ).unwrap()
    ));
    let probe = &data.samples[0].video;
    assert_eq!(model.encode_frames(probe).unwrap(), init.encode_frames(probe).unwrap());
    assert_ne!(model.group_hash(Group::Heads), init.group_hash(Group::Heads));

    let first = log[0].loss.total;
    let tail = log[log.len() - 10..].iter().map(|r| r.loss.total).sum::<f64>() / 10.0;
    assert!(tail < first, "{first} -> {tail}");

    let sensitive = data
        .split(Split::HeldOut)
        .iter()
        .filter(|s| !s.reversed)
        .filter(|s| {
            let rev = reverse_frames(&s.video).unwrap();
            pair_cosine(&model, &s.video, &rev).unwrap() < 0.99
        })
        .count();
    assert!(sensitive > 0);
    assert!(held_out_twin_recall(&model, &data).unwrap() > held_out_twin_recall(&init, &data).unwrap());
}

#[test]
fn untrained_models_sit_at_the_order_floor() {
    let cfg = ModelConfig::default();
    let scores: Vec<f64> = (1..=5)
        .map(|seed| held_out_twin_recall(&BtModel::new(cfg.clone(), seed).unwrap(), &corpus(&cfg, seed)).unwrap())
        .collect();
    let mean = scores.iter().sum::<f64>() / 5.0;
    assert!(mean <= 0.55, "{scores:?}");
    for seed in 1..=2 {
        let model = BtModel::new(cfg.clone(), seed).unwrap();
        let data = corpus(&cfg, seed);
        for s in data.split(Split::HeldOut) {
            let rev = reverse_frames(&s.video).unwrap();
            let a = model.encode_video(&s.video, None).unwrap();
            assert!(a.bit_eq(&model.encode_video(&rev, None).unwrap()));
        }
    }
}

#[test]
fn checkpoints_round_trip_and_graft() {
    let cfg = ModelConfig::default();
    let (donor, _) = run(&cfg, 5, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("donor.btck");
    save_checkpoint(&path, &donor, 6).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.step, 6);
    assert_eq!(loaded.model, donor);
    assert_eq!(loaded.hashes(), checkpoint::group_hashes(donor.params()));

    let mut target = BtModel::new(cfg.clone(), 77).unwrap();
    let fresh = target.clone();
    let probe = &corpus(&cfg, 5).samples[0].video;
    graft_branch(&loaded, &mut target, probe).unwrap();
    assert_eq!(target.group_hash(Group::Backbone), fresh.group_hash(Group::Backbone));
    assert_eq!(target.group_hash(Group::Branch), donor.group_hash(Group::Branch));

    let mut other = BtModel::new(
        ModelConfig {
            branch_layers: 3,
            ..cfg.clone()
        },
        1,
    )
    .unwrap();
    match graft_branch(&loaded, &mut other, probe) {
        Err(Error::Incompatible(fields)) => assert_eq!(fields, vec!["branch_layers".to_string()]),
        other => panic!("expected incompatibility, got {other:?}"),
    }
}

#[test]
fn untrained_graft_keeps_init_identities() {
    let cfg = ModelConfig::default();
    let donor = BtModel::new(cfg.clone(), 3).unwrap();
    let bytes = checkpoint::to_bytes(&donor, 0).unwrap();
    let donor = checkpoint::from_bytes(&bytes).unwrap();
    let mut target = BtModel::new(cfg.clone(), 4).unwrap();
    let probe = &corpus(&cfg, 1).samples[3].video;
    graft_branch(&donor, &mut target, probe).unwrap();
    let checks = bt_adapter::model::verify_init(&target, probe, 11).unwrap();
    assert!(checks.iter().all(|c| c.passed), "{checks:?}");
}
