use morec::coordinator::PreferenceVector;
use morec::dataset::{build_catalog, kcore_filter, leave_one_out_split, InteractionDataset, ItemCatalog, Split};
use morec::metrics::evaluate;
use morec::objectives::ObjectiveKind;
use morec::synth::{synth_generate, SynthConfig, Underserved};
use morec::trainer::{
    continual_train, init_model, pretrain, BackboneConfig, CoordinatorMode, OptimConfig, PretrainConfig, TargetLoss,
    TrainConfig,
};

fn prepared(cfg: &SynthConfig, seed: u64, k: usize) -> (InteractionDataset, ItemCatalog) {
    let data = synth_generate(cfg, seed).unwrap();
    let raw = kcore_filter(&data.interactions, k).unwrap().interactions;
    let ds = leave_one_out_split(&raw);
    let cat = build_catalog(&data.metadata, &ds, 10).unwrap();
    (ds, cat)
}

#[test]
fn separable_toy_is_learned() {
    let cfg = SynthConfig {
        n_users: 32,
        n_items: 32,
        n_interactions: 256,
        n_categories: 2,
        zipf_exponent: 0.0,
        latent_dim: 2,
        affinity_scale: 30.0,
        ..SynthConfig::default()
    };
    let (ds, cat) = prepared(&cfg, 3, 1);
    let m = init_model(&ds, &BackboneConfig { dim: 8, ..BackboneConfig::default() }, 3).unwrap();
    let pc = PretrainConfig {
        optim: OptimConfig {
            batch_size: 32,
            n_negatives: 4,
            lr: 0.02,
            neg_exponent: 0.0,
            ..OptimConfig::default()
        },
        max_epochs: 200,
        patience: 20,
        seed: 3,
        ..PretrainConfig::default()
    };
    let out = pretrain(&m, &ds, &cat, &pc).unwrap();
    let hit = evaluate(&out.model, &ds, &cat, Split::Valid, 10).unwrap().hit;
    assert!(hit > 0.5, "validation hit@10 {hit}");
    assert_eq!(out.history[out.best_epoch].valid_hit, hit);
}

// The worst category gets one step per epoch. Oversampling it closes most of
// its loss gap within an epoch, so its share is not monotone afterwards, but
// it never falls back to its share of the data.
#[test]
fn underserved_category_is_oversampled() {
    let cfg = SynthConfig {
        n_users: 2000,
        n_items: 300,
        n_interactions: 40_000,
        n_categories: 5,
        underserved: Some(Underserved {
            category: 0,
            factor: 0.15,
        }),
        ..SynthConfig::default()
    };
    let (ds, cat) = prepared(&cfg, 0, 5);
    let optim = OptimConfig {
        lr: 0.003,
        weight_decay: 1e-4,
        ..OptimConfig::default()
    };
    let m = init_model(&ds, &BackboneConfig { dim: 32, ..BackboneConfig::default() }, 0).unwrap();
    let pc = PretrainConfig {
        optim: optim.clone(),
        seed: 0,
        ..PretrainConfig::default()
    };
    let pre = pretrain(&m, &ds, &cat, &pc).unwrap();
    let tc = TrainConfig {
        objectives: vec![ObjectiveKind::Accuracy, ObjectiveKind::Fairness],
        preference: PreferenceVector {
            rho: vec![1.0],
            lambda: 0.1,
        },
        optim,
        max_epochs: 3,
        patience: 3,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = continual_train(&pre.model, &ds, &cat, &tc, Some(pre.converged_loss)).unwrap();
    let groups = &out.history.epochs[0].weight_tables[0].groups;
    let total: usize = groups.iter().map(|g| g.size).sum();
    let data_share = groups.iter().find(|g| g.id == 0).unwrap().size as f64 / total as f64;
    let share = |epoch: usize| {
        let snap = &out.history.epochs[epoch].weight_tables[0];
        snap.groups.iter().find(|g| g.id == 0).unwrap().weight
    };
    assert!(share(0) > 2.0 * data_share, "{} vs {data_share}", share(0));
    for e in 0..3 {
        assert!(share(e) > data_share, "epoch {e}: {} vs {data_share}", share(e));
    }
}

#[test]
fn static_mode_keeps_running_without_tables() {
    let cfg = SynthConfig {
        n_users: 100,
        n_items: 50,
        n_interactions: 1500,
        ..SynthConfig::default()
    };
    let (ds, cat) = prepared(&cfg, 1, 3);
    let m = init_model(&ds, &BackboneConfig { dim: 8, ..BackboneConfig::default() }, 1).unwrap();
    let tc = TrainConfig {
        mode: CoordinatorMode::Static {
            rho_full: [0.25; 4],
        },
        target_loss: TargetLoss::Fixed(0.5),
        optim: OptimConfig {
            batch_size: 128,
            ..OptimConfig::default()
        },
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let out = continual_train(&m, &ds, &cat, &tc, None).unwrap();
    let e = &out.history.epochs[1];
    assert!(e.weight_tables.is_empty() && out.history.alpha_trace.is_empty());
    assert_eq!(e.objective_losses.len(), 3);
    assert!(e.mean_combined_loss.is_finite());
}
