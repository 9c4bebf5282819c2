use csas_core::config::ExperimentConfig;
use csas_core::dataset::{generate_dataset, GenerateConfig};
use csas_core::pipeline::{AblationToggles, ModelConfig};
use csas_core::train::{evaluate, train_full, split_indices};
use std::time::Instant;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 31;
    cfg.generate = GenerateConfig {
        num_scenes: 60,
        views_per_scene: 1,
        height: 32,
        width: 32,
        num_apertures: 12,
        max_targets: 2,
        seed: 31,
        max_jitter: 4.0,
    };
    cfg.model = ModelConfig::desk_small();
    cfg.train.batch_size = 8;
    cfg.train.lr = 2e-3;
    cfg.train.pretrain_count = 160;
    cfg.train.pretrain_max_epochs = 8;
    cfg.train.max_epochs = 110;
    cfg.train.superpixel_target = 40;

    let scenes = generate_dataset(&cfg.generate).unwrap();
    let (tr, va, te) = split_indices(scenes.len(), cfg.seed);
    let train_scenes: Vec<_> = tr.iter().map(|&i| scenes[i].clone()).collect();
    let val_scenes: Vec<_> = va.iter().map(|&i| scenes[i].clone()).collect();
    let test_scenes: Vec<_> = te.iter().map(|&i| scenes[i].clone()).collect();

    let t0 = Instant::now();
    let (model, store, history) = train_full(&cfg, &train_scenes, &val_scenes).unwrap();
    println!("trained in {:?} ({} epochs)", t0.elapsed(), history.len());
    for rec in history.iter().rev().take(3).rev() {
        println!("  {} {}: train {:.1} val {:.1}", rec.stage, rec.epoch, rec.train_loss, rec.val_loss);
    }

    let mk = |sup: bool, unsup: bool, parse: bool| AblationToggles {
        use_supervised_branch: sup,
        use_unsupervised_branch: unsup,
        use_parsing: parse,
        use_multi_image: false,
        num_views: 1,
    };
    for (name, tg) in [
        ("full   ", mk(true, true, true)),
        ("sup    ", mk(true, false, false)),
        ("unsup  ", mk(false, true, false)),
        ("merged ", mk(true, true, false)),
    ] {
        let rep = evaluate(&cfg, &model, &store, None, &test_scenes, &tg).unwrap();
        println!(
            "{name}: AIOU {:.3} MAPdet {:.3} IAAE {:.3} AFM {:.3} MAPseg {:.3}",
            rep.aiou, rep.map_det, rep.iaae, rep.afm.unwrap_or(0.0), rep.map_seg.unwrap_or(0.0)
        );
    }
}
