// Temporary experiment: directional effect tuning.
use reasoner_core::codec::Task;
use reasoner_core::config::Config;
use reasoner_core::model::{Model, ModelConfig};
use reasoner_core::optim::OptimState;
use reasoner_core::trainer::{
    evaluate_cater, train, Schedule, TaskData, TaskSpec, TrainConfig, TrainRun,
};
use reasoner_core::worldgen::{gen_cater_episode, gen_frame_scene, CaterConfig};

fn mcfg() -> ModelConfig {
    ModelConfig {
        stem_channels: [16, 32, 64],
        dim: 64,
        enc_depth: 2,
        dec_depth: 2,
        max_frames: 8,
        ..ModelConfig::default()
    }
}

#[test]
#[ignore]
fn directional_cater() {
    let cater_cfg = CaterConfig::default();
    let frames: Vec<_> = (0..512).map(|s| gen_frame_scene(s, &cater_cfg).unwrap()).collect();
    let videos: Vec<_> = (10_000..10_256).map(|s| gen_cater_episode(s, &cater_cfg).unwrap()).collect();
    let test_videos: Vec<_> =
        (90_000..90_064).map(|s| gen_cater_episode(s, &cater_cfg).unwrap()).collect();
    let visible_at_end = test_videos
        .iter()
        .filter(|v| v.anns.last().unwrap().boxes[v.snitch_index].visible)
        .count();
    println!("test episodes with snitch visible at end: {}/{}", visible_at_end, test_videos.len());

    let cfg = Config { model: mcfg(), ..Config::default() };
    let vocab = cfg.vocab();

    for seed in [0u64, 1] {
        let t0 = std::time::Instant::now();
        // Single-switch: detect_all 600 steps → cater 400 steps.
        let mut model = Model::<f32>::init(mcfg(), vocab.size(), seed).unwrap();
        let tcfg = TrainConfig {
            batch: 8,
            total_steps: 1000,
            warmup_steps: 300,
            eval_cadence: 0,
            frames_per_sample: 8,
            seed,
            ..TrainConfig::default()
        };
        let mut optim = OptimState::new(tcfg.optimizer(), &model.param_shapes());
        let run = TrainRun {
            config: tcfg,
            schedule: Schedule::SingleSwitch { pretrain_steps: 600 },
            tasks: vec![TaskSpec::new(Task::DetectAll), TaskSpec::new(Task::Cater)],
            data: vec![TaskData::Frames(&frames), TaskData::Videos(&videos)],
            vocab: vocab.clone(),
        };
        let report = train(&mut model, &mut optim, &run, 0, |_, _, _, _| Ok(())).unwrap();
        let pretrained = evaluate_cater(&model, &test_videos, &vocab, 8);
        println!(
            "seed {seed} pretrained: top1={:.3} nonCell={} losses={:?} ({:?})",
            pretrained.top1, pretrained.non_cell_answers, report.last_losses, t0.elapsed()
        );

        // Ground-up: cater only, 400 steps.
        let t0 = std::time::Instant::now();
        let mut model_g = Model::<f32>::init(mcfg(), vocab.size(), seed).unwrap();
        let tcfg_g = TrainConfig {
            batch: 8,
            total_steps: 400,
            warmup_steps: 120,
            eval_cadence: 0,
            frames_per_sample: 8,
            seed,
            ..TrainConfig::default()
        };
        let mut optim_g = OptimState::new(tcfg_g.optimizer(), &model_g.param_shapes());
        let run_g = TrainRun {
            config: tcfg_g,
            schedule: Schedule::Joint,
            tasks: vec![TaskSpec::new(Task::Cater)],
            data: vec![TaskData::Videos(&videos)],
            vocab: vocab.clone(),
        };
        let report_g = train(&mut model_g, &mut optim_g, &run_g, 0, |_, _, _, _| Ok(())).unwrap();
        let ground = evaluate_cater(&model_g, &test_videos, &vocab, 8);
        println!(
            "seed {seed} ground-up:  top1={:.3} nonCell={} losses={:?} ({:?})",
            ground.top1, ground.non_cell_answers, report_g.last_losses, t0.elapsed()
        );
    }
}
