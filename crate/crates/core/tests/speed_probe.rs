// Temporary timing probe; replaced by real integration tests.
use reasoner_core::codec::Task;
use reasoner_core::config::Config;
use reasoner_core::model::{Model, ModelConfig};
use reasoner_core::optim::OptimState;
use reasoner_core::trainer::{train, Schedule, TaskData, TaskSpec, TrainConfig, TrainRun};
use reasoner_core::worldgen::{gen_cater_episode, gen_frame_scene, CaterConfig};

#[test]
#[ignore]
fn timing() {
    let cater_cfg = CaterConfig::default();
    let t0 = std::time::Instant::now();
    let frames: Vec<_> = (0..64).map(|s| gen_frame_scene(s, &cater_cfg).unwrap()).collect();
    println!("gen 64 frame scenes: {:?}", t0.elapsed());
    let t0 = std::time::Instant::now();
    let videos: Vec<_> = (0..16).map(|s| gen_cater_episode(s, &cater_cfg).unwrap()).collect();
    println!("gen 16 cater videos (32 frames): {:?}", t0.elapsed());

    let mcfg = ModelConfig {
        stem_channels: [16, 32, 64],
        dim: 64,
        enc_depth: 2,
        dec_depth: 2,
        max_frames: 8,
        ..ModelConfig::default()
    };
    let cfg = Config { model: mcfg.clone(), ..Config::default() };
    let vocab = cfg.vocab();
    let mut model = Model::<f32>::init(mcfg, vocab.size(), 0).unwrap();
    println!("params: {}", model.param_count());

    // Detection step timing (1-frame samples), batch 16.
    let tcfg = TrainConfig {
        batch: 16,
        total_steps: 10,
        warmup_steps: 5,
        eval_cadence: 0,
        frames_per_sample: 8,
        ..TrainConfig::default()
    };
    let mut optim = OptimState::new(tcfg.optimizer(), &model.param_shapes());
    let run = TrainRun {
        config: tcfg,
        schedule: Schedule::Joint,
        tasks: vec![TaskSpec::new(Task::DetectVisible)],
        data: vec![TaskData::Frames(&frames)],
        vocab: vocab.clone(),
    };
    let t0 = std::time::Instant::now();
    let report = train(&mut model, &mut optim, &run, 0, |_, _, _, _| Ok(())).unwrap();
    println!("10 detect steps (batch 16): {:?}  last loss {:?}", t0.elapsed(), report.last_losses);

    // CATER step timing (8-frame samples), batch 16.
    let tcfg2 = TrainConfig {
        batch: 16,
        total_steps: 5,
        warmup_steps: 2,
        eval_cadence: 0,
        frames_per_sample: 8,
        ..TrainConfig::default()
    };
    let mut model2 = Model::<f32>::init(model.config.clone(), vocab.size(), 1).unwrap();
    let mut optim2 = OptimState::new(tcfg2.optimizer(), &model2.param_shapes());
    let run2 = TrainRun {
        config: tcfg2,
        schedule: Schedule::Joint,
        tasks: vec![TaskSpec::new(Task::Cater)],
        data: vec![TaskData::Videos(&videos)],
        vocab: vocab.clone(),
    };
    let t0 = std::time::Instant::now();
    let report2 = train(&mut model2, &mut optim2, &run2, 0, |_, _, _, _| Ok(())).unwrap();
    println!("5 cater steps (batch 16, n=8): {:?}  last loss {:?}", t0.elapsed(), report2.last_losses);
}
