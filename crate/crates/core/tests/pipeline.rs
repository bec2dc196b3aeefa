//! Whole-pipeline behaviour on a reduced configuration.

use latmo::checkpoint;
use latmo::config;
use latmo::pipeline::{PipelineConfig, Stack, Stage};

fn reduced() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.vae.hidden_dim = 16;
    c.vae.layers = 1;
    c.vae_train.epochs = 1;
    c.denoiser.hidden_dim = 16;
    c.denoiser.layers = 1;
    c.diffusion_train.epochs = 2;
    c.projector.hidden_dim = 16;
    c.projector.layers = 1;
    c.projector_train.epochs = 1;
    c.extractor.hidden_dim = 16;
    c.extractor.layers = 1;
    c.extractor_train.epochs = 1;
    c.schedule.inference_steps = 5;
    c
}

#[test]
fn stages_refuse_to_train_before_their_prerequisites() {
    let (mut stack, corpus) = Stack::init(reduced()).unwrap();
    let data = stack.dataset(&corpus).unwrap();
    assert!(stack.train_stage(Stage::Diffusion, &data).is_err());
    assert!(stack.train_stage(Stage::Projector, &data).is_err());
    stack.train_stage(Stage::Vae, &data).unwrap();
    assert!(stack.train_stage(Stage::Projector, &data).is_err());
}

#[test]
fn trained_stack_survives_a_file_round_trip() {
    let (mut stack, corpus) = Stack::init(reduced()).unwrap();
    let data = stack.dataset(&corpus).unwrap();
    for st in Stage::ALL {
        stack.train_stage(st, &data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    checkpoint::save(&stack, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.logs, stack.logs);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());

    let a = stack.generate("a person walks forward", 40, 3, true, 7.5).unwrap();
    let b = back.generate("a person walks forward", 40, 3, true, 7.5).unwrap();
    assert_eq!(a.frames(), 40);
    assert_eq!(a.data, b.data);
}

#[test]
fn environment_overrides_the_file() {
    let file = "guidance = 2.0\nvae_train.epochs = 3\n";
    let env = [("LATMO_GUIDANCE".to_string(), "4.5".to_string())];
    let c = config::load(Some(file), env).unwrap();
    assert_eq!(c.guidance, 4.5);
    assert_eq!(c.vae_train.epochs, 3);
    assert!(config::load(Some("no_such_key = 1"), []).is_err());
}
