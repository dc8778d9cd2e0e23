//! Scratch probe: time forward / backward / optimizer phases of one step.

use dytx_core::config::FileConfig;
use dytx_core::data::crop::crop_pair;
use dytx_core::data::io::read_sequence;
use dytx_core::model::{DistillMode, Model};
use dytx_core::nn::ParamSet;
use dytx_core::objectives::{joint_loss, AdamW, LossWeights};
use dytx_core::rng::RandomState;
use dytx_core::tape::Tape;
use std::time::Instant;

fn main() {
    let cfg = FileConfig::load(std::path::Path::new("/tmp/smoke/med.toml")).unwrap();
    let mut rng = RandomState::new(0);
    let mut model: Model<f32> =
        Model::init(&cfg.backbone_config().unwrap(), &cfg.exits_config().unwrap(), &mut rng)
            .unwrap();
    let seq = read_sequence(std::path::Path::new("/tmp/smoke/ds7/train/d0_s000")).unwrap();
    let pair = crop_pair(&seq, 0, 5, 32, 64, 0.15, &mut rng).unwrap();
    let w = LossWeights::default();
    let mut opt: AdamW<f32> = AdamW::new(1e-4);

    let mut tf = 0.0;
    let mut tl = 0.0;
    let mut tb = 0.0;
    let mut to = 0.0;
    for _ in 0..20 {
        let t0 = Instant::now();
        let tape = Tape::new();
        model.bind(&tape, &|_| true);
        let fwd = model
            .forward_train(&tape, &pair.template, &pair.search, DistillMode::TargetAware)
            .unwrap();
        let t1 = Instant::now();
        let loss = joint_loss(&tape, &fwd, &pair.target_box, &w).unwrap();
        let t2 = Instant::now();
        tape.backward(loss).unwrap();
        let t3 = Instant::now();
        let mut params = model.params_mut();
        opt.step_params(&mut params, &tape, &|_| 1e-3);
        let t4 = Instant::now();
        tf += (t1 - t0).as_secs_f64();
        tl += (t2 - t1).as_secs_f64();
        tb += (t3 - t2).as_secs_f64();
        to += (t4 - t3).as_secs_f64();
    }
    println!("forward {:.1} ms  loss {:.1} ms  backward {:.1} ms  opt {:.1} ms", tf * 50.0, tl * 50.0, tb * 50.0, to * 50.0);
}
