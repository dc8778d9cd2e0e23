//! Scratch probe: overfit a handful of fixed training pairs with targets at
//! different positions. Fitting all of them requires reading the image, so
//! this separates content-based localization from bias memorization.

use dytx_core::config::FileConfig;
use dytx_core::data::crop::crop_pair;
use dytx_core::data::io::read_sequence;
use dytx_core::model::{DistillMode, Model};
use dytx_core::nn::ParamSet;
use dytx_core::objectives::{joint_loss, AdamW, LossWeights};
use dytx_core::rng::RandomState;
use dytx_core::tape::Tape;

fn main() {
    let cfg = FileConfig::load(std::path::Path::new("/tmp/smoke/med.toml")).unwrap();
    let mut rng = RandomState::new(0);
    let mut model: Model<f32> =
        Model::init(&cfg.backbone_config().unwrap(), &cfg.exits_config().unwrap(), &mut rng)
            .unwrap();

    let dirs = ["d0_s000", "d0_s001", "d1_s000", "d1_s001"];
    let mut pairs = Vec::new();
    for d in dirs {
        let seq = read_sequence(&std::path::Path::new("/tmp/smoke/ds7/train").join(d)).unwrap();
        pairs.push(crop_pair(&seq, 0, 5, 32, 64, 0.3, &mut rng).unwrap());
    }
    for (i, p) in pairs.iter().enumerate() {
        println!(
            "pair {i} target: cx={:.3} cy={:.3} w={:.3} h={:.3}",
            p.target_box.cx, p.target_box.cy, p.target_box.w, p.target_box.h
        );
    }

    let w = LossWeights::default();
    let mut opt: AdamW<f32> = AdamW::new(1e-4);
    for step in 0..400 {
        let pair = &pairs[step % pairs.len()];
        let tape = Tape::new();
        model.bind(&tape, &|_| true);
        let fwd = model
            .forward_train(&tape, &pair.template, &pair.search, DistillMode::Off)
            .unwrap();
        let loss = joint_loss(&tape, &fwd, &pair.target_box, &w).unwrap();
        tape.backward(loss).unwrap();
        let mut params = model.params_mut();
        opt.step_params(&mut params, &tape, &|_| 1e-3);
        if step % 40 == 0 || step == 399 {
            let lv = tape.value(loss).data()[0];
            let o = &fwd.outcomes[2];
            println!(
                "step {step:3} pair {} loss {lv:8.4} pred cx={:.3} cy={:.3} w={:.3} h={:.3}",
                step % pairs.len(),
                o.bbox.cx,
                o.bbox.cy,
                o.bbox.w,
                o.bbox.h
            );
        }
    }
    // final per-pair report
    for (i, pair) in pairs.iter().enumerate() {
        let tape = Tape::new();
        model.bind(&tape, &|_| false);
        let fwd = model
            .forward_train(&tape, &pair.template, &pair.search, DistillMode::Off)
            .unwrap();
        let o = &fwd.outcomes[2];
        println!(
            "final pair {i}: pred cx={:.3} cy={:.3} w={:.3} h={:.3} (target cx={:.3} cy={:.3})",
            o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h, pair.target_box.cx, pair.target_box.cy
        );
    }
}
