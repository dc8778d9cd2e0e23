//! Scratch probe: measure how the trained model's predicted center responds
//! to a known offset between the search-crop center and the true target.

use dytx_core::checkpoint::load_model;
use dytx_core::config::FileConfig;
use dytx_core::data::crop::{crop_region, SEARCH_FACTOR, TEMPLATE_FACTOR};
use dytx_core::data::io::read_sequence;
use dytx_core::model::Model;
use dytx_core::rng::RandomState;
use dytx_core::tape::Tape;

fn main() {
    let cfg = FileConfig::load(std::path::Path::new("/tmp/smoke/long.toml")).unwrap();
    let mut rng = RandomState::new(0);
    let mut model: Model<f32> =
        Model::init(&cfg.backbone_config().unwrap(), &cfg.exits_config().unwrap(), &mut rng).unwrap();
    load_model(
        std::path::Path::new("/tmp/smoke/runlong/checkpoint.dytx"),
        &mut model,
    )
    .unwrap();

    let seq = read_sequence(std::path::Path::new("/tmp/smoke/ds11/train/d0_s000")).unwrap();
    let f0 = &seq.frames[0];
    let b0 = f0.gt_box;
    let tside = (TEMPLATE_FACTOR * TEMPLATE_FACTOR * b0.w * b0.h).sqrt().max(4.0);
    let (template, _) = crop_region(f0, b0.cx, b0.cy, tside, 32);

    let f = &seq.frames[3];
    let b = f.gt_box;
    let sside = (SEARCH_FACTOR * SEARCH_FACTOR * b.w * b.h).sqrt().max(4.0);
    println!("gt frame3: cx={:.2} cy={:.2} w={:.2} h={:.2}", b.cx, b.cy, b.w, b.h);
    for dy in [-12.0, -8.0, -4.0, 0.0, 4.0, 8.0, 12.0] {
        let (search, win) = crop_region(f, b.cx, b.cy + dy, sside, 64);
        let tape = Tape::new();
        model.bind(&tape, &|_| false);
        let mut st = model.begin_inference(&tape, &template, &search).unwrap();
        let mut out = None;
        for _ in 0..3 {
            out = Some(model.advance_to_exit(&tape, &mut st, false).unwrap());
        }
        let mut out = out.unwrap();
        model.attach_box(&tape, &mut out).unwrap();
        let fb = win.box_to_frame(&out.bbox);
        println!(
            "crop dy={:+5.1}  pred cy={:7.2} (err {:+6.2})  pred cx={:7.2} (err {:+6.2})  w={:5.2} h={:5.2} score={:.3}",
            dy, fb.cy, fb.cy - b.cy, fb.cx, fb.cx - b.cx, fb.w, fb.h, out.score
        );
    }
}
