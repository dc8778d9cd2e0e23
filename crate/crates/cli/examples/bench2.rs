//! Scratch probe: per-component forward timings.

use dytx_core::config::FileConfig;
use dytx_core::data::crop::crop_pair;
use dytx_core::data::io::read_sequence;
use dytx_core::model::Model;
use dytx_core::rng::RandomState;
use dytx_core::tape::Tape;
use std::time::Instant;

fn main() {
    let cfg = FileConfig::load(std::path::Path::new("/tmp/smoke/med.toml")).unwrap();
    let mut rng = RandomState::new(0);
    let model: Model<f32> =
        Model::init(&cfg.backbone_config().unwrap(), &cfg.exits_config().unwrap(), &mut rng)
            .unwrap();
    let seq = read_sequence(std::path::Path::new("/tmp/smoke/ds7/train/d0_s000")).unwrap();
    let pair = crop_pair(&seq, 0, 5, 32, 64, 0.15, &mut rng).unwrap();

    let reps = 30;

    // embed only
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        model.bind(&tape, &|_| true);
        model.encoder.embed(&tape, &pair.template, &pair.search).unwrap();
    }
    let embed_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;

    // embed + full encode
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        model.bind(&tape, &|_| true);
        let s = model.encoder.embed(&tape, &pair.template, &pair.search).unwrap();
        model.encoder.encode_until(&tape, s, 0, 6).unwrap();
    }
    let encode_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;

    // full inference (score only, all exits) plus box
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        model.bind(&tape, &|_| true);
        let mut st = model.begin_inference(&tape, &pair.template, &pair.search).unwrap();
        let mut out = None;
        for _ in 0..3 {
            out = Some(model.advance_to_exit(&tape, &mut st, false).unwrap());
        }
        let mut out = out.unwrap();
        model.attach_box(&tape, &mut out).unwrap();
    }
    let full_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;

    // isolate one box head on fixed search tokens
    let tape = Tape::new();
    model.bind(&tape, &|_| true);
    let s0 = model.encoder.embed(&tape, &pair.template, &pair.search).unwrap();
    let e = model.encoder.encode_until(&tape, s0, 0, 6).unwrap();
    let st = model.encoder.search_slice(&tape, e).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        model.branches[2].box_head(&tape, st).unwrap();
    }
    let bh_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;

    println!("embed {embed_ms:.1} ms | embed+encode {encode_ms:.1} ms | full fwd {full_ms:.1} ms | one box head {bh_ms:.1} ms");
}
