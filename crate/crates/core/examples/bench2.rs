// test-profile speed probe: one window fwd+bwd timing under the same
// flags cargo test uses (opt-level 2, debug_assertions on)
use s2cast_core::data::Normalizer;
use s2cast_core::model::{self, ModelPlan, ModelParams};
use s2cast_core::synth::{synth_generate, SynthConfig};
use s2cast_core::train::{preprocess, TrainConfig};
use std::time::Instant;

fn main() {
    let ds = synth_generate(&SynthConfig { n_stations: 200, steps: 300, seed: 42, ..Default::default() }).unwrap();
    let cfg = TrainConfig::default();
    let (pre, _) = preprocess(&ds.stations, &cfg).unwrap();
    let mcfg = cfg.model_config(ds.n(), ds.c());
    let plan = ModelPlan::new(&mcfg, &pre.hierarchy).unwrap();
    let mut params = ModelParams::init(mcfg, 0).unwrap();
    let norm = Normalizer::fit(&ds, (0, 240)).unwrap();
    let nds = norm.apply_dataset(&ds).unwrap();
    let batch = nds.window(0, 48, 24).unwrap();
    let t = Instant::now();
    for _ in 0..10 {
        let (mut tape, loss, _v) = model::batch_loss(&params, &plan, &pre.basis, &batch).unwrap();
        let grads = tape.backward(loss, 1.0).unwrap();
        grads.accumulate_into(&mut params.params_mut()).unwrap();
    }
    println!("test-profile fwd+bwd per window: {:?}", t.elapsed() / 10);
}
