use s2cast_core::model::AblationFlags;
use s2cast_core::synth::{synth_generate, SynthConfig};
use s2cast_core::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(42);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(24);
    let ds = synth_generate(&SynthConfig {
        n_stations: 200, steps: 5000, seed,
        length_scale_km: 1200.0, noise: 0.7, noise_spread: 0.7, ar_coeff: 0.95,
        ..Default::default()
    }).unwrap();
    let base = TrainConfig { epochs, windows_per_epoch: Some(224), patience: 10, ..TrainConfig::default() };
    let mut results = Vec::new();
    for (name, flags) in [
        ("full", AblationFlags::default()),
        ("wo_intra", AblationFlags { no_intra: true, ..Default::default() }),
        ("wo_inter", AblationFlags { no_inter: true, ..Default::default() }),
    ] {
        let cfg = TrainConfig { ablation: flags, ..base.clone() };
        let out = train(&cfg, &ds).unwrap();
        results.push((name, out.report.overall_mae, out.report.overall_persistence_mae));
    }
    let (f, wi, we) = (results[0].1, results[1].1, results[2].1);
    println!(
        "seed {:>3} epochs {:>2}: full {:.5} wo_intra {:.5} ({:+.3}%) wo_inter {:.5} ({:+.3}%) persist {:.4} ({:.1}%)",
        seed, epochs, f, wi, (wi / f - 1.0) * 100.0, we, (we / f - 1.0) * 100.0,
        results[0].2, (1.0 - f / results[0].2) * 100.0
    );
}
