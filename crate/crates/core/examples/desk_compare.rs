//! Trains the self-reflective and the budget-matched DLGM wiring on the
//! desk MNIST preset and prints validation IWAE-100 per seed.
//!
//! cargo run --release -p sere-core --example desk_compare -- [seeds] [epochs]

use std::path::Path;

use sere_core::config::load_config;
use sere_core::hierarchy::Hierarchy;
use sere_core::rng::stream;
use sere_core::run::prepare_data;
use sere_core::training::train;

fn main() -> sere_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets/mnist_desk.json");
    let mut resolved = load_config(&preset, None)?;
    if let Some(e) = args.get(2).and_then(|s| s.parse().ok()) {
        resolved.config.training.epochs = e;
    }
    let sere_spec = resolved.config.model.clone();
    let dlgm_spec = sere_spec.dlgm_matched(0)?;
    for seed in 0..seeds {
        let mut cfg = resolved.config.clone();
        cfg.training.seed = seed;
        let data = prepare_data(&cfg, &resolved.base_dir)?;
        let mut scores = Vec::new();
        for spec in [&sere_spec, &dlgm_spec] {
            let h = Hierarchy::new(spec.clone())?;
            let store = h.init(&mut stream(seed, 0))?;
            let start = std::time::Instant::now();
            let (store, rows) = train(h.clone(), cfg.training.clone(), store, &data.train, &data.valid, |_| {})?;
            let r = h.evaluate(&store, &data.valid, Some(100), &mut stream(seed, 2), 500)?;
            let last = rows.last().expect("epochs > 0");
            println!(
                "seed {seed} {:?}: params {} valid elbo {:.3} iwae100 {:.3} kls {:?} ({:.0}s)",
                spec.wiring,
                store.scalar_count(),
                r.elbo,
                r.iwae.unwrap_or(f64::NAN),
                last.valid_kls.iter().map(|k| format!("{k:.2}")).collect::<Vec<_>>(),
                start.elapsed().as_secs_f64()
            );
            scores.push(r.iwae.unwrap_or(f64::NAN));
        }
        println!("seed {seed}: sere - dlgm = {:.3}", scores[0] - scores[1]);
    }
    Ok(())
}
