//! Full batch pipeline on the network study: design, ensemble, field data,
//! two emulators, calibration and scoring.

use ssgp::pipeline::{ModeName, Pipeline, PipelineConfig};
use ssgp::studies::{NetStudy, Study};

fn main() -> ssgp::Result<()> {
    let mut config = PipelineConfig::preset(Study::Network(NetStudy::default()), 7);
    config.emulator.n_samples = 1000;
    config.emulator.burn_in = 250;
    config.emulator.thin = 5;
    config.calibration.n_samples = 2000;
    config.calibration.burn_in = 500;
    config.calibration.thin = 5;
    let out = std::env::temp_dir().join("ssgp-example-pipeline");
    let pipeline = Pipeline::new(config, Some(out.clone()))?;
    let scores = pipeline.run_all(&[ModeName::Spatial, ModeName::Heterogeneous])?;
    println!("model           GRS        RMSE");
    for s in scores {
        println!("{:<15} {:>9.1} {:>8.4}", s.model, s.grs, s.rmse);
    }
    println!("outputs in {}", out.display());
    Ok(())
}
