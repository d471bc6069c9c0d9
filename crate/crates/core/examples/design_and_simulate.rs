//! Latin hypercube design driving the three simulators.

use ssgp::design::latin_hypercube;
use ssgp::studies::{LvStudy, NetStudy, PdeStudy, Study};

fn main() -> ssgp::Result<()> {
    for study in [
        Study::Lv(LvStudy::default()),
        Study::SirPde(PdeStudy::default()),
        Study::Network(NetStudy::default()),
    ] {
        let design =
            latin_hypercube(10, study.dims(), 1, false)?.with_bounds(study.default_bounds())?;
        let ens = study.simulate_ensemble(&design)?;
        let last = ens.values.last().expect("at least one time");
        println!(
            "{:?}: {} runs, {} times, {} locations, final mean output {:.3}",
            study.param_names(),
            ens.n_runs(),
            ens.n_times(),
            ens.n_sites(),
            last.mean()
        );
    }
    Ok(())
}
