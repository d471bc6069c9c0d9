//! Fit the spatial emulator to a predator-prey ensemble and predict a
//! held-out run.

use ssgp::design::{latin_hypercube, to_unit};
use ssgp::emulator::{emulator_predict, fit_emulator, EmulatorConfig, LagSource, McmcSettings};
use ssgp::studies::{LvStudy, Study};

fn main() -> ssgp::Result<()> {
    let study = Study::Lv(LvStudy {
        horizon: 10,
        ..Default::default()
    });
    let design = latin_hypercube(30, 4, 2, false)?.with_bounds(study.default_bounds())?;
    let (ens, scaling) = study.simulate_ensemble(&design)?.standardized();
    let cfg = EmulatorConfig {
        mcmc: McmcSettings {
            n_samples: 2000,
            burn_in: 500,
            thin: 10,
            adapt: true,
        },
        seed: 2,
        ..Default::default()
    };
    let fit = fit_emulator(&ens, &cfg)?;
    println!(
        "{} draws, acceptance beta {:.2} omega {:.2}",
        fit.len(),
        fit.acceptance.beta,
        fit.acceptance.omega
    );

    let truth = study.default_truth();
    let clean = study.run(&truth)?;
    let lags = LagSource::Recursive(scaling.forward_series(&clean[..fit.p]));
    let preds = emulator_predict(&fit, &ens, &to_unit(&truth, &design.bounds), &lags)?;
    let n = preds.len() as f64;
    println!("t   prey   emulated  sd");
    for t in (0..preds[0].mean.len()).step_by(4) {
        let m = preds.iter().map(|p| p.mean[t][0]).sum::<f64>() / n;
        let v = preds
            .iter()
            .map(|p| p.var[t][0] + (p.mean[t][0] - m).powi(2))
            .sum::<f64>()
            / n;
        println!(
            "{:<3} {:6.2} {:8.2} {:5.2}",
            t + fit.p + 1,
            clean[t + fit.p][0],
            scaling.backward(0, m),
            v.sqrt() * scaling.sd[0]
        );
    }
    Ok(())
}
