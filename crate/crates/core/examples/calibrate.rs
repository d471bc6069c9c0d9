//! Calibrate the predator-prey parameters against noisy synthetic data with
//! dynamic bias correction.

use ssgp::calibrator::{calibrate, eta_intervals, mixture_moments, CalibConfig, FieldData};
use ssgp::design::{latin_hypercube, to_raw};
use ssgp::emulator::{fit_emulator, EmulatorConfig, McmcSettings};
use ssgp::studies::{LvStudy, Study};

fn main() -> ssgp::Result<()> {
    let study = Study::Lv(LvStudy::default());
    let design = latin_hypercube(50, 4, 3, false)?.with_bounds(study.default_bounds())?;
    let (ens, scaling) = study.simulate_ensemble(&design)?.standardized();
    let mcmc = McmcSettings {
        n_samples: 4000,
        burn_in: 1000,
        thin: 10,
        adapt: true,
    };
    let fit = fit_emulator(
        &ens,
        &EmulatorConfig {
            mcmc,
            seed: 3,
            ..Default::default()
        },
    )?;

    let truth = study.default_truth();
    let (field, _) = study.field(&truth, study.default_noise_sd(), 30)?;
    let z = FieldData::new(scaling.forward_series(&field.z))?;
    let draws = calibrate(
        &z,
        &fit,
        &ens,
        &CalibConfig {
            mcmc,
            seed: 3,
            ..Default::default()
        },
    )?;
    println!(
        "acceptance eta {:.2} rho {:.2}",
        draws.acceptance_eta, draws.acceptance_rho
    );
    for (k, (lo, hi)) in eta_intervals(&draws, 0.95).into_iter().enumerate() {
        let b = &design.bounds[k..=k];
        println!(
            "{}: truth {:.3}, 95% interval ({:.3}, {:.3})",
            study.param_names()[k],
            truth[k],
            to_raw(&[lo], b)[0],
            to_raw(&[hi], b)[0]
        );
    }
    let m = mixture_moments(&draws)?;
    let mut sse = 0.0;
    let mut n = 0.0;
    for (t, row) in m.mu.iter().enumerate() {
        for (s, mu) in row.iter().enumerate() {
            sse += (scaling.backward(s, *mu) - field.z[t + fit.p][s]).powi(2);
            n += 1.0;
        }
    }
    println!("bias-corrected RMSE {:.3}", (sse / n).sqrt());
    Ok(())
}
