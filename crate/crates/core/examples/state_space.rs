//! Forward filtering and backward sampling for a local-level model with
//! discounted variance.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssgp::ssm::{ffbs, NgPrior, Observation, Smoother, SsmSpec, StateNoise, Transition};

fn main() -> ssgp::Result<()> {
    let y: Vec<DVector<f64>> = [0.2, 0.5, 0.4, 1.1, 1.3, 0.9, 1.6, 2.0]
        .iter()
        .map(|v| DVector::from_element(1, *v))
        .collect();
    let spec = SsmSpec {
        obs: Observation::Dense {
            f: vec![DMatrix::identity(1, 1); y.len()],
            v: DMatrix::identity(1, 1),
        },
        transition: Transition::Identity,
        state_noise: StateNoise::Fixed(DMatrix::from_element(1, 1, 0.5)),
        omega: 0.9,
        prior: NgPrior::isotropic(1, 0.0, 10.0, 1.0, 1.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 2000;
    let mut mean = vec![0.0; y.len() + 1];
    let mut fs = None;
    for _ in 0..draws {
        let (d, f) = ffbs(&y, &spec, Smoother::Conditional, &mut rng)?;
        for (m, th) in mean.iter_mut().zip(&d.theta) {
            *m += th[0] / draws as f64;
        }
        fs = Some(f);
    }
    let fs = fs.expect("at least one draw");
    println!("t  y      filtered  smoothed");
    for t in 1..=y.len() {
        println!(
            "{t}  {:.2}  {:8.3}  {:8.3}",
            y[t - 1][0],
            fs.steps[t].m[0],
            mean[t]
        );
    }
    println!("log marginal likelihood {:.3}", fs.log_likelihood());
    Ok(())
}
