//! Fit a depth code to a target map by ridge regression and compare with the
//! mean plane alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ridge_sfm::depth_basis::{DepthBasis, DepthCode, DepthMap};

fn main() -> ridge_sfm::Result<()> {
    let (w, h, k) = (20, 15, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mu: Vec<f64> = (0..w * h).map(|i| 2.0 + 0.01 * (i % w) as f64).collect();
    let sigma: Vec<f64> = (0..w * h * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let basis = DepthBasis::new(w, h, 4 * w, 4 * h, mu, sigma)?;

    let planted = DepthCode {
        beta: (0..k).map(|_| rng.random_range(-0.1..0.1)).collect(),
    };
    let target = basis.evaluate_dense(&planted)?;
    let mean_only = DepthMap::new(w, h, basis.mu().to_vec())?;

    for lambda in [1e-4, 1e-1, 10.0] {
        let code = basis.ridge_fit(&target, lambda)?;
        let fitted = basis.evaluate_dense(&code)?;
        let rmse = (fitted.values.iter().zip(&target.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (w * h) as f64).sqrt();
        println!(
            "lambda {lambda:>7}: rmse {rmse:.2e} m, objective {:.4}, |beta| {:.4}",
            basis.ridge_objective(&target, &code, lambda)?,
            code.beta.iter().map(|b| b * b).sum::<f64>().sqrt()
        );
    }
    let base = (mean_only.values.iter().zip(&target.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (w * h) as f64).sqrt();
    println!("mean plane alone: rmse {base:.4} m");
    println!("factor plane variances: {:?}", basis.row_variance()?);
    Ok(())
}
