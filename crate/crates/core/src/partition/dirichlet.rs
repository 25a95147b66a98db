use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Symmetric Dirichlet draw via normalized unit-scale gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(concentration: f64, dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::Parameter(format!("Dirichlet concentration must be positive, got {concentration}")));
    }
    if dim == 0 {
        return Err(Error::Parameter("Dirichlet dimension must be at least 1".into()));
    }
    if dim == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // tiny concentrations can underflow every coordinate
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}
