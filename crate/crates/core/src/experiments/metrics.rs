use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::store::{Dataset, ObservedMatrix};

/// Root mean squared error of `predictions`, aligned with the entries of
/// `test`.
pub fn rmse(predictions: &[f64], test: &ObservedMatrix) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if predictions.len() != test.n_obs() {
        return Err(Error::invalid(format!(
            "{} predictions for {} test entries",
            predictions.len(),
            test.n_obs()
        )));
    }
    let sq: f64 = predictions
        .iter()
        .zip(test.entries())
        .map(|(p, e)| (p - e.value).powi(2))
        .sum();
    Ok((sq / test.n_obs() as f64).sqrt())
}

/// Mean predictions (`sigmoid` of the predictor for Bernoulli relations) at
/// the entries of `test`.
pub fn predictions(state: &ModelState, test: &ObservedMatrix) -> Result<Vec<f64>> {
    let m = test.relation();
    test.entries()
        .iter()
        .map(|e| state.predict(m, e.row, e.col).map(|p| p.mean))
        .collect()
}

pub fn matrix_rmse(state: &ModelState, test: &ObservedMatrix) -> Result<f64> {
    rmse(&predictions(state, test)?, test)
}

/// RMSE pooled over every entry of every relation in `test`.
pub fn dataset_rmse(state: &ModelState, test: &Dataset) -> Result<f64> {
    dataset_rmse_over(state, test, &(0..test.n_relations()).collect::<Vec<_>>())
}

/// RMSE pooled over the entries of the listed relations.
pub fn dataset_rmse_over(state: &ModelState, test: &Dataset, relations: &[usize]) -> Result<f64> {
    let (mut sq, mut n) = (0.0, 0usize);
    for &m in relations {
        let matrix = test.matrix(m);
        for (p, e) in predictions(state, matrix)?.iter().zip(matrix.entries()) {
            sq += (p - e.value).powi(2);
        }
        n += matrix.n_obs();
    }
    if n == 0 {
        return Err(Error::EmptyTestSet);
    }
    Ok((sq / n as f64).sqrt())
}

/// `method / reference`.
pub fn relative_error(method: f64, reference: f64) -> Result<f64> {
    if reference == 0.0 || !reference.is_finite() {
        return Err(Error::invalid(format!("reference error must be positive, got {reference}")));
    }
    Ok(method / reference)
}
