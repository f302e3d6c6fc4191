//! Central finite-difference checks of analytic gradients over named
//! parameters.

use candle_core::Tensor;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ParamStore;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients
/// from turning rounding noise into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h) - f(x - h)) / 2h`
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Picks `n` distinct (parameter, flat index) coordinates uniformly over all
/// scalars of the parameters accepted by `keep`.
pub fn sample_coordinates<R: Rng + ?Sized>(
    store: &ParamStore,
    n: usize,
    rng: &mut R,
    keep: impl Fn(&str) -> bool,
) -> Vec<(String, usize)> {
    let all: Vec<(String, usize)> = store
        .iter()
        .filter(|(name, _)| keep(name))
        .flat_map(|(name, var)| (0..var.elem_count()).map(move |i| (name.to_owned(), i)))
        .collect();
    all.choose_multiple(rng, n.min(all.len())).cloned().collect()
}

fn loss_value(t: &Tensor) -> Result<f64> {
    let v = t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    Ok(v)
}

/// Compares `d loss / d theta` from one backward pass with central
/// differences at each coordinate. `loss` must be a deterministic function
/// of the store's current values.
pub fn check_gradients(
    store: &ParamStore,
    coords: &[(String, usize)],
    h: f64,
    floor: f64,
    mut loss: impl FnMut() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let l = loss()?;
    let grads = l.backward()?;
    let mut checks = Vec::with_capacity(coords.len());
    for (name, idx) in coords {
        let var = store
            .var(name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter {name}")))?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g
                .flatten_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_vec1::<f64>()?[*idx],
            None => 0.0,
        };
        let mut values = store.values(name)?;
        let x0 = values[*idx];
        let numeric = central_difference(
            |x| {
                values[*idx] = x;
                store.set_values(name, &values)?;
                loss_value(&loss()?)
            },
            x0,
            h,
        )?;
        values[*idx] = x0;
        store.set_values(name, &values)?;
        checks.push(CoordinateCheck {
            param: name.clone(),
            index: *idx,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, floor),
        });
    }
    Ok(GradCheckReport { checks })
}
