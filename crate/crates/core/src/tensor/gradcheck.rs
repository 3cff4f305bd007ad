use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Parameterized, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// (parameter index, element index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares backprop gradients with central finite differences of step `h`
/// on up to `max_coords` parameter coordinates sampled with `seed`.
///
/// `objective` must rebuild the same scalar from the model each time it is
/// called.
pub fn grad_check<M, F>(
    model: &mut M,
    mut objective: F,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    M: Parameterized<f64>,
    F: FnMut(&mut Graph<f64>, &M) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut g = Graph::new();
    let out = objective(&mut g, model)?;
    if !g.value(out).is_scalar() {
        return Err(Error::shape(
            "grad_check",
            "output",
            format!("objective must be scalar, got shape {:?}", g.value(out).shape()),
        ));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .map(|p| match g.param_grad(p.id()) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect();
    drop(g);

    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, max_coords).into_vec()
    };
    picks.sort_unstable();

    let mut eval = |model: &M| -> Result<f64> {
        let mut g = Graph::inference();
        let out = objective(&mut g, model)?;
        Ok(g.scalar(out))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: picks.len(),
        worst: None,
    };
    for flat in picks {
        let (mut param, mut coord) = (0, flat);
        while coord >= sizes[param] {
            coord -= sizes[param];
            param += 1;
        }
        let original = model.parameters()[param].value.data()[coord];
        model.parameters_mut()[param].value.data_mut()[coord] = original + h;
        let plus = eval(model)?;
        model.parameters_mut()[param].value.data_mut()[coord] = original - h;
        let minus = eval(model)?;
        model.parameters_mut()[param].value.data_mut()[coord] = original;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[param][coord];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((param, coord, a, numeric));
        }
    }
    Ok(report)
}
