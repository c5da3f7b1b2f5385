use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::DiffError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name, flat index, analytic and numeric derivative at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences on `samples` coordinates.
///
/// `build` receives a fresh evaluation-mode graph (dropout off) and the
/// current parameters. Coordinates are drawn round-robin over parameter
/// tensors so that small tensors (biases) are always covered; if `samples`
/// reaches the total parameter count every coordinate is checked.
/// Parameter values are restored before returning.
pub fn grad_check<R, F>(
    store: &mut ParamStore,
    build: F,
    eps: f64,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport, DiffError>
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, DiffError>,
{
    let eval = |store: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        Ok(g.value(loss).item())
    };

    let saved: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward_into(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();
    for (id, s) in store.ids().collect::<Vec<_>>().into_iter().zip(saved) {
        store.grad_mut(id).copy_from_slice(&s);
    }

    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| !store.value(id).is_empty())
        .collect();
    let coords: Vec<(ParamId, usize)> = if samples >= store.num_scalars() {
        ids.iter()
            .flat_map(|&id| (0..store.value(id).len()).map(move |i| (id, i)))
            .collect()
    } else {
        (0..samples)
            .map(|k| {
                let id = ids[k % ids.len()];
                (id, rng.gen_range(0..store.value(id).len()))
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: coords.len(),
        worst: None,
    };
    for (id, i) in coords {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(store);
        store.value_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let a = analytic[id.index()][i];
        let err = rel_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((store.name(id).to_string(), i, a, numeric));
        }
    }
    Ok(report)
}
