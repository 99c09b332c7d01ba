use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, NumericsError, ParameterStore};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1e-8, |numeric|)` seen.
    pub max_rel_err: f64,
    /// Global coordinate of the worst entry.
    pub worst_coord: usize,
    pub coords_checked: usize,
    /// Coordinates where both gradients were below the round-off floor
    /// (see [`NEGLIGIBLE_GRAD`]) and so were left out of `max_rel_err`.
    pub negligible: usize,
    pub passed: bool,
}

/// Round-off floor per unit of loss. Central differences at step `1e-5`
/// carry an absolute error of a few `1e-10 * max(1, |loss|)`, so gradients
/// below `NEGLIGIBLE_GRAD * max(1, |loss|)` give no information about
/// relative error.
pub const NEGLIGIBLE_GRAD: f64 = 1e-7;

/// Minimum number of coordinates probed per check.
pub const MIN_COORDS: usize = 50;

fn eval<F, E>(loss_fn: &F, params: &ParameterStore) -> Result<f64, E>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId, E>,
    E: From<NumericsError>,
{
    let mut g = Graph::new(params);
    let id = loss_fn(&mut g)?;
    let v = g.scalar(id);
    if !v.is_finite() {
        return Err(NumericsError::NonFinite("loss").into());
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// on a random subset of at least [`MIN_COORDS`] coordinates (all of them
/// when the store is smaller).
pub fn finite_diff_check<F, E>(
    loss_fn: F,
    params: &ParameterStore,
    epsilon: f64,
    tolerance: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheck, E>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId, E>,
    E: From<NumericsError>,
{
    if !(epsilon > 0.0) {
        return Err(NumericsError::InvalidEpsilon(epsilon).into());
    }
    let (loss, analytic) = {
        let mut g = Graph::new(params);
        let id = loss_fn(&mut g)?;
        let loss = g.scalar(id);
        if !loss.is_finite() {
            return Err(NumericsError::NonFinite("loss").into());
        }
        (loss, g.backward(id)?)
    };
    let floor = NEGLIGIBLE_GRAD * loss.abs().max(1.0);
    let total = params.num_scalars();
    let wanted = coords.max(MIN_COORDS).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, total, wanted).into_vec();
    picked.sort_unstable();

    let mut work = params.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_coord: 0,
        coords_checked: picked.len(),
        negligible: 0,
        passed: true,
    };
    for coord in picked {
        let (pi, off) = params.locate(coord).expect("coordinate in range");
        let base = params.by_index(pi).1.value[off];
        work.by_index_mut(pi).1.value[off] = base + epsilon;
        let up = eval(&loss_fn, &work)?;
        work.by_index_mut(pi).1.value[off] = base - epsilon;
        let down = eval(&loss_fn, &work)?;
        work.by_index_mut(pi).1.value[off] = base;
        let numeric = (up - down) / (2.0 * epsilon);
        let exact = analytic.get(pi).map_or(0.0, |g| g[off]);
        if exact.abs().max(numeric.abs()) < floor {
            report.negligible += 1;
            continue;
        }
        let rel = (exact - numeric).abs() / numeric.abs().max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = coord;
        }
    }
    report.passed = report.max_rel_err < tolerance;
    Ok(report)
}
