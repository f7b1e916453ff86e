//! Central finite-difference checks of the tape's analytic gradients.
//!
//! The numeric side only calls the forward pass, so it is independent of the
//! backward rules it checks.

use rand::seq::index::sample;
use rand::Rng;

use super::{Binding, Graph, ParamId, ParamStore, ShapeError, Tensor, Var};

/// Per-input relative errors `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-6)`,
/// with the norms they were computed from.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub relative_errors: Vec<f64>,
    pub abs_errors: Vec<f64>,
    /// `max(‖analytic‖, ‖numeric‖)` per input.
    pub grad_norms: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }

    fn push(&mut self, analytic: &[f64], numeric: &[f64]) {
        let diff: f64 = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        self.relative_errors.push(diff / na.max(nn).max(1e-6));
        self.abs_errors.push(diff);
        self.grad_norms.push(na.max(nn));
    }
}

/// Check gradients of a scalar function of free tensors. Every coordinate
/// is perturbed when `max_coords` is `None`; otherwise a random subset of
/// that size per input.
pub fn check_inputs<B>(
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: Option<usize>,
    rng: &mut impl Rng,
    build: B,
) -> Result<GradCheckReport, ShapeError>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, ShapeError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, ShapeError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out);
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        let coords = pick_coords(inputs[i].len(), max_coords, rng);
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for c in coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let fp = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let fm = eval(&work)?;
            work[i].data_mut()[c] = orig;
            a.push(analytic.data()[c]);
            n.push((fp - fm) / (2.0 * h));
        }
        report.push(&a, &n);
    }
    Ok(report)
}

/// Check gradients of a scalar function of the parameters `ids` of a store.
pub fn check_params<B>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    max_coords: Option<usize>,
    rng: &mut impl Rng,
    build: B,
) -> Result<GradCheckReport, ShapeError>
where
    B: Fn(&mut Graph<f64>, &Binding) -> Result<Var, ShapeError>,
{
    let mut probe = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64, ShapeError> {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let out = build(&mut g, &b)?;
        Ok(g.scalar(out))
    };
    for &id in ids {
        probe.set_frozen(id, false);
    }
    let mut g = Graph::new();
    let binding = probe.bind(&mut g);
    let out = build(&mut g, &binding)?;
    let grads = g.backward(out);
    let mut report = GradCheckReport::default();
    for &id in ids {
        let analytic = grads.get_or_zeros(binding.var(id));
        let coords = pick_coords(probe.tensor(id).len(), max_coords, rng);
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for c in coords {
            let orig = probe.tensor(id).data()[c];
            probe.tensor_mut(id).data_mut()[c] = orig + h;
            let fp = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[c] = orig - h;
            let fm = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[c] = orig;
            a.push(analytic.data()[c]);
            n.push((fp - fm) / (2.0 * h));
        }
        report.push(&a, &n);
    }
    Ok(report)
}

fn pick_coords(len: usize, max: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    match max {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}
