//! Central-difference gradient checking over sampled scalars of `f64` tensors.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(tensor, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Picks `max(1, round(fraction · len))` distinct elements from every tensor.
pub fn sample_elements(tensors: &[Tensor<f64>], fraction: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    for (i, t) in tensors.iter().enumerate() {
        let k = ((t.len() as f64 * fraction).round() as usize).clamp(1, t.len());
        picks.extend(sample(&mut rng, t.len(), k).into_iter().map(|e| (i, e)));
    }
    picks
}

/// Compares the analytic gradient of the scalar `f` with central differences
/// at step `h` for each `(tensor, element)` in `select`.
pub fn check<F>(tensors: &[Tensor<f64>], select: &[(usize, usize)], h: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    check_with(tensors, select, h, floor, |g, v, _| f(g, v))
}

/// [`check`] where `f` also receives the index of the perturbed tensor, or
/// `None` for the analytic pass, so it can skip work that does not read it.
pub fn check_with<F>(
    tensors: &[Tensor<f64>],
    select: &[(usize, usize)],
    h: f64,
    floor: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>], Option<usize>) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<f64> = {
        let g = Graph::new();
        let vars: Vec<_> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars, None)?;
        let grads = g.backward(out)?;
        select
            .iter()
            .map(|&(i, e)| grads.get(vars[i]).map_or(0.0, |t| t.data()[e]))
            .collect()
    };
    // shared with each evaluation graph, which is dropped before the next write
    let eval = |ins: &[Rc<Tensor<f64>>], i: usize| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = ins.iter().map(|t| g.constant_rc(Rc::clone(t))).collect();
        Ok(f(&g, &vars, Some(i))?.item())
    };
    let mut work: Vec<Rc<Tensor<f64>>> = tensors.iter().cloned().map(Rc::new).collect();
    let mut report = GradCheckReport::default();
    for (&(i, e), &a) in select.iter().zip(&analytic) {
        let orig = work[i].data()[e];
        Rc::make_mut(&mut work[i]).data_mut()[e] = orig + h;
        let plus = eval(&work, i)?;
        Rc::make_mut(&mut work[i]).data_mut()[e] = orig - h;
        let minus = eval(&work, i)?;
        Rc::make_mut(&mut work[i]).data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = rel_err(a, numeric, floor);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((i, e, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let sel = [(0, 0), (0, 1), (0, 2)];
        let ok = check(std::slice::from_ref(&x), &sel, 1e-4, 1e-8, |_, v| {
            Ok(v[0].square().sum())
        })
        .unwrap();
        assert!(ok.passes(1e-6), "{ok:?}");
        // detach hides the dependence from the tape, so analytic is zero
        let bad = check(&[x], &sel, 1e-4, 1e-8, |_, v| {
            v[0].detach().square().sum().add(v[0].sum())
        })
        .unwrap();
        assert!(!bad.passes(1e-3));
    }

    #[test]
    fn check_with_reports_the_perturbed_tensor() {
        let ts = vec![
            Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
            Tensor::new(vec![1], vec![3.0]).unwrap(),
        ];
        let seen = std::cell::RefCell::new(Vec::new());
        let rep = check_with(&ts, &[(1, 0), (0, 1)], 1e-4, 1e-8, |_, v, moved| {
            seen.borrow_mut().push(moved);
            v[0].sum().mul(v[1].sum())
        })
        .unwrap();
        assert!(rep.passes(1e-6), "{rep:?}");
        assert_eq!(*seen.borrow(), [None, Some(1), Some(1), Some(0), Some(0)]);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let ts = vec![Tensor::<f64>::zeros(&[1000]), Tensor::zeros(&[3])];
        let a = sample_elements(&ts, 0.01, 4);
        assert_eq!(a, sample_elements(&ts, 0.01, 4));
        assert_eq!(a.iter().filter(|p| p.0 == 0).count(), 10);
        assert_eq!(a.iter().filter(|p| p.0 == 1).count(), 1);
    }
}
