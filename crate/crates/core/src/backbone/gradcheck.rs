//! Central finite-difference check of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{ParamGrads, ParamGroup, ParamStore};
use crate::error::Result;

/// `|g_a − g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(param, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h` on up to
/// `samples_per_group` randomly chosen trainable coordinates of every group.
pub fn grad_check<F>(
    loss: F,
    store: &ParamStore,
    analytic: &ParamGrads,
    h: f64,
    samples_per_group: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut coords: BTreeMap<ParamGroup, Vec<(usize, usize)>> = BTreeMap::new();
    for (id, p) in store.iter().enumerate() {
        if p.trainable {
            let entry = coords.entry(p.group).or_default();
            entry.extend((0..p.value.len()).map(|c| (id, c)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut groups = Vec::new();
    for (group, all) in coords {
        let picks = sample(&mut rng, all.len(), samples_per_group.min(all.len()));
        let mut report = GroupReport {
            group,
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for pick in picks.iter() {
            let (id, c) = all[pick];
            let original = store.param(id).value.as_slice().expect("standard layout")[c];
            let mut eval_at = |v: f64| -> Result<f64> {
                work.param_mut(id).value.as_slice_mut().expect("standard layout")[c] = v;
                loss(&work)
            };
            let plus = eval_at(original + h)?;
            let minus = eval_at(original - h)?;
            eval_at(original)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.coord(id, c);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.param(id).name.clone(), c, a, numeric));
            }
        }
        groups.push(report);
    }
    Ok(GradCheckReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::params::value_and_grad;
    use crate::backbone::tape::Mat;
    use ndarray::array;

    fn linear_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", ParamGroup::Heads, array![[0.3, -1.2, 2.5, 0.7]]).unwrap();
        s
    }

    const W: [f64; 4] = [1.5, -0.25, 3.0, 0.125];

    fn linear_loss(s: &ParamStore) -> Result<f64> {
        Ok(s.get("p").iter().zip(W).map(|(p, w)| p * w).sum())
    }

    fn linear_grads(s: &ParamStore) -> ParamGrads {
        value_and_grad(s, |tape, b| {
            let p = b.var(tape, "p");
            let w = tape.leaf(Mat::from_shape_vec((1, 4), W.to_vec()).unwrap());
            let prod = tape.mul(p, w);
            Ok(tape.sum(prod))
        })
        .unwrap()
        .1
    }

    #[test]
    fn exact_for_linear_loss() {
        let s = linear_store();
        // Central differences are exact on a linear loss up to rounding, which
        // shrinks as h grows.
        let report = grad_check(linear_loss, &s, &linear_grads(&s), 1e-2, 4, 0).unwrap();
        assert!(report.max_rel_error() <= 1e-12, "{report:?}");
    }

    #[test]
    fn detects_scaled_gradient() {
        let s = linear_store();
        let mut g = linear_grads(&s);
        g.scale(1.01);
        let report = grad_check(linear_loss, &s, &g, 1e-5, 4, 0).unwrap();
        assert!(report.max_rel_error() >= 4e-3);
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut s = linear_store();
        s.param_mut(0).trainable = false;
        let report = grad_check(linear_loss, &s, &ParamGrads::zeros_like(&s), 1e-5, 4, 0).unwrap();
        assert!(report.groups.is_empty());
    }
}
