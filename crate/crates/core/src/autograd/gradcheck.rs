//! Central-difference gradient checking.
//!
//! The checker compares `(f(x+εe) − f(x−εe)) / 2ε` against the gradient
//! produced by [`Graph::backward`] for each coordinate and reports the
//! worst relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
//! Callers keep `x` away from relu kinks and max-pool ties; coordinates
//! whose one-sided differences disagree are counted in
//! [`GradCheckReport::kinks`] so such points can be detected and redrawn.

use rand::seq::SliceRandom;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterSet};
use super::tensor::{Result, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates where `f` looks non-smooth within `±eps`.
    pub kinks: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, coords_checked: 0, kinks: 0 }
    }

    fn record(&mut self, index: usize, analytic: f64, d: Differences) {
        let numeric = d.central();
        let err = rel_error(analytic, numeric);
        self.coords_checked += 1;
        self.kinks += usize::from(d.is_kink());
        if err > self.max_rel_error || self.coords_checked == 1 {
            self.max_rel_error = err;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

/// `f(x - eps)`, `f(x)`, `f(x + eps)` along one coordinate.
#[derive(Debug, Clone, Copy)]
struct Differences {
    down: f64,
    mid: f64,
    up: f64,
    eps: f64,
}

/// One-sided slopes differing by more than this fraction of the larger
/// one indicate a kink between `x - eps` and `x + eps`.
const KINK_GAP: f64 = 0.05;

impl Differences {
    fn central(&self) -> f64 {
        (self.up - self.down) / (2.0 * self.eps)
    }

    fn is_kink(&self) -> bool {
        let right = (self.up - self.mid) / self.eps;
        let left = (self.mid - self.down) / self.eps;
        (right - left).abs() > KINK_GAP * right.abs().max(left.abs()).max(1e-6)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Gradient checker configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradChecker {
    pub eps: f64,
    /// Multiplies every analytic gradient before comparison. Only used to
    /// inject faults when testing the checker itself; 1.0 otherwise.
    pub analytic_scale: f64,
}

impl Default for GradChecker {
    fn default() -> Self {
        GradChecker { eps: DEFAULT_EPS, analytic_scale: 1.0 }
    }
}

/// Checks `f` at `x` with the default checker and step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    GradChecker { eps, ..Default::default() }.check(f, x)
}

impl GradChecker {
    pub fn check<F>(&self, f: F, x: &Tensor) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let loss = f(&mut g, xv)?;
        g.backward(loss)?;
        let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mid = g.value(loss).item();

        let eval = |t: Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let v = g.leaf(t, false);
            let out = f(&mut g, v)?;
            Ok(g.value(out).item())
        };
        let mut report = GradCheckReport::empty();
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += self.eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= self.eps;
            let d = Differences { up: eval(plus)?, mid, down: eval(minus)?, eps: self.eps };
            report.record(i, analytic.data()[i] * self.analytic_scale, d);
        }
        Ok(report)
    }

    /// Checks the gradient of a loss over a whole [`ParameterSet`].
    ///
    /// `f` binds the parameters it needs into the graph and returns the loss.
    /// For each parameter at most `max_coords` coordinates are checked: the
    /// one with the largest analytic gradient plus a seeded random sample.
    /// Frozen rows are skipped.
    pub fn check_params<F>(
        &self,
        f: F,
        params: &ParameterSet,
        max_coords: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<(String, GradCheckReport)>>
    where
        F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
    {
        let mut analytic = params.clone();
        analytic.zero_grads();
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        g.backward(loss)?;
        g.accumulate_into(&mut analytic);
        let mid = g.value(loss).item();

        let eval = |p: &ParameterSet| -> Result<f64> {
            let mut g = Graph::new();
            let out = f(&mut g, p)?;
            Ok(g.value(out).item())
        };
        let mut work = params.clone();
        let mut reports = Vec::new();
        for (id, p) in params.iter() {
            let grad = analytic.grad(id)?.data().to_vec();
            let cols = p.value.dims2().1;
            let mut coords: Vec<usize> =
                (0..p.value.len()).filter(|i| !p.frozen_rows.contains(&(i / cols))).collect();
            if coords.is_empty() {
                continue;
            }
            if coords.len() > max_coords {
                let top = *coords
                    .iter()
                    .max_by(|&&a, &&b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .expect("non-empty");
                coords.shuffle(rng);
                coords.truncate(max_coords.saturating_sub(1));
                if !coords.contains(&top) {
                    coords.push(top);
                }
                coords.sort_unstable();
            }
            let mut report = GradCheckReport::empty();
            for i in coords {
                let (down, up) = probe(&mut work, id, i, self.eps, &eval)?;
                report.record(i, grad[i] * self.analytic_scale, Differences { down, mid, up, eps: self.eps });
            }
            reports.push((p.name.clone(), report));
        }
        Ok(reports)
    }
}

fn probe(
    work: &mut ParameterSet,
    id: ParamId,
    i: usize,
    eps: f64,
    eval: &impl Fn(&ParameterSet) -> Result<f64>,
) -> Result<(f64, f64)> {
    let orig = work.value(id).data()[i];
    work.value_mut(id).data_mut()[i] = orig + eps;
    let up = eval(work);
    work.value_mut(id).data_mut()[i] = orig - eps;
    let down = eval(work);
    work.value_mut(id).data_mut()[i] = orig;
    Ok((down?, up?))
}
