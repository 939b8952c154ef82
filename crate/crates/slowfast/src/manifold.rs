//! Iterative slow-manifold refinement.
//!
//! Starting from the critical graph `eta0` (the root of `Y(x, .) = 0`), each
//! step solves the invariance equation
//!
//! ```text
//! -eps_hat * d(eta^{n-1})(x) X0(x, eta^n) + Y0(x, eta^n) = 0
//! ```
//!
//! per grid node for the next cumulative correction `eta^n`, where
//! `(X0, Y0)` are the fields in deviation coordinates about `eta0`. The
//! iteration operates on cumulative partial sums directly, so each step only
//! needs the previous correction and one grid derivative of it.

use crate::error::{Result, SlowFastError, Warning};
use crate::grid::{vector_jacobian, GridFunction, GridSpec};
use crate::real::Real;
use crate::system::SlowFastSystem;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::sync::Arc;

pub(crate) type VecGrid<T> = GridFunction<T, DVector<T>>;
pub(crate) type MatGrid<T> = GridFunction<T, DMatrix<T>>;

/// Tolerances and budgets for the per-node Newton solves.
#[derive(Debug, Clone)]
pub struct BuildOptions<T: Real> {
    /// Relative Newton tolerance: converged when `||F|| <= tol (1 + ||v||)`.
    pub newton_tol: T,
    /// Maximum Newton iterations per node.
    pub newton_max: usize,
    /// Residuals below this level never count as stagnation.
    pub stagnation_tol: T,
    /// Abort when more than this fraction of nodes fails to solve.
    pub max_masked_fraction: f64,
}

impl<T: Real> Default for BuildOptions<T> {
    fn default() -> Self {
        Self {
            newton_tol: T::of(1e-13),
            newton_max: 50,
            stagnation_tol: T::of(1e-12),
            max_masked_fraction: 0.5,
        }
    }
}

/// Newton solve of `-slope * eps_hat * X(x, eta0 + v) + Y_dev(x, eta0 + v) = 0`
/// at one point, where `Y_dev` subtracts the graph drift encoded in `slope`
/// (the combined Jacobian of `eta0` and the running correction). With
/// `eta0_at = 0` and `slope = 0` this reduces to `Y(x, v) = 0`.
fn newton_root<T: Real>(
    system: &SlowFastSystem<T>,
    x: &DVector<T>,
    eta0_at: &DVector<T>,
    total_slope: &DMatrix<T>,
    seed: &DVector<T>,
    opts: &BuildOptions<T>,
) -> Result<DVector<T>> {
    let eps_hat = system.eps_hat();
    let residual_of = |v: &DVector<T>| -> Result<DVector<T>> {
        let y = eta0_at + v;
        let fx = system.slow_field(x, &y);
        let fy = system.fast_field(x, &y);
        let r = &fy - total_slope * &fx * eps_hat;
        if !r.iter().all(|c| c.is_finite()) {
            return Err(SlowFastError::NumericalBreakdown("non-finite Newton residual".into()));
        }
        Ok(r)
    };
    // Iterate to the round-off stall, not merely to the tolerance: the
    // stored node values are later differentiated on the grid, which
    // amplifies any node-to-node slack left inside the tolerance band.
    let mut best_v = seed.clone();
    let mut best_norm = residual_of(&best_v)?.norm();
    let mut v = best_v.clone();
    for _ in 0..opts.newton_max {
        let y = eta0_at + &v;
        let residual = residual_of(&v)?;
        let p = system.field_partials(x, &y)?;
        let jac = &p.dy_fast - total_slope * &p.dy_slow * eps_hat;
        let delta = match jac.lu().solve(&residual) {
            Some(d) => d,
            None => break,
        };
        v -= delta;
        let norm = residual_of(&v)?.norm();
        if norm < best_norm {
            best_norm = norm;
            best_v = v.clone();
        } else {
            break; // stalled at the floor
        }
    }
    if best_norm <= opts.newton_tol * (T::one() + best_v.norm()) {
        Ok(best_v)
    } else {
        Err(SlowFastError::NewtonDiverged(format!(
            "residual {best_norm} above tolerance at x = {x}"
        )))
    }
}

/// Solve `Y(x, v) = 0` per grid node by Newton continuation along the grid.
///
/// Nodes where the iteration fails or the fastness condition does not hold
/// are masked out of the valid grid rather than failing the whole solve;
/// the call errors only when more than `max_masked_fraction` of the nodes
/// is lost.
pub fn solve_eta0<T: Real>(
    system: &SlowFastSystem<T>,
    spec: &GridSpec<T>,
    opts: &BuildOptions<T>,
) -> Result<VecGrid<T>> {
    let zero_y = DVector::zeros(system.n_fast());
    let template: VecGrid<T> =
        GridFunction::from_values(spec.clone(), 0, vec![zero_y.clone(); spec.len()]);
    let nodes = template.valid_nodes();
    let zero_slope = DMatrix::zeros(system.n_fast(), spec.dims());
    let mut values = vec![zero_y.clone(); spec.len()];
    let mut masked = Vec::new();
    let mut last_good: Option<DVector<T>> = None;
    for (flat, x) in &nodes {
        let seed = last_good.clone().unwrap_or_else(|| system.eta0_seed(x));
        let solved = newton_root(system, x, &zero_y, &zero_slope, &seed, opts).and_then(|v| {
            if system.is_fast_at(x, &v)? {
                Ok(v)
            } else {
                Err(SlowFastError::SingularA("fastness condition failed".into()))
            }
        });
        match solved {
            Ok(v) => {
                values[*flat] = v.clone();
                last_good = Some(v);
            }
            Err(_) => {
                values[*flat] = seed;
                masked.push(*flat);
            }
        }
    }
    if masked.len() > (opts.max_masked_fraction * nodes.len() as f64) as usize {
        return Err(SlowFastError::NewtonDiverged(format!(
            "critical graph solve failed at {} of {} nodes",
            masked.len(),
            nodes.len()
        )));
    }
    let mut grid = GridFunction::from_values(spec.clone(), 0, values);
    grid.apply_mask(&masked);
    Ok(grid)
}

/// One refinement step: from the previous cumulative correction and its
/// grid derivative, solve the invariance equation per node for the next
/// cumulative correction. Each node's Newton iteration is seeded with the
/// previous correction, so convergence is fast for small `eps`.
pub fn correction_step<T: Real>(
    system: &SlowFastSystem<T>,
    eta0: &VecGrid<T>,
    deta0: &MatGrid<T>,
    prev: &VecGrid<T>,
    dprev: &MatGrid<T>,
    opts: &BuildOptions<T>,
) -> Result<VecGrid<T>> {
    let spec = eta0.spec().clone();
    let trim = deta0.trim().max(dprev.trim()).max(prev.trim());
    let usable = |flat: usize| {
        eta0.valid_at_trim(flat, trim)
            && deta0.valid_at_trim(flat, trim)
            && prev.valid_at_trim(flat, trim)
            && dprev.valid_at_trim(flat, trim)
    };
    let nodes: Vec<usize> = (0..spec.len()).filter(|&i| usable(i)).collect();
    if nodes.is_empty() {
        return Err(SlowFastError::DomainExceeded(
            "no valid nodes left for a refinement step (grid too narrow for this depth)".into(),
        ));
    }
    let solve_one = |&flat: &usize| -> (usize, Result<DVector<T>>) {
        let x = eta0.point(flat);
        let slope = dprev.value_at(flat) + deta0.value_at(flat);
        let seed = prev.value_at(flat);
        (flat, newton_root(system, &x, eta0.value_at(flat), &slope, seed, opts))
    };
    let solved: Vec<(usize, Result<DVector<T>>)> = if nodes.len() >= 64 {
        nodes.par_iter().map(solve_one).collect()
    } else {
        nodes.iter().map(solve_one).collect()
    };
    let mut values = vec![DVector::zeros(system.n_fast()); spec.len()];
    let mut masked: Vec<usize> = (0..spec.len()).filter(|&i| !usable(i)).collect();
    let mut failures = 0usize;
    for (flat, r) in solved {
        match r {
            Ok(v) => values[flat] = v,
            Err(_) => {
                values[flat] = prev.value_at(flat).clone();
                masked.push(flat);
                failures += 1;
            }
        }
    }
    if failures > (opts.max_masked_fraction * nodes.len() as f64) as usize {
        return Err(SlowFastError::NewtonDiverged(format!(
            "refinement step failed at {failures} of {} nodes",
            nodes.len()
        )));
    }
    let mut grid = GridFunction::from_values(spec, trim, values);
    grid.apply_mask(&masked);
    Ok(grid)
}

/// The invariance-equation residual field of a cumulative correction:
/// `rho(x) = -eps_hat d(eta) X0(x, eta(x)) + Y0(x, eta(x))`.
///
/// A vanishing residual identifies an exactly invariant graph; its sup norm
/// is the manifold error `E_eta`.
pub fn invariance_residual<T: Real>(
    system: &SlowFastSystem<T>,
    eta0: &VecGrid<T>,
    deta0: &MatGrid<T>,
    eta: &VecGrid<T>,
    deta: &MatGrid<T>,
) -> VecGrid<T> {
    let eps_hat = system.eps_hat();
    let graph = eta.zip_map(eta0, |a, b| a + b);
    let slopes = deta.zip_map(deta0, |a, b| a + b);
    let spec = graph.spec().clone();
    let trim = graph.trim().max(slopes.trim());
    let usable = |flat: usize| graph.valid_at_trim(flat, trim) && slopes.valid_at_trim(flat, trim);
    let values: Vec<DVector<T>> = (0..spec.len())
        .map(|flat| {
            if !usable(flat) {
                return DVector::zeros(system.n_fast());
            }
            let x = graph.point(flat);
            let g = graph.value_at(flat);
            let fx = system.slow_field(&x, g);
            let fy = system.fast_field(&x, g);
            &fy - slopes.value_at(flat) * &fx * eps_hat
        })
        .collect();
    let masked: Vec<usize> = (0..spec.len()).filter(|&i| !usable(i)).collect();
    let mut out = GridFunction::from_values(spec, trim, values);
    out.apply_mask(&masked);
    out
}

/// The stack of corrections produced by [`ManifoldApprox::build`].
pub struct ManifoldApprox<T: Real> {
    system: Arc<SlowFastSystem<T>>,
    spec: GridSpec<T>,
    /// Critical graph `eta0` (root of the fast field).
    pub eta0: VecGrid<T>,
    /// Grid Jacobian of `eta0` (`n_f x n_s` per node).
    pub deta0: MatGrid<T>,
    /// Per-iteration corrections `eta_n` (deviations about `eta0`).
    pub eta_layers: Vec<VecGrid<T>>,
    /// Cumulative correction `eta = sum eta_n`.
    pub eta_cum: VecGrid<T>,
    /// Grid Jacobian of the cumulative correction.
    pub deta_cum: MatGrid<T>,
    /// Sup norm of the residual after each step.
    pub residual_history: Vec<T>,
    /// Final residual sup norm.
    pub e_eta: T,
    /// Non-fatal conditions met during the build.
    pub warnings: Vec<Warning>,
}

impl<T: Real> ManifoldApprox<T> {
    /// Run the full pipeline: critical graph, then up to `n1` refinement
    /// steps with residual tracking and stagnation detection.
    pub fn build(
        system: Arc<SlowFastSystem<T>>,
        spec: &GridSpec<T>,
        n1: usize,
        opts: &BuildOptions<T>,
    ) -> Result<Self> {
        if n1 == 0 {
            return Err(SlowFastError::InvalidParameters("need n1 >= 1".into()));
        }
        let eta0 = solve_eta0(&system, spec, opts)?;
        let deta0 = vector_jacobian(&eta0)?;
        let mut warnings = Vec::new();
        let masked = eta0.masked_count();
        if masked > 0 {
            warnings.push(Warning::MaskedNodes { count: masked });
        }

        let zero_vec = DVector::zeros(system.n_fast());
        let zero_mat = DMatrix::zeros(system.n_fast(), spec.dims());
        let mut prev = eta0.map(|_| zero_vec.clone());
        let mut dprev = eta0.map(|_| zero_mat.clone());
        let mut layers = Vec::new();
        let mut history = Vec::new();
        for n in 1..=n1 {
            let cum = correction_step(&system, &eta0, &deta0, &prev, &dprev, opts)?;
            let dcum = vector_jacobian(&cum)?;
            let rho = invariance_residual(&system, &eta0, &deta0, &cum, &dcum);
            history.push(rho.sup_norm());
            layers.push(cum.zip_map(&prev, |a, b| a - b));
            prev = cum;
            dprev = dcum;
            let k = history.len();
            let stagnated = k >= 3
                && history[k - 1] >= history[k - 2]
                && history[k - 2] >= history[k - 3]
                && history[k - 1] > opts.stagnation_tol;
            if stagnated && n < n1 {
                warnings.push(Warning::Stagnation { at_iteration: n });
                break;
            }
        }
        let e_eta = *history.last().unwrap();
        Ok(Self {
            system,
            spec: spec.clone(),
            eta0,
            deta0,
            eta_layers: layers,
            eta_cum: prev,
            deta_cum: dprev,
            residual_history: history,
            e_eta,
            warnings,
        })
    }

    pub fn system(&self) -> &Arc<SlowFastSystem<T>> {
        &self.system
    }

    pub fn spec(&self) -> &GridSpec<T> {
        &self.spec
    }

    /// Number of refinement layers actually built.
    pub fn depth(&self) -> usize {
        self.eta_layers.len()
    }

    /// Full graph `eta0 + eta` over the slow variable.
    pub fn total_graph(&self) -> VecGrid<T> {
        self.eta_cum.zip_map(&self.eta0, |a, b| a + b)
    }

    /// Jacobian of the full graph.
    pub fn total_slope(&self) -> MatGrid<T> {
        self.deta_cum.zip_map(&self.deta0, |a, b| a + b)
    }

    /// Cumulative correction at an off-grid point.
    pub fn deviation_at(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.eta_cum.eval(x)
    }

    /// Full graph value at an off-grid point.
    pub fn graph_at(&self, x: &DVector<T>) -> Result<DVector<T>> {
        Ok(self.eta0.eval(x)? + self.eta_cum.eval(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{Domain, Partials};
    use approx::assert_relative_eq;

    fn domain_1d(lo: f64, hi: f64) -> Domain<f64> {
        Domain { lo: vec![lo], hi: vec![hi], fast_bound: 2.0, periodic: false }
    }

    /// Y(x, 0) = 0 identically: the critical graph is the zero section.
    #[test]
    fn zero_root_when_fast_field_vanishes_at_zero() {
        let sys = SlowFastSystem::new(
            1,
            1,
            0.1,
            Arc::new(|x: &DVector<f64>, _y: &DVector<f64>| DVector::from_vec(vec![x[0]])),
            Arc::new(|x: &DVector<f64>, y: &DVector<f64>| {
                DVector::from_vec(vec![-(1.0 + x[0] * x[0]) * y[0]])
            }),
            Partials::default(),
            domain_1d(0.5, 2.0),
        )
        .unwrap();
        let spec = GridSpec::new(vec![0.5], vec![2.0], 0.01).unwrap();
        let eta0 = solve_eta0(&sys, &spec, &BuildOptions::default()).unwrap();
        assert!(eta0.sup_norm() <= 1e-13);
    }

    /// X = 0 everywhere makes the critical graph exactly invariant.
    #[test]
    fn residual_zero_without_slow_drift() {
        let sys = Arc::new(
            SlowFastSystem::new(
                1,
                1,
                0.1,
                Arc::new(|_x: &DVector<f64>, _y: &DVector<f64>| DVector::from_vec(vec![0.0])),
                Arc::new(|x: &DVector<f64>, y: &DVector<f64>| {
                    DVector::from_vec(vec![x[0] - 2.0 * y[0]])
                }),
                Partials::default(),
                domain_1d(0.5, 2.0),
            )
            .unwrap(),
        );
        let spec = GridSpec::new(vec![0.5], vec![2.0], 0.01).unwrap();
        let m = ManifoldApprox::build(sys, &spec, 2, &BuildOptions::default()).unwrap();
        assert!(m.e_eta <= 1e-13);
        for layer in &m.eta_layers {
            assert!(layer.sup_norm() <= 1e-13);
        }
        let x = DVector::from_vec(vec![1.0]);
        assert_relative_eq!(m.graph_at(&x).unwrap()[0], 0.5, max_relative = 1e-12);
    }
}
