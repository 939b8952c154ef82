//! Linear fiber maps: iteratively remove the linear fast dependence of the
//! slow field and expose tangent/normal frames of the fibers.
//!
//! With `Lambda(x) = X(x, g(x))` and `A(x)` the fast-field slope along the
//! graph `g`, each layer solves the node-wise linear equation
//!
//! ```text
//! eps_hat dLambda(x) phi_n + mu_n - phi_n A(x) = 0
//! ```
//!
//! and the error updates as `mu_{n+1} = -eps_hat d(phi_n) Lambda`
//! (contracted column-wise over the slow index). The cumulative map
//! `phi = sum phi_n` spans the fiber tangents through first order in the
//! fast offset.

use crate::error::{Result, SlowFastError, Warning};
use crate::grid::{matrix_jacobian, vector_jacobian, GridFunction};
use crate::manifold::{ManifoldApprox, MatGrid, VecGrid};
use crate::real::Real;
use crate::systems::ExperimentFrame;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

type MatListGrid<T> = GridFunction<T, Vec<DMatrix<T>>>;

/// Solve one layer equation `P phi + mu - phi A = 0` at a single node by
/// Kronecker vectorization to a dense `(n_s n_f) x (n_s n_f)` system.
///
/// `P` is the slow-rate slope `eps_hat * dLambda` (`n_s x n_s`), `A` the
/// fast slope (`n_f x n_f`), `mu` the current error (`n_s x n_f`).
pub fn solve_phi_layer<T: Real>(
    p: &DMatrix<T>,
    a: &DMatrix<T>,
    mu: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let (ns, nf) = (mu.nrows(), mu.ncols());
    let eye_s = DMatrix::<T>::identity(ns, ns);
    let eye_f = DMatrix::<T>::identity(nf, nf);
    // vec(P phi) = (I_f (x) P) vec(phi); vec(phi A) = (A^T (x) I_s) vec(phi)
    let op = eye_f.kronecker(p) - a.transpose().kronecker(&eye_s);
    let rhs = DVector::from_column_slice(mu.as_slice());
    let sol = op.lu().solve(&(-&rhs)).ok_or_else(|| {
        SlowFastError::SingularSylvester(
            "sigma(eps dLambda) and sigma(A) intersect at this node".into(),
        )
    })?;
    let phi = DMatrix::from_column_slice(ns, nf, sol.as_slice());
    let residual = (p * &phi + mu - &phi * a).norm();
    if !(residual <= T::of(1e-12) * (T::one() + mu.norm())) {
        return Err(SlowFastError::SingularSylvester(format!(
            "layer equation residual {residual} too large (near-singular operator)"
        )));
    }
    Ok(phi)
}

/// Error update `mu_{n+1} = -eps_hat * sum_a Lambda_a d(phi)/dx_a` at one
/// node, given the per-axis derivative list of the layer.
fn next_mu<T: Real>(eps_hat: T, dphi: &[DMatrix<T>], lambda: &DVector<T>) -> DMatrix<T> {
    let mut out = dphi[0].zero_like_mat();
    for (a, d) in dphi.iter().enumerate() {
        out.zip_apply(d, |o, v| *o += lambda[a] * v);
    }
    out * (-eps_hat)
}

trait ZeroLikeMat {
    fn zero_like_mat(&self) -> Self;
}

impl<T: Real> ZeroLikeMat for DMatrix<T> {
    fn zero_like_mat(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
}

/// Coefficient fields assembled on the graph.
pub struct FrameFields<T: Real> {
    /// Slow factor on the graph, `Lambda(x) = X(x, g(x))`.
    pub lambda: VecGrid<T>,
    /// `mu_0(x) = dX/dy (x, g(x))`.
    pub mu0: MatGrid<T>,
    /// Fast slope along the graph,
    /// `A(x) = -eps_hat dg(x) dX/dy + dY/dy` at `(x, g(x))`.
    pub a: MatGrid<T>,
}

/// Evaluate `Lambda`, `mu_0` and `A` on the manifold graph.
pub fn assemble_frame_fields<T: Real>(manifold: &ManifoldApprox<T>) -> Result<FrameFields<T>> {
    let system = manifold.system().clone();
    let eps_hat = system.eps_hat();
    let graph = manifold.total_graph();
    let slope = manifold.total_slope();
    let trim = graph.trim().max(slope.trim());
    let spec = graph.spec().clone();
    let n = spec.len();
    let mut lam = vec![DVector::zeros(system.n_slow()); n];
    let mut mu = vec![DMatrix::zeros(system.n_slow(), system.n_fast()); n];
    let mut aa = vec![DMatrix::zeros(system.n_fast(), system.n_fast()); n];
    let mut masked = Vec::new();
    let mut bad_cond = 0usize;
    let mut valid = 0usize;
    for flat in 0..n {
        if !(graph.valid_at_trim(flat, trim) && slope.valid_at_trim(flat, trim)) {
            masked.push(flat);
            continue;
        }
        valid += 1;
        let x = graph.point(flat);
        let (g, s) = (graph.value_at(flat), slope.value_at(flat));
        lam[flat] = system.slow_field(&x, g);
        let p = system.field_partials(&x, g)?;
        mu[flat] = p.dy_slow.clone();
        let a = &p.dy_fast - s * &p.dy_slow * eps_hat;
        let svd = a.clone().svd(false, false);
        let smin = svd.singular_values.iter().fold(T::max_value().unwrap(), |m, &v| m.min(v));
        let smax = svd.singular_values.iter().fold(T::zero(), |m, &v| m.max(v));
        let ok = smin > T::zero() && smax / smin <= system.cond_cap;
        if !ok {
            masked.push(flat);
            bad_cond += 1;
            continue;
        }
        aa[flat] = a;
    }
    if bad_cond == valid {
        return Err(SlowFastError::SingularA(
            "condition cap exceeded at every valid node".into(),
        ));
    }
    let mut lambda = GridFunction::from_values(spec.clone(), trim, lam);
    let mut mu0 = GridFunction::from_values(spec.clone(), trim, mu);
    let mut a = GridFunction::from_values(spec, trim, aa);
    lambda.apply_mask(&masked);
    mu0.apply_mask(&masked);
    a.apply_mask(&masked);
    Ok(FrameFields { lambda, mu0, a })
}

/// The cumulative fiber linear map `phi` with per-iteration diagnostics.
pub struct FiberLinearMap<T: Real> {
    manifold: Arc<ManifoldApprox<T>>,
    frame: ExperimentFrame,
    graph_exp: VecGrid<T>,
    slope_exp: MatGrid<T>,
    graph_tot: VecGrid<T>,
    slope_tot: MatGrid<T>,
    /// Slow factor on the graph.
    pub lambda: VecGrid<T>,
    /// Slow-rate slope `eps_hat * dLambda` (Jacobian grid).
    pub rate_slope: MatGrid<T>,
    /// `mu_0` on the graph.
    pub mu0: MatGrid<T>,
    /// Fast slope `A` on the graph.
    pub a: MatGrid<T>,
    /// Individual layers `phi_0 .. phi_{n2}`.
    pub phi_layers: Vec<MatGrid<T>>,
    /// Cumulative map `phi = sum phi_n`.
    pub phi_cum: MatGrid<T>,
    /// Per-axis derivative list of the cumulative map.
    pub dphi_cum: MatListGrid<T>,
    /// Sup norms `gamma_n = ||mu_n||`, one entry per layer plus the final
    /// update (so `mu_history.len() == phi_layers.len() + 1`).
    pub mu_history: Vec<T>,
    /// Sup norm of the cumulative-map equation residual.
    pub e_phi: T,
    pub warnings: Vec<Warning>,
}

impl<T: Real> FiberLinearMap<T> {
    /// Run the layer iteration `n2 + 1` times starting from `mu_0`.
    pub fn build(
        manifold: Arc<ManifoldApprox<T>>,
        frame: ExperimentFrame,
        n2: usize,
    ) -> Result<Self> {
        let system = manifold.system().clone();
        let eps_hat = system.eps_hat();
        let fields = assemble_frame_fields(&manifold)?;
        let rate_slope = vector_jacobian(&fields.lambda)?.map(|m| m * eps_hat);
        let mut warnings = Vec::new();
        let masked0 = fields.a.masked_count();
        if masked0 > 0 {
            warnings.push(Warning::MaskedNodes { count: masked0 });
        }

        let spec = fields.lambda.spec().clone();
        // Iterate on the cumulative map: solve
        //   rate_slope phi^n + mu0 - d(phi^{n-1}) . L - phi^n A = 0
        // per node with phi^{-1} = 0. Re-solving for the full map (rather
        // than summing increment solves) converges to an exact fixed point
        // of the discrete equation, so the measured residual reaches the
        // round-off floor instead of stalling on differentiated increments.
        let mut layers: Vec<MatGrid<T>> = Vec::new();
        let mut cum: Option<MatGrid<T>> = None;
        let mut history = Vec::new();
        for n in 0..=n2 {
            // transported error of the previous cumulative map
            let mu = match &cum {
                None => fields.mu0.clone(),
                Some(prev) => {
                    let dprev = matrix_jacobian(prev)?;
                    let transport =
                        dprev.zip_map(&fields.lambda, |d, l| next_mu(eps_hat, d, l));
                    let partial = transport.zip_map(&fields.mu0, |t, m| t + m);
                    // gamma_n: residual of the previous map, evaluated with
                    // the derivative just taken for the transport term
                    let res = partial
                        .zip_map(&rate_slope.zip_map(prev, |rs, p| rs * p), |b, rp| b + rp)
                        .zip_map(&fields.a.zip_map(prev, |a, p| p * a), |b, pa| b - pa);
                    history.push(res.sup_norm());
                    partial
                }
            };
            if cum.is_none() {
                history.push(mu.sup_norm());
            }
            let trim = mu.trim().max(rate_slope.trim()).max(fields.a.trim());
            let usable = |flat: usize| {
                mu.valid_at_trim(flat, trim)
                    && rate_slope.valid_at_trim(flat, trim)
                    && fields.a.valid_at_trim(flat, trim)
            };
            let mut values =
                vec![DMatrix::zeros(system.n_slow(), system.n_fast()); spec.len()];
            let mut masked = Vec::new();
            let mut failures = 0usize;
            let mut solved = 0usize;
            let deadband = T::of(1e-13);
            for flat in 0..spec.len() {
                if !usable(flat) {
                    masked.push(flat);
                    continue;
                }
                let p = rate_slope.value_at(flat);
                let a = fields.a.value_at(flat);
                let m = mu.value_at(flat);
                // Keep the previous value when it already satisfies the
                // updated equation within the solve tolerance; re-solving
                // at the floor only stirs round-off that the transport
                // derivative then amplifies.
                if let Some(prev) = &cum {
                    let pv = prev.value_at(flat);
                    let r = (p * pv + m - pv * a).norm();
                    if r <= deadband * (T::one() + m.norm()) {
                        values[flat] = pv.clone();
                        solved += 1;
                        continue;
                    }
                }
                match solve_phi_layer(p, a, m) {
                    Ok(phi) => {
                        values[flat] = phi;
                        solved += 1;
                    }
                    Err(_) => {
                        masked.push(flat);
                        failures += 1;
                    }
                }
            }
            if solved == 0 {
                return Err(SlowFastError::SingularSylvester(format!(
                    "iteration {n} unsolvable at every node"
                )));
            }
            if failures > 0 {
                warnings.push(Warning::MaskedNodes { count: failures });
            }
            let mut next = GridFunction::from_values(spec.clone(), trim, values);
            next.apply_mask(&masked);
            layers.push(match &cum {
                None => next.clone(),
                Some(prev) => next.zip_map(prev, |a, b| a - b),
            });
            cum = Some(next);
            let k = history.len();
            if k >= 3
                && history[k - 1] >= history[k - 2]
                && history[k - 2] >= history[k - 3]
                && history[k - 1] > T::of(1e-12)
                && n < n2
            {
                warnings.push(Warning::Stagnation { at_iteration: n });
                break;
            }
        }
        let mut phi_cum = cum.expect("at least one iteration");
        // Final refinement: solve the cumulative equation over all nodes at
        // once. The sweep iteration above contracts only transiently on a
        // fixed grid, so its limit carries amplified round-off; the direct
        // solve of the same discrete equation does not.
        {
            let (ns, nf) = (system.n_slow(), system.n_fast());
            let eye_s = DMatrix::<T>::identity(ns, ns);
            let eye_f = DMatrix::<T>::identity(nf, nf);
            let trim = phi_cum.trim();
            let value_ok = |flat: usize| {
                phi_cum.valid_at_trim(flat, trim)
                    && rate_slope.valid_at_trim(flat, trim)
                    && fields.a.valid_at_trim(flat, trim)
                    && fields.lambda.valid_at_trim(flat, trim)
                    && fields.mu0.valid_at_trim(flat, trim)
            };
            let diag = |flat: usize| {
                eye_f.kronecker(rate_slope.value_at(flat))
                    - fields.a.value_at(flat).transpose().kronecker(&eye_s)
            };
            let rhs = |flat: usize| {
                -DVector::from_column_slice(fields.mu0.value_at(flat).as_slice())
            };
            let rate =
                |flat: usize, a: usize| eps_hat * fields.lambda.value_at(flat)[a];
            let seed = |flat: usize| {
                DVector::from_column_slice(phi_cum.value_at(flat).as_slice())
            };
            if let Some(refined) = solve_transport_system(
                &spec,
                trim,
                ns * nf,
                &value_ok,
                &diag,
                &rhs,
                &rate,
                &seed,
            ) {
                let mut values: Vec<DMatrix<T>> =
                    (0..spec.len()).map(|i| phi_cum.value_at(i).clone()).collect();
                for (flat, v) in refined {
                    values[flat] = DMatrix::from_column_slice(ns, nf, v.as_slice());
                }
                let mut refined_grid = GridFunction::from_values(spec.clone(), trim, values);
                let masked: Vec<usize> =
                    (0..spec.len()).filter(|&i| !phi_cum.node_is_valid(i)).collect();
                refined_grid.apply_mask(&masked);
                phi_cum = refined_grid;
            }
        }
        let dphi_cum = matrix_jacobian(&phi_cum)?;

        // Residual of the cumulative-map equation with phi in every slot:
        // rate_slope phi + mu0 - eps_hat sum_a Lambda_a dphi_a - phi A.
        let e_grid = compute_cum_residual(
            eps_hat,
            &phi_cum,
            &dphi_cum,
            &fields.lambda,
            &rate_slope,
            &fields.mu0,
            &fields.a,
        );
        let e_phi = e_grid.sup_norm();
        history.push(e_phi);

        let graph_tot = manifold.total_graph();
        let slope_tot = manifold.total_slope();
        let (graph_exp, slope_exp) = match frame {
            ExperimentFrame::Deviation => {
                (manifold.eta_cum.clone(), manifold.deta_cum.clone())
            }
            ExperimentFrame::Total => (graph_tot.clone(), slope_tot.clone()),
        };
        Ok(Self {
            manifold,
            frame,
            graph_exp,
            slope_exp,
            graph_tot,
            slope_tot,
            lambda: fields.lambda,
            rate_slope,
            mu0: fields.mu0,
            a: fields.a,
            phi_layers: layers,
            phi_cum,
            dphi_cum,
            mu_history: history,
            e_phi,
            warnings,
        })
    }

    pub fn manifold(&self) -> &Arc<ManifoldApprox<T>> {
        &self.manifold
    }

    pub fn frame(&self) -> ExperimentFrame {
        self.frame
    }

    pub fn eps_hat(&self) -> T {
        self.manifold.system().eps_hat()
    }

    /// Graph of the manifold in experiment coordinates.
    pub fn graph_grid(&self) -> &VecGrid<T> {
        &self.graph_exp
    }

    /// Graph slope in experiment coordinates (`n_f x n_s` per node).
    pub fn graph_slope_grid(&self) -> &MatGrid<T> {
        &self.slope_exp
    }

    /// Full graph of the manifold in the build system's coordinates.
    pub fn total_graph_grid(&self) -> &VecGrid<T> {
        &self.graph_tot
    }

    /// Cumulative map at an off-grid point.
    pub fn phi_at(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        self.phi_cum.eval(x)
    }

    /// Columns spanning the fiber tangent space at a base point on the
    /// graph: `[eps_hat phi; I_f + dg eps_hat phi]`, an
    /// `(n_s + n_f) x n_f` matrix of full column rank.
    pub fn tangent_frame(&self, x_b: &DVector<T>) -> Result<DMatrix<T>> {
        let eps_hat = self.eps_hat();
        let phi = self.phi_at(x_b)? * eps_hat;
        let dg = self.slope_exp.eval(x_b)?;
        let (ns, nf) = (phi.nrows(), phi.ncols());
        let mut out = DMatrix::zeros(ns + nf, nf);
        out.view_mut((0, 0), (ns, nf)).copy_from(&phi);
        let lower = DMatrix::identity(nf, nf) + &dg * &phi;
        out.view_mut((ns, 0), (nf, nf)).copy_from(&lower);
        Ok(out)
    }

    /// Rows spanning the normal space to the fibers:
    /// `[I_s + eps_hat phi dg, -eps_hat phi]`, an `n_s x (n_s + n_f)`
    /// matrix of full row rank annihilating the tangent frame.
    pub fn normal_frame(&self, x_b: &DVector<T>) -> Result<DMatrix<T>> {
        let eps_hat = self.eps_hat();
        let phi = self.phi_at(x_b)? * eps_hat;
        let dg = self.slope_exp.eval(x_b)?;
        let (ns, nf) = (phi.nrows(), phi.ncols());
        let mut out = DMatrix::zeros(ns, ns + nf);
        let left = DMatrix::identity(ns, ns) + &phi * &dg;
        out.view_mut((0, 0), (ns, ns)).copy_from(&left);
        out.view_mut((0, ns), (ns, nf)).copy_from(&(-&phi));
        Ok(out)
    }

    /// Slow factor of the system after the fiber-map change of variables,
    /// at deviation offset `y` from the manifold graph:
    ///
    /// ```text
    /// G(x, y) = J^{-1} (X(x', g(x') + y) - phi(x) Y_dev(x', y)),
    /// x' = x + eps_hat phi(x) y,  J = I_s + eps_hat d(phi)(x) . y
    /// ```
    ///
    /// The y-linear part of `G` is the residual coupling the map removes;
    /// the y-quadratic part feeds the curvature construction.
    pub fn transformed_slow_factor(
        &self,
        x: &DVector<T>,
        y: &DVector<T>,
    ) -> Result<DVector<T>> {
        let system = self.manifold.system();
        let eps_hat = self.eps_hat();
        let phi = self.phi_at(x)?;
        let dphi = self.dphi_cum.eval(x)?;
        let xp = x + &phi * y * eps_hat;
        let g = self.graph_tot.eval(&xp)?;
        let dg = self.slope_tot.eval(&xp)?;
        let y_full = &g + y;
        let xs = system.slow_field(&xp, &y_full);
        let y_dev = system.fast_field(&xp, &y_full) - &dg * &xs * eps_hat;
        let ns = system.n_slow();
        let mut jac = DMatrix::identity(ns, ns);
        for (a, d) in dphi.iter().enumerate() {
            let col = d * y * eps_hat;
            for i in 0..ns {
                jac[(i, a)] += col[i];
            }
        }
        jac.lu().solve(&(xs - &phi * y_dev)).ok_or_else(|| {
            SlowFastError::NumericalBreakdown("singular transform Jacobian".into())
        })
    }

    /// Linear-in-fast coupling of the transformed slow factor, extracted by
    /// central differences at probe radius `h_y`: column `j` is
    /// `(G(x, h e_j) - G(x, -h e_j)) / (2 h)`.
    pub fn linear_coupling(&self, x: &DVector<T>, h_y: T) -> Result<DMatrix<T>> {
        let nf = self.manifold.system().n_fast();
        let ns = self.manifold.system().n_slow();
        let mut out = DMatrix::zeros(ns, nf);
        for j in 0..nf {
            let mut probe = DVector::zeros(nf);
            probe[j] = h_y;
            let plus = self.transformed_slow_factor(x, &probe)?;
            probe[j] = -h_y;
            let minus = self.transformed_slow_factor(x, &probe)?;
            out.set_column(j, &((plus - minus) / (T::of(2.0) * h_y)));
        }
        Ok(out)
    }
}

/// Direct solve of a node-coupled linear system of the form
///
/// ```text
/// diag_i v_i - sum_a rate(i, a) * (D v)_a,i = rhs_i
/// ```
///
/// where `D` is the grid differentiation operator (five-point stencil on
/// bounded axes, trigonometric weights on periodic ones) and `v_i` is the
/// vectorized per-node unknown. Equations are imposed at every node where
/// the derivative is measurable; nodes outside that set contribute their
/// current values as boundary data. Returns the refined values at the
/// equation nodes, or `None` when the system is too large or singular.
///
/// This is the equation the residual diagnostics measure; the layer
/// iteration converges only transiently on a fixed grid (its smooth
/// components contract, its rough components do not), so a final direct
/// solve removes the round-off the sweeps accumulate.
pub(crate) fn solve_transport_system<T: Real>(
    spec: &crate::grid::GridSpec<T>,
    unknown_trim: usize,
    block: usize,
    value_ok: &dyn Fn(usize) -> bool,
    diag: &dyn Fn(usize) -> DMatrix<T>,
    rhs: &dyn Fn(usize) -> DVector<T>,
    rate: &dyn Fn(usize, usize) -> T,
    seed: &dyn Fn(usize) -> DVector<T>,
) -> Option<Vec<(usize, DVector<T>)>> {
    const MAX_UNKNOWNS: usize = 3000;
    let dims = spec.dims();
    let len = spec.len();
    let strides: Vec<usize> = (0..dims)
        .map(|d| (d + 1..dims).map(|k| spec.count(k)).product())
        .collect();
    // stencil rows per axis: (signed offset, weight)
    let rows: Vec<Vec<(isize, T)>> = (0..dims)
        .map(|d| {
            if spec.is_periodic() {
                let n = spec.count(d);
                let period = spec.hi()[d] - spec.lo()[d];
                let scale = T::two_pi() / period;
                let half = T::of(0.5);
                (1..n as isize)
                    .map(|o| {
                        let theta =
                            T::pi() * T::from_usize(o as usize).unwrap() / T::from_usize(n).unwrap();
                        let sign = if o % 2 == 0 { -T::one() } else { T::one() };
                        let w = if n % 2 == 0 {
                            scale * half * sign * (theta.cos() / theta.sin())
                        } else {
                            scale * half * sign / theta.sin()
                        };
                        (o, w)
                    })
                    .collect()
            } else {
                let inv = T::one() / (T::of(12.0) * spec.h());
                vec![
                    (-2, inv),
                    (-1, -T::of(8.0) * inv),
                    (1, T::of(8.0) * inv),
                    (2, -inv),
                ]
            }
        })
        .collect();
    let eq_trim = if spec.is_periodic() { 0 } else { unknown_trim + 2 };
    let neighbor = |flat: usize, axis: usize, off: isize| -> Option<usize> {
        let n = spec.count(axis) as isize;
        let idx = (flat / strides[axis]) % spec.count(axis);
        let mut j = idx as isize + off;
        if spec.is_periodic() {
            j = j.rem_euclid(n);
        } else if j < 0 || j >= n {
            return None;
        }
        Some((flat as isize + (j - idx as isize) * strides[axis] as isize) as usize)
    };
    // an equation node needs its own value and every stencil neighbor usable
    let template: crate::grid::GridFunction<T, T> = crate::grid::GridFunction::from_values(
        spec.clone(),
        eq_trim,
        vec![T::zero(); len],
    );
    let eq_nodes: Vec<usize> = (0..len)
        .filter(|&i| {
            template.valid_at_trim(i, eq_trim)
                && value_ok(i)
                && (0..dims).all(|a| {
                    rows[a]
                        .iter()
                        .all(|&(o, _)| neighbor(i, a, o).map(&value_ok).unwrap_or(false))
                })
        })
        .collect();
    let m = eq_nodes.len() * block;
    if m == 0 || m > MAX_UNKNOWNS {
        return None;
    }
    let slot: std::collections::HashMap<usize, usize> =
        eq_nodes.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut mat = DMatrix::<T>::zeros(m, m);
    let mut b = DVector::<T>::zeros(m);
    for (k, &i) in eq_nodes.iter().enumerate() {
        let r0 = k * block;
        mat.view_mut((r0, r0), (block, block)).copy_from(&diag(i));
        b.rows_mut(r0, block).copy_from(&rhs(i));
        for a in 0..dims {
            let c = rate(i, a);
            for &(o, w) in &rows[a] {
                let nb = neighbor(i, a, o).expect("checked above");
                let coeff = c * w;
                match slot.get(&nb) {
                    Some(&kk) => {
                        let c0 = kk * block;
                        for d in 0..block {
                            mat[(r0 + d, c0 + d)] -= coeff;
                        }
                    }
                    None => {
                        // boundary band: contributes known data
                        let s = seed(nb);
                        for d in 0..block {
                            b[r0 + d] += coeff * s[d];
                        }
                    }
                }
            }
        }
    }
    let sol = mat.lu().solve(&b)?;
    Some(
        eq_nodes
            .iter()
            .enumerate()
            .map(|(k, &i)| (i, DVector::from(sol.rows(k * block, block).clone_owned())))
            .collect(),
    )
}

fn compute_cum_residual<T: Real>(
    eps_hat: T,
    phi: &MatGrid<T>,
    dphi: &MatListGrid<T>,
    lambda: &VecGrid<T>,
    rate_slope: &MatGrid<T>,
    mu0: &MatGrid<T>,
    a: &MatGrid<T>,
) -> MatGrid<T> {
    let spec = phi.spec().clone();
    let trim = dphi.trim().max(rate_slope.trim());
    let usable = |flat: usize| {
        phi.valid_at_trim(flat, trim)
            && dphi.valid_at_trim(flat, trim)
            && lambda.valid_at_trim(flat, trim)
            && rate_slope.valid_at_trim(flat, trim)
            && mu0.valid_at_trim(flat, trim)
            && a.valid_at_trim(flat, trim)
    };
    let values: Vec<DMatrix<T>> = (0..spec.len())
        .map(|flat| {
            if !usable(flat) {
                return phi.value_at(0).clone() * T::zero();
            }
            let p = phi.value_at(flat);
            let transport = next_mu(eps_hat, dphi.value_at(flat), lambda.value_at(flat));
            rate_slope.value_at(flat) * p + mu0.value_at(flat) + transport
                - p * a.value_at(flat)
        })
        .collect();
    let masked: Vec<usize> = (0..spec.len()).filter(|&i| !usable(i)).collect();
    let mut out = GridFunction::from_values(spec, trim, values);
    out.apply_mask(&masked);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn phi_layer_zero_mu_gives_zero() {
        let p = dmatrix![0.3];
        let a = dmatrix![-2.0];
        let mu = dmatrix![0.0];
        let phi = solve_phi_layer(&p, &a, &mu).unwrap();
        assert_eq!(phi[(0, 0)], 0.0);
    }

    #[test]
    fn phi_layer_matches_direct_inverse_at_zero_coupling() {
        // eps = 0 (P = 0): phi = mu A^{-1}; oracle is the direct inverse.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = DMatrix::<f64>::from_fn(2, 2, |_, _| rng.gen_range(-2.0..2.0))
                - DMatrix::identity(2, 2) * 3.0;
            let mu = DMatrix::<f64>::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
            let p = DMatrix::<f64>::zeros(2, 2);
            let phi = solve_phi_layer(&p, &a, &mu).unwrap();
            let oracle = &mu * a.clone().try_inverse().unwrap();
            assert_relative_eq!(phi, oracle, max_relative = 1e-10);
        }
    }

    #[test]
    fn phi_layer_detects_singular_operator() {
        // P and A share the eigenvalue 1.0
        let p = dmatrix![1.0];
        let a = dmatrix![1.0];
        let mu = dmatrix![0.5];
        assert!(matches!(
            solve_phi_layer(&p, &a, &mu),
            Err(SlowFastError::SingularSylvester(_))
        ));
    }
}
