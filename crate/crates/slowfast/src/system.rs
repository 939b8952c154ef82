//! The analytic slow-fast vector field pair and its partial derivatives.

use crate::error::{Result, SlowFastError};
use crate::grid::stencil_derivative;
use crate::real::Real;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

type Field<T> = Arc<dyn Fn(&DVector<T>, &DVector<T>) -> DVector<T> + Send + Sync>;
type FieldJac<T> = Arc<dyn Fn(&DVector<T>, &DVector<T>) -> DMatrix<T> + Send + Sync>;

/// Optional analytic partial derivatives of the two fields. Entries left
/// `None` are computed by the five-point stencil.
#[derive(Clone, Default)]
pub struct Partials<T: Real> {
    pub dx_slow: Option<FieldJac<T>>,
    pub dy_slow: Option<FieldJac<T>>,
    pub dx_fast: Option<FieldJac<T>>,
    pub dy_fast: Option<FieldJac<T>>,
}

/// Valid region: a box in the slow variables plus a fast-variable bound.
#[derive(Debug, Clone)]
pub struct Domain<T: Real> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
    /// Fast-variable validity radius (per the local-fiber picture).
    pub fast_bound: T,
    /// Slow variable lives on a circle of circumference `hi - lo`.
    pub periodic: bool,
}

/// All four partials of the pair `(X, Y)` at one point.
#[derive(Debug, Clone)]
pub struct FieldPartials<T: Real> {
    /// `dX/dx`, `n_s x n_s`.
    pub dx_slow: DMatrix<T>,
    /// `dX/dy`, `n_s x n_f`.
    pub dy_slow: DMatrix<T>,
    /// `dY/dx`, `n_f x n_s`.
    pub dx_fast: DMatrix<T>,
    /// `dY/dy`, `n_f x n_f`.
    pub dy_fast: DMatrix<T>,
}

/// A slow-fast system `x' = eps_hat * X(x, y)`, `y' = Y(x, y)`.
///
/// In standard form `eps_hat = eps` and `X` is the order-one slow factor.
/// Systems flagged non-standard store the full slow rate in `X` and use
/// `eps_hat = 1`; every downstream formula multiplies the fiber maps by
/// `eps_hat` instead of `eps`, which is the only difference between the two
/// code paths.
#[derive(Clone)]
pub struct SlowFastSystem<T: Real> {
    n_slow: usize,
    n_fast: usize,
    eps: T,
    nonstandard: bool,
    slow: Field<T>,
    fast: Field<T>,
    partials: Partials<T>,
    domain: Domain<T>,
    /// Stencil spacing for numerically computed field partials.
    pub stencil_h: T,
    /// Condition-number cap for the fastness check on `dY/dy`.
    pub cond_cap: T,
    /// Nodes with `sigma_min(dY/dy)` below this are not fast and get masked.
    pub fast_floor: T,
    /// Newton seed for the critical graph at the first grid node.
    eta0_seed: Option<Field<T>>,
}

impl<T: Real> SlowFastSystem<T> {
    pub fn new(
        n_slow: usize,
        n_fast: usize,
        eps: T,
        slow: Field<T>,
        fast: Field<T>,
        partials: Partials<T>,
        domain: Domain<T>,
    ) -> Result<Self> {
        if !(eps > T::zero()) || !eps.is_finite() {
            return Err(SlowFastError::InvalidParameters(format!(
                "eps = {eps} must be positive and finite"
            )));
        }
        Ok(Self {
            n_slow,
            n_fast,
            eps,
            nonstandard: false,
            slow,
            fast,
            partials,
            domain,
            stencil_h: T::of(1e-2),
            cond_cap: T::of(1e8),
            fast_floor: T::of(2.0) * eps,
            eta0_seed: None,
        })
    }

    /// Flag the system as non-standard: `x' = X(x, y)` directly.
    pub fn nonstandard(mut self) -> Self {
        self.nonstandard = true;
        self
    }

    pub fn with_eta0_seed(mut self, seed: Field<T>) -> Self {
        self.eta0_seed = Some(seed);
        self
    }

    pub fn n_slow(&self) -> usize {
        self.n_slow
    }

    pub fn n_fast(&self) -> usize {
        self.n_fast
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn is_nonstandard(&self) -> bool {
        self.nonstandard
    }

    /// The factor multiplying the fiber maps: `eps` in standard form, `1`
    /// in non-standard form.
    pub fn eps_hat(&self) -> T {
        if self.nonstandard {
            T::one()
        } else {
            self.eps
        }
    }

    pub fn domain(&self) -> &Domain<T> {
        &self.domain
    }

    /// The stored slow factor `X(x, y)`.
    pub fn slow_field(&self, x: &DVector<T>, y: &DVector<T>) -> DVector<T> {
        (self.slow)(x, y)
    }

    /// The fast field `Y(x, y)`.
    pub fn fast_field(&self, x: &DVector<T>, y: &DVector<T>) -> DVector<T> {
        (self.fast)(x, y)
    }

    /// The actual slow rate `x' = eps_hat * X(x, y)`.
    pub fn slow_rate(&self, x: &DVector<T>, y: &DVector<T>) -> DVector<T> {
        self.slow_field(x, y) * self.eps_hat()
    }

    /// Newton seed for the critical graph at `x`.
    pub fn eta0_seed(&self, x: &DVector<T>) -> DVector<T> {
        match &self.eta0_seed {
            Some(f) => f(x, &DVector::zeros(self.n_fast)),
            None => DVector::zeros(self.n_fast),
        }
    }

    fn stencil_jacobian<F>(&self, f: F, x: &DVector<T>, y: &DVector<T>, wrt_slow: bool) -> Result<DMatrix<T>>
    where
        F: Fn(&DVector<T>, &DVector<T>) -> DVector<T>,
    {
        let cols = if wrt_slow { self.n_slow } else { self.n_fast };
        let rows = f(x, y).len();
        let mut jac = DMatrix::zeros(rows, cols);
        for d in 0..cols {
            let col: DVector<T> = if wrt_slow {
                stencil_derivative(|p: &DVector<T>| Ok(f(p, y)), x, self.stencil_h, d)?
            } else {
                stencil_derivative(|p: &DVector<T>| Ok(f(x, p)), y, self.stencil_h, d)?
            };
            jac.set_column(d, &col);
        }
        Ok(jac)
    }

    /// All four partials at `(x, y)`, analytic where supplied and stencil
    /// otherwise.
    pub fn field_partials(&self, x: &DVector<T>, y: &DVector<T>) -> Result<FieldPartials<T>> {
        let dx_slow = match &self.partials.dx_slow {
            Some(f) => f(x, y),
            None => self.stencil_jacobian(|a, b| self.slow_field(a, b), x, y, true)?,
        };
        let dy_slow = match &self.partials.dy_slow {
            Some(f) => f(x, y),
            None => self.stencil_jacobian(|a, b| self.slow_field(a, b), x, y, false)?,
        };
        let dx_fast = match &self.partials.dx_fast {
            Some(f) => f(x, y),
            None => self.stencil_jacobian(|a, b| self.fast_field(a, b), x, y, true)?,
        };
        let dy_fast = match &self.partials.dy_fast {
            Some(f) => f(x, y),
            None => self.stencil_jacobian(|a, b| self.fast_field(a, b), x, y, false)?,
        };
        for (name, m) in [
            ("dX/dx", &dx_slow),
            ("dX/dy", &dy_slow),
            ("dY/dx", &dx_fast),
            ("dY/dy", &dy_fast),
        ] {
            if !m.iter().all(|v| v.is_finite()) {
                return Err(SlowFastError::NumericalBreakdown(format!(
                    "non-finite entries in {name}"
                )));
            }
        }
        Ok(FieldPartials { dx_slow, dy_slow, dx_fast, dy_fast })
    }

    /// Fast-direction health of `dY/dy` at a point: `(sigma_min, cond)`.
    pub fn fastness(&self, x: &DVector<T>, y: &DVector<T>) -> Result<(T, T)> {
        let a = self.field_partials(x, y)?.dy_fast;
        let svd = a.svd(false, false);
        let smin = svd.singular_values.iter().fold(T::max_value().unwrap(), |m, &s| m.min(s));
        let smax = svd.singular_values.iter().fold(T::zero(), |m, &s| m.max(s));
        let cond = if smin > T::zero() { smax / smin } else { T::max_value().unwrap() };
        Ok((smin, cond))
    }

    /// Whether the fastness condition holds at a point: `dY/dy` invertible
    /// with condition number below the cap and smallest singular value
    /// above the floor.
    pub fn is_fast_at(&self, x: &DVector<T>, y: &DVector<T>) -> Result<bool> {
        let (smin, cond) = self.fastness(x, y)?;
        Ok(smin >= self.fast_floor && cond <= self.cond_cap)
    }

    /// Cross-check every supplied analytic partial against the stencil at
    /// deterministic quasi-random points in the domain. Returns the largest
    /// absolute discrepancy found.
    pub fn cross_check_partials(&self, samples: usize) -> Result<T> {
        let mut worst = T::zero();
        // Weyl sequence; keeps the check deterministic.
        let frac = |v: f64| v - v.floor();
        for s in 0..samples {
            let x = DVector::from_iterator(
                self.n_slow,
                (0..self.n_slow).map(|d| {
                    let t = frac(0.5 + (s as f64 + 1.0) * (0.754877666 + 0.1 * d as f64));
                    let margin = T::of(0.05) * (self.domain.hi[d] - self.domain.lo[d]);
                    let lo = self.domain.lo[d] + margin;
                    let hi = self.domain.hi[d] - margin;
                    lo + (hi - lo) * T::of(t)
                }),
            );
            let y = DVector::from_iterator(
                self.n_fast,
                (0..self.n_fast).map(|d| {
                    let t = frac(0.5 + (s as f64 + 1.0) * (0.569840291 + 0.07 * d as f64));
                    self.domain.fast_bound * T::of(0.25) * T::of(2.0 * t - 1.0)
                }),
            );
            let analytic = [
                self.partials.dx_slow.as_ref().map(|f| ("dX/dx", f(&x, &y), true, true)),
                self.partials.dy_slow.as_ref().map(|f| ("dX/dy", f(&x, &y), true, false)),
                self.partials.dx_fast.as_ref().map(|f| ("dY/dx", f(&x, &y), false, true)),
                self.partials.dy_fast.as_ref().map(|f| ("dY/dy", f(&x, &y), false, false)),
            ];
            for entry in analytic.into_iter().flatten() {
                let (_, ref m, slow_field, wrt_slow) = entry;
                let num = if slow_field {
                    self.stencil_jacobian(|a, b| self.slow_field(a, b), &x, &y, wrt_slow)?
                } else {
                    self.stencil_jacobian(|a, b| self.fast_field(a, b), &x, &y, wrt_slow)?
                };
                let diff = (m - &num).iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
                worst = worst.max(diff);
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear_system() -> SlowFastSystem<f64> {
        // X = x + 2y, Y = -y
        SlowFastSystem::new(
            1,
            1,
            0.1,
            Arc::new(|x: &DVector<f64>, y: &DVector<f64>| {
                DVector::from_vec(vec![x[0] + 2.0 * y[0]])
            }),
            Arc::new(|_x: &DVector<f64>, y: &DVector<f64>| DVector::from_vec(vec![-y[0]])),
            Partials::default(),
            Domain { lo: vec![-1.0], hi: vec![1.0], fast_bound: 2.0, periodic: false },
        )
        .unwrap()
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let s = linear_system();
        let bad = SlowFastSystem::new(
            1,
            1,
            0.0,
            s.slow.clone(),
            s.fast.clone(),
            Partials::default(),
            s.domain.clone(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn linear_field_partial_exact() {
        let s = linear_system();
        let x = DVector::from_vec(vec![0.3]);
        let y = DVector::from_vec(vec![0.2]);
        let p = s.field_partials(&x, &y).unwrap();
        assert_relative_eq!(p.dy_fast[(0, 0)], -1.0, max_relative = 1e-12);
        assert_relative_eq!(p.dy_slow[(0, 0)], 2.0, max_relative = 1e-10);
        assert_relative_eq!(p.dx_slow[(0, 0)], 1.0, max_relative = 1e-10);
    }

    #[test]
    fn eps_hat_switches_with_form() {
        let s = linear_system();
        assert_eq!(s.eps_hat(), 0.1);
        let ns = linear_system().nonstandard();
        assert_eq!(ns.eps_hat(), 1.0);
    }
}
