//! Built-in example systems with closed-form reference solutions.
//!
//! Three families: the Michaelis-Menten-Henri enzyme model (`mmh`), the
//! Lindemann mechanism in its raw non-standard form (`lindemann`) and in
//! standard slow-fast coordinates (`lindemann-standard`), and a periodic
//! normally-elliptic example with non-smooth `eps`-dependence
//! (`neishtadt`). The closed forms in [`mmh`], [`lindemann`] and
//! [`neishtadt`] serve as independent oracles for the iterative pipeline.

use crate::error::{Result, SlowFastError};
use crate::grid::GridSpec;
use crate::real::Real;
use crate::system::{Domain, Partials, SlowFastSystem};
use nalgebra::{dmatrix, DVector};
use std::sync::Arc;

/// Which coordinates the trajectory experiments run in, and therefore which
/// graph the fiber frames differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentFrame {
    /// Experiments integrate an analytic deviation-form system; the graph
    /// is the cumulative correction about `eta0`.
    Deviation,
    /// Experiments integrate the system as constructed; the graph is
    /// `eta0` plus the cumulative correction.
    Total,
}

/// Invertible change of state coordinates (used by the Lindemann presets).
#[derive(Clone)]
pub struct Transform<T: Real> {
    pub forward: Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>,
    pub backward: Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>,
}

/// A named system plus everything the pipeline and the experiments need.
#[derive(Clone)]
pub struct SystemPreset<T: Real> {
    pub name: String,
    /// System handed to the manifold build.
    pub system: Arc<SlowFastSystem<T>>,
    /// System the trajectory experiments integrate (analytic deviation form
    /// where one exists, otherwise the same as `system`).
    pub experiment_system: Arc<SlowFastSystem<T>>,
    pub frame: ExperimentFrame,
    pub transform: Option<Transform<T>>,
}

impl<T: Real> SystemPreset<T> {
    /// Default grid over the preset's slow domain.
    pub fn default_grid(&self, h: T) -> Result<GridSpec<T>> {
        let d = self.system.domain();
        if d.periodic {
            GridSpec::periodic(d.lo[0], d.hi[0], h)
        } else {
            GridSpec::new(d.lo.clone(), d.hi.clone(), h)
        }
    }

    /// Grid on explicit bounds (still honoring periodicity).
    pub fn grid(&self, lo: Vec<T>, hi: Vec<T>, h: T) -> Result<GridSpec<T>> {
        if self.system.domain().periodic {
            GridSpec::periodic(lo[0], hi[0], h)
        } else {
            GridSpec::new(lo, hi, h)
        }
    }
}

/// Construct a preset by its CLI name: `mmh`, `lindemann`,
/// `lindemann-standard` or `neishtadt`.
pub fn preset_by_name<T: Real>(
    name: &str,
    eps: T,
    kappa: Option<T>,
    lambda: Option<T>,
) -> Result<SystemPreset<T>> {
    match name {
        "mmh" => make_mmh(kappa.unwrap_or_else(|| T::of(2.0)), lambda.unwrap_or_else(T::one), eps),
        "lindemann" => make_lindemann(eps),
        "lindemann-standard" => make_lindemann_standard(eps),
        "neishtadt" => make_neishtadt(eps),
        other => Err(SlowFastError::InvalidParameters(format!("unknown system '{other}'"))),
    }
}

// ---------------------------------------------------------------------------
// Michaelis-Menten-Henri
// ---------------------------------------------------------------------------

/// Michaelis-Menten-Henri enzyme kinetics:
/// `x' = eps (-x + (x+kappa-lambda) y)`, `y' = x - (x+kappa) y`.
///
/// The primary system is the raw form; the experiment system is the
/// deviation form about the critical graph `y = x/(x+kappa)`, which is
/// what the trajectory comparisons integrate.
pub fn make_mmh<T: Real>(kappa: T, lambda: T, eps: T) -> Result<SystemPreset<T>> {
    if !(kappa >= lambda && lambda > T::zero()) {
        return Err(SlowFastError::InvalidParameters(format!(
            "need kappa >= lambda > 0, got kappa = {kappa}, lambda = {lambda}"
        )));
    }
    if !(eps > T::zero() && eps < kappa) {
        return Err(SlowFastError::InvalidParameters(format!(
            "need 0 < eps < kappa, got eps = {eps}"
        )));
    }
    let domain =
        Domain { lo: vec![T::of(0.5)], hi: vec![T::of(3.0)], fast_bound: T::of(12.0), periodic: false };
    let (k, l) = (kappa, lambda);
    let raw = SlowFastSystem::new(
        1,
        1,
        eps,
        Arc::new(move |x: &DVector<T>, y: &DVector<T>| {
            DVector::from_vec(vec![-x[0] + (x[0] + k - l) * y[0]])
        }),
        Arc::new(move |x: &DVector<T>, y: &DVector<T>| {
            DVector::from_vec(vec![x[0] - (x[0] + k) * y[0]])
        }),
        Partials {
            dx_slow: Some(Arc::new(move |_x, y| dmatrix![-T::one() + y[0]])),
            dy_slow: Some(Arc::new(move |x, _y| dmatrix![x[0] + k - l])),
            dx_fast: Some(Arc::new(move |_x, y| dmatrix![T::one() - y[0]])),
            dy_fast: Some(Arc::new(move |x, _y| dmatrix![-(x[0] + k)])),
        },
        domain.clone(),
    )?
    .with_eta0_seed(Arc::new(move |x: &DVector<T>, _| {
        DVector::from_vec(vec![x[0] / (x[0] + k)])
    }));

    // Deviation form about eta0 = x/(x+kappa).
    let dev = SlowFastSystem::new(
        1,
        1,
        eps,
        Arc::new(move |x: &DVector<T>, y: &DVector<T>| {
            let s = x[0] + k;
            DVector::from_vec(vec![-l * x[0] / s + (s - l) * y[0]])
        }),
        Arc::new(move |x: &DVector<T>, y: &DVector<T>| {
            let s = x[0] + k;
            DVector::from_vec(vec![
                eps * k * l * x[0] / (s * s * s) - (s + eps * k * (s - l) / (s * s)) * y[0],
            ])
        }),
        Partials {
            dx_slow: Some(Arc::new(move |x, y| {
                let s = x[0] + k;
                dmatrix![-l * k / (s * s) + y[0]]
            })),
            dy_slow: Some(Arc::new(move |x, _y| dmatrix![x[0] + k - l])),
            dx_fast: Some(Arc::new(move |x, y| {
                let s = x[0] + k;
                let two = T::of(2.0);
                let dr = eps * k * l * (k - two * x[0]) / (s * s * s * s);
                let da = T::one() + eps * k * (two * l - s) / (s * s * s);
                dmatrix![dr - da * y[0]]
            })),
            dy_fast: Some(Arc::new(move |x, _y| {
                let s = x[0] + k;
                dmatrix![-s - eps * k * (s - l) / (s * s)]
            })),
        },
        domain,
    )?;

    Ok(SystemPreset {
        name: "mmh".into(),
        system: Arc::new(raw),
        experiment_system: Arc::new(dev),
        frame: ExperimentFrame::Deviation,
        transform: None,
    })
}

/// Closed forms for the Michaelis-Menten-Henri model.
pub mod mmh {
    use crate::real::Real;

    /// Critical graph `x / (x + kappa)`.
    pub fn eta0<T: Real>(x: T, kappa: T) -> T {
        x / (x + kappa)
    }

    /// Residual of the critical graph in deviation form.
    pub fn rho0<T: Real>(x: T, kappa: T, lambda: T, eps: T) -> T {
        let s = x + kappa;
        eps * kappa * lambda * x / (s * s * s)
    }

    /// First correction (exact, the model is affine in the fast variable).
    pub fn eta1<T: Real>(x: T, kappa: T, lambda: T, eps: T) -> T {
        let s = x + kappa;
        eps * kappa * lambda * x / (s * (s * s * s + eps * kappa * (s - lambda)))
    }

    /// Leading term of the second correction.
    pub fn eta2_leading<T: Real>(x: T, kappa: T, lambda: T, eps: T) -> T {
        let s = x + kappa;
        eps * eps * kappa * lambda * lambda * x * (kappa - T::of(3.0) * x) / s.powi(7)
    }

    /// Linear-in-fast coefficient of the slow field on the graph.
    pub fn mu0<T: Real>(x: T, kappa: T, lambda: T) -> T {
        x + kappa - lambda
    }

    /// Fast-field slope on the graph through first order in `eps`.
    pub fn a_series<T: Real>(x: T, kappa: T, lambda: T, eps: T) -> T {
        let s = x + kappa;
        -s - eps * kappa * (s - lambda) / (s * s)
    }

    /// Leading term of the first fiber-map layer.
    pub fn phi0_leading<T: Real>(x: T, kappa: T, lambda: T) -> T {
        -(x + kappa - lambda) / (x + kappa)
    }

    /// Leading term of the first fiber-map error update.
    pub fn mu1_leading<T: Real>(x: T, kappa: T, lambda: T, eps: T) -> T {
        let s = x + kappa;
        -eps * lambda * lambda * x / (s * s * s)
    }

    /// Leading term of the second fiber-map layer.
    pub fn phi1_leading<T: Real>(x: T, kappa: T, lambda: T, eps: T) -> T {
        let s = x + kappa;
        eps * lambda * lambda * x / (s * s * s * s)
    }

    /// Leading term of the extracted quadratic coefficient.
    pub fn q1_leading<T: Real>(x: T, kappa: T, lambda: T, eps: T) -> T {
        let s = x + kappa;
        -eps * lambda * (s - lambda) / (s * s)
    }

    /// Leading term of the first curvature layer.
    pub fn psi1_leading<T: Real>(x: T, kappa: T, lambda: T, eps: T) -> T {
        let s = x + kappa;
        eps * lambda * (s - lambda) / (T::of(2.0) * s * s * s)
    }

    /// Leading term of the second quadratic error update.
    pub fn q2_leading<T: Real>(x: T, kappa: T, lambda: T, eps: T) -> T {
        let s = x + kappa;
        -eps * eps * lambda * lambda * x * (T::of(2.0) * s - T::of(3.0) * lambda)
            / (T::of(2.0) * s.powi(5))
    }

    /// Leading term of the second curvature layer.
    pub fn psi2_leading<T: Real>(x: T, kappa: T, lambda: T, eps: T) -> T {
        let s = x + kappa;
        eps * eps * lambda * lambda * x * (T::of(2.0) * s - T::of(3.0) * lambda)
            / (T::of(4.0) * s.powi(6))
    }
}

// ---------------------------------------------------------------------------
// Lindemann mechanism
// ---------------------------------------------------------------------------

/// Lindemann mechanism in raw (non-standard slow-fast) form:
/// `x' = -x(x - y)`, `y' = x(x - y) - eps y`.
///
/// The slow rate is not uniformly `O(eps)`, so the system carries the
/// non-standard flag and the fiber maps enter without the `eps` factor.
pub fn make_lindemann<T: Real>(eps: T) -> Result<SystemPreset<T>> {
    if !(eps > T::zero()) {
        return Err(SlowFastError::InvalidParameters(format!("need eps > 0, got {eps}")));
    }
    let domain =
        Domain { lo: vec![T::of(0.2)], hi: vec![T::of(2.5)], fast_bound: T::of(4.0), periodic: false };
    let raw = SlowFastSystem::new(
        1,
        1,
        eps,
        Arc::new(move |x: &DVector<T>, y: &DVector<T>| {
            DVector::from_vec(vec![-x[0] * (x[0] - y[0])])
        }),
        Arc::new(move |x: &DVector<T>, y: &DVector<T>| {
            DVector::from_vec(vec![x[0] * (x[0] - y[0]) - eps * y[0]])
        }),
        Partials {
            dx_slow: Some(Arc::new(move |x, y| dmatrix![-T::of(2.0) * x[0] + y[0]])),
            dy_slow: Some(Arc::new(move |x, _y| dmatrix![x[0]])),
            dx_fast: Some(Arc::new(move |x, y| dmatrix![T::of(2.0) * x[0] - y[0]])),
            dy_fast: Some(Arc::new(move |x, _y| dmatrix![-x[0] - eps])),
        },
        domain,
    )?
    .nonstandard()
    .with_eta0_seed(Arc::new(move |x: &DVector<T>, _| {
        DVector::from_vec(vec![x[0] * x[0] / (x[0] + eps)])
    }));
    let raw = Arc::new(raw);

    Ok(SystemPreset {
        name: "lindemann".into(),
        system: raw.clone(),
        experiment_system: raw,
        frame: ExperimentFrame::Total,
        transform: Some(lindemann_transform()),
    })
}

/// Lindemann mechanism after the linear change of variables
/// `(w, z) = (x + y, 2y)`, which brings it to standard slow-fast form
/// `w' = -eps z / 2`, `z' = 2w^2 - (3w + eps) z + z^2`.
pub fn make_lindemann_standard<T: Real>(eps: T) -> Result<SystemPreset<T>> {
    if !(eps > T::zero()) {
        return Err(SlowFastError::InvalidParameters(format!("need eps > 0, got {eps}")));
    }
    let domain =
        Domain { lo: vec![T::of(0.4)], hi: vec![T::of(3.0)], fast_bound: T::of(4.0), periodic: false };
    let sys = SlowFastSystem::new(
        1,
        1,
        eps,
        Arc::new(move |_w: &DVector<T>, z: &DVector<T>| {
            DVector::from_vec(vec![-z[0] / T::of(2.0)])
        }),
        Arc::new(move |w: &DVector<T>, z: &DVector<T>| {
            DVector::from_vec(vec![
                T::of(2.0) * w[0] * w[0] - (T::of(3.0) * w[0] + eps) * z[0] + z[0] * z[0],
            ])
        }),
        Partials {
            dx_slow: Some(Arc::new(move |_w, _z| dmatrix![T::zero()])),
            dy_slow: Some(Arc::new(move |_w, _z| dmatrix![-T::of(0.5)])),
            dx_fast: Some(Arc::new(move |w, z| dmatrix![T::of(4.0) * w[0] - T::of(3.0) * z[0]])),
            dy_fast: Some(Arc::new(move |w, z| {
                dmatrix![-(T::of(3.0) * w[0] + eps) + T::of(2.0) * z[0]]
            })),
        },
        domain,
    )?
    .with_eta0_seed(Arc::new(move |w: &DVector<T>, _| {
        // slow branch of 2w^2 - (3w+eps) z + z^2 = 0
        let b = T::of(3.0) * w[0] + eps;
        let disc = (b * b - T::of(8.0) * w[0] * w[0]).max(T::zero());
        DVector::from_vec(vec![(b - disc.sqrt()) / T::of(2.0)])
    }));
    let sys = Arc::new(sys);

    Ok(SystemPreset {
        name: "lindemann-standard".into(),
        system: sys.clone(),
        experiment_system: sys,
        frame: ExperimentFrame::Total,
        transform: Some(lindemann_transform()),
    })
}

fn lindemann_transform<T: Real>() -> Transform<T> {
    Transform {
        forward: Arc::new(|xy: &DVector<T>| {
            DVector::from_vec(vec![xy[0] + xy[1], T::of(2.0) * xy[1]])
        }),
        backward: Arc::new(|wz: &DVector<T>| {
            let y = wz[1] / T::of(2.0);
            DVector::from_vec(vec![wz[0] - y, y])
        }),
    }
}

/// Closed forms for the raw Lindemann mechanism.
pub mod lindemann {
    use crate::real::Real;

    fn denom<T: Real>(x: T, eps: T) -> T {
        let two = T::of(2.0);
        let five = T::of(5.0);
        let three = T::of(3.0);
        two * x.powi(3) + five * eps * x * x + three * eps * eps * x + eps.powi(3)
    }

    /// Critical graph `x^2 / (x + eps)`.
    pub fn eta0<T: Real>(x: T, eps: T) -> T {
        x * x / (x + eps)
    }

    /// First correction (exact; the system is affine in `y`).
    pub fn eta1<T: Real>(x: T, eps: T) -> T {
        eps * x.powi(3) * (x + T::of(2.0) * eps) / ((x + eps) * denom(x, eps))
    }

    /// Graph after one correction, `eta0 + eta1`, in closed form.
    pub fn eta_first<T: Real>(x: T, eps: T) -> T {
        x * x * (eps * eps + T::of(4.0) * x * eps + T::of(2.0) * x * x) / denom(x, eps)
    }

    /// Residual after one correction; vanishes at the origin.
    pub fn rho1<T: Real>(x: T, eps: T) -> T {
        let num = T::of(3.0) * x.powi(4)
            + T::of(16.0) * x.powi(3) * eps
            + T::of(28.0) * eps * eps * x * x
            + T::of(20.0) * eps.powi(3) * x
            + T::of(6.0) * eps.powi(4);
        num * eps.powi(3) * x.powi(4) / denom(x, eps).powi(3)
    }

    /// First fiber-map layer in closed form (non-standard convention).
    pub fn phi0<T: Real>(x: T, eps: T) -> T {
        let num = x
            * (T::of(4.0) * x.powi(6)
                + T::of(20.0) * x.powi(5) * eps
                + T::of(37.0) * x.powi(4) * eps * eps
                + T::of(34.0) * x.powi(3) * eps.powi(3)
                + T::of(19.0) * x * x * eps.powi(4)
                + T::of(6.0) * x * eps.powi(5)
                + eps.powi(6));
        let den = eps.powi(7)
            + T::of(5.0) * x * eps.powi(6)
            + T::of(18.0) * x * x * eps.powi(5)
            + T::of(52.0) * x.powi(3) * eps.powi(4)
            + T::of(86.0) * x.powi(4) * eps.powi(3)
            + T::of(83.0) * x.powi(5) * eps * eps
            + T::of(42.0) * x.powi(6) * eps
            + T::of(8.0) * x.powi(7);
        -num / den
    }

    /// Two-layer fiber map through second order in `eps`.
    pub fn phi_first_series<T: Real>(x: T, eps: T) -> T {
        -T::of(0.5) + eps / (T::of(8.0) * x) - eps * eps / (T::of(16.0) * x * x)
    }

    /// Reduced slow field on the once-corrected graph.
    pub fn lambda1<T: Real>(x: T, eps: T) -> T {
        let s = x + eps;
        -x * x * s * s / denom(x, eps)
    }
}

// ---------------------------------------------------------------------------
// Periodic normally-elliptic example
// ---------------------------------------------------------------------------

/// Periodic slow variable, two fast variables with a rotation as the fast
/// linearization, and a non-smooth dependence on `eps` through
/// `floor(1/eps)` and `eps_bar = eps (1 + sin(2 pi / eps))`:
///
/// `x' = eps`, `y' = (eps_bar f_N(x), 0) + [[0, 1], [-1, 0]] y`
/// with `f_N(x) = sum_{k=1}^{N} e^{-k} sin(k x)`, `N = floor(1/eps)`.
///
/// The fast linearization is normally elliptic, so the quadratic
/// (curvature) construction must refuse this preset.
pub fn make_neishtadt<T: Real>(eps: T) -> Result<SystemPreset<T>> {
    if !(eps > T::zero() && eps < T::one()) {
        return Err(SlowFastError::InvalidParameters(format!("need 0 < eps < 1, got {eps}")));
    }
    // Recomputed per instance: floor(1/eps) jumps at integer 1/eps.
    let n_modes = neishtadt::mode_count(eps);
    let eps_bar = neishtadt::eps_bar(eps);
    let domain = Domain {
        lo: vec![T::zero()],
        hi: vec![T::two_pi()],
        fast_bound: T::of(4.0),
        periodic: true,
    };
    let sys = SlowFastSystem::new(
        1,
        2,
        eps,
        Arc::new(move |_x: &DVector<T>, _y: &DVector<T>| DVector::from_vec(vec![T::one()])),
        Arc::new(move |x: &DVector<T>, y: &DVector<T>| {
            let f = neishtadt::f_deriv(0, x[0], n_modes);
            DVector::from_vec(vec![eps_bar * f + y[1], -y[0]])
        }),
        Partials {
            dx_slow: Some(Arc::new(move |_x, _y| dmatrix![T::zero()])),
            dy_slow: Some(Arc::new(move |_x, _y| dmatrix![T::zero(), T::zero()])),
            dx_fast: Some(Arc::new(move |x, _y| {
                let df = neishtadt::f_deriv(1, x[0], n_modes);
                dmatrix![eps_bar * df; T::zero()]
            })),
            dy_fast: Some(Arc::new(move |_x, _y| {
                dmatrix![T::zero(), T::one(); -T::one(), T::zero()]
            })),
        },
        domain,
    )?;
    let sys = Arc::new(sys);
    Ok(SystemPreset {
        name: "neishtadt".into(),
        system: sys.clone(),
        experiment_system: sys,
        frame: ExperimentFrame::Total,
        transform: None,
    })
}

/// Closed forms for the periodic normally-elliptic example.
pub mod neishtadt {
    use crate::real::Real;
    use nalgebra::DVector;

    /// `N = floor(1/eps)`.
    pub fn mode_count<T: Real>(eps: T) -> usize {
        (T::one() / eps).floor().to_usize().expect("mode count representable")
    }

    /// `eps_bar = eps (1 + sin(2 pi / eps))`, non-smooth in `eps`.
    pub fn eps_bar<T: Real>(eps: T) -> T {
        eps * (T::one() + (T::two_pi() / eps).sin())
    }

    /// `m`-th derivative of the mode sum:
    /// `f^(m)(x) = sum_{k=1}^{N} e^{-k} k^m sin(k x + m pi/2)`.
    pub fn f_deriv<T: Real>(m: usize, x: T, n_modes: usize) -> T {
        let shift = T::from_usize(m).unwrap() * T::pi() / T::of(2.0);
        (1..=n_modes).fold(T::zero(), |acc, k| {
            let kf = T::from_usize(k).unwrap();
            acc + (-kf).exp() * kf.powi(m as i32) * (kf * x + shift).sin()
        })
    }

    /// Closed-form correction layer `eta_n`, `n >= 1`, in the example's own
    /// layer numbering (layer 1 is the root of the fast field).
    pub fn oracle_eta<T: Real>(n: usize, x: T, eps: T) -> DVector<T> {
        assert!(n >= 1);
        let n_modes = mode_count(eps);
        let sign = if (n / 2) % 2 == 0 { -T::one() } else { T::one() };
        let c = sign * eps.powi(n as i32 - 1) * eps_bar(eps);
        let f = f_deriv(n - 1, x, n_modes);
        if n % 2 == 1 {
            DVector::from_vec(vec![T::zero(), c * f])
        } else {
            DVector::from_vec(vec![c * f, T::zero()])
        }
    }

    /// Closed-form residual after `n` layers, `rho_n = -eps d(eta_n)/dx`.
    pub fn oracle_rho<T: Real>(n: usize, x: T, eps: T) -> DVector<T> {
        assert!(n >= 1);
        let n_modes = mode_count(eps);
        let sign = if (n / 2) % 2 == 0 { T::one() } else { -T::one() };
        let c = sign * eps.powi(n as i32) * eps_bar(eps);
        let f = f_deriv(n, x, n_modes);
        if n % 2 == 1 {
            DVector::from_vec(vec![T::zero(), c * f])
        } else {
            DVector::from_vec(vec![c * f, T::zero()])
        }
    }

    /// Residual bound at the optimal truncation index `N = floor(1/eps)`:
    /// `2 e^2 eps^{-1/2} e^{-1/eps}`.
    pub fn rho_sup_bound<T: Real>(eps: T) -> T {
        T::of(2.0) * T::e() * T::e() / eps.sqrt() * (-T::one() / eps).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mmh_eta0_value() {
        // kappa = 2 at x = 1.5
        assert_relative_eq!(mmh::eta0(1.5f64, 2.0), 0.42857142857142855, epsilon = 1e-15);
    }

    #[test]
    fn mmh_rho0_value() {
        // 0.1 * 2 * 1 * 1.5 / 3.5^3
        assert_relative_eq!(mmh::rho0(1.5f64, 2.0, 1.0, 0.1), 6.9971e-3, max_relative = 1e-4);
    }

    #[test]
    fn mmh_eta1_value() {
        assert_relative_eq!(mmh::eta1(1.5f64, 2.0, 1.0, 0.1), 1.97612e-3, max_relative = 1e-5);
    }

    #[test]
    fn mmh_accepts_kappa_equals_lambda() {
        assert!(make_mmh(2.0f64, 2.0, 0.1).is_ok());
        assert!(make_mmh(1.0f64, 2.0, 0.1).is_err());
    }

    #[test]
    fn mmh_partials_match_stencil() {
        let p = make_mmh(2.0f64, 1.0, 0.1).unwrap();
        assert!(p.system.cross_check_partials(12).unwrap() < 1e-8);
        assert!(p.experiment_system.cross_check_partials(12).unwrap() < 1e-8);
    }

    #[test]
    fn lindemann_standard_fast_field_value() {
        // z' at (w, z) = (1, 1), eps = 0.1: 2 - 3.1 + 1 = -0.1
        let p = make_lindemann_standard(0.1f64).unwrap();
        let w = DVector::from_vec(vec![1.0]);
        let z = DVector::from_vec(vec![1.0]);
        assert_relative_eq!(p.system.fast_field(&w, &z)[0], -0.1, epsilon = 1e-14);
    }

    #[test]
    fn lindemann_eta_first_value() {
        // (0.01 + 0.4 + 2) / (0.001 + 0.03 + 0.5 + 2)
        assert_relative_eq!(
            lindemann::eta_first(1.0f64, 0.1),
            0.9521928091663374,
            epsilon = 1e-15
        );
    }

    #[test]
    fn lindemann_eta_first_is_eta0_plus_eta1() {
        for &x in &[0.3f64, 0.7, 1.3, 2.0] {
            let e = 0.07;
            assert_relative_eq!(
                lindemann::eta_first(x, e),
                lindemann::eta0(x, e) + lindemann::eta1(x, e),
                max_relative = 1e-13
            );
        }
    }

    #[test]
    fn lindemann_rho1_vanishes_at_origin() {
        assert_eq!(lindemann::rho1(0.0f64, 0.1), 0.0);
    }

    #[test]
    fn lindemann_partials_match_stencil() {
        let p = make_lindemann(0.1f64).unwrap();
        assert!(p.system.cross_check_partials(12).unwrap() < 1e-8);
    }

    #[test]
    fn lindemann_transform_roundtrip_and_field_pushforward() {
        let raw = make_lindemann(0.1f64).unwrap();
        let std = make_lindemann_standard(0.1f64).unwrap();
        let t = raw.transform.as_ref().unwrap();
        for &(x, y) in &[(0.7f64, 0.5), (1.3, 1.1), (2.0, 1.9)] {
            let xy = DVector::from_vec(vec![x, y]);
            let wz = (t.forward)(&xy);
            let back = (t.backward)(&wz);
            assert_relative_eq!(back[0], x, epsilon = 1e-14);
            assert_relative_eq!(back[1], y, epsilon = 1e-14);

            // push the raw field through d(w,z)/d(x,y) = [[1,1],[0,2]]
            let xv = DVector::from_vec(vec![x]);
            let yv = DVector::from_vec(vec![y]);
            let dx = raw.system.slow_rate(&xv, &yv)[0];
            let dy = raw.system.fast_field(&xv, &yv)[0];
            let wv = DVector::from_vec(vec![wz[0]]);
            let zv = DVector::from_vec(vec![wz[1]]);
            let dw = std.system.slow_rate(&wv, &zv)[0];
            let dz = std.system.fast_field(&wv, &zv)[0];
            assert_relative_eq!(dx + dy, dw, epsilon = 1e-13);
            assert_relative_eq!(2.0 * dy, dz, epsilon = 1e-13);
        }
    }

    #[test]
    fn neishtadt_oracle_eta1_at_zero() {
        let v = neishtadt::oracle_eta(1, 0.0f64, 0.2);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 0.0); // sine sum vanishes at x = 0
    }

    #[test]
    fn neishtadt_resonant_eps_bar() {
        // eps = 1/N exactly: sin(2 pi N) = 0 up to rounding
        let eps = 0.25f64;
        assert_relative_eq!(neishtadt::eps_bar(eps), eps, max_relative = 1e-12);
    }

    #[test]
    fn neishtadt_mode_count_is_not_cached_across_eps() {
        let n1 = neishtadt::mode_count(0.25f64);
        let n2 = neishtadt::mode_count(0.25f64 * (1.0 + 1e-9));
        assert_eq!(n1, 4);
        assert_eq!(n2, 3); // one ulp across the integer boundary drops a mode
    }

    #[test]
    fn neishtadt_oracle_recursion_consistency() {
        // eta_{n+1} = J rho_n with J = [[0,1],[-1,0]]; checks the sign and
        // component bookkeeping of the closed forms against each other.
        let eps = 0.21f64;
        for n in 1..=5 {
            for &x in &[0.3f64, 1.1, 4.0] {
                let rho = neishtadt::oracle_rho(n, x, eps);
                let eta_next = neishtadt::oracle_eta(n + 1, x, eps);
                assert_relative_eq!(eta_next[0], rho[1], max_relative = 1e-12, epsilon = 1e-15);
                assert_relative_eq!(eta_next[1], -rho[0], max_relative = 1e-12, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn neishtadt_partials_match_stencil() {
        let p = make_neishtadt(0.2f64).unwrap();
        assert!(p.system.cross_check_partials(12).unwrap() < 1e-8);
    }
}
