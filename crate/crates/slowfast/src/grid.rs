//! Uniform tensor grids over the slow variables, with cubic interpolation,
//! five-point-stencil differentiation and margin bookkeeping.
//!
//! Every iteratively defined field (graph corrections, fiber maps, curvature
//! maps, assembled coefficient fields) is stored as a [`GridFunction`] and
//! composed via interpolation rather than as nested closures; repeated
//! differentiation then costs one stencil sweep per iteration instead of an
//! exponential cascade of field evaluations.
//!
//! Differentiation shrinks the valid domain by `2h` per application on
//! bounded grids. The shrinkage is tracked exactly as an integer node count
//! (`trim`), so the margin invariants hold in exact arithmetic. Periodic
//! grids (slow variable on a circle) wrap instead of shrinking and use the
//! trigonometric differentiation matrix, which is exact for band-limited
//! samples.

use crate::error::{Result, SlowFastError};
use crate::real::Real;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Run node fills in parallel only past this size; tiny grids stay serial.
const PAR_THRESHOLD: usize = 64;

/// Relative tolerance (in units of `h`) for snapping an evaluation point
/// onto a grid node. Node hits return the stored sample unchanged.
const NODE_SNAP: f64 = 1e-9;

/// Uniform axis-aligned grid specification for the slow variables.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec<T: Real> {
    lo: Vec<T>,
    hi: Vec<T>,
    h: T,
    counts: Vec<usize>,
    periodic: bool,
}

impl<T: Real> GridSpec<T> {
    /// Bounded grid on the box `[lo_k, hi_k]` with spacing `h`.
    ///
    /// Each axis must leave room for at least one five-point stencil,
    /// i.e. `hi_k - lo_k > 4 h`.
    pub fn new(lo: Vec<T>, hi: Vec<T>, h: T) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(SlowFastError::InvalidGrid(
                "lo/hi dimension mismatch or empty".into(),
            ));
        }
        if !(h > T::zero()) || !h.is_finite() {
            return Err(SlowFastError::InvalidGrid(format!("spacing h = {h} not positive")));
        }
        let four_h = T::of(4.0) * h;
        let mut counts = Vec::with_capacity(lo.len());
        for (&l, &u) in lo.iter().zip(&hi) {
            if !(u - l > four_h) {
                return Err(SlowFastError::InvalidGrid(format!(
                    "axis width {} must exceed 4h = {}",
                    u - l,
                    four_h
                )));
            }
            let n = ((u - l) / h + T::of(NODE_SNAP)).floor().to_usize().unwrap_or(0) + 1;
            counts.push(n);
        }
        Ok(Self { lo, hi, h, counts, periodic: false })
    }

    /// Periodic grid on `[lo, hi)` (single axis); `h` is adjusted so that an
    /// integer number of nodes covers the period exactly.
    pub fn periodic(lo: T, hi: T, h: T) -> Result<Self> {
        if !(hi > lo) || !(h > T::zero()) {
            return Err(SlowFastError::InvalidGrid("need hi > lo and h > 0".into()));
        }
        let period = hi - lo;
        let n = (period / h).round().to_usize().unwrap_or(0).max(8);
        let h = period / T::from_usize(n).unwrap();
        Ok(Self { lo: vec![lo], hi: vec![hi], h, counts: vec![n], periodic: true })
    }

    /// Number of slow dimensions.
    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    /// Grid spacing.
    pub fn h(&self) -> T {
        self.h
    }

    /// Whether the grid wraps around.
    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    /// Node count along axis `d`.
    pub fn count(&self, d: usize) -> usize {
        self.counts[d]
    }

    /// Total number of lattice nodes.
    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    /// True when the lattice is empty (never for a validated spec).
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lower corner.
    pub fn lo(&self) -> &[T] {
        &self.lo
    }

    /// Upper corner.
    pub fn hi(&self) -> &[T] {
        &self.hi
    }

    /// Coordinate of node `i` along axis `d`.
    pub fn coord(&self, d: usize, i: usize) -> T {
        self.lo[d] + T::from_usize(i).unwrap() * self.h
    }

    fn strides(&self) -> Vec<usize> {
        let d = self.dims();
        let mut s = vec![1usize; d];
        for k in (0..d.saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.counts[k + 1];
        }
        s
    }

    fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    fn unflat(&self, mut flat: usize) -> Vec<usize> {
        let strides = self.strides();
        let mut idx = vec![0usize; self.dims()];
        for (k, s) in strides.iter().enumerate() {
            idx[k] = flat / s;
            flat %= s;
        }
        idx
    }

    fn point(&self, idx: &[usize]) -> DVector<T> {
        DVector::from_iterator(self.dims(), idx.iter().enumerate().map(|(d, &i)| self.coord(d, i)))
    }
}

/// Values storable at a grid node: scalars, vectors, matrices, or a list of
/// matrices (one per slow dimension / slow component).
pub trait GridValue<T: Real>: Clone + PartialEq + Send + Sync + 'static {
    /// Weighted sum `sum c_i v_i`; `terms` is nonempty and shapes agree.
    fn lin_comb(terms: &[(T, &Self)]) -> Self;
    /// A zero value of the same shape.
    fn zero_like(&self) -> Self;
    /// All entries finite.
    fn is_finite_val(&self) -> bool;
    /// Max-absolute-entry norm.
    fn norm_inf(&self) -> T;
}

impl<T: Real> GridValue<T> for T {
    fn lin_comb(terms: &[(T, &Self)]) -> Self {
        terms.iter().fold(T::zero(), |acc, (c, v)| acc + *c * **v)
    }
    fn zero_like(&self) -> Self {
        T::zero()
    }
    fn is_finite_val(&self) -> bool {
        self.is_finite()
    }
    fn norm_inf(&self) -> T {
        self.abs()
    }
}

impl<T: Real> GridValue<T> for DVector<T> {
    fn lin_comb(terms: &[(T, &Self)]) -> Self {
        let mut acc = terms[0].1 * terms[0].0;
        for (c, v) in &terms[1..] {
            acc.axpy(*c, v, T::one());
        }
        acc
    }
    fn zero_like(&self) -> Self {
        DVector::zeros(self.len())
    }
    fn is_finite_val(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
    fn norm_inf(&self) -> T {
        self.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl<T: Real> GridValue<T> for DMatrix<T> {
    fn lin_comb(terms: &[(T, &Self)]) -> Self {
        let mut acc = terms[0].1 * terms[0].0;
        for (c, v) in &terms[1..] {
            acc.zip_apply(*v, |a, b| *a += *c * b);
        }
        acc
    }
    fn zero_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn is_finite_val(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
    fn norm_inf(&self) -> T {
        self.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl<T: Real> GridValue<T> for Vec<DMatrix<T>> {
    fn lin_comb(terms: &[(T, &Self)]) -> Self {
        let len = terms[0].1.len();
        (0..len)
            .map(|i| {
                let slice: Vec<(T, &DMatrix<T>)> =
                    terms.iter().map(|(c, v)| (*c, &v[i])).collect();
                GridValue::lin_comb(&slice)
            })
            .collect()
    }
    fn zero_like(&self) -> Self {
        self.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect()
    }
    fn is_finite_val(&self) -> bool {
        self.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
    fn norm_inf(&self) -> T {
        self.iter().fold(T::zero(), |m, v| m.max(GridValue::<T>::norm_inf(v)))
    }
}

/// A sampled function of the slow variable with interpolation and a
/// shrinking valid domain.
///
/// Samples cover the full lattice; validity is the sub-box obtained by
/// trimming `trim` nodes from every side (bounded grids), minus any
/// explicitly masked nodes. Evaluation outside the valid region is an
/// error, never extrapolation.
#[derive(Debug, Clone)]
pub struct GridFunction<T: Real, V: GridValue<T>> {
    spec: GridSpec<T>,
    trim: usize,
    values: Vec<V>,
    mask: Option<Vec<bool>>,
}

impl<T: Real, V: GridValue<T>> GridFunction<T, V> {
    /// Sample `f` at every valid node (in parallel for large grids).
    pub fn sample<F>(spec: &GridSpec<T>, f: F) -> Result<Self>
    where
        F: Fn(&DVector<T>) -> Result<V> + Sync,
    {
        Self::sample_trimmed(spec, 0, f)
    }

    /// Sample `f` on the lattice with `trim` nodes already trimmed per side.
    pub fn sample_trimmed<F>(spec: &GridSpec<T>, trim: usize, f: F) -> Result<Self>
    where
        F: Fn(&DVector<T>) -> Result<V> + Sync,
    {
        let len = spec.len();
        let valid: Vec<usize> =
            (0..len).filter(|&i| index_valid(spec, trim, &spec.unflat(i))).collect();
        if valid.is_empty() {
            return Err(SlowFastError::DomainExceeded(
                "trim leaves no valid nodes (domain exhausted)".into(),
            ));
        }
        let compute = |&flat: &usize| -> Result<(usize, V)> {
            let v = f(&spec.point(&spec.unflat(flat)))?;
            if !v.is_finite_val() {
                return Err(SlowFastError::NumericalBreakdown(format!(
                    "non-finite sample at node {flat}"
                )));
            }
            Ok((flat, v))
        };
        let samples: Vec<(usize, V)> = if valid.len() >= PAR_THRESHOLD {
            valid.par_iter().map(compute).collect::<Result<_>>()?
        } else {
            valid.iter().map(compute).collect::<Result<_>>()?
        };
        let zero = samples[0].1.zero_like();
        let mut values = vec![zero; len];
        for (flat, v) in samples {
            values[flat] = v;
        }
        Ok(Self { spec: spec.clone(), trim, values, mask: None })
    }

    /// Build directly from per-node values computed elsewhere.
    pub fn from_values(spec: GridSpec<T>, trim: usize, values: Vec<V>) -> Self {
        debug_assert_eq!(values.len(), spec.len());
        Self { spec, trim, values, mask: None }
    }

    /// Grid specification.
    pub fn spec(&self) -> &GridSpec<T> {
        &self.spec
    }

    /// Nodes trimmed per side.
    pub fn trim(&self) -> usize {
        self.trim
    }

    /// Accumulated boundary shrinkage in units of the slow variable.
    pub fn margin(&self) -> T {
        T::from_usize(self.trim).unwrap() * self.spec.h
    }

    /// Stored value at a flat lattice index.
    pub fn value_at(&self, flat: usize) -> &V {
        &self.values[flat]
    }

    /// Whether the node at `flat` is inside the trimmed box and unmasked.
    pub fn node_is_valid(&self, flat: usize) -> bool {
        index_valid(&self.spec, self.trim, &self.spec.unflat(flat))
            && self.mask.as_ref().map_or(true, |m| !m[flat])
    }

    /// Whether `flat` would be valid under a stricter trim (mask included).
    pub fn valid_at_trim(&self, flat: usize, trim: usize) -> bool {
        index_valid(&self.spec, trim, &self.spec.unflat(flat))
            && self.mask.as_ref().map_or(true, |m| !m[flat])
    }

    /// Coordinates of the node at `flat`.
    pub fn point(&self, flat: usize) -> DVector<T> {
        self.spec.point(&self.spec.unflat(flat))
    }

    /// Flat indices and coordinates of all valid nodes.
    pub fn valid_nodes(&self) -> Vec<(usize, DVector<T>)> {
        (0..self.spec.len())
            .filter(|&i| self.node_is_valid(i))
            .map(|i| (i, self.spec.point(&self.spec.unflat(i))))
            .collect()
    }

    /// Number of masked nodes.
    pub fn masked_count(&self) -> usize {
        self.mask.as_ref().map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    /// Mark the given flat indices invalid.
    pub fn apply_mask(&mut self, masked: &[usize]) {
        if masked.is_empty() {
            return;
        }
        let mask = self.mask.get_or_insert_with(|| vec![false; self.values.len()]);
        for &i in masked {
            mask[i] = true;
        }
    }

    /// Sup norm (`max` of `norm_inf`) over valid nodes.
    pub fn sup_norm(&self) -> T {
        (0..self.spec.len())
            .filter(|&i| self.node_is_valid(i))
            .map(|i| self.values[i].norm_inf())
            .fold(T::zero(), T::max)
    }

    /// Node-wise transform keeping trim and mask.
    pub fn map<W, F>(&self, f: F) -> GridFunction<T, W>
    where
        W: GridValue<T>,
        F: Fn(&V) -> W + Sync,
    {
        let values = self.values.iter().map(&f).collect();
        GridFunction { spec: self.spec.clone(), trim: self.trim, values, mask: self.mask.clone() }
    }

    /// Node-wise combination with another grid on the same lattice.
    /// The result carries the larger trim and the union of masks.
    pub fn zip_map<U, W, F>(&self, other: &GridFunction<T, U>, f: F) -> GridFunction<T, W>
    where
        U: GridValue<T>,
        W: GridValue<T>,
        F: Fn(&V, &U) -> W + Sync,
    {
        debug_assert_eq!(self.spec, other.spec);
        let values =
            self.values.iter().zip(&other.values).map(|(a, b)| f(a, b)).collect();
        let mask = match (&self.mask, &other.mask) {
            (None, None) => None,
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| *x || *y).collect()),
        };
        GridFunction {
            spec: self.spec.clone(),
            trim: self.trim.max(other.trim),
            values,
            mask,
        }
    }

    /// Evaluate at `x` by local cubic (4-point tensor) interpolation.
    ///
    /// Points that coincide with a valid node reproduce the stored sample
    /// exactly. Points whose interpolation window touches a masked node or
    /// the trimmed boundary are rejected with `DomainExceeded`.
    pub fn eval(&self, x: &DVector<T>) -> Result<V> {
        let d = self.spec.dims();
        if x.len() != d {
            return Err(SlowFastError::DomainExceeded(format!(
                "point dimension {} != grid dimension {}",
                x.len(),
                d
            )));
        }
        let snap = T::of(NODE_SNAP);
        // Per-axis fractional index, wrapped for periodic grids.
        let mut u = Vec::with_capacity(d);
        for k in 0..d {
            let mut uk = (x[k] - self.spec.lo[k]) / self.spec.h;
            let n = T::from_usize(self.spec.counts[k]).unwrap();
            if self.spec.periodic {
                uk = uk - (uk / n).floor() * n;
                if uk >= n {
                    uk = uk - n;
                }
            } else {
                let t = T::from_usize(self.trim).unwrap();
                if uk < t - snap || uk > n - T::one() - t + snap {
                    return Err(SlowFastError::DomainExceeded(format!(
                        "x[{k}] = {} outside [{}, {}]",
                        x[k],
                        self.spec.coord(k, self.trim),
                        self.spec.coord(k, self.spec.counts[k] - 1 - self.trim)
                    )));
                }
            }
            u.push(uk);
        }
        // Exact node hit: return the stored sample bit-for-bit.
        let rounded: Vec<usize> = u
            .iter()
            .enumerate()
            .map(|(k, &uk)| {
                let r = uk.round();
                let i = r.to_usize().unwrap_or(usize::MAX);
                if (uk - r).abs() < snap && i < self.spec.counts[k] {
                    Some(i)
                } else {
                    None
                }
            })
            .collect::<Option<Vec<_>>>()
            .unwrap_or_default();
        if rounded.len() == d {
            let flat = self.spec.flat(&rounded);
            if self.node_is_valid(flat) {
                return Ok(self.values[flat].clone());
            }
        }
        // Per-axis 4-node window and cubic Lagrange weights.
        let mut windows: Vec<[usize; 4]> = Vec::with_capacity(d);
        let mut weights: Vec<[T; 4]> = Vec::with_capacity(d);
        for k in 0..d {
            let n = self.spec.counts[k];
            let (win, s) = if self.spec.periodic {
                let base = u[k].floor().to_isize().unwrap();
                let wrap = |j: isize| -> usize {
                    j.rem_euclid(n as isize) as usize
                };
                (
                    [wrap(base - 1), wrap(base), wrap(base + 1), wrap(base + 2)],
                    u[k] - T::from_isize(base - 1).unwrap(),
                )
            } else {
                let lo = self.trim as isize;
                let hi = (n - 1 - self.trim) as isize - 3;
                if hi < lo {
                    return Err(SlowFastError::DomainExceeded(
                        "valid region narrower than one cubic window".into(),
                    ));
                }
                let start = (u[k].floor().to_isize().unwrap() - 1).clamp(lo, hi);
                (
                    [start as usize, start as usize + 1, start as usize + 2, start as usize + 3],
                    u[k] - T::from_isize(start).unwrap(),
                )
            };
            let s1 = s - T::one();
            let s2 = s - T::of(2.0);
            let s3 = s - T::of(3.0);
            let sixth = T::of(1.0 / 6.0);
            let half = T::of(0.5);
            weights.push([
                -s1 * s2 * s3 * sixth,
                s * s2 * s3 * half,
                -s * s1 * s3 * half,
                s * s1 * s2 * sixth,
            ]);
            windows.push(win);
        }
        // Tensor-product combination over the 4^d window nodes.
        let mut terms: Vec<(T, &V)> = Vec::with_capacity(1 << (2 * d));
        let mut idx = vec![0usize; d];
        loop {
            let mut w = T::one();
            let mut node = Vec::with_capacity(d);
            for k in 0..d {
                w *= weights[k][idx[k]];
                node.push(windows[k][idx[k]]);
            }
            let flat = self.spec.flat(&node);
            if let Some(m) = &self.mask {
                if m[flat] {
                    return Err(SlowFastError::DomainExceeded(
                        "interpolation window touches a masked node".into(),

     ));
                }
            }
            terms.push((w, &self.values[flat]));
            // advance the multi-index over {0,1,2,3}^d
            let mut k = 0;
            loop {
                if k == d {
                    return Ok(V::lin_comb(&terms));
                }
                idx[k] += 1;
                if idx[k] < 4 {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    /// Partial derivative along axis `dim`.
    ///
    /// Bounded grids apply the five-point stencil to the stored samples and
    /// shrink the valid box by `2h` per side. Periodic grids apply the
    /// trigonometric differentiation matrix (exact for band-limited data)
    /// and keep their full domain.
    pub fn derivative(&self, dim: usize) -> Result<GridFunction<T, V>> {
        if self.spec.periodic {
            return self.derivative_periodic(dim);
        }
        let new_trim = self.trim + 2;
        let strides = self.spec.strides();
        let stride = strides[dim];
        let len = self.spec.len();
        let zero = self.values[0].zero_like();
        let mut values = vec![zero; len];
        let mut mask: Option<Vec<bool>> = self.mask.as_ref().map(|_| vec![false; len]);
        let inv_12h = T::one() / (T::of(12.0) * self.spec.h);
        let c8 = T::of(8.0);
        let mut any_valid = false;
        for flat in 0..len {
            let idx = self.spec.unflat(flat);
            if !index_valid(&self.spec, new_trim, &idx) {
                continue;
            }
            if let Some(src_mask) = &self.mask {
                // output node masked if any stencil input is masked
                let touched = (-2isize..=2).any(|o| {
                    let j = (flat as isize + o * stride as isize) as usize;
                    src_mask[j]
                });
                if touched {
                    mask.as_mut().unwrap()[flat] = true;
                    continue;
                }
            }
            let vm2 = &self.values[flat - 2 * stride];
            let vm1 = &self.values[flat - stride];
            let vp1 = &self.values[flat + stride];
            let vp2 = &self.values[flat + 2 * stride];
            values[flat] = V::lin_comb(&[
                (-inv_12h, vp2),
                (c8 * inv_12h, vp1),
                (-c8 * inv_12h, vm1),
                (inv_12h, vm2),
            ]);
            any_valid = true;
        }
        if !any_valid {
            return Err(SlowFastError::DomainExceeded(
                "derivative shrinkage emptied the valid domain (too many iterations for the grid)"
                    .into(),
            ));
        }
        Ok(GridFunction { spec: self.spec.clone(), trim: new_trim, values, mask })
    }

    /// Trigonometric (Fourier) differentiation along a periodic axis.
    ///
    /// Modes whose amplitude sits at the round-off floor relative to the
    /// largest coefficient are dropped before differentiating; without the
    /// filter, repeated differentiation amplifies floor noise by the top
    /// mode number per pass and ruins deep iteration stacks.
    fn derivative_periodic(&self, dim: usize) -> Result<GridFunction<T, V>> {
        let n = self.spec.counts[dim];
        let strides = self.spec.strides();
        let stride = strides[dim];
        let period = self.spec.hi[dim] - self.spec.lo[dim];
        let omega0 = T::two_pi() / period;
        let filter = T::default_epsilon() * T::of(1e3);
        let len = self.spec.len();
        let zero = self.values[0].zero_like();
        let mut values = vec![zero; len];
        let k_max = (n - 1) / 2; // Nyquist cosine mode differentiates to zero
        let two_over_n = T::of(2.0) / T::from_usize(n).unwrap();
        // Iterate over 1-D lines along `dim`.
        let line_starts: Vec<usize> = (0..len)
            .filter(|&flat| self.spec.unflat(flat)[dim] == 0)
            .collect();
        for base in line_starts {
            // Fourier coefficients a_k (cos) and b_k (sin) of the line.
            let mut coeffs: Vec<(V, V)> = Vec::with_capacity(k_max);
            let mut amax = T::zero();
            for k in 1..=k_max {
                let kf = T::from_usize(k).unwrap();
                let mut cos_terms: Vec<(T, &V)> = Vec::with_capacity(n);
                let mut sin_terms: Vec<(T, &V)> = Vec::with_capacity(n);
                for j in 0..n {
                    let theta = T::two_pi() * kf * T::from_usize(j).unwrap()
                        / T::from_usize(n).unwrap();
                    let v = &self.values[base + j * stride];
                    cos_terms.push((two_over_n * theta.cos(), v));
                    sin_terms.push((two_over_n * theta.sin(), v));
                }
                let a = V::lin_comb(&cos_terms);
                let b = V::lin_comb(&sin_terms);
                amax = amax.max(a.norm_inf()).max(b.norm_inf());
                coeffs.push((a, b));
            }
            let threshold = amax * filter;
            // d/dx sum [a_k cos(k w0 s) + b_k sin(k w0 s)]
            //   = sum k w0 [-a_k sin(k w0 s) + b_k cos(k w0 s)]
            for j in 0..n {
                let mut terms: Vec<(T, &V)> = Vec::with_capacity(2 * k_max);
                for (k, (a, b)) in coeffs.iter().enumerate() {
                    if a.norm_inf() < threshold && b.norm_inf() < threshold {
                        continue;
                    }
                    let kf = T::from_usize(k + 1).unwrap();
                    let theta = T::two_pi() * kf * T::from_usize(j).unwrap()
                        / T::from_usize(n).unwrap();
                    let wk = kf * omega0;
                    terms.push((-wk * theta.sin(), a));
                    terms.push((wk * theta.cos(), b));
                }
                values[base + j * stride] = if terms.is_empty() {
                    self.values[base].zero_like()
                } else {
                    V::lin_comb(&terms)
                };
            }
        }
        Ok(GridFunction { spec: self.spec.clone(), trim: 0, values, mask: self.mask.clone() })
    }
}

fn index_valid<T: Real>(spec: &GridSpec<T>, trim: usize, idx: &[usize]) -> bool {
    if spec.periodic {
        return true;
    }
    idx.iter()
        .zip(&spec.counts)
        .all(|(&i, &n)| i >= trim && n >= 1 + 2 * trim && i <= n - 1 - trim)
}

/// Five-point stencil derivative of a callable along one axis:
/// `(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / (12 h)`, error `O(h^4)`.
pub fn stencil_derivative<T, V, F>(f: F, x: &DVector<T>, h: T, dim: usize) -> Result<V>
where
    T: Real,
    V: GridValue<T>,
    F: Fn(&DVector<T>) -> Result<V>,
{
    if !(h > T::zero()) {
        return Err(SlowFastError::InvalidGrid(format!("stencil spacing h = {h} not positive")));
    }
    let probe = |offset: T| -> Result<V> {
        let mut p = x.clone();
        p[dim] += offset * h;
        let v = f(&p)?;
        if !v.is_finite_val() {
            return Err(SlowFastError::NumericalBreakdown(format!(
                "non-finite field value near x[{dim}] = {}",
                x[dim]
            )));
        }
        Ok(v)
    };
    let p2 = probe(T::of(2.0))?;
    let p1 = probe(T::one())?;
    let m1 = probe(-T::one())?;
    let m2 = probe(-T::of(2.0))?;
    let inv_12h = T::one() / (T::of(12.0) * h);
    let c8 = T::of(8.0);
    Ok(V::lin_comb(&[
        (-inv_12h, &p2),
        (c8 * inv_12h, &p1),
        (-c8 * inv_12h, &m1),
        (inv_12h, &m2),
    ]))
}

/// Scalar one-dimensional stencil convenience.
pub fn stencil_derivative_1d<T: Real>(f: impl Fn(T) -> T, x: T, h: T) -> T {
    let inv_12h = T::one() / (T::of(12.0) * h);
    let two = T::of(2.0);
    let c8 = T::of(8.0);
    (-f(x + two * h) + c8 * f(x + h) - c8 * f(x - h) + f(x - two * h)) * inv_12h
}

/// Jacobian grid of a vector-valued grid: column `d` is the derivative
/// along slow axis `d`. Costs one trim step (all axis derivatives are taken
/// from the same source).
pub fn vector_jacobian<T: Real>(
    g: &GridFunction<T, DVector<T>>,
) -> Result<GridFunction<T, DMatrix<T>>> {
    let dims = g.spec().dims();
    let partials: Vec<GridFunction<T, DVector<T>>> =
        (0..dims).map(|d| g.derivative(d)).collect::<Result<_>>()?;
    let rows = g.value_at(0).len();
    let mut out = partials[0].map(|v| {
        let mut m = DMatrix::zeros(rows, dims);
        m.set_column(0, v);
        m
    });
    for (d, p) in partials.iter().enumerate().skip(1) {
        out = out.zip_map(p, |m, v| {
            let mut m = m.clone();
            m.set_column(d, v);
            m
        });
    }
    Ok(out)
}

/// Per-axis derivative list of a matrix-valued grid
/// (entry `d` of the list is the derivative along slow axis `d`).
pub fn matrix_jacobian<T: Real>(
    g: &GridFunction<T, DMatrix<T>>,
) -> Result<GridFunction<T, Vec<DMatrix<T>>>> {
    let dims = g.spec().dims();
    let partials: Vec<GridFunction<T, DMatrix<T>>> =
        (0..dims).map(|d| g.derivative(d)).collect::<Result<_>>()?;
    let mut out = partials[0].map(|m| vec![m.clone()]);
    for p in partials.iter().skip(1) {
        out = out.zip_map(p, |list, m| {
            let mut list = list.clone();
            list.push(m.clone());
            list
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec_1d(lo: f64, hi: f64, h: f64) -> GridSpec<f64> {
        GridSpec::new(vec![lo], vec![hi], h).unwrap()
    }

    #[test]
    fn rejects_narrow_axis() {
        assert!(GridSpec::new(vec![0.0], vec![0.03], 0.01).is_err());
    }

    #[test]
    fn stencil_constant_is_zero() {
        let d = stencil_derivative_1d(|_x: f64| 3.25, 1.0, 0.05);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn stencil_exact_on_cubic() {
        let d = stencil_derivative_1d(|x: f64| x * x * x, 1.0, 0.01);
        assert_relative_eq!(d, 3.0, max_relative = 1e-8);
    }

    #[test]
    fn stencil_sine_error_bound() {
        // |error| <= h^4 |f^(5)| / 30 with f = sin, |f^(5)| = |cos| <= 1
        let d = stencil_derivative_1d(|x: f64| x.sin(), 0.7, 0.01);
        assert!((d - 0.7f64.cos()).abs() < 3e-10);
    }

    #[test]
    fn node_values_reproduced_bit_for_bit() {
        let spec = spec_1d(0.0, 2.0, 0.01);
        let f = |x: &DVector<f64>| Ok(x[0].sin() * 7.31 + 0.1);
        let g = GridFunction::sample(&spec, f).unwrap();
        for i in (0..spec.count(0)).step_by(17) {
            let x = DVector::from_vec(vec![spec.coord(0, i)]);
            let direct = x[0].sin() * 7.31 + 0.1;
            assert_eq!(g.eval(&x).unwrap(), direct);
        }
    }

    #[test]
    fn cubic_interpolation_accuracy() {
        let spec = spec_1d(0.0, 2.0, 0.01);
        let g = GridFunction::sample(&spec, |x| Ok(x[0].sin())).unwrap();
        let x = DVector::from_vec(vec![0.7351234]);
        assert!((g.eval(&x).unwrap() - 0.7351234f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn derivative_of_square_grid() {
        let spec = spec_1d(0.0, 4.0, 0.01);
        let g = GridFunction::sample(&spec, |x| Ok(x[0] * x[0])).unwrap();
        let d = g.derivative(0).unwrap();
        assert_eq!(d.trim(), 2);
        for (_, x) in d.valid_nodes().iter().step_by(23) {
            assert!((d.eval(x).unwrap() - 2.0 * x[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn margin_accumulates_exactly() {
        let spec = spec_1d(0.0, 2.0, 0.01);
        let g = GridFunction::sample(&spec, |x| Ok(x[0])).unwrap();
        let d3 = g.derivative(0).unwrap().derivative(0).unwrap().derivative(0).unwrap();
        assert_eq!(d3.trim(), 6);
        assert_relative_eq!(d3.margin(), 0.06, max_relative = 1e-15);
    }

    #[test]
    fn eval_outside_margin_fails() {
        let spec = spec_1d(0.0, 2.0, 0.01);
        let g = GridFunction::sample(&spec, |x| Ok(x[0])).unwrap();
        let d = g.derivative(0).unwrap();
        let x = DVector::from_vec(vec![0.005]);
        assert!(matches!(d.eval(&x), Err(SlowFastError::DomainExceeded(_))));
    }

    #[test]
    fn periodic_derivative_exact_on_trig() {
        let spec = GridSpec::periodic(0.0, std::f64::consts::TAU, 0.01).unwrap();
        let g = GridFunction::sample(&spec, |x| Ok((3.0 * x[0]).sin())).unwrap();
        let d = g.derivative(0).unwrap();
        assert_eq!(d.trim(), 0);
        for (flat, x) in d.valid_nodes().iter().step_by(41) {
            let expect = 3.0 * (3.0 * x[0]).cos();
            assert!((d.value_at(*flat) - expect).abs() < 1e-11);
        }
    }

    #[test]
    fn periodic_eval_wraps() {
        let spec = GridSpec::periodic(0.0, std::f64::consts::TAU, 0.05).unwrap();
        let g = GridFunction::sample(&spec, |x| Ok(x[0].sin())).unwrap();
        let almost_full_turn = std::f64::consts::TAU + 0.3;
        let x = DVector::from_vec(vec![almost_full_turn]);
        assert!((g.eval(&x).unwrap() - 0.3f64.sin()).abs() < 1e-5);
    }

    #[test]
    fn two_dimensional_grid_roundtrip() {
        let spec = GridSpec::new(vec![0.0, 1.0], vec![1.0, 2.0], 0.05).unwrap();
        let f = |x: &DVector<f64>| Ok(x[0] * x[0] + 3.0 * x[1]);
        let g = GridFunction::sample(&spec, f).unwrap();
        let p = DVector::from_vec(vec![0.513, 1.777]);
        assert!((g.eval(&p).unwrap() - (0.513 * 0.513 + 3.0 * 1.777)).abs() < 1e-9);
        let dx0 = g.derivative(0).unwrap();
        let q = DVector::from_vec(vec![0.5, 1.5]);
        assert!((dx0.eval(&q).unwrap() - 1.0).abs() < 1e-10);
        let dx1 = g.derivative(1).unwrap();
        assert!((dx1.eval(&q).unwrap() - 3.0).abs() < 1e-10);
    }

    #[test]
    fn masked_node_blocks_interpolation() {
        let spec = spec_1d(0.0, 2.0, 0.01);
        let mut g = GridFunction::sample(&spec, |x| Ok(x[0])).unwrap();
        g.apply_mask(&[100]);
        let near = DVector::from_vec(vec![1.004]);
        assert!(g.eval(&near).is_err());
        let far = DVector::from_vec(vec![1.5]);
        assert!(g.eval(&far).is_ok());
        assert_eq!(g.masked_count(), 1);
    }
}
