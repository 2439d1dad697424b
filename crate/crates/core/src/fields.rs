//! Fields on the periodic torus `[-1, 1]^dim`.
//!
//! Samples live on the uniform grid `x_j = -1 + 2 j / N` per axis, stored
//! row-major with axis 0 slowest. The spectral mirror uses the complex basis
//! `e_m(x) = 2^{-dim/2} exp(i pi m . x)`, which is orthonormal in `L^2` of the
//! torus, so Parseval holds with the midpoint quadrature without extra factors.

use std::fmt;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("grid dimension must be 1, 2 or 3, got {0}")]
    InvalidDimension(usize),
    #[error("points per axis must be even and at least 8, got {0}")]
    InvalidResolution(usize),
    #[error("field contains non-finite samples")]
    NonFiniteField,
    #[error("expected {expected} samples, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("fields are sampled on different grids")]
    GridMismatch,
    #[error("axis {axis} out of range for a {dim}-dimensional grid")]
    InvalidAxis { axis: usize, dim: usize },
    #[error("derivative order {0} is not supported (use 1 or 2)")]
    InvalidOrder(u32),
    #[error("wavevector {0:?} is outside the resolvable band")]
    OutOfBand(Vec<i64>),
    #[error("component {component} out of range 1..={max}")]
    InvalidComponent { component: usize, max: usize },
    #[error("Sobolev exponent q = {0} must lie in (3, 6]")]
    InvalidExponent(f64),
}

struct FftPlans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Uniform periodic grid with `n` points per axis on `[-1, 1]^dim`.
#[derive(Clone)]
pub struct Grid {
    dim: usize,
    n: usize,
    plans: Arc<FftPlans>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.n == other.n
    }
}

impl Eq for Grid {}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.dim)
            .field("n", &self.n)
            .finish()
    }
}

impl Grid {
    pub fn new(dim: usize, n: usize) -> Result<Self, FieldError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(FieldError::InvalidDimension(dim));
        }
        if n < 8 || !n.is_multiple_of(2) {
            return Err(FieldError::InvalidResolution(n));
        }
        let mut planner = FftPlanner::new();
        let plans = FftPlans {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        };
        Ok(Self {
            dim,
            n,
            plans: Arc::new(plans),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Points per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Total number of samples, `n^dim`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Volume of the torus, `2^dim`.
    pub fn volume(&self) -> f64 {
        2f64.powi(self.dim as i32)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow((self.dim - 1 - axis) as u32)
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / self.n as f64
    }

    /// Per-axis sample indices of a flat index; unused axes are zero.
    pub fn multi_index(&self, mut flat: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        for axis in (0..self.dim).rev() {
            out[axis] = flat % self.n;
            flat /= self.n;
        }
        out
    }

    /// Physical coordinates of a flat index; unused axes are zero.
    pub fn point(&self, flat: usize) -> [f64; MAX_DIM] {
        let idx = self.multi_index(flat);
        let mut out = [0.0; MAX_DIM];
        for axis in 0..self.dim {
            out[axis] = self.coordinate(idx[axis]);
        }
        out
    }

    /// Signed wavenumber stored at per-axis index `i` (FFT ordering).
    pub fn wavenumber(&self, i: usize) -> i64 {
        if i < self.n / 2 {
            i as i64
        } else {
            i as i64 - self.n as i64
        }
    }

    /// Signed wavevector of a flat spectral index.
    pub fn mode(&self, flat: usize) -> [i64; MAX_DIM] {
        let idx = self.multi_index(flat);
        let mut out = [0; MAX_DIM];
        for axis in 0..self.dim {
            out[axis] = self.wavenumber(idx[axis]);
        }
        out
    }

    /// True when the per-axis index holds the Nyquist mode `-n/2`.
    pub fn is_nyquist(&self, i: usize) -> bool {
        i == self.n / 2
    }

    /// Flat spectral index of a wavevector with `|m|_inf < n/2`.
    pub fn spectral_index(&self, wavevector: &[i64]) -> Result<usize, FieldError> {
        if wavevector.len() != self.dim {
            return Err(FieldError::OutOfBand(wavevector.to_vec()));
        }
        let half = (self.n / 2) as i64;
        let mut flat = 0usize;
        for &m in wavevector {
            if m.abs() >= half {
                return Err(FieldError::OutOfBand(wavevector.to_vec()));
            }
            let i = if m >= 0 { m } else { m + self.n as i64 } as usize;
            flat = flat * self.n + i;
        }
        Ok(flat)
    }

    /// 2/3-rule mask: keeps modes with `3 |m_a| < n` on every axis.
    pub fn dealias_keeps(&self, flat: usize) -> bool {
        let m = self.mode(flat);
        (0..self.dim).all(|a| 3 * m[a].unsigned_abs() < self.n as u64)
    }

    fn transform_axes(&self, data: &mut [Complex64], inverse: bool) {
        let fft = if inverse {
            &self.plans.inverse
        } else {
            &self.plans.forward
        };
        let n = self.n;
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for axis in 0..self.dim {
            let stride = self.stride(axis);
            let block = n * stride;
            for start in (0..data.len()).step_by(block) {
                for offset in 0..stride {
                    let base = start + offset;
                    for (k, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + k * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (k, value) in line.iter().enumerate() {
                        data[base + k * stride] = *value;
                    }
                }
            }
        }
    }

    /// `(-1)^{sum m_a}` phase relating FFT ordering to coordinates starting at -1.
    fn phase(&self, flat: usize) -> f64 {
        let idx = self.multi_index(flat);
        let parity: usize = idx[..self.dim].iter().sum();
        if parity.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }
}

fn check_finite(values: &[f64]) -> Result<(), FieldError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FieldError::NonFiniteField)
    }
}

/// Complex spectral coefficients `c_m = <f, e_m>` in FFT ordering.
#[derive(Debug, Clone)]
pub struct Spectrum {
    grid: Grid,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(grid: Grid, coeffs: Vec<Complex64>) -> Result<Self, FieldError> {
        if coeffs.len() != grid.len() {
            return Err(FieldError::LengthMismatch {
                expected: grid.len(),
                got: coeffs.len(),
            });
        }
        Ok(Self { grid, coeffs })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coefficient(&self, wavevector: &[i64]) -> Result<Complex64, FieldError> {
        Ok(self.coeffs[self.grid.spectral_index(wavevector)?])
    }

    /// Sum of squared magnitudes (equals the quadrature `L^2` norm squared).
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Forward transform: grid samples to spectral coefficients.
pub fn forward(field: &ScalarField) -> Spectrum {
    Spectrum {
        grid: field.grid.clone(),
        coeffs: field.spectrum().to_vec(),
    }
}

/// Inverse transform: spectral coefficients to grid samples (real part).
pub fn inverse(spectrum: &Spectrum) -> Result<ScalarField, FieldError> {
    ScalarField::from_spectrum(&spectrum.grid, &spectrum.coeffs)
}

fn forward_coeffs(grid: &Grid, values: &[f64]) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    grid.transform_axes(&mut data, false);
    let scale = grid.cell_volume() / grid.volume().sqrt();
    for (flat, c) in data.iter_mut().enumerate() {
        *c *= scale * grid.phase(flat);
    }
    data
}

/// Scalar field sampled on a grid, with a lazily computed spectral mirror.
#[derive(Clone)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
    spectrum: OnceLock<Vec<Complex64>>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("grid", &self.grid)
            .field("values", &self.values)
            .finish()
    }
}

impl PartialEq for ScalarField {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.values == other.values
    }
}

impl ScalarField {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self, FieldError> {
        if values.len() != grid.len() {
            return Err(FieldError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(Self {
            grid: grid.clone(),
            values,
            spectrum: OnceLock::new(),
        })
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![value; grid.len()],
            spectrum: OnceLock::new(),
        }
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Samples `f` at every grid point; `f` receives the `dim` coordinates.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(grid: &Grid, f: F) -> Result<Self, FieldError> {
        let values = (0..grid.len())
            .map(|flat| f(&grid.point(flat)[..grid.dim()]))
            .collect();
        Self::new(grid, values)
    }

    pub fn from_spectrum(grid: &Grid, coeffs: &[Complex64]) -> Result<Self, FieldError> {
        if coeffs.len() != grid.len() {
            return Err(FieldError::LengthMismatch {
                expected: grid.len(),
                got: coeffs.len(),
            });
        }
        if coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(FieldError::NonFiniteField);
        }
        let scale = 1.0 / grid.volume().sqrt();
        let mut data: Vec<Complex64> = coeffs
            .iter()
            .enumerate()
            .map(|(flat, c)| c * (scale * grid.phase(flat)))
            .collect();
        grid.transform_axes(&mut data, true);
        Self::new(grid, data.into_iter().map(|c| c.re).collect())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn spectrum(&self) -> &[Complex64] {
        self.spectrum
            .get_or_init(|| forward_coeffs(&self.grid, &self.values))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Midpoint-rule integral over the torus.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// `int |f|^q dx` by the midpoint rule.
    pub fn lq_power(&self, q: f64) -> f64 {
        self.values.iter().map(|v| v.abs().powf(q)).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn l2_norm_sqr(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Result<Self, FieldError> {
        Self::new(&self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with<F: Fn(f64, f64) -> f64>(&self, other: &Self, f: F) -> Result<Self, FieldError> {
        if self.grid != other.grid {
            return Err(FieldError::GridMismatch);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(&self.grid, values)
    }

    pub fn add(&self, other: &Self) -> Result<Self, FieldError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, FieldError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, FieldError> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Self, FieldError> {
        self.map(|v| v * factor)
    }

    /// `self + factor * other`.
    pub fn axpy(&self, factor: f64, other: &Self) -> Result<Self, FieldError> {
        self.zip_with(other, |a, b| a + factor * b)
    }

    pub fn sup_distance(&self, other: &Self) -> Result<f64, FieldError> {
        if self.grid != other.grid {
            return Err(FieldError::GridMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Spectral derivative along `axis`; the Nyquist mode is dropped for odd orders.
    pub fn derivative(&self, axis: usize, order: u32) -> Result<Self, FieldError> {
        let dim = self.grid.dim();
        if axis >= dim {
            return Err(FieldError::InvalidAxis { axis, dim });
        }
        if order != 1 && order != 2 {
            return Err(FieldError::InvalidOrder(order));
        }
        let grid = &self.grid;
        let stride = grid.stride(axis);
        let n = grid.n();
        let coeffs: Vec<Complex64> = self
            .spectrum()
            .iter()
            .enumerate()
            .map(|(flat, &c)| {
                let i = (flat / stride) % n;
                let k = std::f64::consts::PI * grid.wavenumber(i) as f64;
                match order {
                    1 if grid.is_nyquist(i) => Complex64::new(0.0, 0.0),
                    1 => c * Complex64::new(0.0, k),
                    _ => c * (-k * k),
                }
            })
            .collect();
        Self::from_spectrum(grid, &coeffs)
    }

    /// Zeroes every mode outside the 2/3-rule band.
    pub fn dealiased(&self) -> Result<Self, FieldError> {
        let grid = &self.grid;
        let coeffs: Vec<Complex64> = self
            .spectrum()
            .iter()
            .enumerate()
            .map(|(flat, &c)| {
                if grid.dealias_keeps(flat) {
                    c
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        Self::from_spectrum(grid, &coeffs)
    }

    /// Real-basis moment `(int f e^cos_m, int f e^sin_m)` with orthonormal
    /// `e^cos_m = sqrt(2) 2^{-dim/2} cos(pi m.x)` (just `2^{-dim/2}` for `m = 0`).
    pub fn real_moment(&self, wavevector: &[i64]) -> Result<(f64, f64), FieldError> {
        let c = self.spectrum()[self.grid.spectral_index(wavevector)?];
        Ok(complex_to_real_moment(c, wavevector.iter().all(|&m| m == 0)))
    }
}

/// Maps a complex coefficient to the cosine/sine moment pair.
pub fn complex_to_real_moment(c: Complex64, zero_mode: bool) -> (f64, f64) {
    if zero_mode {
        (c.re, 0.0)
    } else {
        let s = std::f64::consts::SQRT_2;
        (s * c.re, -s * c.im)
    }
}

/// `dim` scalar components on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: Vec<ScalarField>,
}

impl VectorField {
    pub fn new(components: Vec<ScalarField>) -> Result<Self, FieldError> {
        let Some(first) = components.first() else {
            return Err(FieldError::InvalidDimension(0));
        };
        let grid = first.grid();
        if components.len() != grid.dim() {
            return Err(FieldError::InvalidDimension(components.len()));
        }
        if components.iter().any(|c| c.grid() != grid) {
            return Err(FieldError::GridMismatch);
        }
        Ok(Self { components })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self {
            components: (0..grid.dim()).map(|_| ScalarField::zeros(grid)).collect(),
        }
    }

    pub fn constant(grid: &Grid, value: &[f64]) -> Result<Self, FieldError> {
        if value.len() != grid.dim() {
            return Err(FieldError::LengthMismatch {
                expected: grid.dim(),
                got: value.len(),
            });
        }
        Self::new(value.iter().map(|&v| ScalarField::constant(grid, v)).collect())
    }

    pub fn grid(&self) -> &Grid {
        self.components[0].grid()
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }

    pub fn component(&self, axis: usize) -> &ScalarField {
        &self.components[axis]
    }

    /// Pointwise Euclidean-norm maximum.
    pub fn max_magnitude(&self) -> f64 {
        let grid = self.grid();
        (0..grid.len())
            .map(|i| {
                self.components
                    .iter()
                    .map(|c| c.values()[i] * c.values()[i])
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn divergence(&self) -> Result<ScalarField, FieldError> {
        let mut div = self.components[0].derivative(0, 1)?;
        for (axis, c) in self.components.iter().enumerate().skip(1) {
            div = div.add(&c.derivative(axis, 1)?)?;
        }
        Ok(div)
    }
}

/// Primitive state `U = (rho, theta, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub rho: ScalarField,
    pub theta: ScalarField,
    pub u: VectorField,
}

impl State {
    pub fn new(rho: ScalarField, theta: ScalarField, u: VectorField) -> Result<Self, FieldError> {
        if rho.grid() != theta.grid() || rho.grid() != u.grid() {
            return Err(FieldError::GridMismatch);
        }
        Ok(Self { rho, theta, u })
    }

    /// Spatially constant state with zero velocity.
    pub fn constant(grid: &Grid, rho: f64, theta: f64) -> Self {
        Self {
            rho: ScalarField::constant(grid, rho),
            theta: ScalarField::constant(grid, theta),
            u: VectorField::zeros(grid),
        }
    }

    /// Builds a state from its `dim + 2` components in the order `(rho, theta, u_1, ..)`.
    pub fn from_components(mut comps: Vec<ScalarField>) -> Result<Self, FieldError> {
        let Some(first) = comps.first() else {
            return Err(FieldError::InvalidDimension(0));
        };
        let dim = first.grid().dim();
        if comps.len() != dim + 2 {
            return Err(FieldError::InvalidComponent {
                component: comps.len(),
                max: dim + 2,
            });
        }
        let u = VectorField::new(comps.split_off(2))?;
        let theta = comps.pop().expect("two scalar components");
        let rho = comps.pop().expect("two scalar components");
        Self::new(rho, theta, u)
    }

    pub fn grid(&self) -> &Grid {
        self.rho.grid()
    }

    pub fn component_count(&self) -> usize {
        self.grid().dim() + 2
    }

    /// All components in the order `(rho, theta, u_1, .., u_dim)`.
    pub fn components(&self) -> impl Iterator<Item = &ScalarField> {
        [&self.rho, &self.theta]
            .into_iter()
            .chain(self.u.components().iter())
    }

    /// One-based component accessor (1 = rho, 2 = theta, 3.. = velocity).
    pub fn component(&self, component: usize) -> Result<&ScalarField, FieldError> {
        let max = self.component_count();
        match component {
            1 => Ok(&self.rho),
            2 => Ok(&self.theta),
            c if (3..=max).contains(&c) => Ok(self.u.component(c - 3)),
            _ => Err(FieldError::InvalidComponent { component, max }),
        }
    }

    /// Membership in `X+`: strictly positive density and temperature.
    pub fn in_x_plus(&self) -> bool {
        self.rho.min() > 0.0 && self.theta.min() > 0.0
    }

    pub fn map_components<F>(&self, mut f: F) -> Result<Self, FieldError>
    where
        F: FnMut(usize, &ScalarField) -> Result<ScalarField, FieldError>,
    {
        let comps = self
            .components()
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_components(comps)
    }

    /// `self + factor * other`, componentwise.
    pub fn axpy(&self, factor: f64, other: &Self) -> Result<Self, FieldError> {
        if self.grid() != other.grid() {
            return Err(FieldError::GridMismatch);
        }
        let others: Vec<&ScalarField> = other.components().collect();
        self.map_components(|i, c| c.axpy(factor, others[i]))
    }

    /// Maximum over components of the sup-norm difference.
    pub fn sup_distance(&self, other: &Self) -> Result<f64, FieldError> {
        if self.grid() != other.grid() {
            return Err(FieldError::GridMismatch);
        }
        self.components()
            .zip(other.components())
            .try_fold(0.0f64, |m, (a, b)| Ok(m.max(a.sup_distance(b)?)))
    }

    /// Real-basis trigonometric moment of a one-based component.
    pub fn fourier_coefficient(
        &self,
        component: usize,
        wavevector: &[i64],
    ) -> Result<(f64, f64), FieldError> {
        self.component(component)?.real_moment(wavevector)
    }
}

/// Phase-space norms of a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseNorms {
    pub rho_w1q: f64,
    pub theta_w22: f64,
    pub u_w22: f64,
    /// `||U||_X`, the sum of the three component norms.
    pub x_norm: f64,
    /// `||rho^{-1}||_C`, infinite when `min rho <= 0`.
    pub inv_rho_sup: f64,
    /// `||theta^{-1}||_C`, infinite when `min theta <= 0`.
    pub inv_theta_sup: f64,
}

impl PhaseNorms {
    /// `||U||_X + ||rho^{-1}||_C + ||theta^{-1}||_C`.
    pub fn total(&self) -> f64 {
        self.x_norm + self.inv_rho_sup + self.inv_theta_sup
    }
}

fn reciprocal_sup(field: &ScalarField) -> f64 {
    let m = field.min();
    if m > 0.0 {
        1.0 / m
    } else {
        f64::INFINITY
    }
}

/// `||f||_{W^{2,2}}^2` summed over multi-indices `|alpha| <= 2` via Parseval,
/// with the same Nyquist convention as [`ScalarField::derivative`].
pub fn w22_norm_sqr(field: &ScalarField) -> f64 {
    let grid = field.grid();
    let dim = grid.dim();
    let pi = std::f64::consts::PI;
    field
        .spectrum()
        .iter()
        .enumerate()
        .map(|(flat, c)| {
            let idx = grid.multi_index(flat);
            let mut k2 = [0.0; MAX_DIM];
            let mut nyq = [false; MAX_DIM];
            for a in 0..dim {
                let k = pi * grid.wavenumber(idx[a]) as f64;
                k2[a] = k * k;
                nyq[a] = grid.is_nyquist(idx[a]);
            }
            let mut weight = 1.0;
            for a in 0..dim {
                if !nyq[a] {
                    weight += k2[a];
                }
                weight += k2[a] * k2[a];
                for b in (a + 1)..dim {
                    if !nyq[a] && !nyq[b] {
                        weight += k2[a] * k2[b];
                    }
                }
            }
            weight * c.norm_sqr()
        })
        .sum()
}

/// `||f||_{W^{1,q}}^q = int |f|^q + sum_a int |d_a f|^q` by the midpoint rule.
pub fn w1q_norm_pow(field: &ScalarField, q: f64) -> Result<f64, FieldError> {
    let mut total = field.lq_power(q);
    for axis in 0..field.grid().dim() {
        total += field.derivative(axis, 1)?.lq_power(q);
    }
    Ok(total)
}

/// Norms defining `X = W^{1,q} x W^{2,2} x W^{2,2}` and the reciprocal sup norms.
pub fn sobolev_norm_x(state: &State, q: f64) -> Result<PhaseNorms, FieldError> {
    if !(q > 3.0 && q <= 6.0) {
        return Err(FieldError::InvalidExponent(q));
    }
    let rho_w1q = w1q_norm_pow(&state.rho, q)?.powf(1.0 / q);
    let theta_w22 = w22_norm_sqr(&state.theta).sqrt();
    let u_w22 = state
        .u
        .components()
        .iter()
        .map(w22_norm_sqr)
        .sum::<f64>()
        .sqrt();
    Ok(PhaseNorms {
        rho_w1q,
        theta_w22,
        u_w22,
        x_norm: rho_w1q + theta_w22 + u_w22,
        inv_rho_sup: reciprocal_sup(&state.rho),
        inv_theta_sup: reciprocal_sup(&state.theta),
    })
}
