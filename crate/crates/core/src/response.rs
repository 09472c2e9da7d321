//! Linear response of the invariant density to a kernel perturbation `κ̇`
//! supported on `D × D`.
//!
//! The derivative operator is `(L̇ f)(y_j) = Σ_i w'_i κ̇(x_i, y_j) f(x_i)` with
//! D's own Simpson weights `w'`. Two resolvent discretisations are offered:
//!
//! * [`ResolventScheme::Restricted`] solves `(I - L_D) η = L̇ f₀` on the
//!   D-nodes only, where `L_D` is the transfer operator restricted to
//!   `D × D`. The restriction is strictly sub-Markov (mass leaks out of D),
//!   so the system is nonsingular.
//! * [`ResolventScheme::Full`] computes the exact derivative of the
//!   unit-mass Perron eigenvector of the perturbed full-grid operator through
//!   the bordered system
//!
//!   ```text
//!   [ λ₀ I - L   f₀ ] [ ḟ ]   [ L̇ f₀ ]
//!   [    wᵀ       0 ] [ μ ] = [   0   ]
//!   ```
//!
//!   which reduces to `(I - L)⁻¹ L̇ f₀` on zero-mass functions when `L`
//!   preserves mass and `κ̇` has zero mean in y; `μ` is the eigenvalue
//!   derivative. Finite differences of perturbed invariant densities converge
//!   to this vector at first order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, LuFactors};
use crate::mesh::{simpson_weights, SubgridRestriction, UniformGrid};
use crate::transfer::{Density, InvariantDensity, KernelMatrix, TransferOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintAxis {
    /// `∫_D κ̇(x, y) dx = 0` for every y.
    ZeroMeanInX,
    /// `∫_D κ̇(x, y) dy = 0` for every x; the perturbed operator then
    /// preserves integrals.
    ZeroMeanInY,
}

impl std::fmt::Display for ConstraintAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConstraintAxis::ZeroMeanInX => "zero_mean_in_x",
            ConstraintAxis::ZeroMeanInY => "zero_mean_in_y",
        })
    }
}

/// Samples `κ̇(x'_i, y'_j)` on the D-nodes, row-major with x as the row.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationKernel {
    restriction: SubgridRestriction,
    values: Vec<f64>,
    axis: ConstraintAxis,
}

impl PerturbationKernel {
    /// Validates shape, finiteness and the tagged zero-mean constraint
    /// (per-line mean at most `1e-8` relative to the sup norm).
    pub fn new(restriction: SubgridRestriction, values: Vec<f64>, axis: ConstraintAxis) -> Result<Self> {
        let k = Self::unconstrained(restriction, values, axis)?;
        let defect = k.constraint_defect();
        let tol = 1e-8 * k.sup_norm().max(1.0);
        if defect > tol {
            return Err(Error::config(
                "perturbation",
                format!("{axis} violated: largest line mean {defect:e} exceeds {tol:e}"),
            ));
        }
        Ok(k)
    }

    /// Shape and finiteness checks only; the constraint tag is recorded but
    /// not enforced.
    pub fn unconstrained(restriction: SubgridRestriction, values: Vec<f64>, axis: ConstraintAxis) -> Result<Self> {
        let m = restriction.len();
        if values.len() != m * m {
            return Err(Error::shape("perturbation kernel", m * m, values.len()));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite perturbation entry at ({}, {})", p / m, p % m)));
        }
        Ok(Self { restriction, values, axis })
    }

    pub fn zeros(restriction: SubgridRestriction, axis: ConstraintAxis) -> Self {
        let m = restriction.len();
        Self { restriction, values: vec![0.0; m * m], axis }
    }

    pub fn restriction(&self) -> &SubgridRestriction {
        &self.restriction
    }

    pub fn axis(&self) -> ConstraintAxis {
        self.axis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn side(&self) -> usize {
        self.restriction.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.side() + j]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// `a·self + b·other`, keeping `self`'s tag.
    pub fn combine(&self, a: f64, other: &PerturbationKernel, b: f64) -> Result<Self> {
        if other.restriction != self.restriction {
            return Err(Error::shape("perturbation combine", self.side(), other.side()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(Self { restriction: self.restriction, values, axis: self.axis })
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            restriction: self.restriction,
            values: self.values.iter().map(|v| a * v).collect(),
            axis: self.axis,
        }
    }

    /// Tensor-product Simpson L²(D × D) norm.
    pub fn l2_norm(&self) -> f64 {
        let w = self.restriction.local_weights();
        let m = self.side();
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                s += w[i] * w[j] * self.get(i, j).powi(2);
            }
        }
        s.sqrt()
    }

    /// Tensor Simpson inner product with another kernel on the same D.
    pub fn inner(&self, other: &PerturbationKernel) -> f64 {
        let w = self.restriction.local_weights();
        let m = self.side();
        let mut s = 0.0;
        for i in 0..m {
            let row_a = &self.values[i * m..(i + 1) * m];
            let row_b = &other.values[i * m..(i + 1) * m];
            let r: f64 = row_a.iter().zip(row_b).zip(w.as_slice()).map(|((a, b), wj)| a * b * wj).sum();
            s += w[i] * r;
        }
        s
    }

    /// For each y-node, the Simpson mean over x in D (D's own rule).
    pub fn x_means(&self) -> Vec<f64> {
        let w = self.restriction.local_weights();
        let m = self.side();
        let len = 2.0 * self.restriction.half_width();
        (0..m).map(|j| (0..m).map(|i| w[i] * self.get(i, j)).sum::<f64>() / len).collect()
    }

    /// For each x-node, the mean over y with the weights the full-domain
    /// mass functional assigns to D-nodes.
    pub fn y_means(&self) -> Vec<f64> {
        let w = self.restriction.parent_weights();
        let m = self.side();
        let len = 2.0 * self.restriction.half_width();
        (0..m).map(|i| w.dot(&self.values[i * m..(i + 1) * m]) / len).collect()
    }

    /// Largest absolute line mean along the tagged axis.
    pub fn constraint_defect(&self) -> f64 {
        let means = match self.axis {
            ConstraintAxis::ZeroMeanInX => self.x_means(),
            ConstraintAxis::ZeroMeanInY => self.y_means(),
        };
        means.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// `(L̇ f)` at the D-nodes for a full-grid function `f`.
pub fn apply_dot(kernel: &PerturbationKernel, f: &[f64]) -> Result<Vec<f64>> {
    let r = kernel.restriction();
    let local = r.restrict(f)?;
    let w = r.local_weights();
    let m = kernel.side();
    let mut out = vec![0.0; m];
    for i in 0..m {
        let s = w[i] * local[i];
        if s == 0.0 {
            continue;
        }
        for (o, k) in out.iter_mut().zip(&kernel.values[i * m..(i + 1) * m]) {
            *o += s * k;
        }
    }
    Ok(out)
}

/// Adjoint of [`apply_dot`] on the D-nodes: `(L̇ᵀ g)_i = w'_i Σ_j κ̇_ij g_j`.
fn apply_dot_adjoint(kernel: &PerturbationKernel, g_local: &[f64]) -> Vec<f64> {
    let w = kernel.restriction().local_weights();
    let m = kernel.side();
    (0..m)
        .map(|i| w[i] * kernel.values[i * m..(i + 1) * m].iter().zip(g_local).map(|(k, g)| k * g).sum::<f64>())
        .collect()
}

/// `κ_δ = κ + δ κ̇ + r_δ` on the full grid, with `κ̇` and `r_δ` supported on
/// `D × D`. The base kernel is borrowed, not copied.
#[derive(Debug, Clone)]
pub struct PerturbedKernel<'a> {
    base: &'a KernelMatrix,
    perturbation: PerturbationKernel,
    delta: f64,
    remainder: Option<PerturbationKernel>,
}

/// Summary of a perturbed kernel; negativity and mass change are warnings.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PerturbationAudit {
    pub delta: f64,
    pub min_entry: f64,
    pub max_row_mass_deviation: f64,
    /// Largest change of a row mass caused by the perturbation.
    pub max_row_mass_change: f64,
}

pub fn perturb_kernel<'a>(base: &'a KernelMatrix, perturbation: &PerturbationKernel, delta: f64) -> Result<PerturbedKernel<'a>> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::config("delta", format!("must be nonnegative, got {delta}")));
    }
    if perturbation.restriction().parent() != base.grid() {
        return Err(Error::config("perturbation", "perturbation domain is not a subgrid of the kernel grid"));
    }
    Ok(PerturbedKernel { base, perturbation: perturbation.clone(), delta, remainder: None })
}

impl<'a> PerturbedKernel<'a> {
    /// Adds a remainder term `r_δ` (zero unless set).
    pub fn with_remainder(mut self, remainder: PerturbationKernel) -> Result<Self> {
        if remainder.restriction() != self.perturbation.restriction() {
            return Err(Error::config("remainder", "remainder must live on the perturbation domain"));
        }
        self.remainder = Some(remainder);
        Ok(self)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn base(&self) -> &KernelMatrix {
        self.base
    }

    pub fn perturbation(&self) -> &PerturbationKernel {
        &self.perturbation
    }

    fn block(&self, i: usize, j: usize) -> f64 {
        let r = self.perturbation.restriction();
        let range = r.indices();
        if !range.contains(&i) || !range.contains(&j) {
            return 0.0;
        }
        let (li, lj) = (i - r.start(), j - r.start());
        let rem = self.remainder.as_ref().map_or(0.0, |k| k.get(li, lj));
        self.delta * self.perturbation.get(li, lj) + rem
    }

    /// Raw perturbed kernel value `κ_δ(x_i, y_j)`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.base.get(i, j) + self.block(i, j)
    }

    /// Row masses over the full terminal grid.
    pub fn row_masses(&self) -> Vec<f64> {
        let r = self.perturbation.restriction();
        let pw = r.parent_weights();
        let m = r.len();
        let mut masses = self.base.row_masses();
        for li in 0..m {
            let line: Vec<f64> = (0..m).map(|lj| self.block(r.start() + li, r.start() + lj)).collect();
            masses[r.start() + li] += pw.dot(&line);
        }
        masses
    }

    pub fn audit(&self) -> PerturbationAudit {
        let base_masses = self.base.row_masses();
        let masses = self.row_masses();
        let r = self.perturbation.restriction();
        let mut min_entry = self.base.min_entry();
        for i in r.indices() {
            for j in r.indices() {
                min_entry = min_entry.min(self.get(i, j));
            }
        }
        PerturbationAudit {
            delta: self.delta,
            min_entry,
            max_row_mass_deviation: masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max),
            max_row_mass_change: masses.iter().zip(&base_masses).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        }
    }

    /// Materialises `κ_δ` as a plain kernel matrix (for export; its own
    /// quadrature differs from the block rule at the two edges of D).
    pub fn to_kernel_matrix(&self) -> Result<KernelMatrix> {
        let n = self.base.len();
        let mut values = self.base.values().to_vec();
        let r = self.perturbation.restriction();
        for i in r.indices() {
            for j in r.indices() {
                values[i * n + j] += self.block(i, j);
            }
        }
        KernelMatrix::from_values(*self.base.grid(), values)
    }
}

impl TransferOperator for PerturbedKernel<'_> {
    fn grid(&self) -> &UniformGrid {
        self.base.grid()
    }

    fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = self.base.apply(f);
        let r = self.perturbation.restriction();
        let mut add = |k: &PerturbationKernel, scale: f64| {
            let d = apply_dot(k, f).expect("grid checked at construction");
            for (o, v) in out[r.indices()].iter_mut().zip(d) {
                *o += scale * v;
            }
        };
        if self.delta != 0.0 {
            add(&self.perturbation, self.delta);
        }
        if let Some(rem) = &self.remainder {
            add(rem, 1.0);
        }
        out
    }

    fn apply_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let mut out = self.base.apply_adjoint(g);
        let r = self.perturbation.restriction();
        let local = &g[r.indices()];
        let mut add = |k: &PerturbationKernel, scale: f64| {
            for (o, v) in out[r.indices()].iter_mut().zip(apply_dot_adjoint(k, local)) {
                *o += scale * v;
            }
        };
        if self.delta != 0.0 {
            add(&self.perturbation, self.delta);
        }
        if let Some(rem) = &self.remainder {
            add(rem, 1.0);
        }
        out
    }
}

/// The restricted operator matrix `M_{ji} = w'_i κ(x'_i, y'_j)`, so that
/// `(M η)_j` is the transfer action on D-supported functions observed on D.
pub fn restricted_operator_matrix(kernel: &KernelMatrix, restriction: &SubgridRestriction) -> Result<DenseMatrix> {
    if restriction.parent() != kernel.grid() {
        return Err(Error::config("d", "restriction does not belong to the kernel grid"));
    }
    let m = restriction.len();
    let w = restriction.local_weights();
    let s = restriction.start();
    let mut out = DenseMatrix::zeros(m);
    for i in 0..m {
        for j in 0..m {
            out.set(j, i, w[i] * kernel.get(s + i, s + j));
        }
    }
    Ok(out)
}

/// Spectral radius of a nonnegative matrix by power iteration.
pub fn perron_radius(matrix: &DenseMatrix) -> f64 {
    let n = matrix.dim();
    let mut v = vec![1.0; n];
    let mut rho = 0.0;
    for _ in 0..100_000 {
        let u = matrix.matvec(&v);
        let s: f64 = u.iter().map(|x| x.abs()).sum::<f64>() / v.iter().map(|x| x.abs()).sum::<f64>();
        if s == 0.0 {
            return 0.0;
        }
        let done = (s - rho).abs() <= 1e-13 * s;
        rho = s;
        v = u;
        let norm: f64 = v.iter().map(|x| x.abs()).sum();
        v.iter_mut().for_each(|x| *x /= norm);
        if done {
            break;
        }
    }
    rho
}

/// Factorised `I - M` for repeated solves of `(I - M) η = d`.
#[derive(Debug, Clone)]
pub struct Resolvent {
    factors: LuFactors,
    condition: f64,
}

impl Resolvent {
    pub fn new(operator: &DenseMatrix, condition_limit: f64) -> Result<Self> {
        let n = operator.dim();
        let mut a = DenseMatrix::identity(n);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, a.get(i, j) - operator.get(i, j));
            }
        }
        Self::from_system(&a, condition_limit)
    }

    fn from_system(system: &DenseMatrix, condition_limit: f64) -> Result<Self> {
        let factors = LuFactors::factor(system).map_err(|e| {
            Error::Numeric(format!("resolvent system is singular ({e}); check that the restricted operator is sub-Markov"))
        })?;
        let condition = factors.condition_estimate()?;
        if !(condition <= condition_limit) {
            return Err(Error::Numeric(format!(
                "resolvent condition estimate {condition:e} exceeds {condition_limit:e}; check that the restricted operator is sub-Markov"
            )));
        }
        Ok(Self { factors, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve(&self, d: &[f64]) -> Result<Vec<f64>> {
        self.factors.solve(d)
    }

    pub fn solve_transpose(&self, d: &[f64]) -> Result<Vec<f64>> {
        self.factors.solve_transpose(d)
    }
}

/// Solves `(I - M) η = d` once. Build a [`Resolvent`] for repeated solves.
pub fn resolvent_solve(operator: &DenseMatrix, d: &[f64]) -> Result<Vec<f64>> {
    Resolvent::new(operator, f64::INFINITY)?.solve(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolventScheme {
    Restricted,
    Full,
}

impl std::fmt::Display for ResolventScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResolventScheme::Restricted => "restricted",
            ResolventScheme::Full => "full",
        })
    }
}

/// `R(κ̇)` as a full-grid function (zero outside D for the restricted scheme).
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseVector {
    pub grid: UniformGrid,
    pub values: Vec<f64>,
    pub scheme: ResolventScheme,
}

impl ResponseVector {
    pub fn mass(&self) -> f64 {
        simpson_weights(&self.grid).dot(&self.values)
    }

    pub fn mass_on(&self, restriction: &SubgridRestriction) -> f64 {
        restriction.local_weights().dot(&self.values[restriction.indices()])
    }
}

/// Shared, immutable machinery for many response evaluations against one
/// `(κ, f₀, D)`.
#[derive(Debug, Clone)]
pub struct ResponseSolver {
    scheme: ResolventScheme,
    grid: UniformGrid,
    restriction: SubgridRestriction,
    f0: Vec<f64>,
    resolvent: Resolvent,
    /// Spectral radius of `L_D` (restricted scheme) or `|λ₂|` (full scheme).
    contraction: f64,
}

impl ResponseSolver {
    /// `second_eigenvalue` is the `|λ₂|` estimate; it gates the full scheme.
    pub fn new(
        kernel: &KernelMatrix,
        invariant: &InvariantDensity,
        second_eigenvalue: f64,
        restriction: SubgridRestriction,
        scheme: ResolventScheme,
        condition_limit: f64,
    ) -> Result<Self> {
        let grid = *kernel.grid();
        let f0 = invariant.density.values().to_vec();
        grid.check_len("invariant density", f0.len())?;
        if restriction.parent() != &grid {
            return Err(Error::config("d", "restriction does not belong to the kernel grid"));
        }
        let (resolvent, contraction) = match scheme {
            ResolventScheme::Restricted => {
                let m = restricted_operator_matrix(kernel, &restriction)?;
                let rho = perron_radius(&m);
                if !(rho < 1.0) {
                    return Err(Error::Numeric(format!(
                        "restricted operator has spectral radius {rho} ≥ 1; it must be sub-Markov for the resolvent to exist"
                    )));
                }
                (Resolvent::new(&m, condition_limit)?, rho)
            }
            ResolventScheme::Full => {
                if !(second_eigenvalue < 1.0) {
                    return Err(Error::Numeric(format!(
                        "spectral gap gate failed: |λ₂| ≈ {second_eigenvalue} is not below 1"
                    )));
                }
                let n = grid.len();
                let w = simpson_weights(&grid);
                let lambda = invariant.eigenvalue;
                let mut b = DenseMatrix::zeros(n + 1);
                for i in 0..n {
                    let wi = w[i];
                    for (j, k) in kernel.row(i).iter().enumerate() {
                        b.set(j, i, -wi * k);
                    }
                }
                for j in 0..n {
                    b.set(j, j, b.get(j, j) + lambda);
                    b.set(j, n, f0[j]);
                    b.set(n, j, w[j]);
                }
                (Resolvent::from_system(&b, condition_limit)?, second_eigenvalue)
            }
        };
        Ok(Self { scheme, grid, restriction, f0, resolvent, contraction })
    }

    pub fn scheme(&self) -> ResolventScheme {
        self.scheme
    }

    pub fn restriction(&self) -> &SubgridRestriction {
        &self.restriction
    }

    pub fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    pub fn f0(&self) -> &[f64] {
        &self.f0
    }

    pub fn condition(&self) -> f64 {
        self.resolvent.condition()
    }

    pub fn contraction(&self) -> f64 {
        self.contraction
    }

    /// Applies the resolvent to a source given on the D-nodes.
    pub fn solve_source(&self, d: &[f64]) -> Result<Vec<f64>> {
        let r = &self.restriction;
        if d.len() != r.len() {
            return Err(Error::shape("response source", r.len(), d.len()));
        }
        match self.scheme {
            ResolventScheme::Restricted => r.embed(&self.resolvent.solve(d)?),
            ResolventScheme::Full => {
                let n = self.grid.len();
                let mut rhs = vec![0.0; n + 1];
                rhs[r.indices()].copy_from_slice(d);
                let mut sol = self.resolvent.solve(&rhs)?;
                sol.truncate(n);
                Ok(sol)
            }
        }
    }

    pub fn response(&self, kernel: &PerturbationKernel) -> Result<ResponseVector> {
        let d = apply_dot(kernel, &self.f0)?;
        Ok(ResponseVector { grid: self.grid, values: self.solve_source(&d)?, scheme: self.scheme })
    }

    /// `⟨φ, R⟩` over D with D's Simpson rule; `phi` lives on the D-nodes.
    pub fn pair(&self, phi: &[f64], response: &ResponseVector) -> Result<f64> {
        let r = &self.restriction;
        if phi.len() != r.len() {
            return Err(Error::shape("observable", r.len(), phi.len()));
        }
        Ok(r.local_weights().dot(&phi.iter().zip(&response.values[r.indices()]).map(|(a, b)| a * b).collect::<Vec<_>>()))
    }

    pub fn expectation_rate(&self, phi: &[f64], kernel: &PerturbationKernel) -> Result<f64> {
        self.pair(phi, &self.response(kernel)?)
    }

    /// Riesz representer of `κ̇ ↦ ⟨φ, R(κ̇)⟩` in tensor-Simpson `L²(D × D)`,
    /// obtained by one adjoint solve: `g(x_i, y_j) = f₀(x_i) ψ_j / w'_j`.
    /// No zero-mean constraint is imposed.
    pub fn riesz_representer(&self, phi: &[f64]) -> Result<PerturbationKernel> {
        let r = &self.restriction;
        if phi.len() != r.len() {
            return Err(Error::shape("observable", r.len(), phi.len()));
        }
        let w = r.local_weights();
        let c: Vec<f64> = phi.iter().zip(w.as_slice()).map(|(p, wj)| p * wj).collect();
        let psi: Vec<f64> = match self.scheme {
            ResolventScheme::Restricted => self.resolvent.solve_transpose(&c)?,
            ResolventScheme::Full => {
                let mut rhs = vec![0.0; self.grid.len() + 1];
                rhs[r.indices()].copy_from_slice(&c);
                self.resolvent.solve_transpose(&rhs)?[r.indices()].to_vec()
            }
        };
        let f0 = r.restrict(&self.f0)?;
        let m = r.len();
        let mut values = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                values[i * m + j] = f0[i] * psi[j] / w[j];
            }
        }
        PerturbationKernel::unconstrained(*r, values, ConstraintAxis::ZeroMeanInX)
    }
}

/// Convenience: one response with a freshly built solver.
pub fn response(
    kernel: &PerturbationKernel,
    base: &KernelMatrix,
    invariant: &InvariantDensity,
    second_eigenvalue: f64,
    scheme: ResolventScheme,
) -> Result<ResponseVector> {
    ResponseSolver::new(base, invariant, second_eigenvalue, *kernel.restriction(), scheme, f64::INFINITY)?.response(kernel)
}

/// Checked wrapper used where only a density is at hand.
pub fn density_on_domain(f: &Density, restriction: &SubgridRestriction) -> Result<Vec<f64>> {
    restriction.restrict(f.values())
}
