//! The discrete transfer operator `(L f)_j = Σ_i w_i κ(x_i, y_j) f_i`, its
//! invariant density and the weighted-norm diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fpe::{drift_samples, solve_fpe, ImplicitStepper, PotentialSpec};
use crate::mesh::{simpson_weights, QuadratureWeights, SubgridRestriction, TimeGrid, UniformGrid};

/// Output chunk width for the parallel matrix-vector products. Every output
/// entry is accumulated in the same order whatever the thread count.
const CHUNK: usize = 64;

/// Everything that determines the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub potential: PotentialSpec,
    pub grid: UniformGrid,
    pub time: TimeGrid,
    pub dirac_sigma: f64,
}

/// Dense sample `κ_ij = κ(x_i, y_j)`; row = initial point, column = terminal point.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    grid: UniformGrid,
    weights: QuadratureWeights,
    values: Vec<f64>,
}

/// Audit figures gathered while assembling the kernel.
#[derive(Debug, Clone, Default, Serialize)]
pub struct KernelBuildReport {
    pub max_row_mass_deviation: f64,
    pub min_entry: f64,
    pub max_step_mass_drift: f64,
    pub min_pivot: f64,
}

impl KernelMatrix {
    pub fn from_values(grid: UniformGrid, values: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if values.len() != n * n {
            return Err(Error::shape("kernel matrix", n * n, values.len()));
        }
        Ok(Self {
            weights: simpson_weights(&grid),
            grid,
            values,
        })
    }

    pub fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    pub fn weights(&self) -> &QuadratureWeights {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.values[i * n..(i + 1) * n]
    }

    /// Simpson integral of each row over the terminal variable.
    pub fn row_masses(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weights.dot(self.row(i))).collect()
    }

    pub fn max_row_mass_deviation(&self) -> f64 {
        self.row_masses().iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest `|κ(x_i, y_j) - κ(-x_i, -y_j)|`.
    pub fn max_reflection_asymmetry(&self) -> f64 {
        let n = self.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.get(i, j) - self.get(n - 1 - i, n - 1 - j)).abs());
            }
        }
        worst
    }
}

/// Assembles the kernel row by row; row i is the FPE solution started from
/// the Dirac surrogate at `x_i`. Rows are independent and computed in
/// parallel; the result does not depend on scheduling.
pub fn build_kernel(spec: &KernelSpec) -> Result<(KernelMatrix, KernelBuildReport)> {
    let grid = spec.grid;
    let drift = drift_samples(&spec.potential, &grid)?;
    let stepper = ImplicitStepper::new(&grid, &drift, spec.time.step(), spec.potential.noise)?;
    let n = grid.len();
    let rows: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            solve_fpe(grid.node(i), &stepper, &spec.time, spec.dirac_sigma)
                .map_err(|e| Error::Numeric(format!("kernel row {i} (x = {}) failed: {e}", grid.node(i))))
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(n * n);
    let mut max_drift: f64 = 0.0;
    for sol in &rows {
        values.extend_from_slice(&sol.density.values);
        max_drift = max_drift.max(sol.max_step_mass_drift);
    }
    let kernel = KernelMatrix::from_values(grid, values)?;
    let report = KernelBuildReport {
        max_row_mass_deviation: kernel.max_row_mass_deviation(),
        min_entry: kernel.min_entry(),
        max_step_mass_drift: max_drift,
        min_pivot: stepper.min_pivot(),
    };
    Ok((kernel, report))
}

/// A discretised transfer operator acting on grid functions.
pub trait TransferOperator: Sync {
    fn grid(&self) -> &UniformGrid;

    /// `(L f)_j`.
    fn apply(&self, f: &[f64]) -> Vec<f64>;

    /// The adjoint action with respect to the Euclidean pairing, `Lᵀ g`.
    fn apply_adjoint(&self, g: &[f64]) -> Vec<f64>;
}

impl TransferOperator for KernelMatrix {
    fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    fn apply(&self, f: &[f64]) -> Vec<f64> {
        let n = self.len();
        let scaled: Vec<f64> = f.iter().zip(self.weights.as_slice()).map(|(v, w)| v * w).collect();
        let mut out = vec![0.0; n];
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            let j0 = c * CHUNK;
            for (i, s) in scaled.iter().enumerate() {
                if *s == 0.0 {
                    continue;
                }
                let row = &self.values[i * n + j0..i * n + j0 + chunk.len()];
                for (o, k) in chunk.iter_mut().zip(row) {
                    *o += s * k;
                }
            }
        });
        out
    }

    fn apply_adjoint(&self, g: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.weights[i] * self.row(i).iter().zip(g).map(|(k, v)| k * v).sum::<f64>())
            .collect()
    }
}

/// Checked application of the transfer operator.
pub fn apply<O: TransferOperator + ?Sized>(op: &O, f: &[f64]) -> Result<Vec<f64>> {
    op.grid().check_len("apply", f.len())?;
    Ok(op.apply(f))
}

/// A unit-mass grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    grid: UniformGrid,
    values: Vec<f64>,
}

impl Density {
    /// Rescales `values` to unit Simpson mass.
    pub fn normalized(grid: UniformGrid, mut values: Vec<f64>) -> Result<Self> {
        grid.check_len("density", values.len())?;
        let mass = simpson_weights(&grid).dot(&values);
        if !(mass.is_finite() && mass != 0.0) {
            return Err(Error::Numeric(format!("cannot normalise a density with mass {mass}")));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        simpson_weights(&self.grid).dot(&self.values)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `Σ_i w_i |f(x_i) - f(-x_i)|`.
    pub fn reflection_asymmetry(&self) -> f64 {
        let n = self.values.len();
        let diff: Vec<f64> = (0..n).map(|i| self.values[i] - self.values[n - 1 - i]).collect();
        simpson_weights(&self.grid).abs_dot(&diff)
    }

    /// Interior strict local maxima `f_{i-1} < f_i > f_{i+1}` whose value
    /// exceeds `floor` times the global maximum. Plateaus of equal values
    /// count once, at their left end.
    pub fn local_maxima(&self, floor: f64) -> Vec<usize> {
        local_maxima(&self.values, floor)
    }
}

pub fn local_maxima(values: &[f64], floor: f64) -> Vec<usize> {
    let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    let n = values.len();
    let mut i = 1;
    while i + 1 < n {
        if values[i] > values[i - 1] {
            let mut k = i;
            while k + 1 < n && values[k + 1] == values[i] {
                k += 1;
            }
            if k + 1 < n && values[k + 1] < values[i] && values[i] >= floor * peak {
                out.push(i);
            }
            i = k + 1;
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterationOptions {
    /// Stop once `‖L f - λ f‖₁ ≤ tolerance`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerIterationOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 2_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InvariantDensity {
    pub density: Density,
    /// Perron eigenvalue; differs from 1 by the discretisation's mass defect.
    pub eigenvalue: f64,
    /// `‖L f - λ f‖₁` at the returned iterate.
    pub residual: f64,
    pub iterations: usize,
}

/// Leading eigenvector of the transfer action by power iteration with
/// renormalisation to unit mass every sweep, starting from the uniform
/// density.
pub fn invariant_density<O: TransferOperator + ?Sized>(op: &O, opts: &PowerIterationOptions) -> Result<InvariantDensity> {
    let start = vec![1.0; op.grid().len()];
    invariant_density_from(op, start, opts)
}

pub fn invariant_density_from<O: TransferOperator + ?Sized>(
    op: &O,
    start: Vec<f64>,
    opts: &PowerIterationOptions,
) -> Result<InvariantDensity> {
    let grid = *op.grid();
    let w = simpson_weights(&grid);
    let mut f = Density::normalized(grid, start)?.values;
    let mut last_residual = f64::INFINITY;
    for it in 0..opts.max_iterations {
        let g = op.apply(&f);
        let lambda = w.dot(&g);
        if !(lambda.is_finite() && lambda != 0.0) {
            return Err(Error::Numeric(format!("power iteration broke down at sweep {it}: mass {lambda}")));
        }
        let diff: Vec<f64> = g.iter().zip(&f).map(|(a, b)| a - lambda * b).collect();
        let residual = w.abs_dot(&diff);
        if residual <= opts.tolerance {
            return Ok(InvariantDensity {
                density: Density { grid, values: f },
                eigenvalue: lambda,
                residual,
                iterations: it,
            });
        }
        last_residual = residual;
        f = g.into_iter().map(|v| v / lambda).collect();
    }
    let gap = spectral_gap_estimate(op, &Density { grid, values: f.clone() })
        .map(|g| g.modulus)
        .unwrap_or(f64::NAN);
    Err(Error::Numeric(format!(
        "invariant density did not converge in {} sweeps: residual {last_residual:e}, |λ₂| ≈ {gap}",
        opts.max_iterations
    )))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpectralGapEstimate {
    /// Estimated `|λ₂|`.
    pub modulus: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `|λ₂|` by power iteration on the complement of the leading eigenvector.
/// The leading left eigenvector is computed first so the deflation is exact
/// even when the discrete operator is not exactly mass preserving.
pub fn spectral_gap_estimate<O: TransferOperator + ?Sized>(op: &O, f0: &Density) -> Result<SpectralGapEstimate> {
    let grid = *op.grid();
    let n = grid.len();
    grid.check_len("spectral gap", f0.values.len())?;
    let w = simpson_weights(&grid);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    // Left eigenvector: the adjoint action fixes w for a mass-preserving operator.
    let mut left = w.as_slice().to_vec();
    for _ in 0..100_000 {
        let next = op.apply_adjoint(&left);
        let scale = next.iter().map(|v| v.abs()).sum::<f64>();
        if scale == 0.0 {
            break;
        }
        let next: Vec<f64> = next.into_iter().map(|v| v / scale).collect();
        let change = next.iter().zip(&left).map(|(a, b)| (a - b).abs()).sum::<f64>();
        left = next;
        if change < 1e-13 {
            break;
        }
    }
    let norm_lf = dot(&left, f0.values());
    let deflate = |v: &mut Vec<f64>| {
        let c = dot(&left, v) / norm_lf;
        v.iter_mut().zip(f0.values()).for_each(|(a, b)| *a -= c * b);
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_2a11);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    deflate(&mut v);
    let mut norm = w.abs_dot(&v);
    if norm == 0.0 {
        return Ok(SpectralGapEstimate { modulus: 0.0, converged: true, iterations: 0 });
    }
    v.iter_mut().for_each(|a| *a /= norm);
    let mut ratio = f64::NAN;
    let max_it = 200_000;
    for it in 0..max_it {
        let mut u = op.apply(&v);
        deflate(&mut u);
        norm = w.abs_dot(&u);
        if norm <= 1e-300 {
            return Ok(SpectralGapEstimate { modulus: 0.0, converged: true, iterations: it + 1 });
        }
        let prev = ratio;
        ratio = norm;
        v = u.into_iter().map(|a| a / norm).collect();
        if it > 10 && (ratio - prev).abs() <= 1e-11 * ratio.max(1e-3) {
            return Ok(SpectralGapEstimate { modulus: ratio, converged: true, iterations: it + 1 });
        }
    }
    log::warn!("spectral gap estimate did not settle after {max_it} sweeps (last ratio {ratio})");
    Ok(SpectralGapEstimate { modulus: ratio, converged: false, iterations: max_it })
}

/// Norms of a grid function; `strong = L¹_2(Ω) + L²(D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormReport {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub alpha: f64,
    pub weighted_l1: f64,
    pub strong: f64,
}

/// `ρ_α(|x|) = (1 + |x|²)^{α/2}`.
pub fn weight_function(x: f64, alpha: f64) -> f64 {
    (1.0 + x * x).powf(alpha / 2.0)
}

pub fn norms(f: &[f64], grid: &UniformGrid, alpha: f64, domain: &SubgridRestriction) -> Result<NormReport> {
    grid.check_len("norms", f.len())?;
    let w = simpson_weights(grid);
    let nodes = grid.nodes();
    let weighted = |a: f64| -> f64 {
        nodes.iter().zip(f).zip(w.as_slice()).map(|((x, v), wi)| wi * weight_function(*x, a) * v.abs()).sum()
    };
    let sq: Vec<f64> = f.iter().map(|v| v * v).collect();
    let local = domain.restrict(&sq)?;
    let l2_d = domain.local_weights().dot(&local).max(0.0).sqrt();
    Ok(NormReport {
        l1: w.abs_dot(f),
        l2: w.dot(&sq).max(0.0).sqrt(),
        linf: f.iter().map(|v| v.abs()).fold(0.0, f64::max),
        alpha,
        weighted_l1: weighted(alpha),
        strong: weighted(2.0) + l2_d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn constant_kernel(n: usize, a: f64) -> KernelMatrix {
        let g = UniformGrid::new(a, n).unwrap();
        let v = 1.0 / (2.0 * a);
        KernelMatrix::from_values(g, vec![v; (n + 1) * (n + 1)]).unwrap()
    }

    #[test]
    fn constant_kernel_has_uniform_density_and_no_gap() {
        let k = constant_kernel(2, 1.0);
        let inv = invariant_density(&k, &PowerIterationOptions::default()).unwrap();
        for v in inv.density.values() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-14);
        }
        let gap = spectral_gap_estimate(&k, &inv.density).unwrap();
        assert!(gap.modulus < 1e-12);
    }

    #[test]
    fn apply_shape_mismatch() {
        let k = constant_kernel(4, 1.0);
        assert!(matches!(apply(&k, &[1.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn adjoint_is_transpose() {
        let g = UniformGrid::new(1.0, 6).unwrap();
        let vals: Vec<f64> = (0..49).map(|k| ((k * 7 % 11) as f64).sin() + 1.5).collect();
        let k = KernelMatrix::from_values(g, vals).unwrap();
        let f: Vec<f64> = (0..7).map(|i| (i as f64).cos()).collect();
        let h: Vec<f64> = (0..7).map(|i| (i as f64 * 0.3).exp()).collect();
        let lhs: f64 = k.apply(&f).iter().zip(&h).map(|(a, b)| a * b).sum();
        let rhs: f64 = k.apply_adjoint(&h).iter().zip(&f).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn norms_of_zero_and_constants() {
        let g = UniformGrid::new(2.0, 40).unwrap();
        let d = SubgridRestriction::new(&g, 1.0).unwrap();
        let z = norms(&vec![0.0; 41], &g, 2.0, &d).unwrap();
        assert_eq!((z.l1, z.l2, z.linf, z.weighted_l1, z.strong), (0.0, 0.0, 0.0, 0.0, 0.0));
        let one = vec![1.0; 41];
        let r0 = norms(&one, &g, 0.0, &d).unwrap();
        assert_abs_diff_eq!(r0.l1, 4.0, epsilon = 1e-13);
        assert_abs_diff_eq!(r0.weighted_l1, 4.0, epsilon = 1e-13);
        let r2 = norms(&one, &g, 2.0, &d).unwrap();
        assert_abs_diff_eq!(r2.weighted_l1, 4.0 + 16.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r2.strong, 4.0 + 16.0 / 3.0 + 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r2.l2, 2.0, epsilon = 1e-13);
        assert!(r2.l1 <= r2.weighted_l1);
    }

    #[test]
    fn local_maxima_detection() {
        assert_eq!(local_maxima(&[0.0, 1.0, 0.0, 2.0, 2.0, 1.0, 3.0], 0.0), vec![1, 3]);
        assert_eq!(local_maxima(&[0.0, 1.0, 0.0, 5.0, 0.0], 0.5), vec![3]);
        assert!(local_maxima(&[1.0, 2.0, 3.0], 0.0).is_empty());
    }

    #[test]
    fn build_kernel_row_masses_and_symmetry() {
        let grid = UniformGrid::new(2.0, 250).unwrap();
        let spec = KernelSpec {
            potential: PotentialSpec::double_well(0.25).unwrap(),
            grid,
            time: TimeGrid::new(1.0, 250).unwrap(),
            dirac_sigma: 0.2,
        };
        let (k, report) = build_kernel(&spec).unwrap();
        assert!(report.max_row_mass_deviation < 0.05, "{report:?}");
        assert!(k.max_reflection_asymmetry() < 1e-11);
        assert!(report.min_entry > -1e-8);
    }
}
