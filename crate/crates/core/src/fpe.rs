//! Implicit finite-difference solver for the Fokker-Planck equation
//!
//! ```text
//! ∂_t p - (ε²/2) ∂²_y p + ∂_y (p b) = 0   on (-a, a),
//! (ε²/2) ∂_y p - p b = 0                 at y = ±a  (zero flux)
//! ```
//!
//! discretised with backward Euler in time, a centred second difference for
//! the diffusion and a centred first difference for the flux `p b`. The ghost
//! values `p_{-1}`, `p_{n+1}` are eliminated through the centred discrete
//! boundary condition, so the one-step matrix is tridiagonal and identical for
//! every step and every initial condition; it is factorised once.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{simpson_weights, TimeGrid, UniformGrid};

/// Shape of the potential `V`; the drift is `b = -V'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Potential {
    /// `V(y) = y⁴/4 - y²/2`, drift `y - y³`.
    DoubleWell,
    /// `V(y) = κ y²/2`, drift `-κ y`.
    Quadratic { curvature: f64 },
    /// Tabulated `V'` at increasing abscissae, linearly interpolated (and
    /// extrapolated from the end segments).
    Tabulated { nodes: Vec<f64>, derivative: Vec<f64> },
}

impl Potential {
    pub fn drift(&self, y: f64) -> f64 {
        match self {
            Potential::DoubleWell => y - y * y * y,
            Potential::Quadratic { curvature } => -curvature * y,
            Potential::Tabulated { nodes, derivative } => -interpolate(nodes, derivative, y),
        }
    }

    /// `b(-y) = -b(y)` for all y, so the dynamics commute with reflection.
    pub fn is_even(&self) -> bool {
        !matches!(self, Potential::Tabulated { .. })
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.len() < 2 || xs.len() != ys.len() {
        return f64::NAN;
    }
    let k = match xs.partition_point(|&v| v <= x) {
        0 => 1,
        k if k >= xs.len() => xs.len() - 1,
        k => k,
    };
    let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub potential: Potential,
    /// Noise intensity ε.
    pub noise: f64,
}

impl PotentialSpec {
    pub fn new(potential: Potential, noise: f64) -> Result<Self> {
        if !(noise.is_finite() && noise > 0.0) {
            return Err(Error::config("epsilon", format!("noise intensity must be positive, got {noise}")));
        }
        if let Potential::Tabulated { nodes, derivative } = &potential {
            if nodes.len() < 2 || nodes.len() != derivative.len() {
                return Err(Error::config("potential", "tabulated V' needs ≥2 matching nodes and values"));
            }
            if nodes.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config("potential", "tabulated nodes must be strictly increasing"));
            }
        }
        Ok(Self { potential, noise })
    }

    pub fn double_well(noise: f64) -> Result<Self> {
        Self::new(Potential::DoubleWell, noise)
    }
}

/// Drift at the grid nodes plus the two ghost nodes `y_0 - dx`, `y_n + dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSamples {
    pub values: Vec<f64>,
    pub left_ghost: f64,
    pub right_ghost: f64,
}

pub fn drift_samples(spec: &PotentialSpec, grid: &UniformGrid) -> Result<DriftSamples> {
    let values: Vec<f64> = grid.nodes().iter().map(|&y| spec.potential.drift(y)).collect();
    if let Some(i) = values.iter().position(|b| !b.is_finite()) {
        return Err(Error::Numeric(format!("non-finite drift at node {i} (y = {})", grid.node(i))));
    }
    let dx = grid.spacing();
    let left_ghost = spec.potential.drift(-grid.half_width() - dx);
    let right_ghost = spec.potential.drift(grid.half_width() + dx);
    if !left_ghost.is_finite() {
        return Err(Error::Numeric("non-finite drift at left ghost node -1".into()));
    }
    if !right_ghost.is_finite() {
        return Err(Error::Numeric(format!("non-finite drift at right ghost node {}", grid.len())));
    }
    Ok(DriftSamples {
        values,
        left_ghost,
        right_ghost,
    })
}

/// A grid function approximating `p(·, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySnapshot {
    pub grid: UniformGrid,
    pub time: f64,
    pub values: Vec<f64>,
}

impl DensitySnapshot {
    pub fn mass(&self) -> f64 {
        simpson_weights(&self.grid).dot(&self.values)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Simpson L¹ distance to another snapshot on the same grid.
    pub fn l1_distance(&self, other: &DensitySnapshot) -> Result<f64> {
        self.grid.check_len("l1_distance", other.values.len())?;
        let diff: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(simpson_weights(&self.grid).abs_dot(&diff))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "y,p")?;
        for (i, p) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", self.grid.node(i), p)?;
        }
        Ok(())
    }
}

pub fn gaussian_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

/// Width of the Gaussian that stands in for the Dirac initial condition: `100 dx`.
pub fn default_dirac_sigma(grid: &UniformGrid) -> f64 {
    100.0 * grid.spacing()
}

/// Gaussian centred at the grid node `center` with standard deviation `sigma`,
/// rescaled to unit Simpson mass on the grid.
pub fn dirac_approximation(grid: &UniformGrid, center: f64, sigma: f64) -> Result<DensitySnapshot> {
    let l = grid
        .node_index(center)
        .ok_or_else(|| Error::config("x0", format!("initial condition {center} is not a grid node")))?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::config("dirac_sigma", format!("must be positive, got {sigma}")));
    }
    let mean = grid.node(l);
    let mut values: Vec<f64> = grid.nodes().iter().map(|&y| gaussian_pdf(y, mean, sigma)).collect();
    let mass = simpson_weights(grid).dot(&values);
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::Numeric(format!("Dirac surrogate at {mean} has mass {mass}")));
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(DensitySnapshot {
        grid: *grid,
        time: 0.0,
        values,
    })
}

/// LU factors of a tridiagonal matrix (Thomas elimination, no pivoting).
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    lower: Vec<f64>,
    upper_mod: Vec<f64>,
    pivots: Vec<f64>,
}

impl Tridiagonal {
    /// `lower[i]` multiplies `x[i-1]` in row i (`lower[0]` unused), `upper[i]`
    /// multiplies `x[i+1]` (`upper[n-1]` unused).
    pub fn factor(lower: &[f64], diag: &[f64], upper: &[f64]) -> Result<Self> {
        let n = diag.len();
        if lower.len() != n || upper.len() != n || n == 0 {
            return Err(Error::shape("tridiagonal factor", n, lower.len().min(upper.len())));
        }
        let mut pivots = vec![0.0; n];
        let mut upper_mod = vec![0.0; n];
        pivots[0] = diag[0];
        for i in 0..n {
            if i > 0 {
                pivots[i] = diag[i] - lower[i] * upper_mod[i - 1];
            }
            if !(pivots[i].is_finite()) || pivots[i].abs() < 1e-300 {
                return Err(Error::Numeric(format!("zero pivot at row {i} of tridiagonal system")));
            }
            if i + 1 < n {
                upper_mod[i] = upper[i] / pivots[i];
            }
        }
        Ok(Self {
            lower: lower.to_vec(),
            upper_mod,
            pivots,
        })
    }

    pub fn min_pivot(&self) -> f64 {
        self.pivots.iter().map(|p| p.abs()).fold(f64::INFINITY, f64::min)
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.pivots.len();
        rhs[0] /= self.pivots[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) / self.pivots[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.upper_mod[i] * rhs[i + 1];
        }
    }
}

/// The backward-Euler one-step map, factorised once.
#[derive(Debug, Clone)]
pub struct ImplicitStepper {
    grid: UniformGrid,
    dt: f64,
    noise: f64,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    factors: Tridiagonal,
}

impl ImplicitStepper {
    pub fn new(grid: &UniformGrid, drift: &DriftSamples, dt: f64, noise: f64) -> Result<Self> {
        grid.check_len("drift samples", drift.values.len())?;
        let n = grid.len();
        let dx = grid.spacing();
        let diffusion = dt * noise * noise / (2.0 * dx * dx);
        let advection = dt / (2.0 * dx);
        let b = |i: isize| -> f64 {
            if i < 0 {
                drift.left_ghost
            } else if i as usize >= n {
                drift.right_ghost
            } else {
                drift.values[i as usize]
            }
        };
        // Row i: (1 + 2D) p_i - (D + A b_{i-1}) p_{i-1} - (D - A b_{i+1}) p_{i+1} = p_i^old
        let mut lower = vec![0.0; n];
        let mut diag = vec![1.0 + 2.0 * diffusion; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            let ii = i as isize;
            lower[i] = -(diffusion + advection * b(ii - 1));
            upper[i] = -(diffusion - advection * b(ii + 1));
        }
        // Ghost elimination from (ε²/2)(p_1 - p_{-1})/(2dx) - p_0 b_0 = 0:
        //   p_{-1} = p_1 - (4 dx b_0 / ε²) p_0
        let left = 4.0 * dx * drift.values[0] / (noise * noise);
        diag[0] -= lower[0] * left;
        upper[0] += lower[0];
        lower[0] = 0.0;
        // and (ε²/2)(p_{n+1} - p_{n-1})/(2dx) - p_n b_n = 0:
        //   p_{n+1} = p_{n-1} + (4 dx b_n / ε²) p_n
        let right = 4.0 * dx * drift.values[n - 1] / (noise * noise);
        diag[n - 1] += upper[n - 1] * right;
        lower[n - 1] += upper[n - 1];
        upper[n - 1] = 0.0;

        let factors = Tridiagonal::factor(&lower, &diag, &upper).map_err(|e| {
            Error::Numeric(format!("implicit FPE step is singular (dt = {dt}, dx = {dx}, ε = {noise}): {e}"))
        })?;
        Ok(Self {
            grid: *grid,
            dt,
            noise,
            lower,
            diag,
            upper,
            factors,
        })
    }

    pub fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Smallest pivot magnitude of the elimination; near zero signals a
    /// nearly singular step matrix.
    pub fn min_pivot(&self) -> f64 {
        self.factors.min_pivot()
    }

    /// Multiplies by the (unfactorised) step matrix.
    pub fn apply_matrix(&self, p: &[f64]) -> Vec<f64> {
        let n = p.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * p[i];
                if i > 0 {
                    v += self.lower[i] * p[i - 1];
                }
                if i + 1 < n {
                    v += self.upper[i] * p[i + 1];
                }
                v
            })
            .collect()
    }

    pub fn step_in_place(&self, p: &mut [f64]) {
        self.factors.solve_in_place(p);
    }

    pub fn step(&self, p: &DensitySnapshot) -> Result<DensitySnapshot> {
        self.grid.check_len("step_implicit", p.values.len())?;
        let mut values = p.values.clone();
        self.step_in_place(&mut values);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite density after implicit step (dt = {}, dx = {}, ε = {})",
                self.dt,
                self.grid.spacing(),
                self.noise
            )));
        }
        Ok(DensitySnapshot {
            grid: self.grid,
            time: p.time + self.dt,
            values,
        })
    }
}

/// One backward-Euler step, building the step matrix on the fly. Prefer
/// [`ImplicitStepper`] when stepping repeatedly.
pub fn step_implicit(p: &DensitySnapshot, drift: &DriftSamples, dt: f64, noise: f64) -> Result<DensitySnapshot> {
    ImplicitStepper::new(&p.grid, drift, dt, noise)?.step(p)
}

/// Terminal density plus the audit trail of the time march.
#[derive(Debug, Clone)]
pub struct FpeSolution {
    pub density: DensitySnapshot,
    /// Largest per-step change of Simpson mass.
    pub max_step_mass_drift: f64,
    /// Terminal mass minus initial mass.
    pub cumulative_mass_drift: f64,
    /// Smallest value seen over all steps.
    pub min_value: f64,
    pub min_pivot: f64,
}

/// Evolves the Dirac surrogate at `x0` through every step of `time`.
pub fn solve_fpe(
    x0: f64,
    stepper: &ImplicitStepper,
    time: &TimeGrid,
    dirac_sigma: f64,
) -> Result<FpeSolution> {
    solve_fpe_with_snapshots(x0, stepper, time, dirac_sigma, &[]).map(|(s, _)| s)
}

/// As [`solve_fpe`], additionally returning copies at the time nodes closest
/// to each of `snapshot_times`.
pub fn solve_fpe_with_snapshots(
    x0: f64,
    stepper: &ImplicitStepper,
    time: &TimeGrid,
    dirac_sigma: f64,
    snapshot_times: &[f64],
) -> Result<(FpeSolution, Vec<DensitySnapshot>)> {
    let grid = stepper.grid();
    let weights = simpson_weights(grid);
    if (time.step() - stepper.dt()).abs() > 1e-12 * time.step() {
        return Err(Error::config("m", "time grid step differs from the stepper's dt"));
    }
    let start = dirac_approximation(grid, x0, dirac_sigma)?;
    let wanted: Vec<usize> = snapshot_times
        .iter()
        .map(|t| ((t / time.step()).round().max(0.0) as usize).min(time.steps()))
        .collect();
    let mut snapshots = Vec::new();
    let mut values = start.values;
    let initial_mass = weights.dot(&values);
    let mut mass = initial_mass;
    let mut max_drift: f64 = 0.0;
    let mut min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    for j in 0..=time.steps() {
        if j > 0 {
            stepper.step_in_place(&mut values);
            let new_mass = weights.dot(&values);
            if !new_mass.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite density at step {j} from x0 = {x0} (dt = {}, dx = {}, ε = {})",
                    stepper.dt(),
                    grid.spacing(),
                    stepper.noise()
                )));
            }
            max_drift = max_drift.max((new_mass - mass).abs());
            mass = new_mass;
            min_value = values.iter().copied().fold(min_value, f64::min);
        }
        for _ in wanted.iter().filter(|&&w| w == j) {
            snapshots.push(DensitySnapshot {
                grid: *grid,
                time: time.time(j),
                values: values.clone(),
            });
        }
    }
    Ok((
        FpeSolution {
            density: DensitySnapshot {
                grid: *grid,
                time: time.final_time(),
                values,
            },
            max_step_mass_drift: max_drift,
            cumulative_mass_drift: mass - initial_mass,
            min_value,
            min_pivot: stepper.min_pivot(),
        },
        snapshots,
    ))
}

/// Parameters of the Ornstein-Uhlenbeck process `dX = -X dt + ε dW` started
/// from `N(μ₀, σ₀²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuParams {
    pub mean0: f64,
    pub sd0: f64,
    pub time: f64,
    pub noise: f64,
}

impl OuParams {
    pub fn mean(&self) -> f64 {
        self.mean0 * (-self.time).exp()
    }

    pub fn variance(&self) -> f64 {
        let decay = (-2.0 * self.time).exp();
        self.sd0 * self.sd0 * decay + self.noise * self.noise * (1.0 - decay) / 2.0
    }
}

/// Exact law of the OU process at time `t`, sampled on the grid.
///
/// A zero variance (`σ₀ = 0`, `t = 0`) yields a unit-mass spike at the node
/// nearest to the mean.
pub fn analytic_ou_density(params: &OuParams, grid: &UniformGrid) -> DensitySnapshot {
    let mean = params.mean();
    let var = params.variance();
    let values = if var > 0.0 {
        let sd = var.sqrt();
        grid.nodes().iter().map(|&y| gaussian_pdf(y, mean, sd)).collect()
    } else {
        let w = simpson_weights(grid);
        let l = ((mean + grid.half_width()) / grid.spacing()).round().clamp(0.0, grid.intervals() as f64) as usize;
        let mut v = vec![0.0; grid.len()];
        v[l] = 1.0 / w[l];
        v
    };
    DensitySnapshot {
        grid: *grid,
        time: params.time,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dw(noise: f64) -> PotentialSpec {
        PotentialSpec::double_well(noise).unwrap()
    }

    #[test]
    fn double_well_drift_values() {
        let p = Potential::DoubleWell;
        assert_eq!(p.drift(1.0), 0.0);
        assert_eq!(p.drift(0.0), 0.0);
        assert_eq!(p.drift(2.0), -6.0);
        assert_eq!(p.drift(-1.0), 0.0);
    }

    #[test]
    fn drift_ghost_nodes() {
        let g = UniformGrid::new(2.0, 4).unwrap();
        let d = drift_samples(&dw(0.25), &g).unwrap();
        assert_eq!(d.values, vec![6.0, 0.0, 0.0, 0.0, -6.0]);
        assert_abs_diff_eq!(d.left_ghost, Potential::DoubleWell.drift(-3.0));
        assert_abs_diff_eq!(d.right_ghost, -24.0);
    }

    #[test]
    fn non_finite_drift_names_node() {
        let spec = PotentialSpec::new(Potential::Quadratic { curvature: f64::INFINITY }, 1.0).unwrap();
        let g = UniformGrid::new(1.0, 4).unwrap();
        match drift_samples(&spec, &g) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("node 0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tabulated_interpolation() {
        let p = Potential::Tabulated {
            nodes: vec![-1.0, 0.0, 1.0],
            derivative: vec![-1.0, 0.0, 3.0],
        };
        assert_abs_diff_eq!(p.drift(0.5), -1.5);
        assert_abs_diff_eq!(p.drift(2.0), -6.0);
        assert_abs_diff_eq!(p.drift(-2.0), 2.0);
        assert!(PotentialSpec::new(
            Potential::Tabulated {
                nodes: vec![0.0, 0.0],
                derivative: vec![1.0, 1.0]
            },
            1.0
        )
        .is_err());
    }

    #[test]
    fn dirac_sigma_at_reference_mesh() {
        let g = UniformGrid::new(2.0, 2000).unwrap();
        assert_abs_diff_eq!(default_dirac_sigma(&g), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn dirac_is_symmetric_and_normalised() {
        let g = UniformGrid::new(2.0, 400).unwrap();
        let s = dirac_approximation(&g, 0.0, default_dirac_sigma(&g)).unwrap();
        for i in 0..g.len() {
            assert_eq!(s.values[i], s.values[400 - i]);
        }
        for &c in &[-2.0, -1.0, 0.37, 1.99] {
            let c = g.node(g.node_index(c).unwrap_or(10));
            let s = dirac_approximation(&g, c, 0.3).unwrap();
            assert_abs_diff_eq!(s.mass(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dirac_rejects_off_grid_center() {
        let g = UniformGrid::new(1.0, 10).unwrap();
        assert!(matches!(dirac_approximation(&g, 0.05, 0.1), Err(Error::Config { .. })));
    }

    #[test]
    fn thomas_matches_dense_product() {
        let lower = [0.0, -1.0, 0.5, -0.2];
        let diag = [4.0, 3.0, 5.0, 2.0];
        let upper = [1.0, -0.3, 0.7, 0.0];
        let t = Tridiagonal::factor(&lower, &diag, &upper).unwrap();
        let mut x = [1.0, 2.0, 3.0, 4.0];
        t.solve_in_place(&mut x);
        let back: Vec<f64> = (0..4)
            .map(|i| {
                let mut v = diag[i] * x[i];
                if i > 0 {
                    v += lower[i] * x[i - 1];
                }
                if i < 3 {
                    v += upper[i] * x[i + 1];
                }
                v
            })
            .collect();
        for (b, r) in back.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert_abs_diff_eq!(*b, r, epsilon = 1e-13);
        }
        assert!(Tridiagonal::factor(&[0.0, 1.0], &[1.0, 1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn stationary_profile_is_fixed_point() {
        let g = UniformGrid::new(2.0, 200).unwrap();
        let spec = dw(0.5);
        let st = ImplicitStepper::new(&g, &drift_samples(&spec, &g).unwrap(), 0.01, spec.noise).unwrap();
        // Dominant eigenvector of the step map by repeated stepping.
        let mut p = vec![1.0; g.len()];
        for _ in 0..20000 {
            st.step_in_place(&mut p);
            let m = simpson_weights(&g).dot(&p);
            p.iter_mut().for_each(|v| *v /= m);
        }
        let snap = DensitySnapshot { grid: g, time: 0.0, values: p.clone() };
        let next = st.step(&snap).unwrap();
        for (a, b) in next.values.iter().zip(&p) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn one_step_conserves_mass() {
        let g = UniformGrid::new(2.0, 500).unwrap();
        let spec = dw(0.25);
        let st = ImplicitStepper::new(&g, &drift_samples(&spec, &g).unwrap(), 2e-3, spec.noise).unwrap();
        let p = dirac_approximation(&g, g.node(300), 0.2).unwrap();
        let q = st.step(&p).unwrap();
        assert!((q.mass() - p.mass()).abs() < 1e-6, "{}", q.mass() - p.mass());
        assert!((q.time - 2e-3).abs() < 1e-15);
    }

    #[test]
    fn mirror_initial_conditions_give_mirror_solutions() {
        let g = UniformGrid::new(2.0, 200).unwrap();
        let spec = dw(0.25);
        let t = TimeGrid::new(1.0, 100).unwrap();
        let st = ImplicitStepper::new(&g, &drift_samples(&spec, &g).unwrap(), t.step(), spec.noise).unwrap();
        let a = solve_fpe(g.node(140), &st, &t, 0.1).unwrap().density;
        let b = solve_fpe(g.node(60), &st, &t, 0.1).unwrap().density;
        for i in 0..g.len() {
            assert_abs_diff_eq!(a.values[i], b.values[200 - i], epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_start_stays_symmetric() {
        let g = UniformGrid::new(2.0, 300).unwrap();
        let spec = dw(0.25);
        let t = TimeGrid::new(1.0, 200).unwrap();
        let st = ImplicitStepper::new(&g, &drift_samples(&spec, &g).unwrap(), t.step(), spec.noise).unwrap();
        let times: Vec<f64> = (0..=200).map(|j| t.time(j)).collect();
        let (_, snaps) = solve_fpe_with_snapshots(0.0, &st, &t, 0.2, &times).unwrap();
        let bound = 10.0 * f64::EPSILON * 200.0;
        for s in &snaps {
            let peak = s.values.iter().copied().fold(0.0, f64::max);
            for i in 0..g.len() {
                assert!((s.values[i] - s.values[300 - i]).abs() <= bound * peak);
            }
        }
    }

    #[test]
    fn double_well_concentrates_near_start_well() {
        let g = UniformGrid::new(2.0, 500).unwrap();
        let spec = dw(0.25);
        let t = TimeGrid::new(1.0, 500).unwrap();
        let st = ImplicitStepper::new(&g, &drift_samples(&spec, &g).unwrap(), t.step(), spec.noise).unwrap();
        let sol = solve_fpe(1.0, &st, &t, 0.2).unwrap();
        let w = simpson_weights(&g);
        let near: Vec<f64> = g
            .nodes()
            .iter()
            .zip(&sol.density.values)
            .map(|(y, p)| if (y - 1.0).abs() < 0.5 { *p } else { 0.0 })
            .collect();
        assert!(w.dot(&near) > 0.95);
        assert!(sol.min_value > -1e-8);
        assert!(sol.cumulative_mass_drift.abs() < 1e-2);
    }

    #[test]
    fn ou_identity_at_time_zero() {
        let g = UniformGrid::new(3.0, 300).unwrap();
        let p = OuParams { mean0: 0.5, sd0: 0.2, time: 0.0, noise: 1.0 };
        let s = analytic_ou_density(&p, &g);
        for (i, y) in g.nodes().iter().enumerate() {
            assert_eq!(s.values[i], gaussian_pdf(*y, 0.5, 0.2));
        }
    }

    #[test]
    fn ou_long_time_limit_and_mean() {
        let p = OuParams { mean0: 0.7, sd0: 0.3, time: 60.0, noise: 1.0 };
        assert_abs_diff_eq!(p.mean(), 0.0, epsilon = 1e-20);
        assert_abs_diff_eq!(p.variance(), 0.5, epsilon = 1e-15);
        let p = OuParams { mean0: 0.5, sd0: 0.0, time: 1.0, noise: 1.0 };
        assert_abs_diff_eq!(p.mean(), 0.18393972058572117, epsilon = 1e-15);
    }

    #[test]
    fn ou_one_step_matches_analytic() {
        let g = UniformGrid::new(5.0, 1000).unwrap();
        let spec = PotentialSpec::new(Potential::Quadratic { curvature: 1.0 }, 1.0).unwrap();
        let dt = 1e-3;
        let st = ImplicitStepper::new(&g, &drift_samples(&spec, &g).unwrap(), dt, 1.0).unwrap();
        let p0 = OuParams { mean0: 0.5, sd0: 0.3, time: 0.0, noise: 1.0 };
        let start = analytic_ou_density(&p0, &g);
        let next = st.step(&start).unwrap();
        let exact = analytic_ou_density(&OuParams { time: dt, ..p0 }, &g);
        let dx = g.spacing();
        // one step of a first-order-in-time scheme: local error O(dt² + dt dx²) in L¹
        assert!(next.l1_distance(&exact).unwrap() < 10.0 * (dt * dt + dt * dx * dx) / (0.3f64).powi(2));
    }

    #[test]
    fn snapshot_csv_header() {
        let g = UniformGrid::new(1.0, 2).unwrap();
        let s = DensitySnapshot { grid: g, time: 0.0, values: vec![0.0, 1.5, 0.0] };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "y,p\n-1,0\n0,1.5\n1,0\n");
    }
}
