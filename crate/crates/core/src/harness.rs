//! End-to-end experiment runner and cross-validation suites.
//!
//! Pipeline: kernel → invariant density → spectral gap → resolvent →
//! coefficients → optimal perturbation → perturbed densities → audits.
//! Perturbed densities always come from the perturbed kernel's own
//! eigenproblem, never from the resolvent, so the linear-response checks are
//! not circular.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::cache::FORMAT_VERSION;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::export;
use crate::fpe::{analytic_ou_density, dirac_approximation, drift_samples, solve_fpe, ImplicitStepper, OuParams, Potential, PotentialSpec};
use crate::mesh::{simpson_weights, SubgridRestriction, TimeGrid, UniformGrid};
use crate::optimal::{assemble_optimal, coefficient_table, objective_value, CoefficientTable, WaveletBasis};
use crate::response::{perturb_kernel, PerturbationAudit, PerturbationKernel, ResponseSolver, ResponseVector};
use crate::transfer::{
    build_kernel, invariant_density, norms, spectral_gap_estimate, InvariantDensity, KernelBuildReport, KernelMatrix,
    NormReport, SpectralGapEstimate, TransferOperator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Audit {
    pub name: String,
    pub status: AuditStatus,
    pub value: f64,
    pub threshold: f64,
    pub note: String,
}

impl Audit {
    /// `value ≤ threshold` passes; otherwise `on_fail`.
    fn at_most(name: &str, value: f64, threshold: f64, on_fail: AuditStatus, note: impl Into<String>) -> Self {
        let status = if value <= threshold { AuditStatus::Pass } else { on_fail };
        Self { name: name.into(), status, value, threshold, note: note.into() }
    }

    fn flag(name: &str, ok: bool, on_fail: AuditStatus, note: impl Into<String>) -> Self {
        let status = if ok { AuditStatus::Pass } else { on_fail };
        Self { name: name.into(), status, value: ok as u8 as f64, threshold: 1.0, note: note.into() }
    }
}

/// Where the kernel came from.
#[derive(Debug, Clone)]
pub struct KernelInput {
    pub kernel: KernelMatrix,
    /// Present only when the kernel was built in this process.
    pub build_report: Option<KernelBuildReport>,
    pub source: String,
}

impl KernelInput {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let (kernel, report) = build_kernel(&config.kernel_spec()?)?;
        Ok(Self { kernel, build_report: Some(report), source: "built".into() })
    }
}

/// How far to run and which verification suites to add.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunPlan {
    pub depth: Depth,
    /// Linear-response convergence and optimality sampling.
    pub cross_validation: bool,
    pub ou_oracle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Depth {
    Invariant,
    Optimize,
    Perturb,
}

impl RunPlan {
    pub const FIGURES: RunPlan = RunPlan { depth: Depth::Perturb, cross_validation: true, ou_oracle: false };
    pub const VERIFY: RunPlan = RunPlan { depth: Depth::Perturb, cross_validation: true, ou_oracle: true };
}

#[derive(Debug, Clone, Serialize)]
pub struct DomainSummary {
    pub requested_half_width: f64,
    pub snapped_half_width: f64,
    pub intervals: usize,
    pub spacing: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelSummary {
    pub max_row_mass_deviation: f64,
    pub min_entry: f64,
    pub max_reflection_asymmetry: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensitySummary {
    pub delta: f64,
    pub eigenvalue: f64,
    pub residual: f64,
    pub iterations: usize,
    pub min: f64,
    pub reflection_asymmetry: f64,
    pub local_maxima: Vec<f64>,
    /// `⟨φ, f⟩` over D.
    pub expectation: f64,
    pub norms: NormReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolventSummary {
    pub scheme: String,
    pub condition: f64,
    pub contraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimalSummary {
    pub basis_size: usize,
    pub coefficient_norm: f64,
    pub objective: f64,
    pub l2_norm: f64,
    pub zero_mean_defect: f64,
    pub response_norms: NormReport,
    /// Centre of mass of `|g|` along y, which locates where the perturbation acts.
    pub y_centre_of_mass: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbedSummary {
    pub audit: PerturbationAudit,
    /// `|∫ (L_δ - L_0) f_δ|`: mass injected by one perturbed step.
    pub mass_change: f64,
    pub density: DensitySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub delta: f64,
    pub l1_error: Option<f64>,
    pub rate_error: Option<f64>,
    pub relative_rate_error: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub l1_strictly_decreasing: bool,
    pub rate_strictly_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingResult {
    pub samples: usize,
    pub seed: u64,
    pub max_sampled: f64,
    pub optimal_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuRow {
    pub spacing: f64,
    pub time_step: f64,
    pub l1_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuTable {
    pub rows: Vec<OuRow>,
    /// Error ratios between consecutive levels.
    pub ratios: Vec<f64>,
    /// L¹ error of the initial surrogate against the analytic Gaussian at t = 0.
    pub initial_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

/// Facts that legitimately differ between otherwise identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct RuntimeInfo {
    pub kernel_source: String,
    pub kernel_build: Option<KernelBuildReport>,
    pub timings: Vec<Timing>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub cache_format_version: u32,
    pub config: ExperimentConfig,
    /// The configuration as TOML; feeding it back reproduces the run.
    pub config_toml: String,
    pub overrides: Vec<String>,
    pub domain: DomainSummary,
    pub kernel: KernelSummary,
    pub f0: DensitySummary,
    pub spectral_gap: SpectralGapEstimate,
    pub resolvent: Option<ResolventSummary>,
    pub optimal: Option<OptimalSummary>,
    pub perturbed: Vec<PerturbedSummary>,
    pub convergence: Option<ConvergenceTable>,
    pub optimality: Option<SamplingResult>,
    pub ou_oracle: Option<OuTable>,
    pub audits: Vec<Audit>,
    pub runtime: RuntimeInfo,
}

impl RunReport {
    pub fn failed_audits(&self) -> Vec<&Audit> {
        self.audits.iter().filter(|a| a.status == AuditStatus::Fail).collect()
    }
}

/// Unperturbed state shared by every later stage.
pub struct Baseline {
    pub config: ExperimentConfig,
    pub grid: UniformGrid,
    pub restriction: SubgridRestriction,
    pub kernel: KernelMatrix,
    pub invariant: InvariantDensity,
    pub gap: SpectralGapEstimate,
    /// Observable on the D-nodes.
    pub phi: Vec<f64>,
}

impl Baseline {
    pub fn new(config: &ExperimentConfig, kernel: KernelMatrix) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        if kernel.grid() != &grid {
            return Err(Error::config("n", "kernel grid does not match the configuration"));
        }
        let restriction = config.restriction()?;
        let invariant = invariant_density(&kernel, &config.power_options()).map_err(|e| stage("invariant density", e))?;
        let gap = spectral_gap_estimate(&kernel, &invariant.density).map_err(|e| stage("spectral gap", e))?;
        let phi = config.observable_spec()?.sample(&restriction)?;
        Ok(Self { config: config.clone(), grid, restriction, kernel, invariant, gap, phi })
    }

    pub fn solver(&self) -> Result<ResponseSolver> {
        ResponseSolver::new(&self.kernel, &self.invariant, self.gap.modulus, self.restriction, self.config.resolvent, self.config.condition_limit)
            .map_err(|e| stage("resolvent", e))
    }

    pub fn basis(&self) -> Result<WaveletBasis> {
        WaveletBasis::new(self.restriction, self.config.basis_i, self.config.basis_j)
    }

    /// `⟨φ, f⟩` over D with D's Simpson rule.
    pub fn expectation(&self, f: &[f64]) -> Result<f64> {
        let local = self.restriction.restrict(f)?;
        self.restriction.local_weights().integrate(&local.iter().zip(&self.phi).map(|(a, b)| a * b).collect::<Vec<_>>())
    }

    /// Invariant density of `κ + δ κ̇`, from its own eigenproblem.
    pub fn perturbed_density(&self, perturbation: &PerturbationKernel, delta: f64) -> Result<(InvariantDensity, PerturbationAudit, f64)> {
        let op = perturb_kernel(&self.kernel, perturbation, delta)?;
        let inv = invariant_density(&op, &self.config.power_options()).map_err(|e| stage(&format!("perturbed density δ={delta}"), e))?;
        let w = simpson_weights(&self.grid);
        let moved = op.apply(inv.density.values());
        let base = self.kernel.apply(inv.density.values());
        let mass_change = (w.dot(&moved) - w.dot(&base)).abs();
        Ok((inv, op.audit(), mass_change))
    }

    fn summarize(&self, delta: f64, inv: &InvariantDensity) -> Result<DensitySummary> {
        let d = &inv.density;
        Ok(DensitySummary {
            delta,
            eigenvalue: inv.eigenvalue,
            residual: inv.residual,
            iterations: inv.iterations,
            min: d.min(),
            reflection_asymmetry: d.reflection_asymmetry(),
            local_maxima: d.local_maxima(0.0).into_iter().map(|i| self.grid.node(i)).collect(),
            expectation: self.expectation(d.values())?,
            norms: norms(d.values(), &self.grid, self.config.alpha, &self.restriction)?,
        })
    }
}

fn stage(name: &str, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{name}: {msg}")),
        other => other,
    }
}

/// The optimal perturbation and its response.
pub struct Optimum {
    pub table: CoefficientTable,
    pub perturbation: PerturbationKernel,
    pub objective: f64,
    pub response: ResponseVector,
}

pub fn optimize(baseline: &Baseline, solver: &ResponseSolver, basis: &WaveletBasis) -> Result<Optimum> {
    let table = coefficient_table(basis, &baseline.phi, solver)?;
    let perturbation = assemble_optimal(&table, basis)?;
    let response = solver.response(&perturbation)?;
    let objective = solver.pair(&baseline.phi, &response)?;
    Ok(Optimum { table, perturbation, objective, response })
}

/// Finite-difference quotients against the linear response over a δ
/// schedule; `δ = 0` entries are skipped with a note.
pub fn linear_response_convergence(
    baseline: &Baseline,
    perturbation: &PerturbationKernel,
    response: &ResponseVector,
    rate: f64,
    schedule: &[f64],
) -> Result<ConvergenceTable> {
    let w = simpson_weights(&baseline.grid);
    let f0 = baseline.invariant.density.values();
    let e0 = baseline.expectation(f0)?;
    let mut rows = Vec::with_capacity(schedule.len());
    for &delta in schedule {
        if delta == 0.0 {
            rows.push(ConvergenceRow {
                delta,
                l1_error: None,
                rate_error: None,
                relative_rate_error: None,
                note: Some("δ = 0: difference quotient undefined, entry skipped".into()),
            });
            continue;
        }
        let (fd, _, _) = baseline.perturbed_density(perturbation, delta)?;
        let fv = fd.density.values();
        let diff: Vec<f64> = fv.iter().zip(f0).zip(&response.values).map(|((a, b), r)| ((a - b) / delta - r).abs()).collect();
        let l1 = w.integrate(&diff)?;
        let rate_error = ((baseline.expectation(fv)? - e0) / delta - rate).abs();
        rows.push(ConvergenceRow {
            delta,
            l1_error: Some(l1),
            rate_error: Some(rate_error),
            relative_rate_error: Some(if rate != 0.0 { rate_error / rate.abs() } else { f64::INFINITY }),
            note: None,
        });
    }
    let decreasing = |col: Vec<f64>| col.windows(2).all(|p| p[1] < p[0]);
    let l1: Vec<f64> = rows.iter().filter_map(|r| r.l1_error).collect();
    let rate_col: Vec<f64> = rows.iter().filter_map(|r| r.rate_error).collect();
    Ok(ConvergenceTable { l1_strictly_decreasing: decreasing(l1), rate_strictly_decreasing: decreasing(rate_col), rows })
}

/// Evaluates `objective_value` on `samples` seeded random unit-norm elements
/// of the span of the basis. Each sample draws from its own stream, so the
/// result does not depend on the thread count.
pub fn optimality_sampling(
    baseline: &Baseline,
    solver: &ResponseSolver,
    basis: &WaveletBasis,
    optimum: &Optimum,
    samples: usize,
    seed: u64,
) -> Result<SamplingResult> {
    let values = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let c = random_unit_vector(&mut rng, basis.len());
            let element = basis.synthesize(&c)?;
            objective_value(&element, &baseline.phi, solver)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SamplingResult {
        samples,
        seed,
        max_sampled: values.into_iter().fold(f64::NEG_INFINITY, f64::max),
        optimal_objective: optimum.objective,
    })
}

/// Uniform direction on the unit sphere of `R^dim`.
pub fn random_unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Ornstein–Uhlenbeck oracle: `b(x) = -x`, ε = 1, start at 0.5 with a
/// Gaussian surrogate of width 0.2, Ω = (-6, 6), T = 1, compared with the
/// exact Gaussian evolution. Level 0 has Δx = Δt = 10⁻², each further level
/// halves both.
pub fn ou_oracle_suite(levels: usize) -> Result<OuTable> {
    const X0: f64 = 0.5;
    const SD0: f64 = 0.2;
    const HALF_WIDTH: f64 = 6.0;
    let spec = PotentialSpec::new(Potential::Quadratic { curvature: 1.0 }, 1.0)?;
    let mut rows = Vec::with_capacity(levels);
    let mut initial_error = f64::NAN;
    for level in 0..levels {
        let scale = 1usize << level;
        let grid = UniformGrid::new(HALF_WIDTH, 1200 * scale)?;
        let time = TimeGrid::new(1.0, 100 * scale)?;
        let stepper = ImplicitStepper::new(&grid, &drift_samples(&spec, &grid)?, time.step(), spec.noise)?;
        let sol = solve_fpe(X0, &stepper, &time, SD0)?;
        let exact = analytic_ou_density(&OuParams { mean0: X0, sd0: SD0, time: 1.0, noise: 1.0 }, &grid);
        let l1 = sol.density.l1_distance(&exact)?;
        if level == 0 {
            let start = dirac_approximation(&grid, X0, SD0)?;
            let exact0 = analytic_ou_density(&OuParams { mean0: X0, sd0: SD0, time: 0.0, noise: 1.0 }, &grid);
            initial_error = start.l1_distance(&exact0)?;
        }
        rows.push(OuRow { spacing: grid.spacing(), time_step: time.step(), l1_error: l1 });
    }
    let ratios = rows.windows(2).map(|p| p[0].l1_error / p[1].l1_error).collect();
    Ok(OuTable { rows, ratios, initial_error })
}

struct Stopwatch(Vec<Timing>);

impl Stopwatch {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f();
        self.0.push(Timing { stage: name.into(), seconds: t0.elapsed().as_secs_f64() });
        log::info!("stage {name}: {:.2} s", t0.elapsed().as_secs_f64());
        out
    }
}

/// Runs the pipeline up to `plan.depth`, writing every artifact into `out`
/// when given. The first failing stage aborts with its name in the error.
pub fn run_experiment(config: &ExperimentConfig, input: KernelInput, plan: RunPlan, out: Option<&Path>, overrides: &[String]) -> Result<RunReport> {
    config.validate()?;
    if config.dirac_sigma.is_some() {
        log::warn!("Dirac surrogate width overridden to {} (default 100 Δx)", config.dirac_sigma()?);
    }
    let mut clock = Stopwatch(Vec::new());
    let mut audits = Vec::new();
    let kernel_source = input.source.clone();
    let kernel_build = input.build_report.clone();
    let kernel = input.kernel;
    let symmetric = config.is_symmetric();

    let kernel_summary = KernelSummary {
        max_row_mass_deviation: kernel.max_row_mass_deviation(),
        min_entry: kernel.min_entry(),
        max_reflection_asymmetry: kernel.max_reflection_asymmetry(),
    };
    audits.push(Audit::at_most("kernel_row_mass", kernel_summary.max_row_mass_deviation, config.tol_row_mass, AuditStatus::Fail, "max |Simpson row mass - 1|"));
    audits.push(Audit::at_most("kernel_positivity", -kernel_summary.min_entry, config.tol_negative_entry, AuditStatus::Fail, "negated smallest kernel entry"));

    let baseline = clock.time("invariant_density", || Baseline::new(config, kernel))?;
    let grid = baseline.grid;
    let dx = grid.spacing();
    let f0 = baseline.invariant.density.values();
    let f0_summary = baseline.summarize(0.0, &baseline.invariant)?;
    audits.push(Audit::at_most("f0_residual", baseline.invariant.residual, config.tol_eigen_residual, AuditStatus::Fail, "‖L f0 - λ f0‖₁"));
    audits.push(Audit::at_most("f0_positivity", -f0_summary.min, config.tol_negative_entry, AuditStatus::Fail, "negated smallest value of f0"));
    audits.push(Audit::at_most("spectral_gap", baseline.gap.modulus, 1.0 - f64::EPSILON, AuditStatus::Fail, "|λ₂| estimate"));
    if symmetric {
        audits.push(Audit::at_most("f0_symmetry", f0_summary.reflection_asymmetry, config.tol_symmetry_f0, AuditStatus::Fail, "Simpson L¹ distance of f0 and its reflection"));
    }

    let restriction = baseline.restriction;
    let domain = DomainSummary {
        requested_half_width: config.domain_half_width,
        snapped_half_width: restriction.half_width(),
        intervals: restriction.intervals(),
        spacing: dx,
    };
    if let Some(dir) = out {
        clock.time("export_f0", || {
            export::write_grid_function(&dir.join(export::KERNEL_CSV), &grid.nodes(), &grid.nodes(), "kappa", |i, j| baseline.kernel.get(i, j))?;
            export::write_columns(&dir.join(export::F0_CSV), &grid, &[("f0", f0)])
        })?;
    }

    let mut report = RunReport {
        cache_format_version: FORMAT_VERSION,
        config: config.clone(),
        config_toml: config.to_toml(),
        overrides: overrides.to_vec(),
        domain,
        kernel: kernel_summary,
        f0: f0_summary,
        spectral_gap: baseline.gap,
        resolvent: None,
        optimal: None,
        perturbed: Vec::new(),
        convergence: None,
        optimality: None,
        ou_oracle: None,
        audits: Vec::new(),
        runtime: RuntimeInfo { kernel_source, kernel_build, timings: Vec::new() },
    };

    if plan.depth >= Depth::Optimize {
        let solver = clock.time("resolvent", || baseline.solver())?;
        report.resolvent = Some(ResolventSummary { scheme: solver.scheme().to_string(), condition: solver.condition(), contraction: solver.contraction() });
        let basis = baseline.basis()?;
        let optimum = clock.time("coefficients", || optimize(&baseline, &solver, &basis))?;
        let g = &optimum.perturbation;
        let norm_g = optimum.table.norm;
        let rel = (optimum.objective - norm_g).abs() / norm_g;
        audits.push(Audit::at_most("zero_mean_constraint", g.constraint_defect(), config.tol_zero_mean, AuditStatus::Fail, "max over y of the Simpson x-mean of g"));
        audits.push(Audit::at_most("unit_norm", (g.l2_norm() - 1.0).abs(), config.tol_unit_norm, AuditStatus::Fail, "|‖g‖₂ - 1|"));
        audits.push(Audit::at_most("objective_identity", rel, config.tol_objective, AuditStatus::Fail, "|objective(g) - ‖G‖₂| / ‖G‖₂"));
        report.optimal = Some(OptimalSummary {
            basis_size: basis.len(),
            coefficient_norm: norm_g,
            objective: optimum.objective,
            l2_norm: g.l2_norm(),
            zero_mean_defect: g.constraint_defect(),
            response_norms: norms(&optimum.response.values, &grid, config.alpha, &restriction)?,
            y_centre_of_mass: y_centre_of_mass(g),
        });
        let [fig_b, fig_c, fig_d] = export::figure_names(symmetric);
        if let Some(dir) = out {
            clock.time("export_optimal", || {
                let mut file = std::fs::File::create(dir.join(export::COEFFICIENTS_CSV))?;
                optimum.table.write_csv(&mut file)?;
                export::write_perturbation(&dir.join(&fig_b), g, "g")?;
                export::write_json(
                    &dir.join(export::OPTIMAL_JSON),
                    &serde_json::json!({
                        "basis_i": config.basis_i,
                        "basis_j": config.basis_j,
                        "domain_half_width": restriction.half_width(),
                        "coefficient_norm": norm_g,
                        "objective": optimum.objective,
                        "seed": config.seed,
                    }),
                )?;
                export::write_columns(&dir.join(export::RESPONSE_CSV), &grid, &[("R", &optimum.response.values)])
            })?;
        }

        if plan.depth >= Depth::Perturb {
            let mut columns: Vec<(String, Vec<f64>)> = vec![("f0".into(), f0.to_vec())];
            for &delta in &config.delta {
                let (inv, audit, mass_change) = clock.time(&format!("perturbed_density_{delta}"), || baseline.perturbed_density(g, delta))?;
                let summary = baseline.summarize(delta, &inv)?;
                let name = format!("delta_{delta}");
                if delta == 0.0 {
                    let same = inv.density.values().iter().zip(f0).all(|(a, b)| a.to_bits() == b.to_bits());
                    audits.push(Audit::flag("delta_zero_reproduces_f0", same, AuditStatus::Fail, "f_0 recomputed from the δ = 0 kernel is bit-identical"));
                }
                audits.push(Audit::at_most(&format!("{name}_kernel_positivity"), -audit.min_entry, config.tol_negative_entry, AuditStatus::Warn, "negated smallest perturbed kernel entry"));
                let mass_status = match config.constraint_axis {
                    crate::response::ConstraintAxis::ZeroMeanInY => AuditStatus::Fail,
                    crate::response::ConstraintAxis::ZeroMeanInX => AuditStatus::Warn,
                };
                audits.push(Audit::at_most(&format!("{name}_mass"), mass_change, config.tol_mass, mass_status, "|∫(L_δ - L_0) f_δ|; only row-mass preserving perturbations keep it zero"));
                audits.push(Audit::at_most(&format!("{name}_positivity"), -summary.min, config.tol_negative_entry, AuditStatus::Warn, "negated smallest value of f_δ"));
                if symmetric {
                    audits.push(Audit::at_most(&format!("{name}_symmetry"), summary.reflection_asymmetry, config.tol_symmetry_fdelta, AuditStatus::Fail, "Simpson L¹ distance of f_δ and its reflection"));
                    if delta > 0.0 {
                        let centre = summary.local_maxima.iter().any(|x| x.abs() <= 2.0 * dx);
                        audits.push(Audit::flag(&format!("{name}_maximum_at_observable"), centre, AuditStatus::Warn, "f_δ has a local maximum within 2Δx of 0"));
                    }
                }
                if let Some(dir) = out {
                    if Some(&delta) == figure_delta(&config.delta) {
                        let op = perturb_kernel(&baseline.kernel, g, delta)?;
                        clock.time("export_perturbed_kernel", || {
                            export::write_grid_function(&dir.join(&fig_c), &grid.nodes(), &grid.nodes(), "kappa_delta", |i, j| op.get(i, j))
                        })?;
                    }
                }
                columns.push((name, inv.density.values().to_vec()));
                report.perturbed.push(PerturbedSummary { audit, mass_change, density: summary });
            }
            if let Some(dir) = out {
                let cols: Vec<(&str, &[f64])> = columns.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
                export::write_columns(&dir.join(&fig_d), &grid, &cols)?;
            }

            if plan.cross_validation {
                let table = clock.time("linear_response", || {
                    linear_response_convergence(&baseline, g, &optimum.response, optimum.objective, &config.convergence_deltas)
                })?;
                if table.rows.iter().filter(|r| r.l1_error.is_some()).count() >= 2 {
                    audits.push(Audit::flag("linear_response_l1", table.l1_strictly_decreasing, AuditStatus::Fail, "‖(f_δ - f_0)/δ - R‖₁ strictly decreasing in δ"));
                    audits.push(Audit::flag("linear_response_rate", table.rate_strictly_decreasing, AuditStatus::Fail, "rate mismatch strictly decreasing in δ"));
                }
                if let Some(dir) = out {
                    write_convergence(&dir.join(export::CONVERGENCE_CSV), &table)?;
                }
                report.convergence = Some(table);
                let sampling = clock.time("optimality_sampling", || optimality_sampling(&baseline, &solver, &basis, &optimum, config.samples, config.seed))?;
                audits.push(Audit::at_most(
                    "optimality_sampling",
                    sampling.max_sampled - sampling.optimal_objective,
                    config.tol_optimality,
                    AuditStatus::Fail,
                    "largest sampled objective minus objective(g)",
                ));
                report.optimality = Some(sampling);
            }
        }
    }

    if plan.ou_oracle {
        let table = clock.time("ou_oracle", || ou_oracle_suite(3))?;
        let first = table.rows[0].l1_error;
        audits.push(Audit::at_most("ou_error", first, 5e-2, AuditStatus::Fail, "L¹ error at Δx = Δt = 10⁻²"));
        let min_ratio = table.ratios.iter().copied().fold(f64::INFINITY, f64::min);
        audits.push(Audit::flag("ou_ratio", min_ratio >= 1.5, AuditStatus::Fail, format!("smallest error ratio under halving: {min_ratio}")));
        audits.push(Audit::at_most("ou_initial", table.initial_error, 1e-8, AuditStatus::Fail, "L¹ error of the start density at t = 0"));
        report.ou_oracle = Some(table);
    }

    for a in &audits {
        match a.status {
            AuditStatus::Pass => log::debug!("audit {} passed ({})", a.name, a.value),
            AuditStatus::Warn => log::warn!("audit {}: {} exceeds {} ({})", a.name, a.value, a.threshold, a.note),
            AuditStatus::Fail => log::error!("audit {} FAILED: {} vs {} ({})", a.name, a.value, a.threshold, a.note),
        }
    }
    report.audits = audits;
    report.runtime.timings = clock.0;
    if let Some(dir) = out {
        export::write_json(&dir.join(export::REPORT_JSON), &report)?;
    }
    Ok(report)
}

/// δ used for the perturbed-kernel figure: ½ if listed, else the largest.
fn figure_delta(deltas: &[f64]) -> Option<&f64> {
    deltas.iter().find(|d| **d == 0.5).or_else(|| deltas.iter().max_by(|a, b| a.total_cmp(b)))
}

fn y_centre_of_mass(g: &PerturbationKernel) -> f64 {
    let r = g.restriction();
    let nodes = r.nodes();
    let w = r.local_weights();
    let m = r.len();
    let col: Vec<f64> = (0..m).map(|j| (0..m).map(|i| w[i] * g.get(i, j).abs()).sum()).collect();
    let total = w.dot(&col);
    w.dot(&col.iter().zip(&nodes).map(|(c, y)| c * y).collect::<Vec<_>>()) / total
}

fn write_convergence(path: &Path, table: &ConvergenceTable) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "delta,l1_error,rate_error,relative_rate_error")?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &table.rows {
        writeln!(out, "{},{},{},{}", r.delta, cell(r.l1_error), cell(r.rate_error), cell(r.relative_rate_error))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn small(extra: &[&str]) -> ExperimentConfig {
        let mut ov: Vec<String> = ["n=160", "m=100", "basis_i=4", "basis_j=4", "samples=20", "domain_half_width=1.2"].iter().map(|s| s.to_string()).collect();
        ov.extend(extra.iter().map(|s| s.to_string()));
        parse_config_str("", &ov).unwrap()
    }

    #[test]
    fn ou_oracle_converges() {
        let t = ou_oracle_suite(2).unwrap();
        assert!(t.rows[0].l1_error <= 5e-2, "{t:?}");
        assert!(t.ratios[0] >= 1.5, "{t:?}");
        assert!(t.initial_error <= 1e-8, "{t:?}");
    }

    #[test]
    fn zero_delta_entry_is_skipped() {
        let c = small(&["delta=[0.0, 0.3]", "convergence_deltas=[0.0]"]);
        let r = run_experiment(&c, KernelInput::build(&c).unwrap(), RunPlan::FIGURES, None, &[]).unwrap();
        let conv = r.convergence.unwrap();
        assert_eq!(conv.rows.len(), 1);
        assert!(conv.rows[0].l1_error.is_none() && conv.rows[0].note.is_some());
        let a = r.audits.iter().find(|a| a.name == "delta_zero_reproduces_f0").unwrap();
        assert_eq!(a.status, AuditStatus::Pass);
        assert_eq!(r.perturbed[0].density.expectation, r.f0.expectation);
    }

    #[test]
    fn sampling_the_optimum_itself() {
        let c = small(&[]);
        let base = Baseline::new(&c, KernelInput::build(&c).unwrap().kernel).unwrap();
        let solver = base.solver().unwrap();
        let basis = base.basis().unwrap();
        let opt = optimize(&base, &solver, &basis).unwrap();
        let coeffs: Vec<f64> = opt.table.coefficients().iter().map(|g| g / opt.table.norm).collect();
        let same = objective_value(&basis.synthesize(&coeffs).unwrap(), &base.phi, &solver).unwrap();
        let neg: Vec<f64> = coeffs.iter().map(|v| -v).collect();
        let flipped = objective_value(&basis.synthesize(&neg).unwrap(), &base.phi, &solver).unwrap();
        assert!((same - opt.objective).abs() <= 1e-12 * opt.objective);
        assert!((flipped + opt.objective).abs() <= 1e-12 * opt.objective);
        let s = optimality_sampling(&base, &solver, &basis, &opt, 50, 3).unwrap();
        assert!(s.max_sampled <= s.optimal_objective + 1e-9);
        // Uniform directions in dimension 72 rarely come close to the optimum.
        assert!(s.max_sampled < 0.8 * s.optimal_objective);
    }

    #[test]
    fn random_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_unit_vector(&mut rng, 10);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn report_round_trips_config() {
        let c = small(&["seed=99"]);
        let r = run_experiment(&c, KernelInput::build(&c).unwrap(), RunPlan { depth: Depth::Invariant, cross_validation: false, ou_oracle: false }, None, &[]).unwrap();
        assert_eq!(parse_config_str(&r.config_toml, &[]).unwrap(), c);
        let json = serde_json::to_value(&r).unwrap();
        let echoed: ExperimentConfig = serde_json::from_value(json["config"].clone()).unwrap();
        assert_eq!(echoed, c);
    }
}
