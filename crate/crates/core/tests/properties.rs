//! Cross-module invariants on small and coarse double-well problems.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use optresp_core::config::{parse_config_str, ExperimentConfig};
use optresp_core::fpe::{gaussian_pdf, OuParams};
use optresp_core::harness::{optimize, random_unit_vector, run_experiment, Baseline, KernelInput, RunPlan};
use optresp_core::linalg::DenseMatrix;
use optresp_core::mesh::{simpson_weights, SubgridRestriction, UniformGrid};
use optresp_core::optimal::{objective_value, WaveletKind};
use optresp_core::response::{resolvent_solve, ConstraintAxis, PerturbationKernel, ResolventScheme};
use optresp_core::transfer::{invariant_density_from, spectral_gap_estimate, TransferOperator};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_config(extra: &[&str]) -> ExperimentConfig {
    let mut ov: Vec<String> = ["n=200", "m=200", "basis_i=6", "basis_j=6"].iter().map(|s| s.to_string()).collect();
    ov.extend(extra.iter().map(|s| s.to_string()));
    parse_config_str("", &ov).unwrap()
}

fn small() -> &'static Baseline {
    static B: OnceLock<Baseline> = OnceLock::new();
    B.get_or_init(|| {
        let c = small_config(&[]);
        Baseline::new(&c, KernelInput::build(&c).unwrap().kernel).unwrap()
    })
}

#[test]
fn invariant_density_is_unique() {
    let b = small();
    let n = b.grid.len();
    let w = simpson_weights(&b.grid);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let start: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let f = invariant_density_from(&b.kernel, start, &b.config.power_options()).unwrap();
        let diff: Vec<f64> = f.density.values().iter().zip(b.invariant.density.values()).map(|(x, y)| (x - y).abs()).collect();
        let l1 = w.integrate(&diff).unwrap();
        assert!(l1 <= 1e-8, "L¹ distance {l1}");
    }
}

#[test]
fn coarse_spectral_gap_regression() {
    // Golden value fixed by the first coarse-profile run.
    let c = parse_config_str("", &[]).unwrap();
    let b = Baseline::new(&c, KernelInput::build(&c).unwrap().kernel).unwrap();
    assert!((b.gap.modulus - 0.7187309569813736).abs() < 1e-8, "{}", b.gap.modulus);
    let again = spectral_gap_estimate(&b.kernel, &b.invariant.density).unwrap();
    assert_eq!(again.modulus.to_bits(), b.gap.modulus.to_bits());
}

#[test]
fn full_resolvent_reconstructs_the_source() {
    // (λ₀ - L₀) R = L̇ f₀ - μ f₀ with ∫R = 0, checked through the transfer action.
    let b = small();
    let solver = b.solver().unwrap();
    let r = &b.restriction;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d: Vec<f64> = (0..r.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eta = solver.solve_source(&d).unwrap();
    let w = simpson_weights(&b.grid);
    assert!(w.integrate(&eta).unwrap().abs() <= 1e-12);
    let l_eta = b.kernel.apply(&eta);
    let lam = b.invariant.eigenvalue;
    let embedded = r.embed(&d).unwrap();
    let f0 = b.invariant.density.values();
    // μ is the least-squares coefficient of f₀ in the residual.
    let res: Vec<f64> = eta.iter().zip(&l_eta).zip(&embedded).map(|((e, le), s)| lam * e - le - s).collect();
    let mu = -res.iter().zip(f0).map(|(a, b)| a * b).sum::<f64>() / f0.iter().map(|v| v * v).sum::<f64>();
    let worst = res.iter().zip(f0).map(|(a, f)| (a + mu * f).abs()).fold(0.0, f64::max);
    let scale = embedded.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-10 * scale, "{worst}");
}

#[test]
fn restricted_resolvent_residual() {
    let b = small();
    let c = small_config(&["resolvent=restricted"]);
    let base = Baseline::new(&c, b.kernel.clone()).unwrap();
    let solver = base.solver().unwrap();
    let r = &base.restriction;
    let m_mat = optresp_core::response::restricted_operator_matrix(&base.kernel, r).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d: Vec<f64> = (0..r.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eta = r.restrict(&solver.solve_source(&d).unwrap()).unwrap();
    let m_eta = m_mat.matvec(&eta);
    let worst = eta.iter().zip(&m_eta).zip(&d).map(|((e, me), s)| (e - me - s).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-10 * d.iter().map(|v| v.abs()).fold(0.0, f64::max), "{worst}");
}

#[test]
fn random_five_node_resolvent_matches_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let vals: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..0.18)).collect();
    let m = DenseMatrix::from_row_major(5, vals.clone()).unwrap();
    let d: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eta = resolvent_solve(&m, &d).unwrap();
    let inv = (DMatrix::identity(5, 5) - DMatrix::from_row_slice(5, 5, &vals)).try_inverse().unwrap();
    let oracle = inv * nalgebra::DVector::from_column_slice(&d);
    for (a, b) in eta.iter().zip(oracle.iter()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn response_is_linear_and_objective_flips_sign() {
    let b = small();
    let solver = b.solver().unwrap();
    let basis = b.basis().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let c1 = random_unit_vector(&mut rng, basis.len());
    let c2 = random_unit_vector(&mut rng, basis.len());
    let k1 = basis.synthesize(&c1).unwrap();
    let k2 = basis.synthesize(&c2).unwrap();
    let combo = k1.combine(2.5, &k2, -0.75).unwrap();
    let r1 = solver.response(&k1).unwrap();
    let r2 = solver.response(&k2).unwrap();
    let rc = solver.response(&combo).unwrap();
    let scale = r1.values.iter().chain(&r2.values).map(|v| v.abs()).fold(0.0, f64::max);
    for ((a, b), c) in r1.values.iter().zip(&r2.values).zip(&rc.values) {
        assert!((2.5 * a - 0.75 * b - c).abs() <= 1e-12 * scale);
    }
    let e = objective_value(&k1, &b.phi, &solver).unwrap();
    let neg = objective_value(&k1.scaled(-1.0), &b.phi, &solver).unwrap();
    assert_eq!(neg, -e);
    let zero = PerturbationKernel::zeros(b.restriction, ConstraintAxis::ZeroMeanInX);
    assert_eq!(objective_value(&zero, &b.phi, &solver).unwrap(), 0.0);
    assert!(solver.response(&zero).unwrap().values.iter().all(|v| *v == 0.0));
}

#[test]
fn constant_observable_sees_no_mass_preserving_perturbation() {
    let b = small();
    let solver = b.solver().unwrap();
    let r = b.restriction;
    let m = r.len();
    let pw = r.parent_weights();
    let length = pw.integrate(&vec![1.0; m]).unwrap();
    let nodes = r.nodes();
    let mut vals = vec![0.0; m * m];
    for i in 0..m {
        let line: Vec<f64> = nodes.iter().map(|y| (3.0 * y).sin() + y * y + nodes[i]).collect();
        let mean = pw.integrate(&line).unwrap() / length;
        for j in 0..m {
            vals[i * m + j] = line[j] - mean;
        }
    }
    let k = PerturbationKernel::new(r, vals, ConstraintAxis::ZeroMeanInY).unwrap();
    let resp = solver.response(&k).unwrap();
    // A mass-preserving perturbation leaves total mass and the Perron value unchanged.
    assert!(resp.mass().abs() <= 1e-12);
    let ones = vec![1.0; m];
    let inside = solver.pair(&ones, &resp).unwrap();
    let outside_mass = resp.mass() - resp.mass_on(&r);
    assert!((inside + outside_mass).abs() <= 1e-10, "{inside} {outside_mass}");
}

#[test]
fn jointly_odd_coefficients_vanish_in_symmetric_experiment() {
    let b = small();
    let solver = b.solver().unwrap();
    let basis = b.basis().unwrap();
    let opt = optimize(b, &solver, &basis).unwrap();
    let mut odd = 0;
    for (idx, g) in &opt.table.entries {
        if matches!(idx.kind, WaveletKind::CosSin | WaveletKind::SinCos) {
            odd += 1;
            assert!(g.abs() <= 1e-10 * opt.table.norm, "{idx:?}: {g}");
        }
    }
    assert!(odd > 0);
    // The optimum acts where the observable lives: its y-profile peaks near 0.
    let g = &opt.perturbation;
    let m = g.side();
    let nodes = b.restriction.nodes();
    let w = b.restriction.local_weights();
    let profile: Vec<f64> = (0..m).map(|j| (0..m).map(|i| w[i] * g.get(i, j).abs()).sum()).collect();
    let peak = (0..m).max_by(|x, y| profile[*x].total_cmp(&profile[*y])).unwrap();
    assert!(nodes[peak].abs() <= 0.15, "peak at {}", nodes[peak]);
}

#[test]
fn maximizing_direction_concentrates_with_batch_size() {
    // Two disjoint batches per size; the median angle between the best sample
    // and the optimum must shrink as batches grow.
    let b = small();
    let c = small_config(&["basis_i=1", "basis_j=1"]);
    let base = Baseline::new(&c, b.kernel.clone()).unwrap();
    let solver = base.solver().unwrap();
    let basis = base.basis().unwrap();
    let opt = optimize(&base, &solver, &basis).unwrap();
    let target: Vec<f64> = opt.table.coefficients().iter().map(|g| g / opt.table.norm).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut medians = Vec::new();
    for size in [4usize, 40, 400] {
        let mut angles = Vec::new();
        for _ in 0..2 * 15 {
            let best = (0..size)
                .map(|_| random_unit_vector(&mut rng, basis.len()))
                .map(|c| (objective_value(&basis.synthesize(&c).unwrap(), &base.phi, &solver).unwrap(), c))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            let cos: f64 = best.iter().zip(&target).map(|(a, b)| a * b).sum();
            angles.push(cos.clamp(-1.0, 1.0).acos());
        }
        angles.sort_by(f64::total_cmp);
        medians.push(angles[angles.len() / 2]);
    }
    assert!(medians.windows(2).all(|p| p[1] < p[0]), "{medians:?}");
}

#[test]
fn asymmetric_observable_moves_the_perturbation() {
    let c = small_config(&["observable_mean=-0.5", "samples=10", "convergence_deltas=[]"]);
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&c, KernelInput::build(&c).unwrap(), RunPlan::FIGURES, Some(dir.path()), &[]).unwrap();
    let opt = r.optimal.unwrap();
    assert!(opt.y_centre_of_mass < -0.2, "{}", opt.y_centre_of_mass);
    for f in ["fig1a_kernel.csv", "fig1b_f0.csv", "fig4b_optimal_pert.csv", "fig4c_perturbed_kernel.csv", "fig4d_densities.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("fig3b_optimal_pert.csv").exists());
    assert!(r.audits.iter().all(|a| !a.name.contains("symmetry")));
}

#[test]
fn ou_variance_matches_euler_maruyama() {
    // General-ε variance σ₀²e^{-2t} + ε²(1 - e^{-2t})/2 against simulation.
    let params = OuParams { mean0: 0.5, sd0: 0.2, time: 1.0, noise: 0.5 };
    let (samples, steps) = (100_000usize, 1000usize);
    let dt = params.time / steps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let z: f64 = rng.sample(StandardNormal);
        let mut x = params.mean0 + params.sd0 * z;
        for _ in 0..steps {
            let dw: f64 = rng.sample(StandardNormal);
            x += -x * dt + params.noise * dt.sqrt() * dw;
        }
        s1 += x;
        s2 += x * x;
    }
    let mean = s1 / samples as f64;
    let var = s2 / samples as f64 - mean * mean;
    let se_mean = (params.variance() / samples as f64).sqrt();
    let se_var = params.variance() * (2.0 / samples as f64).sqrt();
    // Euler–Maruyama biases the variance by O(dt).
    assert!((mean - params.mean()).abs() <= 5.0 * se_mean, "{mean} vs {}", params.mean());
    assert!((var - params.variance()).abs() <= 5.0 * se_var + dt * params.variance(), "{var} vs {}", params.variance());
}

#[test]
fn simpson_integrates_gaussian_pdf_to_erf_accuracy() {
    let grid = UniformGrid::new(2.0, 2000).unwrap();
    let r = SubgridRestriction::new(&grid, 0.3).unwrap();
    let vals: Vec<f64> = r.nodes().iter().map(|&y| gaussian_pdf(y, 0.0, 0.1)).collect();
    let got = r.local_weights().integrate(&vals).unwrap();
    let exact = statrs::function::erf::erf(r.half_width() / (0.1 * std::f64::consts::SQRT_2));
    assert!((got - exact).abs() <= 1e-8, "{got} vs {exact}");
}

#[test]
fn schemes_agree_on_the_optimum_sign_convention() {
    // Both schemes maximise ⟨φ, R⟩, so both optima have positive objective.
    let b = small();
    for scheme in ["full", "restricted"] {
        let c = small_config(&[&format!("resolvent={scheme}")]);
        let base = Baseline::new(&c, b.kernel.clone()).unwrap();
        let solver = base.solver().unwrap();
        assert_eq!(solver.scheme(), if scheme == "full" { ResolventScheme::Full } else { ResolventScheme::Restricted });
        let opt = optimize(&base, &solver, &base.basis().unwrap()).unwrap();
        assert!(opt.objective > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_preserves_mass_and_contracts(seed in any::<u64>()) {
        let b = small();
        let w = simpson_weights(&b.grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..b.grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lf = b.kernel.apply(&f);
        let l1 = |v: &[f64]| w.integrate(&v.iter().map(|x| x.abs()).collect::<Vec<_>>()).unwrap();
        let dev = b.kernel.max_row_mass_deviation();
        prop_assert!((w.integrate(&lf).unwrap() - w.integrate(&f).unwrap()).abs() <= dev * l1(&f) + 1e-14);
        prop_assert!(l1(&lf) <= (1.0 + dev) * l1(&f) + 1e-14);
    }

    #[test]
    fn mass_preserved_iff_lines_balanced(line in 0usize..20, bump in prop::sample::select(vec![0.0, 0.5, -2.0])) {
        let b = small();
        let r = b.restriction;
        let m = r.len();
        let pw = r.parent_weights();
        let length = pw.integrate(&vec![1.0; m]).unwrap();
        let nodes = r.nodes();
        let mut vals = vec![0.0; m * m];
        for i in 0..m {
            let l: Vec<f64> = nodes.iter().map(|y| (2.0 * y + nodes[i]).cos()).collect();
            let mean = pw.integrate(&l).unwrap() / length;
            for j in 0..m {
                vals[i * m + j] = l[j] - mean + if i == line * m / 20 { bump } else { 0.0 };
            }
        }
        let k = PerturbationKernel::unconstrained(r, vals, ConstraintAxis::ZeroMeanInY).unwrap();
        let balanced = k.constraint_defect() <= 1e-12;
        prop_assert_eq!(balanced, bump == 0.0);
        let op = optresp_core::response::perturb_kernel(&b.kernel, &k, 0.3).unwrap();
        let change = op.audit().max_row_mass_change;
        if balanced {
            prop_assert!(change <= 1e-12);
        } else {
            prop_assert!(change > 1e-3);
        }
    }
}
