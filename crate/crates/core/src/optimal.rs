//! Sine-cosine wavelet basis of `L²(D × D)` without the `i = 0` x-modes,
//! response coefficients `G_r = ⟨φ, R(h_r)⟩` and the optimal unit-norm
//! perturbation `g = Σ G_r h_r / ‖G‖₂`.
//!
//! Every element is a tensor product `X(x) Y(y)` of 1-D trigonometric
//! factors, each normalised to unit discrete norm under D's Simpson rule, so
//! the elements have unit tensor-Simpson norm exactly. They are mutually
//! orthogonal as long as twice the largest frequency stays below `n_1 / 2`
//! (Simpson integrates those trigonometric products exactly).

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpe::gaussian_pdf;
use crate::mesh::SubgridRestriction;
use crate::response::{ConstraintAxis, PerturbationKernel, ResponseSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WaveletKind {
    #[serde(rename = "cc")]
    CosCos,
    #[serde(rename = "cs")]
    CosSin,
    #[serde(rename = "sc")]
    SinCos,
    #[serde(rename = "ss")]
    SinSin,
}

impl WaveletKind {
    pub const ALL: [WaveletKind; 4] = [WaveletKind::CosCos, WaveletKind::CosSin, WaveletKind::SinCos, WaveletKind::SinSin];

    pub fn label(self) -> &'static str {
        match self {
            WaveletKind::CosCos => "cc",
            WaveletKind::CosSin => "cs",
            WaveletKind::SinCos => "sc",
            WaveletKind::SinSin => "ss",
        }
    }

    fn x_is_sin(self) -> bool {
        matches!(self, WaveletKind::SinCos | WaveletKind::SinSin)
    }

    fn y_is_sin(self) -> bool {
        matches!(self, WaveletKind::CosSin | WaveletKind::SinSin)
    }
}

/// `(i, j, kind)`: x-frequency `i ≥ 1`, y-frequency `j ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WaveletIndex {
    pub i: usize,
    pub j: usize,
    pub kind: WaveletKind,
}

impl WaveletIndex {
    pub fn new(i: usize, j: usize, kind: WaveletKind) -> Result<Self> {
        if i == 0 {
            return Err(Error::config("basis_i", "x-frequency 0 is excluded from the basis"));
        }
        if j == 0 && kind.y_is_sin() {
            return Err(Error::config("basis_j", "sin(0·y) elements vanish identically"));
        }
        Ok(Self { i, j, kind })
    }
}

/// All legal indices with `1 ≤ i ≤ I`, `0 ≤ j ≤ J`, ordered by i, then j,
/// then kind.
pub fn enumerate_basis(max_i: usize, max_j: usize) -> Result<Vec<WaveletIndex>> {
    if max_i == 0 {
        return Err(Error::config("basis_i", "I must be at least 1"));
    }
    let mut out = Vec::with_capacity(max_i * (2 + 4 * max_j));
    for i in 1..=max_i {
        for j in 0..=max_j {
            for kind in WaveletKind::ALL {
                if j == 0 && kind.y_is_sin() {
                    continue;
                }
                out.push(WaveletIndex { i, j, kind });
            }
        }
    }
    Ok(out)
}

/// Unnormalised element `trig(iπx/d) · trig(jπy/d)`.
pub fn eval_wavelet_raw(idx: &WaveletIndex, x: f64, y: f64, d: f64) -> f64 {
    trig(idx.kind.x_is_sin(), idx.i, x, d) * trig(idx.kind.y_is_sin(), idx.j, y, d)
}

fn trig(sin: bool, k: usize, t: f64, d: f64) -> f64 {
    let arg = k as f64 * PI * t / d;
    if sin {
        arg.sin()
    } else {
        arg.cos()
    }
}

/// Truncated basis `B_{I,J}` sampled on the D-nodes.
#[derive(Debug, Clone)]
pub struct WaveletBasis {
    restriction: SubgridRestriction,
    max_i: usize,
    max_j: usize,
    indices: Vec<WaveletIndex>,
    /// Normalised x-factors, `2 (i-1) + (sin as usize)`.
    x_factors: Vec<Vec<f64>>,
    x_norms: Vec<f64>,
    /// Normalised y-factors: slot 0 is `cos(0)`, then `2 j - 1` (cos) and `2 j` (sin).
    y_factors: Vec<Vec<f64>>,
    y_norms: Vec<f64>,
}

impl WaveletBasis {
    pub fn new(restriction: SubgridRestriction, max_i: usize, max_j: usize) -> Result<Self> {
        let indices = enumerate_basis(max_i, max_j)?;
        let d = restriction.half_width();
        let nodes = restriction.nodes();
        let w = restriction.local_weights();
        let factor = |sin: bool, k: usize| -> (Vec<f64>, f64) {
            let raw: Vec<f64> = nodes.iter().map(|&t| trig(sin, k, t, d)).collect();
            let norm = w.dot(&raw.iter().map(|v| v * v).collect::<Vec<_>>()).sqrt();
            (raw.into_iter().map(|v| v / norm).collect(), norm)
        };
        let mut x_factors = Vec::new();
        let mut x_norms = Vec::new();
        for i in 1..=max_i {
            for sin in [false, true] {
                let (f, n) = factor(sin, i);
                x_factors.push(f);
                x_norms.push(n);
            }
        }
        let mut y_factors = Vec::new();
        let mut y_norms = Vec::new();
        let (f, n) = factor(false, 0);
        y_factors.push(f);
        y_norms.push(n);
        for j in 1..=max_j {
            for sin in [false, true] {
                let (f, n) = factor(sin, j);
                y_factors.push(f);
                y_norms.push(n);
            }
        }
        if x_norms.iter().chain(&y_norms).any(|n| !(n.is_finite() && *n > 0.0)) {
            return Err(Error::config("basis_i", "a basis factor vanishes on the D-grid; refine the mesh"));
        }
        Ok(Self { restriction, max_i, max_j, indices, x_factors, x_norms, y_factors, y_norms })
    }

    pub fn restriction(&self) -> &SubgridRestriction {
        &self.restriction
    }

    pub fn indices(&self) -> &[WaveletIndex] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_frequencies(&self) -> (usize, usize) {
        (self.max_i, self.max_j)
    }

    fn x_slot(idx: &WaveletIndex) -> usize {
        2 * (idx.i - 1) + idx.kind.x_is_sin() as usize
    }

    fn y_slot(idx: &WaveletIndex) -> usize {
        if idx.j == 0 {
            0
        } else {
            2 * idx.j - 1 + idx.kind.y_is_sin() as usize
        }
    }

    fn check(&self, idx: &WaveletIndex) -> Result<()> {
        if idx.i == 0 || idx.i > self.max_i || idx.j > self.max_j || (idx.j == 0 && idx.kind.y_is_sin()) {
            return Err(Error::config("wavelet", format!("{idx:?} is not in B_{{{},{}}}", self.max_i, self.max_j)));
        }
        Ok(())
    }

    /// Factor making the element's discrete L²(D × D) norm exactly one.
    pub fn normalizer(&self, idx: &WaveletIndex) -> Result<f64> {
        self.check(idx)?;
        Ok(1.0 / (self.x_norms[Self::x_slot(idx)] * self.y_norms[Self::y_slot(idx)]))
    }

    /// Normalised element at an arbitrary point of `D × D`.
    pub fn eval(&self, idx: &WaveletIndex, x: f64, y: f64) -> Result<f64> {
        let d = self.restriction.half_width();
        if x.abs() > d * (1.0 + 1e-12) || y.abs() > d * (1.0 + 1e-12) {
            return Err(Error::config("wavelet", format!("({x}, {y}) lies outside D × D")));
        }
        Ok(self.normalizer(idx)? * eval_wavelet_raw(idx, x, y, d))
    }

    /// Grid samples of one element.
    pub fn element(&self, idx: &WaveletIndex) -> Result<PerturbationKernel> {
        self.check(idx)?;
        let xf = &self.x_factors[Self::x_slot(idx)];
        let yf = &self.y_factors[Self::y_slot(idx)];
        let values = xf.iter().flat_map(|a| yf.iter().map(move |b| a * b)).collect();
        PerturbationKernel::unconstrained(self.restriction, values, ConstraintAxis::ZeroMeanInX)
    }

    /// `Σ_r c_r h_r` on the grid, in `indices()` order.
    pub fn synthesize(&self, coefficients: &[f64]) -> Result<PerturbationKernel> {
        if coefficients.len() != self.len() {
            return Err(Error::shape("basis coefficients", self.len(), coefficients.len()));
        }
        let nx = self.x_factors.len();
        let ny = self.y_factors.len();
        let mut c = vec![0.0; nx * ny];
        for (idx, v) in self.indices.iter().zip(coefficients) {
            c[Self::x_slot(idx) * ny + Self::y_slot(idx)] += v;
        }
        let m = self.restriction.len();
        // t[k][b] = Σ_a X_a(x_k) c_ab
        let mut t = vec![0.0; m * ny];
        for (a, xf) in self.x_factors.iter().enumerate() {
            let crow = &c[a * ny..(a + 1) * ny];
            if crow.iter().all(|v| *v == 0.0) {
                continue;
            }
            for k in 0..m {
                let xv = xf[k];
                for (tv, cv) in t[k * ny..(k + 1) * ny].iter_mut().zip(crow) {
                    *tv += xv * cv;
                }
            }
        }
        let mut values = vec![0.0; m * m];
        values.par_chunks_mut(m).enumerate().for_each(|(k, row)| {
            for (b, yf) in self.y_factors.iter().enumerate() {
                let tv = t[k * ny + b];
                if tv == 0.0 {
                    continue;
                }
                for (r, y) in row.iter_mut().zip(yf) {
                    *r += tv * y;
                }
            }
        });
        PerturbationKernel::unconstrained(self.restriction, values, ConstraintAxis::ZeroMeanInX)
    }
}

/// Observable `φ`, evaluated on the D-nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservableSpec {
    GaussianPdf { mean: f64, sd: f64 },
    /// Linear interpolation of `(nodes, values)`, constant beyond the ends.
    Tabulated { nodes: Vec<f64>, values: Vec<f64> },
}

impl ObservableSpec {
    pub fn eval(&self, y: f64) -> f64 {
        match self {
            ObservableSpec::GaussianPdf { mean, sd } => gaussian_pdf(y, *mean, *sd),
            ObservableSpec::Tabulated { nodes, values } => {
                if nodes.is_empty() || nodes.len() != values.len() {
                    return f64::NAN;
                }
                let k = nodes.partition_point(|&v| v <= y);
                if k == 0 {
                    values[0]
                } else if k == nodes.len() {
                    values[k - 1]
                } else {
                    let (x0, x1) = (nodes[k - 1], nodes[k]);
                    values[k - 1] + (values[k] - values[k - 1]) * (y - x0) / (x1 - x0)
                }
            }
        }
    }

    pub fn sample(&self, restriction: &SubgridRestriction) -> Result<Vec<f64>> {
        let v: Vec<f64> = restriction.nodes().iter().map(|&y| self.eval(y)).collect();
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::config("observable", format!("non-finite observable at D-node {k}")));
        }
        Ok(v)
    }

    /// Whether `φ(y) = φ(-y)`.
    pub fn is_even(&self) -> bool {
        match self {
            ObservableSpec::GaussianPdf { mean, .. } => *mean == 0.0,
            ObservableSpec::Tabulated { .. } => false,
        }
    }
}

/// `(index, G_r)` pairs covering a whole basis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientTable {
    pub entries: Vec<(WaveletIndex, f64)>,
    pub norm: f64,
}

impl CoefficientTable {
    pub fn from_entries(entries: Vec<(WaveletIndex, f64)>) -> Result<Self> {
        if let Some((idx, _)) = entries.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite response coefficient for {idx:?}")));
        }
        let norm = entries.iter().map(|(_, g)| g * g).sum::<f64>().sqrt();
        Ok(Self { entries, norm })
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, g)| *g).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "i,j,kind,G_r")?;
        for (idx, g) in &self.entries {
            writeln!(out, "{},{},{},{}", idx.i, idx.j, idx.kind.label(), g)?;
        }
        Ok(())
    }
}

/// `G_r = ⟨φ, R(h_r)⟩`.
pub fn coefficient(basis: &WaveletBasis, idx: &WaveletIndex, phi: &[f64], solver: &ResponseSolver) -> Result<f64> {
    solver.expectation_rate(phi, &basis.element(idx)?)
}

/// All coefficients, computed in parallel against the shared factorisation.
pub fn coefficient_table(basis: &WaveletBasis, phi: &[f64], solver: &ResponseSolver) -> Result<CoefficientTable> {
    let entries = basis
        .indices()
        .par_iter()
        .map(|idx| coefficient(basis, idx, phi, solver).map(|g| (*idx, g)))
        .collect::<Result<Vec<_>>>()?;
    CoefficientTable::from_entries(entries)
}

/// `g_{I,J} = Σ G_r h_r / ‖G‖₂`.
pub fn assemble_optimal(table: &CoefficientTable, basis: &WaveletBasis) -> Result<PerturbationKernel> {
    if table.entries.len() != basis.len() || table.entries.iter().zip(basis.indices()).any(|((a, _), b)| a != b) {
        return Err(Error::config("coefficients", "table does not cover the basis in order"));
    }
    if !(table.norm > 0.0) {
        return Err(Error::DegenerateObjective);
    }
    let scaled: Vec<f64> = table.entries.iter().map(|(_, g)| g / table.norm).collect();
    let g = basis.synthesize(&scaled)?;
    PerturbationKernel::new(*basis.restriction(), g.values().to_vec(), ConstraintAxis::ZeroMeanInX)
}

/// `⟨φ, R(κ̇)⟩`, the quantity being maximised.
pub fn objective_value(kernel: &PerturbationKernel, phi: &[f64], solver: &ResponseSolver) -> Result<f64> {
    solver.expectation_rate(phi, kernel)
}
