//! Experiment configuration: a flat TOML table, every key optional, with
//! `key=value` overrides applied on top. Defaults describe the symmetric
//! double-well experiment on the coarse mesh.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::fpe::{default_dirac_sigma, Potential, PotentialSpec};
use crate::mesh::{SubgridRestriction, TimeGrid, UniformGrid};
use crate::optimal::ObservableSpec;
use crate::response::{ConstraintAxis, ResolventScheme};
use crate::transfer::{KernelSpec, PowerIterationOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    DoubleWell,
    Quadratic,
    Tabulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableKind {
    GaussianPdf,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub potential: PotentialKind,
    /// `κ` in `V = κ y²/2` for `potential = "quadratic"`.
    pub potential_curvature: f64,
    /// Abscissae and `V'` values for `potential = "tabulated"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub potential_nodes: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub potential_derivative: Option<Vec<f64>>,
    /// Noise amplitude ε.
    pub epsilon: f64,
    /// Flow time T of one transfer step.
    pub final_time: f64,
    /// Ω = [-a, a].
    pub half_width: f64,
    /// D = [-d, d], snapped to the nearest symmetric node pair.
    pub domain_half_width: f64,
    /// Spatial intervals on Ω (even).
    pub n: usize,
    /// Time steps on [0, T].
    pub m: usize,
    /// Width of the Gaussian replacing the Dirac initial condition; 100 Δx when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dirac_sigma: Option<f64>,
    pub basis_i: usize,
    pub basis_j: usize,
    /// Perturbation sizes; a scalar is accepted as a one-element list.
    #[serde(deserialize_with = "scalar_or_list")]
    pub delta: Vec<f64>,
    /// δ schedule of the linear-response convergence audit; may be empty.
    #[serde(deserialize_with = "scalar_or_list")]
    pub convergence_deltas: Vec<f64>,
    pub observable: ObservableKind,
    pub observable_mean: f64,
    pub observable_sd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observable_nodes: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observable_values: Option<Vec<f64>>,
    pub constraint_axis: ConstraintAxis,
    pub resolvent: ResolventScheme,
    pub seed: u64,
    /// Random span elements drawn by the optimality audit.
    pub samples: usize,
    /// Exponent of the weight `(1 + x²)^{α/2}` in the weighted L¹ norm.
    pub alpha: f64,
    pub output_dir: String,

    pub tol_eigen_residual: f64,
    pub max_iterations: usize,
    pub tol_row_mass: f64,
    /// Most negative kernel entry accepted.
    pub tol_negative_entry: f64,
    pub condition_limit: f64,
    pub tol_symmetry_f0: f64,
    pub tol_symmetry_fdelta: f64,
    pub tol_zero_mean: f64,
    pub tol_unit_norm: f64,
    /// Relative mismatch between objective(g) and ‖G‖₂.
    pub tol_objective: f64,
    /// Slack allowed above objective(g) for sampled span elements.
    pub tol_optimality: f64,
    pub tol_mass: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            potential: PotentialKind::DoubleWell,
            potential_curvature: 1.0,
            potential_nodes: None,
            potential_derivative: None,
            epsilon: 0.25,
            final_time: 1.0,
            half_width: 2.0,
            domain_half_width: 1.2,
            n: 500,
            m: 500,
            dirac_sigma: None,
            basis_i: 35,
            basis_j: 35,
            delta: vec![0.5],
            convergence_deltas: vec![0.4, 0.2, 0.1, 0.05],
            observable: ObservableKind::GaussianPdf,
            observable_mean: 0.0,
            observable_sd: 0.1,
            observable_nodes: None,
            observable_values: None,
            constraint_axis: ConstraintAxis::ZeroMeanInX,
            resolvent: ResolventScheme::Full,
            seed: 20_240_917,
            samples: 1000,
            alpha: 2.0,
            output_dir: "out".into(),
            tol_eigen_residual: 1e-10,
            max_iterations: 2_000_000,
            tol_row_mass: 1e-2,
            tol_negative_entry: 1e-8,
            condition_limit: 1e12,
            tol_symmetry_f0: 1e-6,
            tol_symmetry_fdelta: 1e-4,
            tol_zero_mean: 1e-8,
            tol_unit_norm: 1e-6,
            tol_objective: 1e-8,
            tol_optimality: 1e-9,
            tol_mass: 1e-8,
        }
    }
}

fn scalar_or_list<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|s| !s.is_empty() && !s.contains(' '))
        .unwrap_or("config")
        .to_string();
    Error::config(field, msg.trim().replace('\n', " "))
}

/// Parses the optional config file, applies `key=value` overrides in order
/// and validates the result.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(toml_error)?;
    for ov in overrides {
        let (key, value) = ov
            .split_once('=')
            .ok_or_else(|| Error::config(ov.as_str(), "override must have the form key=value"))?;
        let key = key.trim();
        let value = value.trim();
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
    }
    let config: ExperimentConfig = toml::Value::Table(table).try_into().map_err(toml_error)?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Checks every precondition the pipeline relies on, before any compute.
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive and finite, got {v}")))
            }
        };
        positive("epsilon", self.epsilon)?;
        positive("final_time", self.final_time)?;
        positive("half_width", self.half_width)?;
        positive("domain_half_width", self.domain_half_width)?;
        if let Some(s) = self.dirac_sigma {
            positive("dirac_sigma", s)?;
        }
        let grid = self.grid()?;
        self.time()?;
        let restriction = self.restriction()?;
        self.potential_spec()?;
        if self.basis_i == 0 {
            return Err(Error::config("basis_i", "I must be at least 1"));
        }
        // Simpson integrates products of the factors exactly only below the
        // Nyquist-type limit, which is what keeps the basis orthogonal.
        let limit = restriction.intervals() / 4;
        for (field, v) in [("basis_i", self.basis_i), ("basis_j", self.basis_j)] {
            if v >= limit {
                return Err(Error::config(field, format!("frequency {v} must stay below n_D/4 = {limit}; refine n or shrink the basis")));
            }
        }
        for (field, list) in [("delta", &self.delta), ("convergence_deltas", &self.convergence_deltas)] {
            if let Some(d) = list.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
                return Err(Error::config(field, format!("perturbation sizes must be finite and nonnegative, got {d}")));
            }
        }
        if self.delta.is_empty() {
            return Err(Error::config("delta", "at least one perturbation size is required"));
        }
        if self.observable == ObservableKind::GaussianPdf {
            positive("observable_sd", self.observable_sd)?;
            if !self.observable_mean.is_finite() {
                return Err(Error::config("observable_mean", "must be finite"));
            }
        }
        self.observable_spec()?.sample(&restriction)?;
        if self.samples == 0 {
            return Err(Error::config("samples", "must be at least 1"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("alpha", "must be finite and nonnegative"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations", "must be at least 1"));
        }
        for (field, v) in [
            ("tol_eigen_residual", self.tol_eigen_residual),
            ("tol_row_mass", self.tol_row_mass),
            ("tol_negative_entry", self.tol_negative_entry),
            ("condition_limit", self.condition_limit),
            ("tol_symmetry_f0", self.tol_symmetry_f0),
            ("tol_symmetry_fdelta", self.tol_symmetry_fdelta),
            ("tol_zero_mean", self.tol_zero_mean),
            ("tol_unit_norm", self.tol_unit_norm),
            ("tol_objective", self.tol_objective),
            ("tol_optimality", self.tol_optimality),
            ("tol_mass", self.tol_mass),
        ] {
            positive(field, v)?;
        }
        if self.output_dir.is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        let _ = grid;
        Ok(())
    }

    pub fn grid(&self) -> Result<UniformGrid> {
        UniformGrid::new(self.half_width, self.n).map_err(|e| match e {
            Error::Config { field, reason } if field == "a" => Error::config("half_width", reason),
            other => other,
        })
    }

    pub fn time(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.final_time, self.m)
    }

    pub fn restriction(&self) -> Result<SubgridRestriction> {
        SubgridRestriction::new(&self.grid()?, self.domain_half_width).map_err(|e| match e {
            Error::Config { reason, .. } => Error::config("domain_half_width", reason),
            other => other,
        })
    }

    pub fn potential_spec(&self) -> Result<PotentialSpec> {
        let potential = match self.potential {
            PotentialKind::DoubleWell => Potential::DoubleWell,
            PotentialKind::Quadratic => {
                if !self.potential_curvature.is_finite() {
                    return Err(Error::config("potential_curvature", "must be finite"));
                }
                Potential::Quadratic { curvature: self.potential_curvature }
            }
            PotentialKind::Tabulated => {
                let nodes = self.potential_nodes.clone().ok_or_else(|| Error::config("potential_nodes", "required for a tabulated potential"))?;
                let derivative = self
                    .potential_derivative
                    .clone()
                    .ok_or_else(|| Error::config("potential_derivative", "required for a tabulated potential"))?;
                if nodes.len() < 2 || nodes.len() != derivative.len() || nodes.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::config("potential_nodes", "need at least two strictly increasing nodes, one derivative value each"));
                }
                Potential::Tabulated { nodes, derivative }
            }
        };
        PotentialSpec::new(potential, self.epsilon)
    }

    pub fn observable_spec(&self) -> Result<ObservableSpec> {
        Ok(match self.observable {
            ObservableKind::GaussianPdf => ObservableSpec::GaussianPdf { mean: self.observable_mean, sd: self.observable_sd },
            ObservableKind::Tabulated => {
                let nodes = self.observable_nodes.clone().ok_or_else(|| Error::config("observable_nodes", "required for a tabulated observable"))?;
                let values = self
                    .observable_values
                    .clone()
                    .ok_or_else(|| Error::config("observable_values", "required for a tabulated observable"))?;
                if nodes.is_empty() || nodes.len() != values.len() || nodes.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::config("observable_nodes", "need strictly increasing nodes, one value each"));
                }
                ObservableSpec::Tabulated { nodes, values }
            }
        })
    }

    pub fn dirac_sigma(&self) -> Result<f64> {
        Ok(self.dirac_sigma.unwrap_or(default_dirac_sigma(&self.grid()?)))
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        Ok(KernelSpec { potential: self.potential_spec()?, grid: self.grid()?, time: self.time()?, dirac_sigma: self.dirac_sigma()? })
    }

    pub fn power_options(&self) -> PowerIterationOptions {
        PowerIterationOptions { tolerance: self.tol_eigen_residual, max_iterations: self.max_iterations }
    }

    /// Whether reflection `x ↦ -x` is a symmetry of the whole experiment.
    pub fn is_symmetric(&self) -> bool {
        self.potential != PotentialKind::Tabulated && self.observable == ObservableKind::GaussianPdf && self.observable_mean == 0.0
    }
}
