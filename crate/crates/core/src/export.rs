//! CSV and JSON writers for run artifacts. Floats are printed in Rust's
//! shortest round-trip form, so identical numbers give identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::UniformGrid;
use crate::response::PerturbationKernel;

pub const KERNEL_CSV: &str = "fig1a_kernel.csv";
pub const F0_CSV: &str = "fig1b_f0.csv";
pub const COEFFICIENTS_CSV: &str = "coefficients.csv";
pub const OPTIMAL_JSON: &str = "optimal_pert.json";
pub const RESPONSE_CSV: &str = "response.csv";
pub const CONVERGENCE_CSV: &str = "convergence.csv";
pub const REPORT_JSON: &str = "report.json";

/// Figure-3 files for a symmetric observable, figure-4 files otherwise.
pub fn figure_names(symmetric: bool) -> [String; 3] {
    let fig = if symmetric { "fig3" } else { "fig4" };
    [format!("{fig}b_optimal_pert.csv"), format!("{fig}c_perturbed_kernel.csv"), format!("{fig}d_densities.csv")]
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Long-format `x,y,<value>` dump of a square grid function.
pub fn write_grid_function(path: &Path, xs: &[f64], ys: &[f64], value_name: &str, value: impl Fn(usize, usize) -> f64) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "x,y,{value_name}")?;
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            writeln!(out, "{x},{y},{}", value(i, j))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_perturbation(path: &Path, kernel: &PerturbationKernel, value_name: &str) -> Result<()> {
    let nodes = kernel.restriction().nodes();
    write_grid_function(path, &nodes, &nodes, value_name, |i, j| kernel.get(i, j))
}

/// Named columns sampled on the nodes of `grid`, first column `x`.
pub fn write_columns(path: &Path, grid: &UniformGrid, columns: &[(&str, &[f64])]) -> Result<()> {
    for (name, col) in columns {
        if col.len() != grid.len() {
            return Err(Error::config(*name, format!("column has {} entries, grid has {}", col.len(), grid.len())));
        }
    }
    let mut out = create(path)?;
    write!(out, "x")?;
    for (name, _) in columns {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for (i, x) in grid.nodes().iter().enumerate() {
        write!(out, "{x}")?;
        for (_, col) in columns {
            write!(out, ",{}", col[i])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_and_grid_functions() {
        let dir = tempfile::tempdir().unwrap();
        let g = UniformGrid::new(1.0, 2).unwrap();
        let p = dir.path().join("sub/c.csv");
        write_columns(&p, &g, &[("f", &[1.0, 2.0, 0.5])]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "x,f\n-1,1\n0,2\n1,0.5\n");
        assert!(write_columns(&p, &g, &[("f", &[1.0])]).is_err());
        let q = dir.path().join("k.csv");
        write_grid_function(&q, &[0.0, 1.0], &[2.0], "kappa", |i, j| (i + j) as f64).unwrap();
        assert_eq!(std::fs::read_to_string(&q).unwrap(), "x,y,kappa\n0,2,0\n1,2,1\n");
    }

    #[test]
    fn figure_file_names() {
        assert_eq!(figure_names(true)[0], "fig3b_optimal_pert.csv");
        assert_eq!(figure_names(false)[2], "fig4d_densities.csv");
    }
}
