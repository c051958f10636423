//! File loaders. Every error names the file and the offending field.

use std::path::Path;

use nalgebra::DVector;
use safechain::invariant::InvariantSetResult;
use safechain::markov::{Graph, MarkovChain, MarkovError, MatrixJson, STOCHASTIC_TOL};
use safechain::polytope::Polyhedron;
use serde::de::DeserializeOwned;

use crate::CliError;

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

pub fn parse<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T, CliError> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn chain(path: &Path, bytes: &[u8], transpose: bool) -> Result<MarkovChain, CliError> {
    let raw: MatrixJson = parse(path, bytes)?;
    let m = raw.to_matrix(transpose).map_err(|e| {
        let (field, hint) = match e {
            MarkovError::Convention(_) => ("convention", " (use --transpose)"),
            _ => ("M", ""),
        };
        CliError::Input(format!("{}: field \"{field}\": {e}{hint}", path.display()))
    })?;
    MarkovChain::new(m, STOCHASTIC_TOL).map_err(|e| CliError::Input(format!("{}: field \"M\": {e}", path.display())))
}

pub fn polyhedron(path: &Path, bytes: &[u8]) -> Result<Polyhedron, CliError> {
    parse(path, bytes)
}

pub fn graph(path: &Path, bytes: &[u8]) -> Result<Graph, CliError> {
    parse(path, bytes)
}

pub fn invariant_result(path: &Path, bytes: &[u8]) -> Result<InvariantSetResult, CliError> {
    // Accept either a bare result or an artifact envelope around one.
    let value: serde_json::Value = parse(path, bytes)?;
    let inner = value.get("result").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// A distribution argument: `uniform`, or a JSON array file.
pub enum DistSource {
    Uniform,
    File(std::path::PathBuf, Vec<u8>),
}

impl DistSource {
    pub fn from_arg(arg: &str) -> Result<Self, CliError> {
        if arg == "uniform" {
            return Ok(Self::Uniform);
        }
        let p = std::path::PathBuf::from(arg);
        let bytes = read(&p)?;
        Ok(Self::File(p, bytes))
    }

    pub fn bytes(&self) -> &[u8] {
        match self {
            Self::Uniform => b"uniform",
            Self::File(_, b) => b,
        }
    }

    pub fn resolve(&self, n: usize) -> Result<DVector<f64>, CliError> {
        match self {
            Self::Uniform => Ok(DVector::from_element(n, 1.0 / n as f64)),
            Self::File(p, b) => {
                let v: Vec<f64> = parse(p, b)?;
                if v.len() != n {
                    return Err(CliError::Input(format!(
                        "{}: distribution has {} entries, expected {n}",
                        p.display(),
                        v.len()
                    )));
                }
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(CliError::Input(format!("{}: entry {i} is not finite", p.display())));
                }
                Ok(DVector::from_vec(v))
            }
        }
    }
}
