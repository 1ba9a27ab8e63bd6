//! Plain-text tensor files.
//!
//! Each tensor is written as a header line `name d0 d1 ...` followed by one
//! line of whitespace-separated values in row-major order. Values use 17
//! significant digits so that reading a file back is bit-exact.

use std::fmt::Write as _;

use crate::{NnError, Parameterized, Tensor};

pub fn write_tensors<'a, I>(tensors: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut out = String::new();
    for (name, t) in tensors {
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "tensor names must be single tokens"
        );
        out.push_str(name);
        for d in t.shape() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let mut first = true;
        for v in t.data() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn read_tensors(text: &str) -> Result<Vec<(String, Tensor)>, NnError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    while let Some(header) = lines.next() {
        let mut parts = header.split_whitespace();
        let name = parts.next().expect("non-empty line").to_string();
        let shape = parts
            .map(|p| p.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NnError::Format(format!("bad shape for {name}: {e}")))?;
        let body = lines
            .next()
            .ok_or_else(|| NnError::Format(format!("missing values for {name}")))?;
        let values = body
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NnError::Format(format!("bad value in {name}: {e}")))?;
        let t = Tensor::new(shape, values).map_err(|e| NnError::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Serializes all parameters of a model as `p0`, `p1`, ...
pub fn save_params<P: Parameterized + ?Sized>(model: &P) -> String {
    let params = model.parameters();
    let names: Vec<String> = (0..params.len()).map(|i| format!("p{i}")).collect();
    write_tensors(names.iter().map(String::as_str).zip(params))
}

/// Loads parameters written by [`save_params`] into a model of the same
/// architecture.
pub fn load_params<P: Parameterized + ?Sized>(model: &mut P, text: &str) -> Result<(), NnError> {
    let tensors = read_tensors(text)?;
    let mut params = model.parameters_mut();
    if tensors.len() != params.len() {
        return Err(NnError::Format(format!(
            "expected {} tensors, found {}",
            params.len(),
            tensors.len()
        )));
    }
    for (p, (name, t)) in params.iter_mut().zip(tensors) {
        if p.shape() != t.shape() {
            return Err(NnError::Format(format!(
                "{name}: shape {:?} does not match model {:?}",
                t.shape(),
                p.shape()
            )));
        }
        p.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
