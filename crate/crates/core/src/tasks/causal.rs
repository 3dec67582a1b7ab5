// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::TaskInstance;
use crate::error::{Error, Result};

pub type Value = i64;

type Equation = Arc<dyn Fn(&[Value]) -> Value + Send + Sync>;

/// One variable: an input read from instance metadata, or a function of its parents.
#[derive(Clone)]
pub struct CausalVariable {
    pub name: String,
    pub parents: Vec<String>,
    equation: Option<Equation>,
}

impl fmt::Debug for CausalVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CausalVariable")
            .field("name", &self.name)
            .field("parents", &self.parents)
            .field("input", &self.equation.is_none())
            .finish()
    }
}

impl CausalVariable {
    /// Variable whose value is the instance metadata field of the same name.
    pub fn input(name: &str) -> Self {
        Self {
            name: name.into(),
            parents: Vec::new(),
            equation: None,
        }
    }

    pub fn derived(name: &str, parents: &[&str], f: impl Fn(&[Value]) -> Value + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            parents: parents.iter().map(|p| p.to_string()).collect(),
            equation: Some(Arc::new(f)),
        }
    }
}

/// Structural equations over named integer variables, in topological order.
///
/// The output variable's value is the answer token id.
#[derive(Clone, Debug)]
pub struct HighLevelCausalModel {
    variables: Vec<CausalVariable>,
    output: String,
}

impl HighLevelCausalModel {
    pub fn new(variables: Vec<CausalVariable>, output: &str) -> Result<Self> {
        let mut seen: Vec<&str> = Vec::new();
        for v in &variables {
            if seen.contains(&v.name.as_str()) {
                return Err(Error::invalid(format!("duplicate causal variable {}", v.name)));
            }
            if let Some(p) = v.parents.iter().find(|p| !seen.contains(&p.as_str())) {
                return Err(Error::invalid(format!("variable {} reads {p} before it is defined", v.name)));
            }
            seen.push(&v.name);
        }
        if !seen.contains(&output) {
            return Err(Error::invalid(format!("output variable {output} is not defined")));
        }
        Ok(Self {
            variables,
            output: output.into(),
        })
    }

    pub fn variables(&self) -> impl Iterator<Item = &str> {
        self.variables.iter().map(|v| v.name.as_str())
    }

    pub fn has_variable(&self, name: &str) -> bool {
        self.variables.iter().any(|v| v.name == name)
    }

    pub fn output(&self) -> &str {
        &self.output
    }

    /// Evaluates every variable, with `fixed` values overriding their equations.
    pub fn run(&self, inst: &TaskInstance, fixed: &BTreeMap<String, Value>) -> Result<BTreeMap<String, Value>> {
        if let Some(k) = fixed.keys().find(|k| !self.has_variable(k)) {
            return Err(Error::invalid(format!("undefined causal variable {k}")));
        }
        let mut vals: BTreeMap<String, Value> = BTreeMap::new();
        for v in &self.variables {
            let value = match fixed.get(&v.name) {
                Some(&x) => x,
                None => match &v.equation {
                    None => inst.meta(&v.name)?,
                    Some(f) => {
                        let args: Vec<Value> = v.parents.iter().map(|p| vals[p]).collect();
                        f(&args)
                    }
                },
            };
            vals.insert(v.name.clone(), value);
        }
        Ok(vals)
    }

    /// Answer token implied by the model on `inst`.
    pub fn answer(&self, inst: &TaskInstance) -> Result<usize> {
        let vals = self.run(inst, &BTreeMap::new())?;
        token(vals[&self.output])
    }

    /// Output on `base` with `variable` fixed to its value on `source`.
    pub fn expected_output(&self, base: &TaskInstance, source: &TaskInstance, variable: &str) -> Result<usize> {
        if !self.has_variable(variable) {
            return Err(Error::invalid(format!("undefined causal variable {variable}")));
        }
        let src = self.run(source, &BTreeMap::new())?;
        let fixed = BTreeMap::from([(variable.to_string(), src[variable])]);
        let vals = self.run(base, &fixed)?;
        token(vals[&self.output])
    }
}

fn token(v: Value) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::invalid(format!("causal output {v} is not a token id")))
}
