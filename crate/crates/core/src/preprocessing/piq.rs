use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PiqKind {
    /// Scaled linearly from `[min, max]` to `[0, 1]`.
    Continuous { min: f64, max: f64 },
    /// One-hot block with one column per level.
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiqVariable {
    pub name: String,
    #[serde(flatten)]
    pub kind: PiqKind,
}

impl PiqVariable {
    pub fn width(&self) -> usize {
        match &self.kind {
            PiqKind::Continuous { .. } => 1,
            PiqKind::Categorical { levels } => levels.len(),
        }
    }
}

/// Coding scheme for participant questionnaire answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiqSchema {
    pub variables: Vec<PiqVariable>,
}

impl PiqSchema {
    pub fn new(variables: Vec<PiqVariable>) -> Result<Self> {
        let s = Self { variables };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(Error::Config("PIQ schema has no variables".into()));
        }
        for v in &self.variables {
            match &v.kind {
                PiqKind::Continuous { min, max } => {
                    if !(min.is_finite() && max.is_finite() && min < max) {
                        return Err(Error::Config(format!(
                            "PIQ variable {}: need finite min < max",
                            v.name
                        )));
                    }
                }
                PiqKind::Categorical { levels } => {
                    if levels.len() < 2 {
                        return Err(Error::Config(format!(
                            "PIQ variable {}: need at least two levels",
                            v.name
                        )));
                    }
                    let mut sorted = levels.clone();
                    sorted.sort();
                    sorted.dedup();
                    if sorted.len() != levels.len() {
                        return Err(Error::Config(format!(
                            "PIQ variable {}: duplicate levels",
                            v.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Encoded width `M`.
    pub fn width(&self) -> usize {
        self.variables.iter().map(PiqVariable::width).sum()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Self = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Codes raw questionnaire answers into the participant vector `p`.
pub fn encode_participant<S: AsRef<str>>(answers: &[S], schema: &PiqSchema) -> Result<Tensor> {
    if answers.len() != schema.variables.len() {
        return Err(Error::Validation(vec![format!(
            "{} PIQ answers for {} schema variables",
            answers.len(),
            schema.variables.len()
        )]));
    }
    let mut out = Vec::with_capacity(schema.width());
    let mut problems = Vec::new();
    for (answer, var) in answers.iter().zip(&schema.variables) {
        let a = answer.as_ref().trim();
        match &var.kind {
            PiqKind::Continuous { min, max } => match a.parse::<f64>() {
                Ok(x) if x.is_finite() && (*min..=*max).contains(&x) => {
                    out.push((x - min) / (max - min));
                }
                _ => {
                    problems.push(format!("{}: {a:?} is not a number in [{min}, {max}]", var.name));
                    out.push(0.0);
                }
            },
            PiqKind::Categorical { levels } => match levels.iter().position(|l| l == a) {
                Some(idx) => out.extend((0..levels.len()).map(|i| if i == idx { 1.0 } else { 0.0 })),
                None => {
                    problems.push(format!("{}: unknown level {a:?} (expected one of {levels:?})", var.name));
                    out.extend(std::iter::repeat_n(0.0, levels.len()));
                }
            },
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Tensor::new(vec![out.len()], out)
}
