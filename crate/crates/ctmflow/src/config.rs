//! Strict JSON model configuration.
//!
//! ```json
//! {
//!   "error": "gaussian",
//!   "bernstein_order": 15,
//!   "outcome": "y",
//!   "interaction": [{"kind": "intercept"}],
//!   "shift": [{"kind": "linear", "feature": "x1"}, {"kind": "smooth", "feature": "x2", "df": 5}],
//!   "fit": {"batch_size": "full", "max_epochs": 500},
//!   "penalty": {"lambda_y": 0.0}
//! }
//! ```
//!
//! Unknown fields are rejected everywhere. A term listed under both
//! `interaction` and `shift` with the same name and settings feeds both
//! predictors.

use std::path::Path;

use ctmflow_core::train::BatchSize;
use ctmflow_core::{ErrorDistribution, FitConfig, ModelSpec, Target, TermKind, TermSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub error: ErrorDistribution,
    pub bernstein_order: usize,
    pub outcome: String,
    pub interaction: Vec<TermConfig>,
    #[serde(default)]
    pub shift: Vec<TermConfig>,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default)]
    pub penalty: PenaltySettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermConfig {
    Intercept {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Linear {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        feature: String,
    },
    Smooth {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        feature: String,
        #[serde(default = "default_q")]
        q: usize,
        #[serde(default = "default_degree")]
        degree: usize,
        #[serde(default = "default_penalty_order")]
        penalty_order: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        df: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda: Option<f64>,
    },
    Tensor {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        features: [String; 2],
        #[serde(default = "default_tensor_q")]
        q: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        df: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda: Option<f64>,
    },
    Deep {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        features: Vec<String>,
        layers: Vec<usize>,
        #[serde(default)]
        orthogonalize: bool,
    },
}

fn default_q() -> usize {
    10
}

fn default_degree() -> usize {
    3
}

fn default_penalty_order() -> usize {
    2
}

fn default_tensor_q() -> usize {
    5
}

impl TermConfig {
    pub fn name(&self) -> String {
        match self {
            TermConfig::Intercept { name } => name.clone().unwrap_or_else(|| "intercept".into()),
            TermConfig::Linear { name, feature } => name.clone().unwrap_or_else(|| feature.clone()),
            TermConfig::Smooth { name, feature, .. } => name.clone().unwrap_or_else(|| format!("s({feature})")),
            TermConfig::Tensor { name, features, .. } => {
                name.clone().unwrap_or_else(|| format!("te({},{})", features[0], features[1]))
            }
            TermConfig::Deep { name, .. } => name.clone().unwrap_or_else(|| "deep".into()),
        }
    }

    pub fn kind(&self) -> TermKind {
        match self.clone() {
            TermConfig::Intercept { .. } => TermKind::Intercept,
            TermConfig::Linear { feature, .. } => TermKind::Linear { feature },
            TermConfig::Smooth { feature, q, degree, penalty_order, df, lambda, .. } => {
                TermKind::Smooth { feature, q, degree, penalty_order, df, lambda }
            }
            TermConfig::Tensor { features, q, df, lambda, .. } => TermKind::TensorSmooth { features, q, df, lambda },
            TermConfig::Deep { features, layers, orthogonalize, .. } => TermKind::Deep { features, layers, orthogonalize },
        }
    }

    pub fn from_term(name: &str, kind: &TermKind) -> Self {
        let name = Some(name.to_string());
        match kind.clone() {
            TermKind::Intercept => TermConfig::Intercept { name },
            TermKind::Linear { feature } => TermConfig::Linear { name, feature },
            TermKind::Smooth { feature, q, degree, penalty_order, df, lambda } => {
                TermConfig::Smooth { name, feature, q, degree, penalty_order, df, lambda }
            }
            TermKind::TensorSmooth { features, q, df, lambda } => TermConfig::Tensor { name, features, q, df, lambda },
            TermKind::Deep { features, layers, orthogonalize } => TermConfig::Deep { name, features, layers, orthogonalize },
        }
    }
}

/// Optimizer settings; omitted fields take the library defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<BatchSetting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self::from_fit_config(&FitConfig::default())
    }
}

/// `"full"` or a positive row count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSetting {
    Named(FullBatch),
    Rows(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullBatch {
    Full,
}

impl FitSettings {
    pub fn to_fit_config(&self) -> FitConfig {
        let d = FitConfig::default();
        FitConfig {
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            batch_size: match self.batch_size {
                None => d.batch_size,
                Some(BatchSetting::Named(FullBatch::Full)) => Some(BatchSize::Full),
                Some(BatchSetting::Rows(r)) => Some(BatchSize::Rows(r)),
            },
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            val_fraction: self.val_fraction.unwrap_or(d.val_fraction),
            patience: self.patience.unwrap_or(d.patience),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    pub fn from_fit_config(c: &FitConfig) -> Self {
        Self {
            max_epochs: Some(c.max_epochs),
            batch_size: c.batch_size.map(|b| match b {
                BatchSize::Full => BatchSetting::Named(FullBatch::Full),
                BatchSize::Rows(r) => BatchSetting::Rows(r),
            }),
            learning_rate: Some(c.learning_rate),
            beta1: Some(c.beta1),
            beta2: Some(c.beta2),
            epsilon: Some(c.epsilon),
            val_fraction: Some(c.val_fraction),
            patience: Some(c.patience),
            seed: Some(c.seed),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySettings {
    #[serde(default)]
    pub lambda_y: f64,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Builds and validates the model spec.
    pub fn spec(&self) -> Result<ModelSpec> {
        let mut terms: Vec<TermSpec> = Vec::new();
        for t in &self.interaction {
            terms.push(TermSpec::new(t.name(), Target::Interaction, t.kind()));
        }
        for t in &self.shift {
            let (name, kind) = (t.name(), t.kind());
            match terms.iter_mut().find(|s| s.name == name) {
                Some(s) if s.kind == kind && s.target == Target::Interaction => s.target = Target::Both,
                Some(_) => return Err(CliError::Config(format!("duplicate term name `{name}`"))),
                None => terms.push(TermSpec::new(name, Target::Shift, kind)),
            }
        }
        let mut spec = ModelSpec::new(self.error, self.bernstein_order, terms);
        spec.lambda_y = self.penalty.lambda_y;
        spec.validate()?;
        self.fit_config().validate()?;
        Ok(spec)
    }

    pub fn fit_config(&self) -> FitConfig {
        self.fit.to_fit_config()
    }

    pub fn features(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in self.interaction.iter().chain(&self.shift) {
            for f in t.kind().features() {
                if !out.iter().any(|o| o == f) {
                    out.push(f.to_string());
                }
            }
        }
        out
    }

    pub fn from_spec(spec: &ModelSpec, outcome: &str, fit: &FitConfig) -> Self {
        let mut interaction = Vec::new();
        let mut shift = Vec::new();
        for t in &spec.terms {
            let c = TermConfig::from_term(&t.name, &t.kind);
            if t.target.sides().contains(&ctmflow_core::Side::Interaction) {
                interaction.push(c.clone());
            }
            if t.target.sides().contains(&ctmflow_core::Side::Shift) {
                shift.push(c);
            }
        }
        Self {
            error: spec.error,
            bernstein_order: spec.order,
            outcome: outcome.to_string(),
            interaction,
            shift,
            fit: FitSettings::from_fit_config(fit),
            penalty: PenaltySettings { lambda_y: spec.lambda_y },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHIFT_CTM: &str = r#"{
        "error": "gaussian", "bernstein_order": 1, "outcome": "y",
        "interaction": [{"kind": "intercept"}],
        "shift": [{"kind": "linear", "feature": "x1"}, {"kind": "smooth", "feature": "x2", "df": 4}]
    }"#;

    #[test]
    fn parses_shift_model() {
        let c = ModelConfig::from_json(SHIFT_CTM).unwrap();
        let spec = c.spec().unwrap();
        assert_eq!(spec.terms.len(), 3);
        assert_eq!(spec.terms[2].name, "s(x2)");
        assert_eq!(spec.terms[2].kind, TermKind::Smooth {
            feature: "x2".into(),
            q: 10,
            degree: 3,
            penalty_order: 2,
            df: Some(4.0),
            lambda: None
        });
        assert_eq!(c.fit_config(), FitConfig::default());
        assert_eq!(c.features(), vec!["x1", "x2"]);
    }

    #[test]
    fn rejects_unknown_fields() {
        let typo = SHIFT_CTM.replace("\"df\"", "\"dof\"");
        assert!(ModelConfig::from_json(&typo).is_err());
        let top = SHIFT_CTM.replace("\"outcome\"", "\"extra\": 1, \"outcome\"");
        assert!(ModelConfig::from_json(&top).is_err());
        let fit = SHIFT_CTM.replace("\"interaction\"", "\"fit\": {\"lr\": 0.1}, \"interaction\"");
        assert!(ModelConfig::from_json(&fit).is_err());
    }

    #[test]
    fn rejects_order_zero() {
        let c = ModelConfig::from_json(&SHIFT_CTM.replace("\"bernstein_order\": 1", "\"bernstein_order\": 0")).unwrap();
        assert!(matches!(c.spec(), Err(CliError::Core(_))));
        assert_eq!(c.spec().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn batch_size_forms() {
        let full = SHIFT_CTM.replace("\"interaction\"", "\"fit\": {\"batch_size\": \"full\"}, \"interaction\"");
        assert_eq!(ModelConfig::from_json(&full).unwrap().fit_config().batch_size, Some(BatchSize::Full));
        let rows = SHIFT_CTM.replace("\"interaction\"", "\"fit\": {\"batch_size\": 64}, \"interaction\"");
        assert_eq!(ModelConfig::from_json(&rows).unwrap().fit_config().batch_size, Some(BatchSize::Rows(64)));
        let bad = SHIFT_CTM.replace("\"interaction\"", "\"fit\": {\"batch_size\": \"half\"}, \"interaction\"");
        assert!(ModelConfig::from_json(&bad).is_err());
    }

    #[test]
    fn shared_term_feeds_both_sides() {
        let c = ModelConfig::from_json(
            r#"{"error": "logistic", "bernstein_order": 5, "outcome": "y",
                "interaction": [{"kind": "intercept"}, {"kind": "linear", "feature": "g"}],
                "shift": [{"kind": "linear", "feature": "g"}]}"#,
        )
        .unwrap();
        let spec = c.spec().unwrap();
        assert_eq!(spec.terms[1].target, Target::Both);
        let clash = c.clone();
        let mut clash = clash;
        clash.shift = vec![TermConfig::Smooth {
            name: Some("g".into()),
            feature: "g".into(),
            q: 10,
            degree: 3,
            penalty_order: 2,
            df: None,
            lambda: None,
        }];
        assert!(clash.spec().is_err());
    }

    #[test]
    fn every_taxonomy_variant_round_trips() {
        let variants = [
            SHIFT_CTM.to_string(),
            // distributional: interaction terms only
            r#"{"error": "minev", "bernstein_order": 8, "outcome": "y",
                "interaction": [{"kind": "intercept"}, {"kind": "smooth", "feature": "x1", "lambda": 2.5}]}"#
                .to_string(),
            // interacting: both predictors, deep and tensor terms
            r#"{"error": "logistic", "bernstein_order": 12, "outcome": "y",
                "interaction": [{"kind": "intercept"}, {"kind": "linear", "feature": "genre"},
                                {"kind": "deep", "name": "net_a", "features": ["x1", "x2"], "layers": [16, 8, 2]}],
                "shift": [{"kind": "tensor", "features": ["x1", "x2"], "q": 4},
                          {"kind": "deep", "name": "net_b", "features": ["x1"], "layers": [4, 1], "orthogonalize": true}],
                "fit": {"batch_size": 32, "learning_rate": 0.005, "seed": 9},
                "penalty": {"lambda_y": 0.1}}"#
                .to_string(),
        ];
        for text in variants {
            let c = ModelConfig::from_json(&text).unwrap();
            let spec = c.spec().unwrap();
            let back = ModelConfig::from_json(&ModelConfig::from_spec(&spec, &c.outcome, &c.fit_config()).to_json()).unwrap();
            assert_eq!(back.spec().unwrap(), spec);
            assert_eq!(back.fit_config(), c.fit_config());
        }
    }
}
