use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{config_err, dim_err, CoreError, Result};

/// Named numeric feature columns plus an optional outcome column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    outcome_name: String,
    outcome: Option<Vec<f64>>,
    feature_names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(
        outcome_name: impl Into<String>,
        outcome: Vec<f64>,
        feature_names: Vec<String>,
        columns: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = outcome.len();
        if let Some(row) = outcome.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { what: "outcome", row });
        }
        let mut d = Self::features(n, feature_names, columns)?;
        d.outcome_name = outcome_name.into();
        d.outcome = Some(outcome);
        Ok(d)
    }

    /// Features without an outcome, as used for prediction.
    pub fn features(n: usize, feature_names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if feature_names.len() != columns.len() {
            return Err(dim_err(format!("{} names for {} columns", feature_names.len(), columns.len())));
        }
        for (k, name) in feature_names.iter().enumerate() {
            if feature_names[..k].contains(name) {
                return Err(config_err(format!("duplicate feature column `{name}`")));
            }
            if columns[k].len() != n {
                return Err(dim_err(format!("column `{name}` has {} rows, expected {n}", columns[k].len())));
            }
            if let Some(row) = columns[k].iter().position(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite { what: "feature", row });
            }
        }
        Ok(Self { n, outcome_name: String::new(), outcome: None, feature_names, columns })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn outcome(&self) -> Option<&[f64]> {
        self.outcome.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn has_feature(&self, name: &str) -> bool {
        self.feature_names.iter().any(|f| f == name)
    }

    pub fn feature(&self, name: &str) -> Result<&[f64]> {
        self.feature_names
            .iter()
            .position(|f| f == name)
            .map(|k| self.columns[k].as_slice())
            .ok_or_else(|| CoreError::UnknownFeature(name.into()))
    }

    /// Row subset in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let pick = |c: &Vec<f64>| idx.iter().map(|&i| c[i]).collect::<Vec<f64>>();
        Self {
            n: idx.len(),
            outcome_name: self.outcome_name.clone(),
            outcome: self.outcome.as_ref().map(pick),
            feature_names: self.feature_names.clone(),
            columns: self.columns.iter().map(pick).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn lookup_and_subset() {
        let d = Dataset::new("y", vec![1.0, 2.0, 3.0], vec!["a".into()], vec![vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(d.feature("a").unwrap(), &[4.0, 5.0, 6.0]);
        assert!(matches!(d.feature("b"), Err(CoreError::UnknownFeature(_))));
        let s = d.select_rows(&[2, 0]);
        assert_eq!(s.outcome().unwrap(), &[3.0, 1.0]);
        assert_eq!(s.feature("a").unwrap(), &[6.0, 4.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Dataset::new("y", vec![1.0], vec!["a".into()], vec![vec![1.0, 2.0]]).is_err());
        assert!(Dataset::new("y", vec![1.0], vec!["a".into(), "a".into()], vec![vec![1.0], vec![2.0]]).is_err());
        assert!(Dataset::new("y", vec![f64::NAN], vec![], vec![]).is_err());
    }
}
