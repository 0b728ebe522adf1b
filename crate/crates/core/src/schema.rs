//! JSON document format for occupancy models.
//!
//! ```json
//! {
//!   "n_households": 2,
//!   "mode": "joint",
//!   "label": "example",
//!   "initial": [0.25, 0.25, 0.25, 0.25],
//!   "transitions": [ [[...4 entries...], ...4 rows...] ],
//!   "households": [{"u_occupied": 1.0, "u_empty": 0.5}, ...]
//! }
//! ```
//!
//! In `"joint"` mode `initial` has `2^N` entries and each element of
//! `transitions` is a `2^N x 2^N` row-stochastic matrix. In `"factorized"`
//! mode `initial` holds the N per-household occupancy probabilities and each
//! element of `transitions` is a list of N `2x2` matrices `[from][to]`
//! (index 0 = empty). The schedule repeats with period `transitions.len()`.
//! `households` is optional and only needed by consumers that evaluate rate
//! likelihoods.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HouseholdSpec, JointMatrix, Matrix2, OccupancyModel, TransitionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HouseholdBounds {
    pub u_occupied: f64,
    pub u_empty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
enum ModelBody {
    Joint {
        initial: Vec<f64>,
        transitions: Vec<Vec<Vec<f64>>>,
    },
    Factorized {
        initial: Vec<f64>,
        transitions: Vec<Vec<Matrix2>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub n_households: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
    #[serde(flatten)]
    body: ModelBody,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub households: Option<Vec<HouseholdBounds>>,
}

impl ModelDocument {
    pub fn from_model(model: &OccupancyModel, households: Option<&[HouseholdSpec]>) -> Self {
        let body = match model.transitions() {
            TransitionSpec::Joint(steps) => ModelBody::Joint {
                initial: model.initial().to_vec(),
                transitions: steps.iter().map(JointMatrix::to_rows).collect(),
            },
            TransitionSpec::Factorized(steps) => ModelBody::Factorized {
                initial: model.initial().to_vec(),
                transitions: steps.clone(),
            },
        };
        Self {
            n_households: model.n_households(),
            label: model.label().to_owned(),
            body,
            households: households.map(|hs| {
                hs.iter()
                    .map(|h| HouseholdBounds {
                        u_occupied: h.u_occupied,
                        u_empty: h.u_empty,
                    })
                    .collect()
            }),
        }
    }

    pub fn to_model(&self) -> Result<OccupancyModel> {
        let (initial, transitions) = match &self.body {
            ModelBody::Joint {
                initial,
                transitions,
            } => {
                let steps = transitions
                    .iter()
                    .map(|rows| JointMatrix::from_rows(rows))
                    .collect::<Result<Vec<_>>>()?;
                (initial.clone(), TransitionSpec::joint(steps)?)
            }
            ModelBody::Factorized {
                initial,
                transitions,
            } => (initial.clone(), TransitionSpec::factorized(transitions.clone())?),
        };
        OccupancyModel::new(self.label.clone(), self.n_households, initial, transitions)
    }

    /// Household specs, indexed by position in the document.
    pub fn household_specs(&self) -> Result<Option<Vec<HouseholdSpec>>> {
        let Some(bounds) = &self.households else {
            return Ok(None);
        };
        if bounds.len() != self.n_households {
            return Err(Error::shape(format!(
                "{} household bounds for {} households",
                bounds.len(),
                self.n_households
            )));
        }
        bounds
            .iter()
            .enumerate()
            .map(|(i, b)| HouseholdSpec::new(i, b.u_occupied, b.u_empty))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_document_round_trip() {
        let text = r#"{
            "n_households": 1,
            "mode": "joint",
            "initial": [0.5, 0.5],
            "transitions": [[[0.9, 0.1], [0.2, 0.8]]],
            "households": [{"u_occupied": 1.0, "u_empty": 0.5}]
        }"#;
        let doc = ModelDocument::from_json(text).unwrap();
        let model = doc.to_model().unwrap();
        assert_eq!(model.n_households(), 1);
        let specs = doc.household_specs().unwrap().unwrap();
        assert_eq!(specs[0].u_empty, 0.5);
        let again = ModelDocument::from_model(&model, Some(&specs));
        assert_eq!(ModelDocument::from_json(&again.to_json().unwrap()).unwrap(), again);
    }

    #[test]
    fn factorized_document() {
        let text = r#"{
            "n_households": 2,
            "mode": "factorized",
            "initial": [1.0, 0.25],
            "transitions": [[[[1.0, 0.0], [0.1, 0.9]], [[0.5, 0.5], [0.5, 0.5]]]]
        }"#;
        let model = ModelDocument::from_json(text).unwrap().to_model().unwrap();
        assert_eq!(model.transitions().period(), 1);
        assert!(ModelDocument::from_json(text).unwrap().household_specs().unwrap().is_none());
    }

    #[test]
    fn rejects_bad_rows() {
        let text = r#"{"n_households": 1, "mode": "joint", "initial": [0.5, 0.5],
                       "transitions": [[[0.9, 0.2], [0.2, 0.8]]]}"#;
        assert!(ModelDocument::from_json(text).unwrap().to_model().is_err());
    }
}
