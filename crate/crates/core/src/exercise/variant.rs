//! Deterministic per-participant exercise variants.
//!
//! Randomness comes from a ChaCha8 stream seeded with the variant seed
//! (`seed_from_u64`). Draws happen in a fixed order: first each parameter in
//! name order, then one permutation per choice rule in rule order. Integer
//! draws use rejection sampling on raw `u64` outputs; permutations are a
//! Fisher-Yates shuffle from the last index down.

use std::collections::BTreeMap;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::expr::{Expr, ExprError};
use super::template::{self, TemplateError};
use super::{ChoiceOption, ExerciseBundle, ParamSpec, Rule, VariantSeed};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VariantError {
    #[error("{context}: {source}")]
    Template {
        context: String,
        #[source]
        source: TemplateError,
    },
    #[error("target `{target}`: {source}")]
    Target {
        target: String,
        #[source]
        source: ExprError,
    },
    #[error("parameter `{0}` is not numeric but is used in an arithmetic target")]
    NonNumeric(String),
    #[error("variant was generated for `{variant}` but used with `{bundle}`")]
    Mismatch { variant: String, bundle: String },
}

/// One participant's instantiation of an exercise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantInstance {
    pub exercise_id: String,
    pub seed: VariantSeed,
    /// `{"params": {...}, "option_order": [[option ids of choice rule 0], ...]}`
    pub resolved_parameters: Value,
    /// What a reset restores.
    pub initial_state: Value,
}

struct Stream(ChaCha8Rng);

impl Stream {
    fn uniform(&mut self, min: i64, max: i64) -> i64 {
        let span = (i128::from(max) - i128::from(min) + 1) as u128;
        let zone = ((1u128 << 64) / span) * span;
        loop {
            let v = u128::from(self.0.next_u64());
            if v < zone {
                return (i128::from(min) + (v % span) as i128) as i64;
            }
        }
    }

    fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.uniform(0, i as i64) as usize;
            order.swap(i, j);
        }
        order
    }
}

fn display(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Resolves a bundle for one seed. Static bundles ignore the seed and always
/// yield the same canonical instance (with seed 0).
pub fn instantiate_variant(bundle: &ExerciseBundle, seed: VariantSeed) -> Result<VariantInstance, VariantError> {
    let Some(generator) = &bundle.variants else {
        let order: Vec<Value> = bundle
            .declarative_rules()
            .iter()
            .filter_map(|r| match r {
                Rule::Choice { options, .. } => {
                    Some(Value::from(options.iter().map(|o| o.id.clone()).collect::<Vec<_>>()))
                }
                _ => None,
            })
            .collect();
        return Ok(VariantInstance {
            exercise_id: bundle.exercise_id.clone(),
            seed: VariantSeed(0),
            resolved_parameters: serde_json::json!({ "params": {}, "option_order": order }),
            initial_state: bundle.initial_state.clone(),
        });
    };

    let mut stream = Stream(ChaCha8Rng::seed_from_u64(seed.value()));
    let mut params = serde_json::Map::new();
    for (name, spec) in &generator.params {
        let value = match spec {
            ParamSpec::IntRange { min, max } => Value::from(stream.uniform(*min, *max)),
            ParamSpec::Choices { choices } => choices[stream.uniform(0, choices.len() as i64 - 1) as usize].clone(),
        };
        params.insert(name.clone(), value);
    }

    let mut option_order = Vec::new();
    for rule in bundle.declarative_rules() {
        if let Rule::Choice { options, .. } = rule {
            let ids = select_options(options, generator.shuffle_options, generator.draw_options, &mut stream);
            option_order.push(Value::from(ids));
        }
    }

    let values: BTreeMap<String, String> = params.iter().map(|(k, v)| (k.clone(), display(v))).collect();
    let initial_state = substitute_strings(&bundle.initial_state, &values)?;

    let instance = VariantInstance {
        exercise_id: bundle.exercise_id.clone(),
        seed,
        resolved_parameters: serde_json::json!({ "params": params, "option_order": option_order }),
        initial_state,
    };
    // Surface malformed templates and targets now rather than at grading time.
    instance.resolved_rules(bundle)?;
    bundle.participant_view(&instance)?;
    Ok(instance)
}

fn select_options(options: &[ChoiceOption], shuffle: bool, draw: Option<usize>, stream: &mut Stream) -> Vec<String> {
    let n = options.len();
    if !shuffle && draw.is_none() {
        return options.iter().map(|o| o.id.clone()).collect();
    }
    let perm = stream.permutation(n);
    let mut chosen: Vec<usize> = match draw {
        Some(k) => {
            let mut picked: Vec<usize> = perm[..k].to_vec();
            if !picked.iter().any(|&i| options[i].correct) {
                if let Some(&c) = perm[k..].iter().find(|&&i| options[i].correct) {
                    picked[k - 1] = c;
                }
            }
            picked
        }
        None => perm,
    };
    if !shuffle {
        chosen.sort_unstable();
    }
    chosen.into_iter().map(|i| options[i].id.clone()).collect()
}

fn substitute_strings(value: &Value, values: &BTreeMap<String, String>) -> Result<Value, VariantError> {
    Ok(match value {
        Value::String(s) => Value::String(template::render(s, values).map_err(|e| VariantError::Template {
            context: "initial state".into(),
            source: e,
        })?),
        Value::Array(items) => Value::Array(
            items
                .iter()
                .map(|v| substitute_strings(v, values))
                .collect::<Result<_, _>>()?,
        ),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| Ok((k.clone(), substitute_strings(v, values)?)))
                .collect::<Result<_, VariantError>>()?,
        ),
        other => other.clone(),
    })
}

impl VariantInstance {
    pub fn params(&self) -> &serde_json::Map<String, Value> {
        static EMPTY: std::sync::OnceLock<serde_json::Map<String, Value>> = std::sync::OnceLock::new();
        self.resolved_parameters
            .get("params")
            .and_then(Value::as_object)
            .unwrap_or_else(|| EMPTY.get_or_init(serde_json::Map::new))
    }

    pub fn public_parameters(&self) -> Value {
        Value::Object(self.params().clone())
    }

    /// Parameter values as display strings for template substitution.
    pub fn display_values(&self) -> BTreeMap<String, String> {
        self.params().iter().map(|(k, v)| (k.clone(), display(v))).collect()
    }

    /// Numeric parameters, for arithmetic targets.
    pub fn numeric_params(&self) -> BTreeMap<String, f64> {
        self.params()
            .iter()
            .filter_map(|(k, v)| v.as_f64().map(|f| (k.clone(), f)))
            .collect()
    }

    fn option_order(&self, index: usize) -> Option<Vec<&str>> {
        self.resolved_parameters
            .get("option_order")?
            .get(index)?
            .as_array()
            .map(|ids| ids.iter().filter_map(Value::as_str).collect())
    }

    /// The bundle's declarative rules as this participant sees and is graded
    /// against them: choice options reordered/subsetted and option texts
    /// substituted. Numeric targets are checked to evaluate.
    pub fn resolved_rules(&self, bundle: &ExerciseBundle) -> Result<Vec<Rule>, VariantError> {
        if bundle.exercise_id != self.exercise_id {
            return Err(VariantError::Mismatch {
                variant: self.exercise_id.clone(),
                bundle: bundle.exercise_id.clone(),
            });
        }
        let values = self.display_values();
        let numeric = self.numeric_params();
        let mut choice_index = 0;
        let mut out = Vec::new();
        for rule in bundle.declarative_rules() {
            let resolved = match rule {
                Rule::Choice {
                    field,
                    points,
                    partial_credit,
                    options,
                } => {
                    let order = self.option_order(choice_index);
                    choice_index += 1;
                    let selected: Vec<&ChoiceOption> = match order {
                        Some(ids) => ids
                            .iter()
                            .filter_map(|id| options.iter().find(|o| o.id == *id))
                            .collect(),
                        None => options.iter().collect(),
                    };
                    let mut resolved_options = Vec::with_capacity(selected.len());
                    for o in selected {
                        let text = if bundle.is_static() {
                            o.text.clone()
                        } else {
                            template::render(&o.text, &values).map_err(|e| VariantError::Template {
                                context: format!("option `{}`", o.id),
                                source: e,
                            })?
                        };
                        resolved_options.push(ChoiceOption {
                            id: o.id.clone(),
                            text,
                            correct: o.correct,
                        });
                    }
                    Rule::Choice {
                        field: field.clone(),
                        points: *points,
                        partial_credit: *partial_credit,
                        options: resolved_options,
                    }
                }
                Rule::Numeric { target, .. } => {
                    let expr = Expr::parse(target).map_err(|e| VariantError::Target {
                        target: target.clone(),
                        source: e,
                    })?;
                    for p in expr.params() {
                        if !numeric.contains_key(p) && self.params().contains_key(p) {
                            return Err(VariantError::NonNumeric(p.to_owned()));
                        }
                    }
                    expr.eval(&numeric).map_err(|e| VariantError::Target {
                        target: target.clone(),
                        source: e,
                    })?;
                    rule.clone()
                }
                other => other.clone(),
            };
            out.push(resolved);
        }
        Ok(out)
    }
}
