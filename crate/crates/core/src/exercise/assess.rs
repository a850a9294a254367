use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::expr::Expr;
use super::{AssessmentSpec, ExerciseBundle, PartialCredit, Rule, VariantInstance};
use crate::points::Points;
use crate::sandbox::{JobResult, JobStatus, TestCase, TestOutcome, TestSuite};

/// A request to run an exercise's unit-test suite against participant files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteRequest {
    pub exercise_id: String,
    pub participant_id: String,
    pub toolchain: String,
    pub files: BTreeMap<String, String>,
    pub suite: TestSuite,
}

/// Executes test suites on behalf of the assessment. An `Err` means the
/// execution infrastructure failed, not the participant's program.
pub trait TestRunner: Send + Sync {
    fn run_suite(&self, request: &SuiteRequest) -> Result<JobResult, String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubScore {
    pub id: String,
    pub awarded: Points,
    pub possible: Points,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentResult {
    pub exercise_id: String,
    pub score: Points,
    pub max_points: Points,
    pub answered: bool,
    pub subscores: Vec<SubScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_outcomes: Option<Vec<TestOutcome>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compiler_output: Option<String>,
    /// Set when the sandbox could not produce a verdict; the score is not
    /// meaningful until the exercise is re-run or scored manually.
    pub needs_rerun: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssessError {
    #[error("exercise `{0}` is graded manually")]
    ManualOnly(String),
}

const NO_ANSWER: &str = "no answer";

/// Scores one answer against the participant's variant.
///
/// `answer` is the raw stored document (or `None` if never answered).
/// Malformed documents score 0 with an explanation; they never fail.
pub fn assess(
    bundle: &ExerciseBundle,
    variant: &VariantInstance,
    answer: Option<&str>,
    runner: &dyn TestRunner,
    participant_id: &str,
) -> Result<AssessmentResult, AssessError> {
    let mut result = AssessmentResult {
        exercise_id: bundle.exercise_id.clone(),
        score: Points::ZERO,
        max_points: bundle.max_points,
        answered: answer.is_some(),
        subscores: Vec::new(),
        test_outcomes: None,
        compiler_output: None,
        needs_rerun: false,
    };
    let document: Option<Value> = match answer {
        None => None,
        Some(raw) => match serde_json::from_str(raw) {
            Ok(v) => Some(v),
            Err(e) => {
                result.subscores.push(SubScore {
                    id: "document".into(),
                    awarded: Points::ZERO,
                    possible: bundle.max_points,
                    explanation: format!("answer document is not valid JSON: {e}"),
                });
                return Ok(result);
            }
        },
    };

    match &bundle.assessment {
        AssessmentSpec::Manual => return Err(AssessError::ManualOnly(bundle.exercise_id.clone())),
        AssessmentSpec::Declarative { .. } => {
            let rules = match variant.resolved_rules(bundle) {
                Ok(rules) => rules,
                Err(e) => {
                    result.subscores.push(SubScore {
                        id: "variant".into(),
                        awarded: Points::ZERO,
                        possible: bundle.max_points,
                        explanation: format!("variant could not be resolved: {e}"),
                    });
                    return Ok(result);
                }
            };
            for (index, rule) in rules.iter().enumerate() {
                let field = document.as_ref().and_then(|d| d.get(rule.field()));
                let (awarded, explanation) = match field {
                    None if document.is_none() => (Points::ZERO, NO_ANSWER.to_owned()),
                    None => (Points::ZERO, format!("no value given for `{}`", rule.field())),
                    Some(value) => score_rule(rule, value, variant),
                };
                result.subscores.push(SubScore {
                    id: format!("{}#{}", rule.field(), index + 1),
                    awarded,
                    possible: rule.points(),
                    explanation,
                });
            }
        }
        AssessmentSpec::Sandboxed { toolchain, tests } => {
            let files = document.as_ref().and_then(source_files);
            let Some(files) = files else {
                for t in tests {
                    result.subscores.push(SubScore {
                        id: t.case.id.clone(),
                        awarded: Points::ZERO,
                        possible: t.weight,
                        explanation: if document.is_none() {
                            NO_ANSWER.to_owned()
                        } else {
                            "answer contains no source files".to_owned()
                        },
                    });
                }
                return Ok(finish(result));
            };
            let request = SuiteRequest {
                exercise_id: bundle.exercise_id.clone(),
                participant_id: participant_id.to_owned(),
                toolchain: toolchain.clone(),
                files,
                suite: TestSuite {
                    suite_ref: bundle.exercise_id.clone(),
                    tests: tests.iter().map(|t| t.case.clone()).collect::<Vec<TestCase>>(),
                },
            };
            let job = match runner.run_suite(&request) {
                Ok(job) if job.status != JobStatus::InfraError => job,
                Ok(job) => return Ok(rerun(result, tests, &job.program_output)),
                Err(e) => return Ok(rerun(result, tests, &e)),
            };
            let outcomes = job.test_outcomes.clone().unwrap_or_default();
            for t in tests {
                let outcome = outcomes.iter().find(|o| o.test_id == t.case.id);
                let (awarded, explanation) = match outcome {
                    Some(o) if o.passed => (t.weight, format!("passed: {}", o.detail)),
                    Some(o) => (Points::ZERO, format!("failed: {}", o.detail)),
                    None => (Points::ZERO, "test was not run".to_owned()),
                };
                result.subscores.push(SubScore {
                    id: t.case.id.clone(),
                    awarded,
                    possible: t.weight,
                    explanation,
                });
            }
            result.test_outcomes = Some(outcomes);
            result.compiler_output = Some(job.compiler_output);
        }
    }
    Ok(finish(result))
}

fn finish(mut result: AssessmentResult) -> AssessmentResult {
    let total: Points = result.subscores.iter().map(|s| s.awarded).sum();
    result.score = total.clamp_non_negative().min(result.max_points);
    result
}

fn rerun(mut result: AssessmentResult, tests: &[super::WeightedTest], reason: &str) -> AssessmentResult {
    result.needs_rerun = true;
    result.subscores = tests
        .iter()
        .map(|t| SubScore {
            id: t.case.id.clone(),
            awarded: Points::ZERO,
            possible: t.weight,
            explanation: format!("not evaluated, sandbox failure: {reason}"),
        })
        .collect();
    result.score = Points::ZERO;
    result
}

/// Extracts `{"files": {"name": "content", ...}}` with safe, flat file names.
pub(crate) fn source_files(doc: &Value) -> Option<BTreeMap<String, String>> {
    let files = doc.get("files")?.as_object()?;
    let mut out = BTreeMap::new();
    for (name, content) in files {
        if !crate::sandbox::is_safe_file_name(name) {
            return None;
        }
        out.insert(name.clone(), content.as_str()?.to_owned());
    }
    (!out.is_empty()).then_some(out)
}

fn score_rule(rule: &Rule, value: &Value, variant: &VariantInstance) -> (Points, String) {
    match rule {
        Rule::Choice {
            points,
            partial_credit,
            options,
            ..
        } => {
            let Some(items) = value.as_array() else {
                return (Points::ZERO, "selection must be a list of option ids".into());
            };
            let marked: BTreeSet<&str> = items.iter().filter_map(Value::as_str).collect();
            let expected: BTreeSet<&str> = options.iter().filter(|o| o.correct).map(|o| o.id.as_str()).collect();
            let shown: BTreeSet<&str> = options.iter().map(|o| o.id.as_str()).collect();
            let n = options.len() as i64;
            let right = options
                .iter()
                .filter(|o| o.correct == marked.contains(o.id.as_str()))
                .count() as i64;
            let wrong = n - right;
            let unknown: Vec<&str> = marked.difference(&shown).copied().collect();
            let awarded = match partial_credit {
                PartialCredit::AllOrNothing if wrong == 0 && unknown.is_empty() => *points,
                PartialCredit::AllOrNothing => Points::ZERO,
                PartialCredit::PerOption => points.scaled((right - wrong - unknown.len() as i64).max(0), n),
            };
            let list = |s: &BTreeSet<&str>| s.iter().copied().collect::<Vec<_>>().join(", ");
            let mut explanation = format!(
                "{right} of {n} options classified correctly; marked [{}], correct [{}]",
                list(&marked.intersection(&shown).copied().collect()),
                list(&expected)
            );
            if !unknown.is_empty() {
                explanation.push_str(&format!("; unknown options [{}]", unknown.join(", ")));
            }
            (awarded, explanation)
        }
        Rule::Numeric {
            points,
            target,
            tolerance,
            ..
        } => {
            let given = match value {
                Value::Number(n) => n.as_f64(),
                Value::String(s) => s.trim().parse::<f64>().ok(),
                _ => None,
            };
            let Some(given) = given.filter(|g| g.is_finite()) else {
                return (Points::ZERO, "answer is not a number".into());
            };
            let expected = match Expr::parse(target).and_then(|e| e.eval(&variant.numeric_params())) {
                Ok(v) => v,
                Err(e) => return (Points::ZERO, format!("target could not be evaluated: {e}")),
            };
            let within = (given - expected).abs() <= tolerance + 1e-9;
            if within {
                (
                    *points,
                    format!("{given} is within {tolerance} of the expected value {expected}"),
                )
            } else {
                (
                    Points::ZERO,
                    format!("{given} differs from the expected value {expected}"),
                )
            }
        }
        Rule::Pattern {
            points,
            pattern,
            case_insensitive,
            ..
        } => {
            let Some(text) = value.as_str() else {
                return (Points::ZERO, "answer is not text".into());
            };
            let flags = if *case_insensitive { "(?i)" } else { "" };
            let Ok(re) = Regex::new(&format!("{flags}^(?:{pattern})$")) else {
                return (Points::ZERO, "pattern could not be compiled".into());
            };
            if re.is_match(text.trim()) {
                (*points, "answer matches the expected form".into())
            } else {
                (Points::ZERO, "answer does not match the expected form".into())
            }
        }
        Rule::Graph {
            points,
            add_edges,
            remove_edges,
            ..
        } => {
            let parse = |key: &str| -> Option<BTreeSet<(String, String)>> {
                match value.get(key) {
                    None => Some(BTreeSet::new()),
                    Some(v) => serde_json::from_value::<Vec<(String, String)>>(v.clone())
                        .ok()
                        .map(|v| v.into_iter().collect()),
                }
            };
            let (Some(added), Some(removed)) = (parse("add"), parse("remove")) else {
                return (Points::ZERO, "graph delta must list edges as [from, to] pairs".into());
            };
            let expected: BTreeSet<(bool, &String, &String)> = add_edges
                .iter()
                .map(|(a, b)| (true, a, b))
                .chain(remove_edges.iter().map(|(a, b)| (false, a, b)))
                .collect();
            let given: BTreeSet<(bool, &String, &String)> = added
                .iter()
                .map(|(a, b)| (true, a, b))
                .chain(removed.iter().map(|(a, b)| (false, a, b)))
                .collect();
            let matched = expected.intersection(&given).count() as i64;
            let extra = given.difference(&expected).count() as i64;
            let n = expected.len() as i64;
            let awarded = points.scaled((matched - extra).max(0), n);
            (
                awarded,
                format!("{matched} of {n} expected edge changes present, {extra} unexpected"),
            )
        }
    }
}
