//! Report-oriented rendering of one answered (or unanswered) exercise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::assess::{source_files, AssessmentResult};
use super::template;
use super::{ExerciseBundle, ExerciseKind, Rule, VariantInstance};
use crate::points::Points;

pub const DEFAULT_ARCHIVE_TEMPLATE: &str = "{{title}} ({{exercise_id}})\nScore: {{score}} / {{max_points}}\n\n{{body}}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "snake_case")]
pub enum ArchiveBlock {
    Heading {
        text: String,
    },
    Paragraph {
        text: String,
    },
    Code {
        name: String,
        content: String,
    },
    Table {
        headers: Vec<String>,
        rows: Vec<Vec<String>>,
    },
    NoAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveFragment {
    pub exercise_id: String,
    pub title: String,
    pub score: Points,
    pub max_points: Points,
    pub blocks: Vec<ArchiveBlock>,
}

fn heading(text: &str) -> ArchiveBlock {
    ArchiveBlock::Heading { text: text.to_owned() }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_owned()
}

/// Builds the archive section for one exercise: the participant's full
/// input, followed by the sub-score table with explanations.
pub fn archive_view(
    bundle: &ExerciseBundle,
    variant: &VariantInstance,
    answer: Option<&str>,
    result: &AssessmentResult,
) -> ArchiveFragment {
    let mut blocks = Vec::new();
    let document: Option<Value> = answer.and_then(|a| serde_json::from_str(a).ok());

    match (answer, &document) {
        (None, _) => blocks.push(ArchiveBlock::NoAnswer),
        (Some(raw), None) => {
            blocks.push(heading("Answer (unreadable document)"));
            blocks.push(ArchiveBlock::Code {
                name: "answer".into(),
                content: raw.to_owned(),
            });
        }
        (Some(_), Some(doc)) => answer_blocks(bundle, variant, doc, result, &mut blocks),
    }

    if let Some(out) = result.compiler_output.as_deref().filter(|o| !o.is_empty()) {
        blocks.push(heading("Compiler output"));
        blocks.push(ArchiveBlock::Code {
            name: "compiler".into(),
            content: out.to_owned(),
        });
    }

    blocks.push(heading("Assessment"));
    blocks.push(ArchiveBlock::Table {
        headers: vec!["Part".into(), "Points".into(), "Explanation".into()],
        rows: result
            .subscores
            .iter()
            .map(|s| {
                vec![
                    s.id.clone(),
                    format!("{} / {}", s.awarded, s.possible),
                    s.explanation.clone(),
                ]
            })
            .collect(),
    });

    ArchiveFragment {
        exercise_id: bundle.exercise_id.clone(),
        title: bundle.title.clone(),
        score: result.score,
        max_points: bundle.max_points,
        blocks,
    }
}

fn answer_blocks(
    bundle: &ExerciseBundle,
    variant: &VariantInstance,
    doc: &Value,
    result: &AssessmentResult,
    blocks: &mut Vec<ArchiveBlock>,
) {
    if bundle.kind == ExerciseKind::Programming {
        let files: BTreeMap<String, String> = source_files(doc).unwrap_or_default();
        blocks.push(heading("Submitted files"));
        for (name, content) in files {
            blocks.push(ArchiveBlock::Code { name, content });
        }
        if let Some(outcomes) = &result.test_outcomes {
            blocks.push(heading("Test cases"));
            blocks.push(ArchiveBlock::Table {
                headers: vec!["Test".into(), "Passed".into(), "Detail".into()],
                rows: outcomes
                    .iter()
                    .map(|o| vec![o.test_id.clone(), yes_no(o.passed), o.detail.clone()])
                    .collect(),
            });
        }
        return;
    }

    let rules = variant.resolved_rules(bundle).unwrap_or_default();
    let mut shown_generic = false;
    for rule in &rules {
        match rule {
            Rule::Choice { field, options, .. } => {
                let marked: Vec<&str> = doc
                    .get(field)
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_str).collect())
                    .unwrap_or_default();
                blocks.push(heading("Chosen and correct options"));
                blocks.push(ArchiveBlock::Table {
                    headers: vec!["Option".into(), "Text".into(), "Chosen".into(), "Correct".into()],
                    rows: options
                        .iter()
                        .map(|o| {
                            vec![
                                o.id.clone(),
                                o.text.clone(),
                                yes_no(marked.contains(&o.id.as_str())),
                                yes_no(o.correct),
                            ]
                        })
                        .collect(),
                });
            }
            _ if !shown_generic => {
                shown_generic = true;
                blocks.push(heading("Answer"));
                blocks.push(ArchiveBlock::Code {
                    name: "answer".into(),
                    content: pretty(doc),
                });
            }
            _ => {}
        }
    }
    if rules.is_empty() {
        blocks.push(heading("Answer"));
        let content = match doc.get("text").and_then(Value::as_str) {
            Some(text) => text.to_owned(),
            None => pretty(doc),
        };
        blocks.push(ArchiveBlock::Code {
            name: "answer".into(),
            content,
        });
    }
    if let Some(reference) = bundle.reference_answer(variant) {
        if rules.iter().any(|r| !matches!(r, Rule::Choice { .. })) {
            blocks.push(heading("Expected solution"));
            blocks.push(ArchiveBlock::Code {
                name: "expected".into(),
                content: pretty(&reference),
            });
        }
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

fn render_blocks(blocks: &[ArchiveBlock]) -> String {
    let mut out = String::new();
    for block in blocks {
        match block {
            ArchiveBlock::Heading { text } => {
                out.push_str(text);
                out.push('\n');
                out.push_str(&"-".repeat(text.chars().count()));
                out.push('\n');
            }
            ArchiveBlock::Paragraph { text } => {
                out.push_str(text);
                out.push('\n');
            }
            ArchiveBlock::Code { name, content } => {
                out.push_str(&format!("--- {name} ---\n"));
                out.push_str(content);
                if !content.ends_with('\n') {
                    out.push('\n');
                }
                out.push_str(&format!("--- end of {name} ---\n"));
            }
            ArchiveBlock::Table { headers, rows } => {
                out.push_str(&headers.join(" | "));
                out.push('\n');
                for row in rows {
                    out.push_str(&row.join(" | "));
                    out.push('\n');
                }
            }
            ArchiveBlock::NoAnswer => out.push_str("no answer\n"),
        }
        out.push('\n');
    }
    out
}

/// Renders a fragment through the bundle's archive template. Falls back to
/// the default template if the bundle's template references unknown fields.
pub fn render_fragment(fragment: &ArchiveFragment, archive_template: &str) -> String {
    let values = BTreeMap::from([
        ("title".to_owned(), fragment.title.clone()),
        ("exercise_id".to_owned(), fragment.exercise_id.clone()),
        ("score".to_owned(), fragment.score.to_string()),
        ("max_points".to_owned(), fragment.max_points.to_string()),
        ("body".to_owned(), render_blocks(&fragment.blocks)),
    ]);
    template::render(archive_template, &values)
        .or_else(|_| template::render(DEFAULT_ARCHIVE_TEMPLATE, &values))
        .expect("default template only uses known fields")
}

#[cfg(test)]
mod tests {
    use super::super::tests::mc_bundle;
    use super::super::*;
    use super::*;
    use crate::sandbox::{TestCase, TestOutcome};

    fn result_for(bundle: &ExerciseBundle, score: Points) -> AssessmentResult {
        AssessmentResult {
            exercise_id: bundle.exercise_id.clone(),
            score,
            max_points: bundle.max_points,
            answered: true,
            subscores: vec![SubScore {
                id: "x".into(),
                awarded: score,
                possible: bundle.max_points,
                explanation: "because".into(),
            }],
            test_outcomes: None,
            compiler_output: None,
            needs_rerun: false,
        }
    }

    #[test]
    fn programming_fragment_lists_every_file_and_the_tests() {
        let tests = vec![WeightedTest {
            case: TestCase {
                id: "t1".into(),
                stdin: String::new(),
                expected_stdout: "1".into(),
                args: vec![],
            },
            weight: Points::whole(8),
        }];
        let bundle = ExerciseBundle::new(
            "prog",
            "P",
            ExerciseKind::Programming,
            Points::whole(8),
            BTreeMap::new(),
            Some(AssessmentSpec::Sandboxed {
                toolchain: "c".into(),
                tests,
            }),
            None,
        )
        .unwrap();
        let v = instantiate_variant(&bundle, VariantSeed(0)).unwrap();
        let mut result = result_for(&bundle, Points::whole(8));
        result.test_outcomes = Some(vec![TestOutcome {
            test_id: "t1".into(),
            passed: true,
            detail: "ok".into(),
        }]);
        let answer = r#"{"files": {"a.c": "A", "b.c": "B", "main.c": "M"}}"#;
        let fragment = archive_view(&bundle, &v, Some(answer), &result);
        let code: Vec<&str> = fragment
            .blocks
            .iter()
            .filter_map(|b| match b {
                ArchiveBlock::Code { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(code, vec!["a.c", "b.c", "main.c"]);
        let tables = fragment
            .blocks
            .iter()
            .filter(|b| matches!(b, ArchiveBlock::Table { .. }))
            .count();
        assert_eq!(tables, 2);
    }

    #[test]
    fn choice_fragment_shows_chosen_and_correct() {
        let bundle = mc_bundle("mc", false);
        let v = instantiate_variant(&bundle, VariantSeed(0)).unwrap();
        let fragment = archive_view(
            &bundle,
            &v,
            Some(r#"{"selected": ["b"]}"#),
            &result_for(&bundle, Points::ZERO),
        );
        let ArchiveBlock::Table { rows, .. } = &fragment.blocks[1] else {
            panic!()
        };
        assert_eq!(rows[1], vec!["b", "option b", "yes", "no"]);
        assert_eq!(rows[0], vec!["a", "option a", "no", "yes"]);
    }

    #[test]
    fn unanswered_fragment_says_no_answer() {
        let bundle = mc_bundle("mc", false);
        let v = instantiate_variant(&bundle, VariantSeed(0)).unwrap();
        let fragment = archive_view(&bundle, &v, None, &result_for(&bundle, Points::ZERO));
        assert_eq!(fragment.blocks[0], ArchiveBlock::NoAnswer);
        assert_eq!(fragment.score, Points::ZERO);
        let text = render_fragment(&fragment, DEFAULT_ARCHIVE_TEMPLATE);
        assert!(text.contains("no answer"));
        assert!(text.contains("Score: 0 / 4"));
    }

    #[test]
    fn custom_template_is_used() {
        let bundle = mc_bundle("mc", false);
        let v = instantiate_variant(&bundle, VariantSeed(0)).unwrap();
        let fragment = archive_view(&bundle, &v, None, &result_for(&bundle, Points::ZERO));
        assert_eq!(render_fragment(&fragment, "[{{exercise_id}}] {{score}}"), "[mc] 0");
        assert!(render_fragment(&fragment, "{{nope}}").starts_with("Choose (mc)"));
    }
}
