//! Self-contained exercise bundles.
//!
//! A bundle is a directory:
//!
//! ```text
//! <exercise-id>/
//!   manifest.toml        id, kind, points, assessment, variant template
//!   assets/              static files served verbatim (after parameter substitution)
//!   archive.tmpl         optional report template
//!   initial_state.json   optional starting document, restored on reset
//! ```
//!
//! The assessment section never leaves the server: participant-facing payloads
//! are built by [`ExerciseBundle::participant_view`], which only carries the
//! assets, resolved parameters and the public part of choice options.

mod archive;
mod assess;
pub mod expr;
mod seed;
pub mod template;
mod variant;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{is_safe_token, PoolIndex};
use crate::points::Points;
use crate::sandbox::TestCase;

pub use archive::{archive_view, render_fragment, ArchiveBlock, ArchiveFragment, DEFAULT_ARCHIVE_TEMPLATE};
pub(crate) use assess::source_files;
pub use assess::{assess, AssessError, AssessmentResult, SubScore, SuiteRequest, TestRunner};
pub use expr::Expr;
pub use seed::{derive_seed, VariantSeed};
pub use variant::{instantiate_variant, VariantError, VariantInstance};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const ARCHIVE_TEMPLATE_FILE: &str = "archive.tmpl";
pub const INITIAL_STATE_FILE: &str = "initial_state.json";
pub const ASSETS_DIR: &str = "assets";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExerciseKind {
    MultipleChoice,
    Numeric,
    FreeText,
    GraphEdit,
    Programming,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialCredit {
    /// Each option classified correctly (marked if correct, unmarked if not)
    /// earns `points / option_count`; each misclassified option costs the
    /// same amount. The rule score is floored at 0.
    #[default]
    PerOption,
    AllOrNothing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub correct: bool,
}

/// One declarative scoring rule. `field` names the key of the answer document
/// the rule reads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Rule {
    Choice {
        #[serde(default = "default_choice_field")]
        field: String,
        points: Points,
        #[serde(default)]
        partial_credit: PartialCredit,
        options: Vec<ChoiceOption>,
    },
    Numeric {
        #[serde(default = "default_numeric_field")]
        field: String,
        points: Points,
        target: String,
        #[serde(default)]
        tolerance: f64,
    },
    Pattern {
        #[serde(default = "default_text_field")]
        field: String,
        points: Points,
        pattern: String,
        #[serde(default)]
        case_insensitive: bool,
    },
    Graph {
        #[serde(default = "default_graph_field")]
        field: String,
        points: Points,
        #[serde(default)]
        add_edges: Vec<(String, String)>,
        #[serde(default)]
        remove_edges: Vec<(String, String)>,
    },
}

fn default_choice_field() -> String {
    "selected".into()
}
fn default_numeric_field() -> String {
    "value".into()
}
fn default_text_field() -> String {
    "text".into()
}
fn default_graph_field() -> String {
    "delta".into()
}

impl Rule {
    pub fn points(&self) -> Points {
        match self {
            Rule::Choice { points, .. }
            | Rule::Numeric { points, .. }
            | Rule::Pattern { points, .. }
            | Rule::Graph { points, .. } => *points,
        }
    }

    pub fn field(&self) -> &str {
        match self {
            Rule::Choice { field, .. }
            | Rule::Numeric { field, .. }
            | Rule::Pattern { field, .. }
            | Rule::Graph { field, .. } => field,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Rule::Choice { .. } => "choice",
            Rule::Numeric { .. } => "numeric",
            Rule::Pattern { .. } => "pattern",
            Rule::Graph { .. } => "graph",
        }
    }
}

impl PartialEq for Rule {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedTest {
    #[serde(flatten)]
    pub case: TestCase,
    pub weight: Points,
}

/// Server-side scoring definition. Never sent to participant endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AssessmentSpec {
    Declarative {
        rules: Vec<Rule>,
    },
    Sandboxed {
        toolchain: String,
        tests: Vec<WeightedTest>,
    },
    Manual,
}

impl AssessmentSpec {
    pub fn is_manual(&self) -> bool {
        matches!(self, AssessmentSpec::Manual)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamSpec {
    IntRange { min: i64, max: i64 },
    Choices { choices: Vec<serde_json::Value> },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantGenerator {
    #[serde(default)]
    pub params: BTreeMap<String, ParamSpec>,
    #[serde(default)]
    pub shuffle_options: bool,
    /// Number of options shown per choice rule; at least one correct option
    /// is always kept.
    #[serde(default)]
    pub draw_options: Option<usize>,
}

/// A static file shipped to the client. Text is substituted with variant
/// parameters; binary files are passed through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Asset {
    Text(String),
    Binary(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExerciseBundle {
    pub exercise_id: String,
    pub title: String,
    pub kind: ExerciseKind,
    pub max_points: Points,
    pub assets: BTreeMap<String, Asset>,
    pub assessment: AssessmentSpec,
    pub variants: Option<VariantGenerator>,
    pub archive_template: String,
    pub initial_state: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{0}: missing {MANIFEST_FILE}")]
    MissingManifest(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("exercise `{exercise}`: asset `{asset}` is referenced but absent")]
    MissingAsset { exercise: String, asset: String },
    #[error("exercise `{exercise}`: assessment is required for kind {kind:?}")]
    MissingAssessment { exercise: String, kind: ExerciseKind },
    #[error("exercise `{exercise}`: {what} sum to {sum} but max_points is {max}")]
    PointsMismatch {
        exercise: String,
        what: &'static str,
        sum: Points,
        max: Points,
    },
    #[error("exercise `{exercise}`: {message}")]
    Invalid { exercise: String, message: String },
    #[error("duplicate exercise id `{0}` in pool")]
    DuplicateId(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    id: String,
    title: String,
    kind: ExerciseKind,
    max_points: Points,
    /// Asset files referenced by the exercise; defaults to everything in `assets/`.
    #[serde(default)]
    assets: Option<Vec<String>>,
    #[serde(default)]
    assessment: Option<AssessmentSpec>,
    #[serde(default)]
    variants: Option<VariantGenerator>,
}

impl ExerciseBundle {
    /// Builds a bundle from its parts and checks every bundle invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        exercise_id: impl Into<String>,
        title: impl Into<String>,
        kind: ExerciseKind,
        max_points: Points,
        assets: BTreeMap<String, Asset>,
        assessment: Option<AssessmentSpec>,
        variants: Option<VariantGenerator>,
    ) -> Result<Self, BundleError> {
        let exercise_id = exercise_id.into();
        let assessment = match assessment {
            Some(spec) => spec,
            None if kind == ExerciseKind::FreeText => AssessmentSpec::Manual,
            None => {
                return Err(BundleError::MissingAssessment {
                    exercise: exercise_id,
                    kind,
                })
            }
        };
        let bundle = ExerciseBundle {
            exercise_id,
            title: title.into(),
            kind,
            max_points,
            assets,
            assessment,
            variants,
            archive_template: DEFAULT_ARCHIVE_TEMPLATE.to_owned(),
            initial_state: serde_json::Value::Null,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn with_archive_template(mut self, template: impl Into<String>) -> Self {
        self.archive_template = template.into();
        self
    }

    pub fn with_initial_state(mut self, state: serde_json::Value) -> Self {
        self.initial_state = state;
        self
    }

    fn invalid(&self, message: impl Into<String>) -> BundleError {
        BundleError::Invalid {
            exercise: self.exercise_id.clone(),
            message: message.into(),
        }
    }

    fn validate(&self) -> Result<(), BundleError> {
        if !is_safe_token(&self.exercise_id) {
            return Err(self.invalid("id must be a token of letters, digits, `-`, `_`"));
        }
        if self.max_points <= Points::ZERO {
            return Err(self.invalid("max_points must be > 0"));
        }
        let param_names: BTreeSet<&str> = self
            .variants
            .iter()
            .flat_map(|v| v.params.keys().map(String::as_str))
            .collect();

        match (&self.kind, &self.assessment) {
            (ExerciseKind::Programming, AssessmentSpec::Sandboxed { .. }) => {}
            (ExerciseKind::Programming, _) => {
                return Err(self.invalid("programming exercises require a sandboxed assessment"))
            }
            (ExerciseKind::Custom | ExerciseKind::FreeText, _) => {}
            (kind, AssessmentSpec::Declarative { rules }) => {
                let wanted = match kind {
                    ExerciseKind::MultipleChoice => "choice",
                    ExerciseKind::Numeric => "numeric",
                    ExerciseKind::GraphEdit => "graph",
                    _ => unreachable!(),
                };
                if !rules.iter().any(|r| r.label() == wanted) {
                    return Err(self.invalid(format!("kind {kind:?} needs at least one `{wanted}` rule")));
                }
            }
            (kind, AssessmentSpec::Manual) => {
                return Err(BundleError::MissingAssessment {
                    exercise: self.exercise_id.clone(),
                    kind: *kind,
                })
            }
            (kind, AssessmentSpec::Sandboxed { .. }) => {
                return Err(self.invalid(format!("kind {kind:?} cannot use a sandboxed assessment")))
            }
        }

        match &self.assessment {
            AssessmentSpec::Declarative { rules } => {
                if rules.is_empty() {
                    return Err(self.invalid("declarative assessment needs at least one rule"));
                }
                let sum: Points = rules.iter().map(Rule::points).sum();
                if sum != self.max_points {
                    return Err(BundleError::PointsMismatch {
                        exercise: self.exercise_id.clone(),
                        what: "rule points",
                        sum,
                        max: self.max_points,
                    });
                }
                for rule in rules {
                    if rule.points() < Points::ZERO {
                        return Err(self.invalid("rule points must be >= 0"));
                    }
                    self.validate_rule(rule, &param_names)?;
                }
            }
            AssessmentSpec::Sandboxed { toolchain, tests } => {
                if toolchain.is_empty() {
                    return Err(self.invalid("sandboxed assessment needs a toolchain"));
                }
                if tests.is_empty() {
                    return Err(self.invalid("sandboxed assessment needs at least one test"));
                }
                let mut ids = BTreeSet::new();
                for t in tests {
                    if !ids.insert(t.case.id.as_str()) {
                        return Err(self.invalid(format!("duplicate test id `{}`", t.case.id)));
                    }
                    if t.weight < Points::ZERO {
                        return Err(self.invalid("test weights must be >= 0"));
                    }
                }
                let sum: Points = tests.iter().map(|t| t.weight).sum();
                if sum != self.max_points {
                    return Err(BundleError::PointsMismatch {
                        exercise: self.exercise_id.clone(),
                        what: "test weights",
                        sum,
                        max: self.max_points,
                    });
                }
            }
            AssessmentSpec::Manual => {}
        }

        if let Some(generator) = &self.variants {
            for (name, spec) in &generator.params {
                if !is_safe_token(name) {
                    return Err(self.invalid(format!("parameter name `{name}` is not a token")));
                }
                match spec {
                    ParamSpec::IntRange { min, max } if min > max => {
                        return Err(self.invalid(format!("parameter `{name}`: min > max")))
                    }
                    ParamSpec::Choices { choices } if choices.is_empty() => {
                        return Err(self.invalid(format!("parameter `{name}`: empty choices")))
                    }
                    _ => {}
                }
            }
            if let Some(n) = generator.draw_options {
                if n == 0 {
                    return Err(self.invalid("draw_options must be > 0"));
                }
                for rule in self.declarative_rules() {
                    if let Rule::Choice { options, .. } = rule {
                        if n > options.len() {
                            return Err(self.invalid(format!(
                                "draw_options = {n} exceeds the {} available options",
                                options.len()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_rule(&self, rule: &Rule, params: &BTreeSet<&str>) -> Result<(), BundleError> {
        match rule {
            Rule::Choice { options, .. } => {
                if options.is_empty() {
                    return Err(self.invalid("choice rule needs options"));
                }
                let mut ids = BTreeSet::new();
                for o in options {
                    if !ids.insert(o.id.as_str()) {
                        return Err(self.invalid(format!("duplicate option id `{}`", o.id)));
                    }
                }
            }
            Rule::Numeric { target, tolerance, .. } => {
                let expr = Expr::parse(target).map_err(|e| self.invalid(format!("target `{target}`: {e}")))?;
                for p in expr.params() {
                    if !params.contains(p) {
                        return Err(self.invalid(format!("target `{target}` uses undeclared parameter `{p}`")));
                    }
                }
                if !(tolerance.is_finite() && *tolerance >= 0.0) {
                    return Err(self.invalid("tolerance must be a finite number >= 0"));
                }
            }
            Rule::Pattern { pattern, .. } => {
                Regex::new(pattern).map_err(|e| self.invalid(format!("pattern: {e}")))?;
            }
            Rule::Graph {
                add_edges,
                remove_edges,
                ..
            } => {
                if add_edges.is_empty() && remove_edges.is_empty() {
                    return Err(self.invalid("graph rule expects at least one edge change"));
                }
            }
        }
        Ok(())
    }

    pub fn declarative_rules(&self) -> &[Rule] {
        match &self.assessment {
            AssessmentSpec::Declarative { rules } => rules,
            _ => &[],
        }
    }

    pub fn is_static(&self) -> bool {
        self.variants.is_none()
    }

    /// The payload a participant's client receives: assets with parameters
    /// substituted, public choice options, initial state. No scoring data.
    pub fn participant_view(&self, variant: &VariantInstance) -> Result<ExerciseView, VariantError> {
        let values = variant.display_values();
        let mut assets = BTreeMap::new();
        for (name, asset) in &self.assets {
            let view = match asset {
                Asset::Text(text) if self.is_static() => AssetView::Text(text.clone()),
                Asset::Text(text) => {
                    AssetView::Text(template::render(text, &values).map_err(|e| VariantError::Template {
                        context: format!("asset `{name}`"),
                        source: e,
                    })?)
                }
                Asset::Binary(bytes) => AssetView::Base64(base64::engine::general_purpose::STANDARD.encode(bytes)),
            };
            assets.insert(name.clone(), view);
        }
        let questions = variant
            .resolved_rules(self)?
            .iter()
            .filter_map(|rule| match rule {
                Rule::Choice { field, options, .. } => Some(ChoiceQuestion {
                    field: field.clone(),
                    options: options
                        .iter()
                        .map(|o| PublicOption {
                            id: o.id.clone(),
                            text: o.text.clone(),
                        })
                        .collect(),
                }),
                _ => None,
            })
            .collect();
        Ok(ExerciseView {
            exercise_id: self.exercise_id.clone(),
            title: self.title.clone(),
            kind: self.kind,
            max_points: self.max_points,
            parameters: variant.public_parameters(),
            choices: questions,
            assets,
            initial_state: variant.initial_state.clone(),
        })
    }

    /// The answer document that earns full marks for `variant`, for kinds with
    /// declarative rules. Used for expected-solution sections and self-checks.
    pub fn reference_answer(&self, variant: &VariantInstance) -> Option<serde_json::Value> {
        let rules = variant.resolved_rules(self).ok()?;
        if rules.is_empty() {
            return None;
        }
        let mut doc = serde_json::Map::new();
        for rule in &rules {
            let value = match rule {
                Rule::Choice { options, .. } => serde_json::Value::from(
                    options
                        .iter()
                        .filter(|o| o.correct)
                        .map(|o| o.id.clone())
                        .collect::<Vec<_>>(),
                ),
                Rule::Numeric { target, .. } => {
                    let value = Expr::parse(target).ok()?.eval(&variant.numeric_params()).ok()?;
                    serde_json::Value::from(value)
                }
                Rule::Pattern { .. } => return None,
                Rule::Graph {
                    add_edges,
                    remove_edges,
                    ..
                } => serde_json::json!({
                    "add": add_edges,
                    "remove": remove_edges,
                }),
            };
            doc.insert(rule.field().to_owned(), value);
        }
        Some(serde_json::Value::Object(doc))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoding", content = "content", rename_all = "snake_case")]
pub enum AssetView {
    Text(String),
    Base64(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicOption {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceQuestion {
    pub field: String,
    pub options: Vec<PublicOption>,
}

/// Participant-scope rendering of one exercise variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExerciseView {
    pub exercise_id: String,
    pub title: String,
    pub kind: ExerciseKind,
    pub max_points: Points,
    pub parameters: serde_json::Value,
    pub choices: Vec<ChoiceQuestion>,
    pub assets: BTreeMap<String, AssetView>,
    pub initial_state: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_owned(),
        source,
    }
}

fn read_asset(path: &Path) -> Result<Asset, BundleError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(match String::from_utf8(bytes) {
        Ok(text) => Asset::Text(text),
        Err(e) => Asset::Binary(e.into_bytes()),
    })
}

fn list_assets(dir: &Path) -> Result<Vec<String>, BundleError> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_owned()];
    while let Some(current) = stack.pop() {
        for entry in fs::read_dir(&current).map_err(io_err(&current))? {
            let entry = entry.map_err(io_err(&current))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Ok(rel) = path.strip_prefix(dir) {
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<ExerciseBundle, BundleError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(BundleError::MissingManifest(dir.to_owned()));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| BundleError::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;

    let assets_dir = dir.join(ASSETS_DIR);
    let names = match manifest.assets {
        Some(names) => names,
        None => list_assets(&assets_dir)?,
    };
    let mut assets = BTreeMap::new();
    for name in names {
        let path = assets_dir.join(&name);
        if name.contains("..") || !path.is_file() {
            return Err(BundleError::MissingAsset {
                exercise: manifest.id.clone(),
                asset: name,
            });
        }
        assets.insert(name, read_asset(&path)?);
    }

    let mut bundle = ExerciseBundle::new(
        manifest.id,
        manifest.title,
        manifest.kind,
        manifest.max_points,
        assets,
        manifest.assessment,
        manifest.variants,
    )?;

    let template_path = dir.join(ARCHIVE_TEMPLATE_FILE);
    if template_path.is_file() {
        bundle.archive_template = fs::read_to_string(&template_path).map_err(io_err(&template_path))?;
    }
    let state_path = dir.join(INITIAL_STATE_FILE);
    if state_path.is_file() {
        let text = fs::read_to_string(&state_path).map_err(io_err(&state_path))?;
        bundle.initial_state = serde_json::from_str(&text).map_err(|e| BundleError::Manifest {
            path: state_path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(bundle)
}

/// All bundles available to an exam, keyed by exercise id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExercisePool {
    bundles: BTreeMap<String, ExerciseBundle>,
}

impl ExercisePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, bundle: ExerciseBundle) -> Result<(), BundleError> {
        if self.bundles.contains_key(&bundle.exercise_id) {
            return Err(BundleError::DuplicateId(bundle.exercise_id));
        }
        self.bundles.insert(bundle.exercise_id.clone(), bundle);
        Ok(())
    }

    pub fn from_bundles(bundles: impl IntoIterator<Item = ExerciseBundle>) -> Result<Self, BundleError> {
        let mut pool = Self::new();
        for b in bundles {
            pool.insert(b)?;
        }
        Ok(pool)
    }

    /// Loads every subdirectory of `dir` that contains a manifest.
    pub fn load_dir(dir: &Path) -> Result<Self, BundleError> {
        let mut pool = Self::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST_FILE).is_file())
            .collect();
        entries.sort();
        for path in entries {
            pool.insert(load_bundle(&path)?)?;
        }
        Ok(pool)
    }

    pub fn get(&self, id: &str) -> Option<&ExerciseBundle> {
        self.bundles.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.bundles.keys().map(String::as_str)
    }

    pub fn bundles(&self) -> &BTreeMap<String, ExerciseBundle> {
        &self.bundles
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }
}

impl PoolIndex for ExercisePool {
    fn contains_exercise(&self, id: &str) -> bool {
        self.bundles.contains_key(id)
    }
}
