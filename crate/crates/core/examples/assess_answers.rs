//! Scores a few answers to the declarative demo exercises and prints the
//! per-rule breakdown a report would show.

use anyhow::Result;
use examkit::exercise::{assess, instantiate_variant, SuiteRequest, TestRunner};
use examkit::sandbox::JobResult;
use examkit::VariantSeed;
use serde_json::json;

/// Declarative exercises never ask for a test run.
struct Unused;

impl TestRunner for Unused {
    fn run_suite(&self, _: &SuiteRequest) -> Result<JobResult, String> {
        Err("no sandbox in this example".into())
    }
}

fn main() -> Result<()> {
    let pool = examkit::demo::pool();
    let e3 = pool.get("e3").expect("demo exercise");
    let variant = instantiate_variant(e3, VariantSeed(7))?;
    let p = e3.participant_view(&variant)?.parameters;
    let sum = p["a"].as_i64().unwrap_or(0) + p["b"].as_i64().unwrap_or(0);
    println!("e3 asks for {} + {}", p["a"], p["b"]);
    for answer in [Some(json!({"value": sum})), Some(json!({"value": sum + 1})), None] {
        let text = answer.as_ref().map(|a| a.to_string());
        let result = assess(e3, &variant, text.as_deref(), &Unused, "p01")?;
        println!(
            "  {:<16} -> {} of {}",
            text.unwrap_or_else(|| "(no answer)".into()),
            result.score,
            result.max_points
        );
    }

    let e1 = pool.get("e1").expect("demo exercise");
    let variant = instantiate_variant(e1, VariantSeed(3))?;
    let view = e1.participant_view(&variant)?;
    let first = &view.choices[0].options[0].id;
    let result = assess(
        e1,
        &variant,
        Some(&json!({"selected": [first]}).to_string()),
        &Unused,
        "p01",
    )?;
    println!(
        "e1 with only `{first}` selected: {} of {}",
        result.score, result.max_points
    );
    for s in &result.subscores {
        println!("  {:<10} {}/{}  {}", s.id, s.awarded, s.possible, s.explanation);
    }
    Ok(())
}
