//! Loads an exam directory and prints what an author would want to check
//! before deploying it. Pass a directory, or run without arguments to use
//! the bundled demo exam.
//!
//!     cargo run --example validate_config -- path/to/exam

use anyhow::{bail, Result};
use examkit::gateway::ExamSource;
use examkit::Points;

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(examkit::demo::exam_dir);
    let source = match ExamSource::load_for_preview(&dir) {
        Ok(source) => source,
        Err(diagnostics) => {
            for d in &diagnostics {
                eprintln!("error: {d}");
            }
            bail!("{} has {} problems", dir.display(), diagnostics.len());
        }
    };
    let config = &source.config;
    println!("{} ({})", config.title, config.exam_id);
    let mut total = Points::ZERO;
    for id in &config.exercise_refs {
        let bundle = source.pool.get(id).expect("validated");
        total += bundle.max_points;
        let randomized = if bundle.variants.is_some() {
            "randomized"
        } else {
            "static"
        };
        println!(
            "  {id:<4} {:<12} {:>6} points  {randomized}  {}",
            format!("{:?}", bundle.kind),
            bundle.max_points,
            bundle.title
        );
    }
    let extra: Vec<&str> = source
        .pool
        .ids()
        .filter(|id| !config.exercise_refs.iter().any(|r| r == id))
        .collect();
    println!("  {total} points in total; in the pool but not the exam: {extra:?}");
    println!(
        "  {} participants, {} minutes, grace {}s",
        config.roster.len(),
        config.timing.duration_minutes,
        config.timing.grace_seconds
    );
    for b in &config.grade_chart.boundaries {
        println!("  grade {:>4} from {} points", b.label, b.min_points);
    }
    Ok(())
}
