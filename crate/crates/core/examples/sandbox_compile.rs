//! Compiles and runs C programs in the sandbox: a working program, a
//! syntax error, and a runaway loop that hits the wall-clock limit.
//! Needs a C compiler on the host.

use std::collections::BTreeMap;

use anyhow::Result;
use examkit::demo;
use examkit::sandbox::{JobAction, SandboxJob, SandboxService};

fn job(source: String, stdin: &str) -> SandboxJob {
    SandboxJob {
        exam_id: "demo-exam".into(),
        participant_id: "p01".into(),
        source_files: BTreeMap::from([("main.c".to_owned(), source)]),
        toolchain: "c".into(),
        action: JobAction::CompileAndRun { stdin: stdin.into() },
        limits: None,
    }
}

fn main() -> Result<()> {
    let service = SandboxService::start(demo::sandbox_config())?;
    for (name, source, stdin) in [
        ("reference", demo::reference_solution(), "4\n3 17 5 9\n"),
        ("syntax error", demo::program("syntax_error.c"), ""),
        ("spin", demo::program("spin.c"), ""),
    ] {
        let started = std::time::Instant::now();
        let result = service.run(job(source, stdin))?;
        println!(
            "{name:<13} {:?} in {:.1}s",
            result.status,
            started.elapsed().as_secs_f64()
        );
        if !result.program_output.is_empty() {
            println!("  stdout: {}", result.program_output.trim_end());
        }
        if let Some(first) = result.compiler_output.lines().next() {
            println!("  compiler: {first}");
        }
    }
    Ok(())
}
