//! Authoring loop: preview a copy of the demo exam, edit an exercise on
//! disk, and watch the preview pick up the change or reject a broken edit.

use std::path::Path;
use std::sync::Arc;

use anyhow::Result;
use examkit::gateway::{preview::Reload, GatewayConfig, Orchestrator, Previewer};

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let work = tempfile::tempdir()?;
    let exam = work.path().join("exam");
    copy_dir(&examkit::demo::exam_dir(), &exam)?;

    let orch = Arc::new(Orchestrator::new(GatewayConfig::in_memory(work.path().join("data"))));
    let previewer = Previewer::start(orch, &exam)?;
    let title = |p: &Previewer| p.instance().map(|i| i.session.bundle("e4").map(|b| b.title.clone()));
    println!(
        "preview at /x/{}/, e4 is {:?}",
        previewer.route(),
        title(&previewer).flatten()
    );
    println!("poll without changes: {:?}", previewer.poll()?);

    let manifest = exam.join("exercises/e4/manifest.toml");
    let text = std::fs::read_to_string(&manifest)?;
    let edited = text.replacen("title = \"", "title = \"Revised: ", 1);
    std::fs::write(&manifest, &edited)?;
    match previewer.poll()? {
        Reload::Reloaded { generation } => println!(
            "reloaded as generation {generation}, e4 is {:?}",
            title(&previewer).flatten()
        ),
        other => println!("unexpected: {other:?}"),
    }

    std::fs::write(&manifest, "this is not toml = = =")?;
    if let Reload::Rejected(diagnostics) = previewer.poll()? {
        println!(
            "broken edit rejected, preview keeps running: {}",
            diagnostics.join("; ")
        );
    }
    Ok(())
}
