//! Shows how variant seeds turn one randomized exercise into different
//! participant views, and that the same seed always gives the same view.

use anyhow::Result;
use examkit::exercise::instantiate_variant;
use examkit::VariantSeed;

fn main() -> Result<()> {
    let pool = examkit::demo::pool();
    for id in ["e1", "e2", "e3"] {
        let bundle = pool.get(id).expect("demo exercise");
        println!("{id}: {}", bundle.title);
        for seed in 0..3 {
            let variant = instantiate_variant(bundle, VariantSeed(seed))?;
            let view = bundle.participant_view(&variant)?;
            let options: Vec<&str> = view
                .choices
                .iter()
                .flat_map(|c| c.options.iter().map(|o| o.id.as_str()))
                .collect();
            println!("  seed {seed}: parameters {} options {options:?}", view.parameters);
        }
        let a = instantiate_variant(bundle, VariantSeed(42))?;
        let b = instantiate_variant(bundle, VariantSeed(42))?;
        assert_eq!(a, b, "a seed always yields the same variant");
    }
    Ok(())
}
