//! Compiles the shipped sample vocabulary into prompt sentences under each
//! template, with hierarchy selection and without.
//!
//! cargo run --example vocab_compile

use std::path::Path;

use privlex::vocab::{compile_prompts, load_vocabulary, select_bottleneck, SelectionMode, TemplateStyle};

fn main() -> privlex::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/dpv-pd-sample.jsonl");
    let vocab = load_vocabulary(&path, TemplateStyle::Description)?;
    let flat = select_bottleneck(&vocab, SelectionMode::Flat)?;
    let selected = select_bottleneck(&vocab, SelectionMode::HierarchyRule)?;
    println!("{} concepts in file, {} after hierarchy selection", flat.len(), selected.len());

    for style in [
        TemplateStyle::Description,
        TemplateStyle::InformationAbout,
        TemplateStyle::DescriptionWithExamples,
    ] {
        let v = selected.with_template(style);
        println!("\n[{style}] hash {}", &v.content_hash()[..16]);
        for p in compile_prompts(&v).iter().take(4) {
            println!("  {:<20} {}", p.concept_id, p.text);
        }
    }
    Ok(())
}
