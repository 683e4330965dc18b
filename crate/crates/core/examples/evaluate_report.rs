//! Confusion counts and the per-class report, including the degenerate case
//! where one class is never predicted.
//!
//! cargo run --example evaluate_report

use privlex::metrics::{confusion, EvaluationReport};

fn main() -> privlex::Result<()> {
    let truth = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let pred = [1, 1, 1, 0, 0, 0, 0, 0, 1, 1];
    let report = EvaluationReport::from_counts(confusion(&pred, &truth)?);
    println!("{}", serde_json::to_string_pretty(&report)?);

    let never_private = EvaluationReport::from_counts(confusion(&[0; 10], &truth)?);
    println!("all-public predictor: BA {:.4}, flagged {:?}", never_private.overall.ba, never_private.degenerate);
    Ok(())
}
