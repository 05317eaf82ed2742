//! Runs the synthetic desk-scale recipe end to end and prints the ablation.
//!
//! `cargo run --release -p dermachat-core --example desk [out_dir]`

use std::time::Instant;

use dermachat_core::synth::generate_corpus;
use dermachat_core::train::{prepare, run_ablation, DeskPlan};

fn main() -> dermachat_core::Result<()> {
    env_logger::init();
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let plan = DeskPlan::default();
    let t = Instant::now();
    let corpus = generate_corpus(&plan.synth)?;
    let prepared = prepare(&plan, &corpus)?;
    println!(
        "stage 0 done in {:.1}s: vision loss {:?} acc {:?}, decoder loss {:?}",
        t.elapsed().as_secs_f64(),
        prepared.vision.losses.last(),
        prepared.vision.train_accuracy,
        prepared.decoder.losses.last()
    );
    let report = run_ablation(&prepared.base, &prepared.corpora, &plan.stage1, &plan.stage2, &plan.generation, out.as_deref())?;
    print!("{}", report.table());
    println!("total {:.1}s, combined dominates: {}", t.elapsed().as_secs_f64(), report.combined_dominates());
    Ok(())
}
