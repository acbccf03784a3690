//! Full protocol on the synthetic 10-class corpus with the desk preset
//! (6 base classes, two 2-way 5-shot sessions).
//!
//! ```text
//! cargo run --release -p fscil --example synthetic_run -- [seed]
//! ```

use std::path::Path;
use std::time::Instant;

use fscil::datagen::{parse_manifest, synth_manifest_text};
use fscil::presets::{synthetic_data, synthetic_desk};
use fscil::protocol::{prepare_examples, run_on_examples};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let setup = synthetic_desk(seed);
    let manifest = parse_manifest(&synth_manifest_text(&synthetic_data(seed)), Path::new("."))?;

    let t = Instant::now();
    let examples = prepare_examples(&manifest, &setup.dsp)?;
    eprintln!("features: {:.2?}", t.elapsed());
    let t = Instant::now();
    let outcome = run_on_examples(examples, &setup.embedder, &setup.protocol)?;
    eprintln!("protocol: {:.2?}", t.elapsed());

    print!("{}", outcome.report.to_table());
    if let Some(r) = outcome.report.clustering_ratio {
        println!("clustering ratio {r:.4}");
    }
    Ok(())
}
