//! Regenerates the bundled benchmark problem files:
//!
//! cargo run -p mpct --example write_benchmark -- benchmarks

use std::path::PathBuf;

use mpct::config::{LimitSpec, ProblemFile};
use mpct::sim::benchmark;

fn main() -> mpct::Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "benchmarks".into()),
    );
    std::fs::create_dir_all(&dir).expect("create output directory");

    let bx = benchmark::initial_state_box();
    let initial_box = LimitSpec {
        lower: bx.lower.iter().map(|v| Some(*v)).collect(),
        upper: bx.upper.iter().map(|v| Some(*v)).collect(),
    };

    let mut sampled = ProblemFile::from_problem(&benchmark::problem(), &benchmark::reference())?;
    sampled.x0 = Some(vec![0.0; 6]);
    sampled.initial_box = Some(initial_box);

    let scn = benchmark::output_limit_scenario();
    let mut closed_loop = ProblemFile::from_problem(&scn.problem, &scn.reference)?;
    closed_loop.x0 = Some(scn.initial_state.iter().copied().collect());
    closed_loop.steps = Some(scn.steps);

    for (name, file) in [
        ("oscillating_masses.json", sampled),
        ("oscillating_masses_output_limits.json", closed_loop),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, file.to_json_pretty() + "\n").expect("write problem file");
        println!("wrote {}", path.display());
    }
    Ok(())
}
