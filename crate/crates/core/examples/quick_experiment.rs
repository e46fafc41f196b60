//! Run every pipeline stage on a scaled-down config and print the report.
//!
//! Writes to the directory given as the first argument, or a temporary one.

use nbest_rescore::pipeline::{cmd_run, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let tmp = tempfile::tempdir()?;
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| tmp.path().to_path_buf());
    let cfg = ExperimentConfig::quick();
    for m in cmd_run(&cfg, &out)? {
        println!("{:<12} {} outputs", m.stage, m.outputs.len());
    }
    print!("{}", std::fs::read_to_string(out.join("evaluate/report.txt"))?);
    Ok(())
}
