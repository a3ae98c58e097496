//! Regenerate the bundled example data:
//! `cargo run -p prefnet-cli --example make_example -- crates/cli/data/example`

use std::path::PathBuf;

use prefnet::simulate::{generate, BetaMap, DesignSpec, SimSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "crates/cli/data/example".into()),
    );
    std::fs::create_dir_all(&dir)?;
    let spec = SimSpec {
        m: 200,
        t: 6,
        p_z: 4,
        design: DesignSpec {
            levels: vec![2, 3, 3],
        },
        beta_map: BetaMap::Homogeneous {
            beta: vec![0.8, -0.5, 0.4, 1.0, -0.7],
        },
        seed: 11,
        ..SimSpec::default()
    };
    let generated = generate(&spec, 0)?;
    let ds = &generated.dataset;
    ds.write_long(&dir.join("profiles.csv"), &dir.join("covariates.csv"))?;
    std::fs::write(dir.join("schema.toml"), ds.schema().to_toml())?;
    println!(
        "wrote {} respondents, {} tasks to {}",
        ds.n_respondents(),
        ds.n_rows(),
        dir.display()
    );
    Ok(())
}
