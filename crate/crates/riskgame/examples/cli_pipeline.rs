//! Drive the batch pipeline programmatically: the same subcommands the
//! `riskgame` binary exposes (`solve | verify | simulate | value | probe |
//! report`), run here against a bundled config into a scratch directory.
//!
//! ```bash
//! cargo run --release --example cli_pipeline
//! ```

use std::path::Path;

use riskgame::cli::run_subcommand;

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/scalar.json");
    let out = Path::new("out/cli_pipeline");

    for cmd in ["solve", "verify", "value"] {
        println!("==> riskgame {cmd} --config {} --out {}", config.display(), out.display());
        let code = run_subcommand(cmd, &config, out, &["--paths", "5000"]);
        println!("exit status {code}\n");
        assert_eq!(code, 0, "{cmd} failed");
    }
    println!("artifacts written under {}", out.display());
    for entry in std::fs::read_dir(out).unwrap() {
        println!("  {}", entry.unwrap().path().display());
    }
}
