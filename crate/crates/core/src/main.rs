use clap::Parser;

use relufy::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("relufy: {e}");
        std::process::exit(e.exit_code());
    }
}
