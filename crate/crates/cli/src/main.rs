use clap::Parser;
use rdstrata_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("rdstrata: {e}");
        std::process::exit(e.exit_code());
    }
}
