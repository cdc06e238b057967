use clap::Parser;
use stylekit_cli::{commands, resolve_config, Cli};

fn main() {
    let cli = Cli::parse();
    let result = resolve_config(&cli).and_then(|cfg| commands::dispatch(cfg, cli.command));
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
