use clap::Parser;

fn main() {
    let cli = scout_cli::Cli::parse();
    if let Err(e) = scout_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
