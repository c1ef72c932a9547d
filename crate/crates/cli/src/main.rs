use clap::Parser;

fn main() {
    let cli = diffmatch_cli::args::Cli::parse();
    if let Err(err) = diffmatch_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
