use clap::Parser;

fn main() {
    let cli = zsi::cli::Cli::parse();
    let mut stdout = std::io::stdout();
    std::process::exit(zsi::cli::run(cli, &mut stdout));
}
