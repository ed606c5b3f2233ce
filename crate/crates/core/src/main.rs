use clap::Parser;

fn main() {
    let cli = iterfac::cli::Cli::parse();
    std::process::exit(iterfac::cli::execute(cli));
}
