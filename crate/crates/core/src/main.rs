use clap::Parser;

fn main() -> std::process::ExitCode {
    fractal_avoid::cli::main_with(fractal_avoid::cli::Cli::parse())
}
