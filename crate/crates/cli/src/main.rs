use clap::Parser;

fn main() -> anyhow::Result<()> {
    hgm_cli::cli::main_with(hgm_cli::cli::Cli::parse())
}
