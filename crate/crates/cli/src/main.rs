use clap::Parser;
use piba_cli::error::CliError;
use piba_cli::Cli;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => fail(CliError::Config(e.to_string().trim().to_string())),
    };
    match piba_cli::execute(&cli) {
        Ok(m) => println!("{}: {} artifacts in {}", m.command, m.artifacts.len(), m.experiment),
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ! {
    eprintln!("{}", e.to_json());
    std::process::exit(e.exit_code())
}
