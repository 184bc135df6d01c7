use std::process::ExitCode;

use clap::Parser;
use funcda_cli::args::{Cli, Command};
use funcda_core::backend::mock::{MockConfig, MockServer};
use tracing::Level;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => Level::WARN,
        1 => Level::INFO,
        _ => Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    if let Command::MockServer { port } = cli.command {
        return match MockServer::start_on(MockConfig::default(), &format!("127.0.0.1:{port}")) {
            Ok(server) => {
                println!("mock server listening on {}", server.base_url());
                server.wait();
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: mock-server: {e}");
                ExitCode::from(1)
            }
        };
    }

    match funcda_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
