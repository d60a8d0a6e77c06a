use std::process::ExitCode;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let env = upscale_cli::env_snapshot();
    let invocation = match upscale_cli::parse_invocation(
        &argv,
        |path| {
            std::fs::read_to_string(path).map_err(|e| {
                upscale_core::Error::Config(format!("cannot read config {}: {e}", path.display()))
            })
        },
        &env,
    ) {
        Ok(inv) => inv,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(upscale_cli::EXIT_CONFIG as u8);
        }
    };
    ExitCode::from(upscale_cli::run(&invocation) as u8)
}
