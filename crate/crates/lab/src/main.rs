use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = zslab::cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let code = match zslab::cli::run(cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {}", e);
            e.exit_code()
        }
    };
    let _ = out.flush();
    std::process::exit(code);
}
