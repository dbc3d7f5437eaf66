use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    physode_cli::tune_allocator();
    let cli = physode_cli::Cli::parse();
    let result = physode_cli::run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(physode_cli::exit_code(&result));
}
