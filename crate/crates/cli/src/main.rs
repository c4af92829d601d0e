use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = balancekit_cli::cli::Cli::parse();
    std::process::exit(balancekit_cli::cli::run(cli));
}
