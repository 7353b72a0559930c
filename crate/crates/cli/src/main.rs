fn main() {
    std::process::exit(dfm_cli::run_cli(std::env::args_os()));
}
