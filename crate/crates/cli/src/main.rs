fn main() {
    sparse_prs_cli::init_logging();
    std::process::exit(sparse_prs_cli::run(std::env::args_os()));
}
