fn main() {
    std::process::exit(rbw_core::cli::run(std::env::args_os()));
}
