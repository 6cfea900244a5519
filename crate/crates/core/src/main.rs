fn main() {
    std::process::exit(l2s_core::cli::run(std::env::args_os()));
}
