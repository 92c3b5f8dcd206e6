fn main() {
    std::process::exit(cdis_core::cli::run(std::env::args_os()));
}
