fn main() {
    std::process::exit(nlsdp::cli::run(std::env::args_os()));
}
