fn main() {
    std::process::exit(pencil_consensus::cli::run(std::env::args_os()));
}
