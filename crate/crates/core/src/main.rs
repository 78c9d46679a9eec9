fn main() {
    std::process::exit(symteam::cli::run(std::env::args_os()));
}
