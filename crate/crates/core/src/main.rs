fn main() {
    std::process::exit(moca::cli::run(std::env::args_os()));
}
