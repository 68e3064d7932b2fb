fn main() {
    std::process::exit(geoproto::cli::run(std::env::args_os()));
}
