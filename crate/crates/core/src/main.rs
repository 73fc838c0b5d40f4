fn main() {
    std::process::exit(sidgr::cli::run(std::env::args_os()));
}
