fn main() {
    std::process::exit(itr::cli::run(std::env::args_os()));
}
