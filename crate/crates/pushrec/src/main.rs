fn main() {
    std::process::exit(pushrec::cli::run(std::env::args_os()));
}
