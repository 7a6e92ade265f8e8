fn main() {
    std::process::exit(mixrec::cli::run(std::env::args_os()));
}
