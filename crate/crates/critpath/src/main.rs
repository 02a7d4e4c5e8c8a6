fn main() {
    std::process::exit(critpath::cli::run(std::env::args_os()));
}
