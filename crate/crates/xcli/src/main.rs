fn main() {
    std::process::exit(mmfd_xcli::cli::run(std::env::args_os()));
}
