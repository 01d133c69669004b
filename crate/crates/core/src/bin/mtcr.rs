fn main() {
    std::process::exit(mtcr_vc::datakit::cli::run(std::env::args_os()));
}
