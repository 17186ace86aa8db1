fn main() {
    std::process::exit(pvfusion::cli::run(std::env::args_os()));
}
