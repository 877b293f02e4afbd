fn main() {
    std::process::exit(fpf::cli::run(std::env::args_os()));
}
