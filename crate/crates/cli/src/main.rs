fn main() {
    std::process::exit(mrgr_cli::run(std::env::args_os()));
}
