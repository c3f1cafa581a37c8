fn main() {
    std::process::exit(mvlift::cli::cli_main(std::env::args_os()));
}
