fn main() {
    std::process::exit(stratformer::cli_io::run_command(std::env::args_os()));
}
