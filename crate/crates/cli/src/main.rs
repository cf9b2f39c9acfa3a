fn main() {
    std::process::exit(sgldm_cli::main_from(std::env::args_os()));
}
