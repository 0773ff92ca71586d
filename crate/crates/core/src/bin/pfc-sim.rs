fn main() {
    std::process::exit(pfc_sim::cli::main_with(std::env::args_os()));
}
