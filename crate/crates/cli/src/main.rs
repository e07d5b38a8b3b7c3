fn main() {
    std::process::exit(agentsynth_cli::main_with_args(std::env::args_os()));
}
