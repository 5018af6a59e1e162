fn main() {
    std::process::exit(seqtriage_cli::main_with(std::env::args_os()));
}
