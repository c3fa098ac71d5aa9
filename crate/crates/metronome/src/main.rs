fn main() {
    std::process::exit(metronome::cli::main());
}
