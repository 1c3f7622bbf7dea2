fn main() {
    std::process::exit(spike_saliency::cli::main_with_args(std::env::args_os()));
}
