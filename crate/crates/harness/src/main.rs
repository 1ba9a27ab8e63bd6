fn main() {
    std::process::exit(cfbeam::run::main_with(std::env::args_os()));
}
