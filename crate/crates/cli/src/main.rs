fn main() {
    std::process::exit(asuka_lab::main_with(std::env::args_os()));
}
