fn main() {
    std::process::exit(dda_tool::main_with(std::env::args_os()));
}
