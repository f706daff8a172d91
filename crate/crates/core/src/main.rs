fn main() {
    std::process::exit(lstnet::cli::main_exit());
}
