fn main() {
    std::process::exit(cxgrad::run::cli::main());
}
