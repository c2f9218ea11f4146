fn main() {
    std::process::exit(dqp::cli::main());
}
