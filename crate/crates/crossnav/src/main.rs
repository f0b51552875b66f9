fn main() { crossnav::cli::main() }
