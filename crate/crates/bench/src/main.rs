fn main() {
    let code = switched_slq_bench::commands::main_with_args(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
