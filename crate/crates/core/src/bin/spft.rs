fn main() -> std::process::ExitCode {
    sp_transfer::cli::main_from_args()
}
