//! The `langbridge` binary: a thin shell around [`langbridge_core::cli::run`].

fn main() {
    std::process::exit(langbridge_core::cli::run(std::env::args_os()));
}
