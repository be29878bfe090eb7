use std::process::ExitCode;

fn main() -> ExitCode {
    // Die quietly on a closed pipe (`spo inspect … | head`) instead of
    // panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    spo::cli::main()
}
