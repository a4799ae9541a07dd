use std::io::Write;
use std::sync::OnceLock;

use p2pdeb::pipeline::StopHandle;
use p2pdeb_cli::run_cli;

static STOP: OnceLock<StopHandle> = OnceLock::new();

/// First interrupt asks the pipeline to drain and seal; a second one
/// falls through to the default action and kills the process.
extern "C" fn on_interrupt(_signal: libc::c_int) {
    if let Some(stop) = STOP.get() {
        stop.request_stop();
    }
    unsafe {
        libc::signal(libc::SIGINT, libc::SIG_DFL);
    }
}

fn main() {
    let stop = StopHandle::new();
    STOP.set(stop.clone()).expect("stop handle installed once");
    unsafe {
        libc::signal(
            libc::SIGINT,
            on_interrupt as *const () as libc::sighandler_t,
        );
    }
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    let code = run_cli(std::env::args_os(), &stop, &mut out, &mut err);
    let _ = out.flush();
    let _ = err.flush();
    std::process::exit(code);
}
