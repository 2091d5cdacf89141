//! Isolated per-fit benchmark worker: reads one JSON request from stdin,
//! runs the requested fit, prints one JSON response line to stdout. Spawned
//! as its own process so the peak resident set is attributable to one fit.

fn main() {
    if let Err(e) = dem_core::experiments::worker_main() {
        eprintln!("bench worker: {e}");
        std::process::exit(1);
    }
}
