//! Process-level knobs.

/// Maximum number of worker threads for the read-only parallel phases
/// (per-query evaluation, per-camera estimation). Controlled by the
/// `CAMNORM_THREADS` environment variable; defaults to 1. Results are
/// reduced in a fixed order, so the thread count never changes any output.
pub fn thread_cap() -> usize {
    std::env::var("CAMNORM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Splits `n` items into at most `thread_cap()` contiguous chunks.
pub(crate) fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    let workers = thread_cap().min(n.max(1));
    let base = n / workers;
    let extra = n % workers;
    let mut out = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 0..workers {
        let len = base + usize::from(w < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}
