//! Index-keyed parallel map with a sequential fallback.
//!
//! Results come back in index order either way, so any reduction performed
//! afterwards is independent of the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the generator recorded in experiment manifests.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Substream `stream` of the generator seeded with `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Whether this build runs replications on a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Configures the global pool size. No-op without the `parallel` feature.
pub fn set_threads(n: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}
