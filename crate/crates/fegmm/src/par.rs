//! Data-parallel helpers. With the `parallel` feature (default) the hot loops
//! fan out over rayon; without it they run sequentially. The sequential
//! bodies stay available either way so benchmarks can compare both paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sequential map over a slice; baseline implementation.
pub fn map_slice_seq<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential map over an index range; baseline implementation.
pub fn map_range_seq<R: Send, F>(count: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    (0..count).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_slice_par<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range_par<R: Send, F>(count: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    (0..count).into_par_iter().map(f).collect()
}

/// Map over a slice, parallel when the feature is enabled. Results keep the
/// input order, so reductions over the output are deterministic regardless of
/// the worker count.
pub fn map_slice<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_slice_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_slice_seq(items, f)
    }
}

/// Map over `0..count`, parallel when the feature is enabled.
pub fn map_range<R: Send, F>(count: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_range_par(count, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_range_seq(count, f)
    }
}

/// Run `f` on a pool with `workers` threads (None = library default). With
/// the sequential build the worker count is ignored.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match workers {
            Some(k) if k > 0 => rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .expect("failed to build thread pool")
                .install(f),
            _ => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<usize> = (0..257).collect();
        let out = map_slice(&items, |&x| 2 * x);
        assert_eq!(out, (0..257).map(|x| 2 * x).collect::<Vec<_>>());
        let out = map_range(101, |i| i * i);
        assert_eq!(out[100], 10_000);
    }

    #[test]
    fn worker_override_is_transparent() {
        let a = with_workers(Some(1), || map_range(64, |i| i + 1));
        let b = with_workers(Some(4), || map_range(64, |i| i + 1));
        assert_eq!(a, b);
    }
}
