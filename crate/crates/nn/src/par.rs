//! Data-parallel helpers. With the `parallel` feature these dispatch to
//! rayon; without it they run the same closures sequentially. Results are
//! always collected in index order, so outputs do not depend on the worker
//! count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `(0..n).map(f).collect()`, possibly in parallel.
#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Calls `f(i, chunk)` for every `chunk_len`-sized chunk of `data`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    if chunk_len == 0 {
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Zips two equally chunked buffers.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    if a_len == 0 || b_len == 0 {
        return;
    }
    a.par_chunks_mut(a_len)
        .zip(b.par_chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    F: Fn(usize, &mut [A], &mut [B]),
{
    if a_len == 0 || b_len == 0 {
        return;
    }
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Number of workers the helpers above will use.
pub fn workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Configure the global pool once; later calls are ignored. A no-op
/// without the `parallel` feature.
pub fn init_workers(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}

/// Runs `f` on a dedicated pool of `n` workers (sequentially without the
/// `parallel` feature).
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(n: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R>(n: usize, f: impl FnOnce() -> R) -> R {
    let _ = n;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
    }

    #[test]
    fn chunk_pairs_line_up() {
        let mut a = vec![0usize; 12];
        let mut b = vec![0usize; 4];
        for_each_chunk_pair_mut(&mut a, 3, &mut b, 1, |i, x, y| {
            x.iter_mut().for_each(|v| *v = i);
            y[0] = i * 10;
        });
        assert_eq!(a, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        assert_eq!(b, vec![0, 10, 20, 30]);
    }
}
