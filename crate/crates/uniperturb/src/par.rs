//! Data-parallel helpers. With the `parallel` feature (default) the loops run
//! on rayon; without it they fall back to plain sequential iteration. Both
//! paths produce outputs in input order, so results are bit-identical across
//! the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` and collect in index order.
pub(crate) fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map a slice and collect in input order.
pub(crate) fn map_slice<'a, I, O, F>(items: &'a [I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&'a I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let squares = map_range(100, |i| i * i);
        assert_eq!(squares[7], 49);
        let v = vec![1, 2, 3];
        assert_eq!(map_slice(&v, |x| x + 1), vec![2, 3, 4]);
    }
}
