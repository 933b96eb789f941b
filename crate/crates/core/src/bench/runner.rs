//! Batches of independent simulation runs. With the `parallel` feature the
//! batch is spread over the rayon pool; otherwise it runs in order on the
//! calling thread. Results come back in input order either way.

#[cfg(feature = "parallel")]
pub fn run_batch<I, T, F>(inputs: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync + Send,
{
    use rayon::prelude::*;
    inputs.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch<I, T, F>(inputs: Vec<I>, f: F) -> Vec<T>
where
    F: Fn(I) -> T,
{
    run_batch_sequential(inputs, f)
}

/// Always sequential; the baseline for the parallel runner.
pub fn run_batch_sequential<I, T, F>(inputs: Vec<I>, f: F) -> Vec<T>
where
    F: Fn(I) -> T,
{
    inputs.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<u64> = (0..100).collect();
        assert_eq!(
            run_batch(v.clone(), |x| x * x),
            run_batch_sequential(v, |x| x * x)
        );
    }
}
