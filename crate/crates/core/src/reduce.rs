//! Deterministic parallel reductions.
//!
//! Work is split into fixed-size chunks that do not depend on the thread count. Each
//! chunk is reduced sequentially and the partial results are combined in chunk order,
//! so floating-point sums are bitwise identical for any degree of parallelism.

use rayon::prelude::*;

pub const CHUNK: usize = 2048;

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(CHUNK)).map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(n))).collect()
}

/// `sum_{i < n} f(i)`.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partial: Vec<f64> = chunk_ranges(n)
        .into_par_iter()
        .map(|(a, b)| {
            let mut s = 0.0;
            for i in a..b {
                s += f(i);
            }
            s
        })
        .collect();
    partial.iter().sum()
}

/// Vector-valued sum: `f(i, acc)` adds the contribution of item `i` into `acc`.
pub fn sum_vec_by<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partial: Vec<Vec<f64>> = chunk_ranges(n)
        .into_par_iter()
        .map(|(a, b)| {
            let mut acc = vec![0.0; width];
            for i in a..b {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partial {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// `max_{i < n} f(i)`; `-inf` for empty input. NaN propagates.
pub fn max_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partial: Vec<f64> = chunk_ranges(n)
        .into_par_iter()
        .map(|(a, b)| {
            let mut m = f64::NEG_INFINITY;
            for i in a..b {
                let v = f(i);
                if v.is_nan() || v > m {
                    m = v;
                }
                if m.is_nan() {
                    break;
                }
            }
            m
        })
        .collect();
    partial.into_iter().fold(f64::NEG_INFINITY, |m, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) })
}

/// Fills `out` in rows of `width` by `f(row, slice)`, in parallel.
pub fn fill_rows<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if width == 0 {
        return;
    }
    out.par_chunks_mut(width * CHUNK).enumerate().for_each(|(c, block)| {
        for (k, row) in block.chunks_mut(width).enumerate() {
            f(c * CHUNK + k, row);
        }
    });
}

/// Like [`fill_rows`] but stops at the first error (lowest row index wins).
pub fn try_fill_rows<F, E>(out: &mut [f64], width: usize, f: F) -> Result<(), E>
where
    F: Fn(usize, &mut [f64]) -> Result<(), E> + Sync,
    E: Send,
{
    if width == 0 {
        return Ok(());
    }
    let results: Vec<Result<(), E>> = out
        .par_chunks_mut(width * CHUNK)
        .enumerate()
        .map(|(c, block)| {
            for (k, row) in block.chunks_mut(width).enumerate() {
                f(c * CHUNK + k, row)?;
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_are_independent_of_thread_count() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e-3 + 1.0 / (1.0 + i as f64);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sum_by(100_003, f));
        let b = four.install(|| sum_by(100_003, f));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn vector_sum_and_max() {
        let v = sum_vec_by(5000, 2, |i, acc| {
            acc[0] += 1.0;
            acc[1] += i as f64;
        });
        assert_eq!(v, vec![5000.0, (4999.0 * 5000.0) / 2.0]);
        assert_eq!(max_by(5000, |i| i as f64), 4999.0);
        assert!(max_by(10, |i| if i == 3 { f64::NAN } else { 0.0 }).is_nan());
    }

    #[test]
    fn fill_rows_visits_every_row_once() {
        let mut out = vec![0.0; 3 * 5001];
        fill_rows(&mut out, 3, |r, row| row.iter_mut().for_each(|v| *v = r as f64));
        assert!(out.chunks(3).enumerate().all(|(r, row)| row.iter().all(|&v| v == r as f64)));
    }
}
