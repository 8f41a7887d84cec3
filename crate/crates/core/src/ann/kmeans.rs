//! Seeded Lloyd k-means used to train IVF coarse centroids.
//!
//! Assignment runs in parallel, but every reduction happens sequentially in
//! position order, so training is bit-reproducible for a given seed.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::vector::dot;

pub const DEFAULT_ITERS: u32 = 20;

/// Index of the centroid minimizing ‖x − c‖², lowest index on ties.
///
/// `half_sq_norms[j]` holds ‖c_j‖²/2; for a fixed x, ‖x − c‖² orders like ‖c‖²/2 − x·c.
pub(crate) fn nearest_centroid(x: &[f32], centroids: &[f32], half_sq_norms: &[f32], dim: usize) -> usize {
    let mut best = 0;
    let mut best_dist = f32::INFINITY;
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let dist = half_sq_norms[j] - dot(x, c);
        if dist < best_dist {
            best_dist = dist;
            best = j;
        }
    }
    best
}

pub(crate) fn half_sq_norms(centroids: &[f32], dim: usize) -> Vec<f32> {
    centroids.chunks_exact(dim).map(|c| 0.5 * dot(c, c)).collect()
}

pub(crate) fn assign(vectors: &[f32], centroids: &[f32], dim: usize) -> Vec<u32> {
    let norms = half_sq_norms(centroids, dim);
    vectors
        .par_chunks_exact(dim)
        .map(|x| nearest_centroid(x, centroids, &norms, dim) as u32)
        .collect()
}

/// Trains `k` centroids over `vectors` (row-major, `dim` columns).
///
/// Initial centroids are `k` distinct input rows drawn with a ChaCha8 stream
/// seeded by `seed`. A cluster that empties out is re-seeded with the member
/// of the currently largest cluster that lies farthest from its centroid.
pub fn train(vectors: &[f32], dim: usize, k: usize, seed: u64, iters: u32) -> Vec<f32> {
    let n = vectors.len() / dim;
    assert!(k >= 1 && k <= n, "k-means needs 1 <= k <= n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init: Vec<usize> = sample(&mut rng, n, k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<f32> = init.iter().flat_map(|&i| vectors[i * dim..(i + 1) * dim].iter().copied()).collect();

    for _ in 0..iters {
        let assignment = assign(vectors, &centroids, dim);
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1;
            let row = &vectors[i * dim..(i + 1) * dim];
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row) {
                *s += *x as f64;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = (*s * inv) as f32;
                }
            }
        }
        repair_empty(vectors, dim, &mut centroids, &assignment, &mut counts);
    }
    centroids
}

fn repair_empty(vectors: &[f32], dim: usize, centroids: &mut [f32], assignment: &[u32], counts: &mut [usize]) {
    let k = counts.len();
    let mut taken = Vec::new();
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        if counts[largest] < 2 {
            return;
        }
        let center = centroids[largest * dim..(largest + 1) * dim].to_vec();
        let far = assignment
            .iter()
            .enumerate()
            .filter(|(i, &a)| a as usize == largest && !taken.contains(i))
            .map(|(i, _)| {
                let row = &vectors[i * dim..(i + 1) * dim];
                let d: f32 = row.iter().zip(&center).map(|(x, c)| (x - c) * (x - c)).sum();
                (i, d)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        let Some(far) = far else { return };
        taken.push(far);
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(&vectors[far * dim..(far + 1) * dim]);
        counts[largest] -= 1;
        counts[empty] = 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_clusters() {
        let vectors = [1.0, 0.0, 0.99, 0.141, 0.0, 1.0, 0.141, 0.99];
        let c = train(&vectors, 2, 2, 3, 10);
        let a = assign(&vectors, &c, 2);
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Two identical initial picks are impossible, but a centroid can lose all members.
        let vectors = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let mut centroids = vec![1.0, 0.0, -1.0, 0.0];
        let assignment = assign(&vectors, &centroids, 2);
        let mut counts = vec![0usize; 2];
        assignment.iter().for_each(|&a| counts[a as usize] += 1);
        assert_eq!(counts, vec![4, 0]);
        repair_empty(&vectors, 2, &mut centroids, &assignment, &mut counts);
        assert_eq!(&centroids[2..], &[0.0, 1.0]);
    }
}
