//! Lloyd's K-means on box dimensions, used to derive anchor sizes.

use rand::seq::index::sample;
use rand::Rng;

use super::boxes::Box3D;

/// K size triples (l, w, h) clustered from the ground-truth boxes by Lloyd
/// iterations run to an assignment fixpoint. Seeded initialization picks K
/// distinct boxes as starting centroids.
pub fn kmeans_sizes<R: Rng>(boxes: &[Box3D], k: usize, rng: &mut R) -> Option<Vec<[f64; 3]>> {
    if boxes.len() < k || k == 0 {
        return None;
    }
    let points: Vec<[f64; 3]> = boxes.iter().map(|b| [b.l, b.w, b.h]).collect();
    let mut centroids: Vec<[f64; 3]> = sample(rng, points.len(), k)
        .into_iter()
        .map(|i| points[i])
        .collect();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..1000 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    dist2(p, &centroids[a])
                        .partial_cmp(&dist2(p, &centroids[b]))
                        .unwrap()
                })
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64; 3]> = points
                .iter()
                .zip(assignment.iter())
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            for d in 0..3 {
                centroid[d] = members.iter().map(|m| m[d]).sum::<f64>() / n;
            }
        }
    }
    Some(centroids)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn boxed(l: f64, w: f64, h: f64) -> Box3D {
        Box3D::new(0.0, 0.0, 0.0, l, w, h, 0.0)
    }

    #[test]
    fn identical_boxes_identical_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let boxes = vec![boxed(1.6, 3.9, 1.56); 5];
        let c = kmeans_sizes(&boxes, 2, &mut rng).unwrap();
        for centroid in c {
            assert_eq!(centroid, [1.6, 3.9, 1.56]);
        }
    }

    #[test]
    fn two_tight_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut boxes = Vec::new();
        for i in 0..20 {
            let jitter = (i % 5) as f64 * 1e-9;
            boxes.push(boxed(1.5 + jitter, 3.5 + jitter, 1.5));
            boxes.push(boxed(1.7 + jitter, 4.2 + jitter, 1.55));
        }
        let mut c = kmeans_sizes(&boxes, 2, &mut rng).unwrap();
        c.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!((c[0][0] - 1.5).abs() < 1e-6 && (c[0][1] - 3.5).abs() < 1e-6);
        assert!((c[1][0] - 1.7).abs() < 1e-6 && (c[1][1] - 4.2).abs() < 1e-6);
    }

    #[test]
    fn k_larger_than_n_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(kmeans_sizes(&[boxed(1.0, 2.0, 1.0)], 2, &mut rng).is_none());
    }
}
