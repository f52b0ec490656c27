//! k-means with k-means++ seeding, Lloyd iterations, farthest-point reseeding
//! of empty clusters and a Hartigan single-point refinement, restarted from
//! several seedings.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Independent k-means++ seedings; the lowest objective wins.
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 100,
            restarts: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// K×dim, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Σ over points of the squared distance to the assigned centroid.
    pub objective: f64,
    /// Objective after seeding and after every subsequent update of the
    /// winning run; non-increasing.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Problem<'a> {
    points: &'a [f64],
    dim: usize,
    m: usize,
    norms: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn point(&self, i: usize) -> &'a [f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn objective(&self, centroids: &[f64], assign: &[usize]) -> f64 {
        (0..self.m)
            .map(|i| sq_dist(self.point(i), &centroids[assign[i] * self.dim..(assign[i] + 1) * self.dim]))
            .sum()
    }

    /// Nearest centroid per point (ties → lowest index), via
    /// ‖x‖² − 2⟨x, v⟩ + ‖v‖² with one GEMM.
    fn assign(&self, centroids: &[f64], k: usize, out: &mut [usize]) {
        let mut cross = vec![0.0; self.m * k];
        f64::gemm(false, true, self.m, k, self.dim, 1.0, self.points, centroids, 0.0, &mut cross);
        let cnorm: Vec<f64> = centroids.chunks_exact(self.dim).map(|c| c.iter().map(|v| v * v).sum()).collect();
        for i in 0..self.m {
            let row = &cross[i * k..(i + 1) * k];
            let mut best = (0, f64::INFINITY);
            for (j, (&x, &cn)) in row.iter().zip(&cnorm).enumerate() {
                let d = self.norms[i] - 2.0 * x + cn;
                if d < best.1 {
                    best = (j, d);
                }
            }
            out[i] = best.0;
        }
    }

    fn kmeanspp(&self, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut centroids = Vec::with_capacity(k * self.dim);
        let first = rng.random_range(0..self.m);
        centroids.extend_from_slice(self.point(first));
        let mut d2: Vec<f64> = (0..self.m).map(|i| sq_dist(self.point(i), self.point(first))).collect();
        for _ in 1..k {
            let total: f64 = d2.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Vocabulary(format!(
                    "fewer than {k} distinct vectors available"
                )));
            }
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc >= r {
                    break;
                }
            }
            let pick = pick.expect("positive total weight has a positive entry");
            let c = self.point(pick);
            centroids.extend_from_slice(c);
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq_dist(self.point(i), c));
            }
        }
        Ok(centroids)
    }

    /// Moves points into empty clusters: each empty cluster takes the point
    /// farthest from its current centroid.
    fn reseed_empty(&self, centroids: &[f64], assign: &mut [usize], k: usize) {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..self.m)
                .filter(|&i| counts[assign[i]] > 1)
                .map(|i| (i, sq_dist(self.point(i), &centroids[assign[i] * self.dim..(assign[i] + 1) * self.dim])))
                .filter(|&(_, d)| d > 0.0)
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                counts[assign[i]] -= 1;
                assign[i] = j;
                counts[j] = 1;
            }
        }
    }

    fn means(&self, assign: &[usize], k: usize, previous: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; k * self.dim];
        let mut counts = vec![0usize; k];
        for i in 0..self.m {
            let a = assign[i];
            counts[a] += 1;
            for (s, &v) in sums[a * self.dim..(a + 1) * self.dim].iter_mut().zip(self.point(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            let row = &mut sums[j * self.dim..(j + 1) * self.dim];
            if counts[j] == 0 {
                row.copy_from_slice(&previous[j * self.dim..(j + 1) * self.dim]);
            } else {
                let n = counts[j] as f64;
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        sums
    }

    /// Single-point moves that strictly lower the objective, using the exact
    /// change n_a/(n_a−1)·‖x−μ_a‖² → n_b/(n_b+1)·‖x−μ_b‖².
    fn hartigan(&self, centroids: &mut [f64], assign: &mut [usize], k: usize) -> bool {
        let dim = self.dim;
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let mut moved_any = false;
        for _pass in 0..100 {
            let mut moved = false;
            for i in 0..self.m {
                let a = assign[i];
                if counts[a] <= 1 {
                    continue;
                }
                let x = self.point(i);
                let na = counts[a] as f64;
                let remove = na / (na - 1.0) * sq_dist(x, &centroids[a * dim..(a + 1) * dim]);
                let mut best = (a, remove);
                for b in (0..k).filter(|&b| b != a) {
                    let nb = counts[b] as f64;
                    let add = nb / (nb + 1.0) * sq_dist(x, &centroids[b * dim..(b + 1) * dim]);
                    if add < best.1 {
                        best = (b, add);
                    }
                }
                let (b, add) = best;
                if b == a || !(add < remove * (1.0 - 1e-12)) {
                    continue;
                }
                let nb = counts[b] as f64;
                for c in 0..dim {
                    let ma = &mut centroids[a * dim + c];
                    *ma = (*ma * na - x[c]) / (na - 1.0);
                    let mb = &mut centroids[b * dim + c];
                    *mb = (*mb * nb + x[c]) / (nb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                assign[i] = b;
                moved = true;
                moved_any = true;
            }
            if !moved {
                break;
            }
        }
        moved_any
    }

    fn run(&self, k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Result<KMeansFit> {
        let mut centroids = self.kmeanspp(k, rng)?;
        let mut assign = vec![0usize; self.m];
        self.assign(&centroids, k, &mut assign);
        let mut objective = self.objective(&centroids, &assign);
        let mut history = vec![objective];
        let mut iterations = 0;
        while iterations < max_iters {
            iterations += 1;
            let mut next_assign = assign.clone();
            self.reseed_empty(&centroids, &mut next_assign, k);
            let next_centroids = self.means(&next_assign, k, &centroids);
            let next_obj = self.objective(&next_centroids, &next_assign);
            if next_obj > objective {
                // Only reachable through rounding at a fixpoint.
                break;
            }
            centroids = next_centroids;
            objective = next_obj;
            history.push(objective);
            self.assign(&centroids, k, &mut next_assign);
            // Nearest-centroid reassignment never raises the objective in
            // exact arithmetic; guard against the expanded-distance rounding.
            let reassigned_obj = self.objective(&centroids, &next_assign);
            if next_assign == assign || reassigned_obj > objective {
                break;
            }
            assign = next_assign;
            objective = reassigned_obj;
        }

        let mut refined_c = centroids.clone();
        let mut refined_a = assign.clone();
        if self.hartigan(&mut refined_c, &mut refined_a, k) {
            let exact = self.means(&refined_a, k, &refined_c);
            let obj = self.objective(&exact, &refined_a);
            if obj < objective {
                centroids = exact;
                assign = refined_a;
                objective = obj;
                history.push(objective);
            }
        }
        Ok(KMeansFit {
            centroids,
            assignments: assign,
            objective,
            history,
            iterations,
        })
    }
}

/// Clusters `points` (M×dim, row-major) into `config.k` groups.
pub fn kmeans<T: Scalar>(points: &[T], dim: usize, config: &KMeansConfig) -> Result<KMeansFit> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Dimension(format!(
            "{} values do not form rows of width {dim}",
            points.len()
        )));
    }
    let m = points.len() / dim;
    let k = config.k;
    if k == 0 {
        return Err(Error::Vocabulary("k must be positive".into()));
    }
    if m < k {
        return Err(Error::Vocabulary(format!(
            "need at least k={k} points, got {m}"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kmeans input".into()));
    }
    let data: Vec<f64> = points.iter().map(|v| v.as_f64()).collect();
    let problem = Problem {
        norms: data.chunks_exact(dim).map(|r| r.iter().map(|v| v * v).sum()).collect(),
        points: &data,
        dim,
        m,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..config.restarts.max(1) {
        let fit = problem.run(k, config.max_iters, &mut rng)?;
        if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_well_separated_pairs() {
        let fit = kmeans(&[0.0f64, 1.0, 10.0, 11.0], 1, &KMeansConfig::new(2, 0)).unwrap();
        let mut c = fit.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.5, 10.5]);
        assert_eq!(fit.objective, 1.0);
    }

    #[test]
    fn k_equal_m_reproduces_points() {
        let pts = [0.0f64, 0.0, 1.0, 2.0, -3.0, 0.5];
        let fit = kmeans(&pts, 2, &KMeansConfig::new(3, 4)).unwrap();
        assert_eq!(fit.objective, 0.0);
        let mut rows: Vec<Vec<f64>> = fit.centroids.chunks(2).map(|c| c.to_vec()).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(rows, vec![vec![-3.0, 0.5], vec![0.0, 0.0], vec![1.0, 2.0]]);
    }

    #[test]
    fn too_few_points_or_distinct_points() {
        assert!(matches!(kmeans(&[1.0f64], 1, &KMeansConfig::new(2, 0)), Err(Error::Vocabulary(_))));
        assert!(matches!(
            kmeans(&[1.0f64, 1.0, 1.0], 1, &KMeansConfig::new(2, 0)),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn history_never_increases() {
        let pts: Vec<f64> = (0..300).map(|i| ((i * 7919) % 1013) as f64 / 37.0).collect();
        for seed in 0..5 {
            let fit = kmeans(&pts, 3, &KMeansConfig::new(7, seed)).unwrap();
            assert!(fit.history.windows(2).all(|w| w[1] <= w[0]), "{:?}", fit.history);
            assert_eq!(*fit.history.last().unwrap(), fit.objective);
        }
    }
}
