//! Affinity propagation clustering over a precomputed similarity matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::par;

/// Dense square similarity matrix; the diagonal holds the preferences.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds `s(i, k) = sim(i, k)` for `i != k` (rows computed in parallel)
    /// and sets the diagonal to the median off-diagonal similarity.
    pub fn from_fn<F>(n: usize, sim: F) -> Self
    where
        F: Fn(usize, usize) -> f64 + Sync,
    {
        let rows: Vec<Vec<f64>> = par::map_range(n, |i| (0..n).map(|k| if i == k { 0.0 } else { sim(i, k) }).collect());
        let mut m = Self {
            n,
            data: rows.into_iter().flatten().collect(),
        };
        let pref = m.median_off_diagonal();
        m.set_preference(pref);
        m
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "similarity matrix must be square");
        Self {
            n,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.n + k]
    }

    pub fn set_preference(&mut self, p: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] = p;
        }
    }

    /// Median of the off-diagonal entries (mean of the middle two for an even
    /// count); 0 when there are none.
    pub fn median_off_diagonal(&self) -> f64 {
        let mut v: Vec<f64> = (0..self.n)
            .flat_map(|i| (0..self.n).filter(move |&k| k != i).map(move |k| (i, k)))
            .map(|(i, k)| self.get(i, k))
            .collect();
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        if v.len().is_multiple_of(2) {
            (v[mid - 1] + v[mid]) / 2.0
        } else {
            v[mid]
        }
    }

    /// Sum of preferences of `exemplars` plus each other point's best
    /// similarity to an exemplar.
    /// Copy with a tiny fixed-seed perturbation that breaks exact ties
    /// between symmetric points, which otherwise make the messages oscillate.
    fn jittered(&self) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = self
            .data
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + (f64::EPSILON * v + f64::MIN_POSITIVE * 100.0) * z
            })
            .collect();
        Self { n: self.n, data }
    }

    pub fn net_similarity(&self, exemplars: &[usize]) -> f64 {
        (0..self.n)
            .map(|i| {
                if exemplars.contains(&i) {
                    self.get(i, i)
                } else {
                    exemplars
                        .iter()
                        .map(|&k| self.get(i, k))
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityConfig {
    pub damping: f64,
    pub max_iter: usize,
    /// Iterations with an unchanged exemplar set required to stop.
    pub convergence_window: usize,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            damping: 0.7,
            max_iter: 500,
            convergence_window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    /// Exemplar index for every point; exemplars map to themselves.
    pub exemplar_of: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

impl Clustering {
    pub fn exemplars(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self
            .exemplar_of
            .iter()
            .enumerate()
            .filter(|(i, e)| i == *e)
            .map(|(i, _)| i)
            .collect();
        e.sort_unstable();
        e
    }

    pub fn members(&self, exemplar: usize) -> Vec<usize> {
        (0..self.exemplar_of.len())
            .filter(|&i| self.exemplar_of[i] == exemplar)
            .collect()
    }
}

/// Responsibility/availability message passing with damping.
///
/// Stops once the exemplar set has been unchanged for
/// `convergence_window` iterations, or after `max_iter` iterations with
/// `converged = false`. Each cluster's exemplar is finally re-chosen as the
/// member with the highest summed similarity to the rest of its cluster.
pub fn affinity_propagation(s: &SimilarityMatrix, cfg: &AffinityConfig) -> Clustering {
    assert!(
        (0.5..1.0).contains(&cfg.damping),
        "damping must lie in [0.5, 1)"
    );
    let n = s.len();
    if n <= 1 {
        return Clustering {
            exemplar_of: (0..n).collect(),
            converged: true,
            iterations: 0,
        };
    }
    let s = &s.jittered();
    let lam = cfg.damping;
    let mut r = vec![0.0; n * n];
    let mut a = vec![0.0; n * n];
    let mut last: Vec<usize> = Vec::new();
    let mut stable = 0;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        iterations += 1;
        // Responsibilities.
        for i in 0..n {
            let row = i * n;
            let (mut best, mut best_k, mut second) = (f64::NEG_INFINITY, 0, f64::NEG_INFINITY);
            for k in 0..n {
                let v = a[row + k] + s.get(i, k);
                if v > best {
                    second = best;
                    best = v;
                    best_k = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let competitor = if k == best_k { second } else { best };
                let new = s.get(i, k) - competitor;
                r[row + k] = lam * r[row + k] + (1.0 - lam) * new;
            }
        }
        // Availabilities.
        for k in 0..n {
            let pos_sum: f64 = (0..n).filter(|&i| i != k).map(|i| r[i * n + k].max(0.0)).sum();
            for i in 0..n {
                let new = if i == k {
                    pos_sum
                } else {
                    (r[k * n + k] + pos_sum - r[i * n + k].max(0.0)).min(0.0)
                };
                a[i * n + k] = lam * a[i * n + k] + (1.0 - lam) * new;
            }
        }
        let exemplars: Vec<usize> = (0..n).filter(|&k| a[k * n + k] + r[k * n + k] > 0.0).collect();
        if !exemplars.is_empty() && exemplars == last {
            stable += 1;
            if stable >= cfg.convergence_window {
                converged = true;
                break;
            }
        } else {
            stable = 0;
        }
        last = exemplars;
    }

    if last.is_empty() {
        // No point has positive self-evidence yet; fall back to the strongest one.
        let k = (0..n)
            .max_by(|&x, &y| (a[x * n + x] + r[x * n + x]).total_cmp(&(a[y * n + y] + r[y * n + y])))
            .expect("n > 1");
        last = vec![k];
    }
    Clustering {
        exemplar_of: assign(s, &refine(s, &last)),
        converged,
        iterations,
    }
}

/// Each point to its most similar exemplar (ties to the lowest index).
fn assign(s: &SimilarityMatrix, exemplars: &[usize]) -> Vec<usize> {
    (0..s.len())
        .map(|i| {
            if exemplars.contains(&i) {
                return i;
            }
            let mut best = exemplars[0];
            for &k in &exemplars[1..] {
                if s.get(i, k) > s.get(i, best) {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn refine(s: &SimilarityMatrix, exemplars: &[usize]) -> Vec<usize> {
    let labels = assign(s, exemplars);
    let mut out: Vec<usize> = exemplars
        .iter()
        .map(|&e| {
            let members: Vec<usize> = (0..s.len()).filter(|&i| labels[i] == e).collect();
            let score = |c: usize| -> f64 { members.iter().filter(|&&i| i != c).map(|&i| s.get(i, c)).sum() };
            let mut best = e;
            for &c in &members {
                if score(c) > score(best) + 1e-12 {
                    best = c;
                }
            }
            best
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive search over every non-empty exemplar set.
    fn best_exemplar_sets(s: &SimilarityMatrix) -> (f64, Vec<Vec<usize>>) {
        let n = s.len();
        let mut best = f64::NEG_INFINITY;
        let mut sets = Vec::new();
        for mask in 1u32..(1 << n) {
            let e: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let v = s.net_similarity(&e);
            if v > best + 1e-9 {
                best = v;
                sets = vec![e];
            } else if (v - best).abs() <= 1e-9 {
                sets.push(e);
            }
        }
        (best, sets)
    }

    fn two_blobs() -> SimilarityMatrix {
        let pts = [0.0, 0.1, 0.2, 5.0, 5.1, 5.3];
        SimilarityMatrix::from_fn(pts.len(), |i, k| -(pts[i] - pts[k]) * (pts[i] - pts[k]))
    }

    #[test]
    fn recovers_two_blobs() {
        let s = two_blobs();
        let c = affinity_propagation(&s, &AffinityConfig::default());
        assert!(c.converged);
        assert_eq!(c.exemplars(), vec![1, 4]);
        assert_eq!(c.exemplar_of, vec![1, 1, 1, 4, 4, 4]);
        let (best, sets) = best_exemplar_sets(&s);
        assert!(sets.contains(&c.exemplars()));
        assert!((s.net_similarity(&c.exemplars()) - best).abs() < 1e-9);
    }

    #[test]
    fn single_and_empty() {
        let s = SimilarityMatrix::from_rows(vec![vec![-1.0]]);
        let c = affinity_propagation(&s, &AffinityConfig::default());
        assert_eq!(c.exemplar_of, vec![0]);
        let s = SimilarityMatrix::from_rows(Vec::new());
        assert!(affinity_propagation(&s, &AffinityConfig::default()).exemplar_of.is_empty());
    }

    #[test]
    fn reports_non_convergence() {
        let s = two_blobs();
        let cfg = AffinityConfig {
            max_iter: 3,
            ..Default::default()
        };
        let c = affinity_propagation(&s, &cfg);
        assert!(!c.converged);
        assert_eq!(c.exemplar_of.len(), 6);
        for (i, &e) in c.exemplar_of.iter().enumerate() {
            assert_eq!(c.exemplar_of[e], e, "point {i} assigned to a non-exemplar");
        }
    }

    #[test]
    fn median_preference() {
        let s = SimilarityMatrix::from_fn(3, |i, k| -((i + k) as f64));
        // Off-diagonal values: -1, -2, -1, -3, -2, -3.
        assert_eq!(s.median_off_diagonal(), -2.0);
        assert_eq!(s.get(0, 0), -2.0);
    }
}
