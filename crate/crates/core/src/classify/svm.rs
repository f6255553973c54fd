//! Soft-margin kernel SVM trained by SMO, combined one-against-one.
//!
//! The binary solver minimizes `0.5 a^T Q a - e^T a` subject to
//! `0 <= a_i <= C` and `y^T a = 0`, with `Q_ij = y_i y_j K(x_i, x_j)`. Each
//! iteration updates the maximal violating pair; ties in the selection go to
//! the lowest index so the path is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyKernel {
    pub degree: u32,
    pub gamma: f64,
    pub coef0: f64,
}

impl PolyKernel {
    /// `(gamma <x, z> + coef0)^degree`
    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        let dot: f64 = x.iter().zip(z).map(|(a, b)| a * b).sum();
        (self.gamma * dot + self.coef0).powi(self.degree as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub degree: u32,
    /// `None` means `1 / dim`.
    pub gamma: Option<f64>,
    pub coef0: f64,
    pub c: f64,
    /// Stop once the maximal KKT violation `m - M` drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            degree: 3,
            gamma: None,
            coef0: 1.0,
            c: 1.0,
            tol: 1e-3,
            max_iter: 1_000_000,
        }
    }
}

impl SvmParams {
    pub fn kernel(&self, dim: usize) -> PolyKernel {
        PolyKernel {
            degree: self.degree,
            gamma: self.gamma.unwrap_or(1.0 / dim as f64),
            coef0: self.coef0,
        }
    }
}

/// Dual solution of one binary problem over all of its training points.
#[derive(Debug, Clone)]
pub struct BinarySolution {
    pub alpha: Vec<f64>,
    /// Decision function is `sum_i alpha_i y_i K(x_i, x) + bias`.
    pub bias: f64,
    pub iterations: usize,
}

/// Solves the binary soft-margin dual. Labels must be `+1` or `-1`.
pub fn solve_binary(
    x: &[Vec<f64>],
    y: &[f64],
    kernel: &PolyKernel,
    c: f64,
    tol: f64,
    max_iter: usize,
) -> Result<BinarySolution> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: n,
            got: y.len(),
        });
    }
    if !y.iter().any(|&v| v > 0.0) || !y.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("binary SVM needs both classes".into()));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidInput(format!("C must be positive, got {c}")));
    }

    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&x[i], &x[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let is_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let is_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);

    let mut iterations = 0;
    while iterations < max_iter {
        let mut i = usize::MAX;
        let mut m = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut big_m = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if is_up(alpha[t], y[t]) && v > m {
                m = v;
                i = t;
            }
            if is_low(alpha[t], y[t]) && v < big_m {
                big_m = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || m - big_m < tol {
            break;
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let tau = 1e-12;
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(tau);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(tau);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    // Offset from free vectors, or the midpoint of the feasible interval.
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut n_free = 0;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            free_sum += yg;
        }
    }
    let rho = if n_free > 0 {
        free_sum / n_free as f64
    } else {
        (ub + lb) / 2.0
    };

    Ok(BinarySolution {
        alpha,
        bias: -rho,
        iterations,
    })
}

/// One binary machine of the one-against-one ensemble. Positive decision
/// values favor `class_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMachine {
    pub class_a: usize,
    pub class_b: usize,
    pub support_vectors: Vec<Vec<f64>>,
    /// Dual coefficients `alpha_i` of the support vectors.
    pub alpha: Vec<f64>,
    /// Labels `+1` (class_a) or `-1` (class_b) of the support vectors.
    pub labels: Vec<f64>,
    pub bias: f64,
}

impl PairMachine {
    pub fn decision(&self, kernel: &PolyKernel, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(self.alpha.iter().zip(&self.labels))
            .map(|(sv, (a, y))| a * y * kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub dim: usize,
    pub n_classes: usize,
    pub kernel: PolyKernel,
    pub c: f64,
    pub machines: Vec<PairMachine>,
}

/// Trains one machine per unordered pair of classes present in `labels`.
pub fn svm_train(x: &[Vec<f64>], labels: &[usize], n_classes: usize, params: &SvmParams) -> Result<SvmModel> {
    if x.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: x.len(),
            got: labels.len(),
        });
    }
    let dim = x.first().map_or(0, |v| v.len());
    if dim == 0 || x.iter().any(|v| v.len() != dim) {
        return Err(Error::InvalidInput("training vectors must share a non-zero dimension".into()));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::InvalidInput("SVM training needs at least 2 classes".into()));
    }
    if let Some(&bad) = present.iter().find(|&&c| c >= n_classes) {
        return Err(Error::InvalidInput(format!("class index {bad} out of range")));
    }
    let kernel = params.kernel(dim);

    let mut machines = Vec::new();
    for (ia, &a) in present.iter().enumerate() {
        for &b in &present[ia + 1..] {
            let idx: Vec<usize> = (0..x.len()).filter(|&i| labels[i] == a || labels[i] == b).collect();
            let xs: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| if labels[i] == a { 1.0 } else { -1.0 }).collect();
            let sol = solve_binary(&xs, &ys, &kernel, params.c, params.tol, params.max_iter)?;
            let sv: Vec<usize> = (0..xs.len()).filter(|&i| sol.alpha[i] > 0.0).collect();
            machines.push(PairMachine {
                class_a: a,
                class_b: b,
                support_vectors: sv.iter().map(|&i| xs[i].clone()).collect(),
                alpha: sv.iter().map(|&i| sol.alpha[i]).collect(),
                labels: sv.iter().map(|&i| ys[i]).collect(),
                bias: sol.bias,
            });
        }
    }
    Ok(SvmModel {
        dim,
        n_classes,
        kernel,
        c: params.c,
        machines,
    })
}

impl SvmModel {
    /// Decision value of every machine, in machine order.
    pub fn decisions(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::LengthMismatch {
                what: "feature vector",
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.machines.iter().map(|m| m.decision(&self.kernel, x)).collect())
    }

    /// Majority vote; ties go to the larger summed winning margin, then to
    /// the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let dec = self.decisions(x)?;
        let mut votes = vec![0usize; self.n_classes];
        let mut margin = vec![0.0f64; self.n_classes];
        for (m, d) in self.machines.iter().zip(&dec) {
            let winner = if *d > 0.0 { m.class_a } else { m.class_b };
            votes[winner] += 1;
            margin[winner] += d.abs();
        }
        let mut best = 0;
        for k in 1..self.n_classes {
            if votes[k] > votes[best] || (votes[k] == votes[best] && margin[k] > margin[best]) {
                best = k;
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kkt_violation(x: &[Vec<f64>], y: &[f64], sol: &BinarySolution, kernel: &PolyKernel, c: f64) -> f64 {
        // Recomputes margins from scratch rather than from the solver's gradient.
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let f: f64 = (0..x.len())
                .map(|j| sol.alpha[j] * y[j] * kernel.eval(&x[j], &x[i]))
                .sum::<f64>()
                + sol.bias;
            let yf = y[i] * f;
            let a = sol.alpha[i];
            let v = if a <= 0.0 {
                (1.0 - yf).max(0.0)
            } else if a >= c {
                (yf - 1.0).max(0.0)
            } else {
                (yf - 1.0).abs()
            };
            worst = worst.max(v);
        }
        worst
    }

    fn random_problem(seed: u64, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = x
            .iter()
            .map(|v| if v[0] + 0.5 * v[1] * v[1] + rng.random_range(-0.3..0.3) > 0.0 { 1.0 } else { -1.0 })
            .collect();
        (x, y)
    }

    #[test]
    fn separable_line() {
        let x = vec![vec![-1.0], vec![-2.0], vec![1.0], vec![2.0]];
        let labels = vec![0, 0, 1, 1];
        let p = SvmParams {
            degree: 1,
            ..SvmParams::default()
        };
        let m = svm_train(&x, &labels, 2, &p).unwrap();
        for (xi, &l) in x.iter().zip(&labels) {
            assert_eq!(m.predict(xi).unwrap(), l);
        }
    }

    #[test]
    fn quadratic_kernel_separates_xor() {
        let x = vec![vec![1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0], vec![-1.0, 1.0]];
        let labels = vec![0, 0, 1, 1];
        let p = SvmParams {
            degree: 2,
            c: 10.0,
            ..SvmParams::default()
        };
        let m = svm_train(&x, &labels, 2, &p).unwrap();
        for (xi, &l) in x.iter().zip(&labels) {
            assert_eq!(m.predict(xi).unwrap(), l);
        }
    }

    #[test]
    fn dual_satisfies_constraints_and_kkt() {
        for seed in 0..5 {
            let (x, y) = random_problem(seed, 60, 3);
            let kernel = SvmParams::default().kernel(3);
            let c = 1.0;
            let sol = solve_binary(&x, &y, &kernel, c, 1e-3, 1_000_000).unwrap();
            assert!(sol.alpha.iter().all(|&a| (0.0..=c).contains(&a)));
            let eq: f64 = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
            assert!(eq.abs() < 1e-6, "sum alpha y = {eq}");
            assert!(kkt_violation(&x, &y, &sol, &kernel, c) < 2e-3);
        }
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(svm_train(&x, &[1, 1], 4, &SvmParams::default()).is_err());
    }

    #[test]
    fn four_classes_train_six_machines() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers = [(-2.0, 0.0), (2.0, 0.0), (0.0, 2.0), (0.0, -2.0)];
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for (k, (cx, cy)) in centers.iter().enumerate() {
            for _ in 0..15 {
                x.push(vec![cx + rng.random_range(-0.5..0.5), cy + rng.random_range(-0.5..0.5)]);
                labels.push(k);
            }
        }
        let m = svm_train(&x, &labels, 4, &SvmParams::default()).unwrap();
        assert_eq!(m.machines.len(), 6);
        // vote-counting oracle over the raw decision functions
        for xi in &x {
            let mut votes = [0; 4];
            for mach in &m.machines {
                let d: f64 = mach
                    .support_vectors
                    .iter()
                    .enumerate()
                    .map(|(s, sv)| mach.alpha[s] * mach.labels[s] * m.kernel.eval(sv, xi))
                    .sum::<f64>()
                    + mach.bias;
                votes[if d > 0.0 { mach.class_a } else { mach.class_b }] += 1;
            }
            let max = *votes.iter().max().unwrap();
            let predicted = m.predict(xi).unwrap();
            assert_eq!(votes[predicted], max);
        }
        assert_eq!(m.predict(&[-2.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn vote_cycle_goes_to_lowest_class() {
        let kernel = PolyKernel {
            degree: 1,
            gamma: 1.0,
            coef0: 0.0,
        };
        // Constant decision values: bias only.
        let mach = |a, b, bias| PairMachine {
            class_a: a,
            class_b: b,
            support_vectors: vec![],
            alpha: vec![],
            labels: vec![],
            bias,
        };
        let m = SvmModel {
            dim: 1,
            n_classes: 3,
            kernel,
            c: 1.0,
            machines: vec![mach(0, 1, 1.0), mach(0, 2, -1.0), mach(1, 2, 1.0)],
        };
        assert_eq!(m.predict(&[0.0]).unwrap(), 0);
        // unequal margins break the tie first
        let m2 = SvmModel {
            machines: vec![mach(0, 1, 1.0), mach(0, 2, -1.0), mach(1, 2, 2.0)],
            ..m.clone()
        };
        assert_eq!(m2.predict(&[0.0]).unwrap(), 1);
        assert!(m.predict(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn decisions_invariant_to_sample_order() {
        let (x, y) = random_problem(42, 40, 2);
        let labels: Vec<usize> = y.iter().map(|&v| if v > 0.0 { 0 } else { 1 }).collect();
        let p = SvmParams {
            tol: 1e-10,
            ..SvmParams::default()
        };
        let m1 = svm_train(&x, &labels, 2, &p).unwrap();
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.reverse();
        order.rotate_left(7);
        let xs: Vec<_> = order.iter().map(|&i| x[i].clone()).collect();
        let ls: Vec<_> = order.iter().map(|&i| labels[i]).collect();
        let m2 = svm_train(&xs, &ls, 2, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let q = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let d1 = m1.decisions(&q).unwrap()[0];
            let d2 = m2.decisions(&q).unwrap()[0];
            assert!((d1 - d2).abs() < 1e-6, "{d1} vs {d2}");
        }
    }
}
