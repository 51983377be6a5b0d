//! Brute-force reference solver for the asymmetric-cost SVM dual, kept
//! independent of the SMO code path: dense Gram matrix, accelerated
//! projected-gradient ascent, projection by bisection on the multiplier of
//! the equality constraint.

#![allow(dead_code)]

pub struct QpProblem {
    pub points: Vec<Vec<f64>>,
    /// +1.0 / -1.0
    pub labels: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<f64>, c_minus: f64, pa: f64) -> Self {
        let upper = labels
            .iter()
            .map(|&y| if y > 0.0 { pa * c_minus } else { c_minus })
            .collect();
        Self {
            points,
            labels,
            upper,
        }
    }

    fn q(&self) -> Vec<Vec<f64>> {
        let n = self.points.len();
        let mut q = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let k: f64 = self.points[i]
                    .iter()
                    .zip(&self.points[j])
                    .map(|(a, b)| a * b)
                    .sum();
                q[i][j] = self.labels[i] * self.labels[j] * k;
            }
        }
        q
    }

    /// `Σα − ½ αᵀQα`
    pub fn dual(&self, alpha: &[f64]) -> f64 {
        let q = self.q();
        let n = alpha.len();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += alpha[i] * q[i][j] * alpha[j];
            }
        }
        alpha.iter().sum::<f64>() - 0.5 * quad
    }

    fn project(&self, v: &[f64]) -> Vec<f64> {
        let at = |lambda: f64| -> Vec<f64> {
            v.iter()
                .zip(&self.labels)
                .zip(&self.upper)
                .map(|((&vi, &y), &c)| (vi - lambda * y).clamp(0.0, c))
                .collect()
        };
        let balance = |a: &[f64]| -> f64 { a.iter().zip(&self.labels).map(|(a, y)| a * y).sum() };
        let span = v.iter().map(|x| x.abs()).fold(0.0, f64::max)
            + self.upper.iter().cloned().fold(0.0, f64::max)
            + 1.0;
        // balance(at(λ)) is non-increasing in λ
        let (mut lo, mut hi) = (-span, span);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if balance(&at(mid)) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(0.5 * (lo + hi))
    }

    /// Returns the maximizing α and its dual objective.
    pub fn solve(&self, iterations: usize) -> (Vec<f64>, f64) {
        let q = self.q();
        let n = self.labels.len();
        let lipschitz = (0..n).map(|i| q[i][i]).sum::<f64>().max(1e-12);
        let step = 1.0 / lipschitz;
        let mut alpha = vec![0.0; n];
        let mut momentum = alpha.clone();
        let mut t = 1.0f64;
        for _ in 0..iterations {
            let grad: Vec<f64> = (0..n)
                .map(|i| 1.0 - (0..n).map(|j| q[i][j] * momentum[j]).sum::<f64>())
                .collect();
            let moved: Vec<f64> = (0..n).map(|i| momentum[i] + step * grad[i]).collect();
            let next = self.project(&moved);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            momentum = (0..n)
                .map(|i| next[i] + (t - 1.0) / t_next * (next[i] - alpha[i]))
                .collect();
            alpha = next;
            t = t_next;
        }
        let value = self.dual(&alpha);
        (alpha, value)
    }
}
