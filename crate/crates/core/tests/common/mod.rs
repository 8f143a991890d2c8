//! Independent reference implementations used as test oracles. They share no
//! code with the library beyond plain data types.
#![allow(dead_code)]

/// Lowest within-cluster sum of squares over every labelling of `points`
/// with at most `k` labels (exhaustive, `k^n` labellings).
pub fn brute_force_sse(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sse = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| labels[i] == c).map(|i| &points[i]).collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..d {
                let mean = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                sse += members.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(sse);
        // odometer increment
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// SSE of `points` against their nearest center.
pub fn sse_to_centers(points: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|c| p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Cyclic coordinate descent for `(1/2M)||y - Z b||^2 + gamma ||b||_1`.
/// `z` is row-major `M × K`.
pub fn lasso_cd(z: &[Vec<f64>], y: &[f64], gamma: f64) -> Vec<f64> {
    let m = z.len();
    let k = z[0].len();
    let mf = m as f64;
    let col_sq: Vec<f64> = (0..k)
        .map(|j| z.iter().map(|r| r[j] * r[j]).sum::<f64>() / mf)
        .collect();
    let mut beta = vec![0.0; k];
    let mut resid: Vec<f64> = y.to_vec();
    for _ in 0..1_000_000 {
        let mut max_change = 0.0f64;
        for j in 0..k {
            if col_sq[j] == 0.0 {
                continue;
            }
            let rho = (0..m).map(|i| z[i][j] * (resid[i] + z[i][j] * beta[j])).sum::<f64>() / mf;
            let new = if rho > gamma {
                (rho - gamma) / col_sq[j]
            } else if rho < -gamma {
                (rho + gamma) / col_sq[j]
            } else {
                0.0
            };
            let delta = new - beta[j];
            if delta != 0.0 {
                for i in 0..m {
                    resid[i] -= z[i][j] * delta;
                }
                beta[j] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        if max_change < 1e-15 {
            break;
        }
    }
    beta
}

/// Fraction of (positive, negative) pairs ordered correctly, ties count half.
pub fn pair_counting_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Plain attention-MIL forward pass written with explicit loops:
/// `alpha = softmax_n(w . tanh(V h_n))`, `z = sum alpha_n h_n`,
/// `logits = W z + b`. Returns `(alpha, logits, probs)`.
pub fn abmil_forward(
    h: &[Vec<f64>],
    v: &[Vec<f64>],
    w: &[f64],
    cls_w: &[Vec<f64>],
    cls_b: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = h
        .iter()
        .map(|hn| {
            v.iter()
                .zip(w)
                .map(|(row, wl)| wl * row.iter().zip(hn).map(|(a, b)| a * b).sum::<f64>().tanh())
                .sum()
        })
        .collect();
    let alpha = softmax(&scores);
    let d = h[0].len();
    let z: Vec<f64> = (0..d)
        .map(|j| h.iter().zip(&alpha).map(|(hn, a)| a * hn[j]).sum())
        .collect();
    let logits: Vec<f64> = cls_w
        .iter()
        .zip(cls_b)
        .map(|(row, b)| row.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>() + b)
        .collect();
    let probs = softmax(&logits);
    (alpha, logits, probs)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Small deterministic generator (splitmix64) so oracles draw their own data.
pub struct Stream(u64);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal by Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| scale * self.normal()).collect())
            .collect()
    }
}
