//! Literal scalar evaluations of the objectives: explicit loops, no
//! stabilisation, no graph. Slow and fragile by design; they exist to be
//! compared against.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn column(w: &[f64], cols: usize, j: usize) -> Vec<f64> {
    w.iter().skip(j).step_by(cols).copied().collect()
}

/// Row-major `n × p` rows `z`.
pub fn supcon_naive(z: &[f64], p: usize, labels: &[usize], tau: f64) -> f64 {
    let n = labels.len();
    let row = |i: usize| &z[i * p..(i + 1) * p];
    let mut total = 0.0;
    for a in 0..n {
        let mut den = 0.0;
        for k in 0..n {
            if k != a {
                den += (dot(row(a), row(k)) / tau).exp();
            }
        }
        let positives: Vec<usize> = (0..n).filter(|&i| i != a && labels[i] == labels[a]).collect();
        let mut inner = 0.0;
        for &i in &positives {
            inner += ((dot(row(a), row(i)) / tau).exp() / den).ln();
        }
        total += -inner / positives.len() as f64;
    }
    total
}

/// `emb` is row-major `n × d`, `w` row-major `d × c`.
pub fn cosine_ce_naive(emb: &[f64], d: usize, labels: &[usize], w: &[f64], c: usize, s: f64) -> f64 {
    let n = labels.len();
    let cols: Vec<Vec<f64>> = (0..c).map(|j| column(w, c, j)).collect();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let e = &emb[i * d..(i + 1) * d];
        let den: f64 = cols.iter().map(|wh| (s * cos(e, wh)).exp()).sum();
        total += -((s * cos(e, &cols[y])).exp() / den).ln();
    }
    total / n as f64
}

/// `protos` and `w` are row-major `d × c`; `old` lists old columns.
pub fn prototype_naive(protos: &[f64], w: &[f64], c: usize, old: &[usize], s: f64) -> f64 {
    let pcols: Vec<Vec<f64>> = (0..c).map(|j| column(protos, c, j)).collect();
    let wcols: Vec<Vec<f64>> = (0..c).map(|j| column(w, c, j)).collect();
    let den: f64 = (0..c).map(|h| (s * cos(&pcols[h], &wcols[h])).exp()).sum();
    let mut total = 0.0;
    for &k in old {
        total += -((s * cos(&pcols[k], &wcols[k])).exp() / den).ln();
    }
    total / old.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn supcon_two_identical() {
        assert!(supcon_naive(&[0.6, 0.8, 0.6, 0.8], 2, &[3, 3], 0.1).abs() < 1e-12);
    }

    #[test]
    fn ce_hand_softmax() {
        let v = cosine_ce_naive(&[1.0, 0.0], 2, &[0], &[1.0, 0.0, 0.0, 1.0], 2, 1.0);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn prototype_single_old_class() {
        let p = [1.0, 0.0, 0.0, 1.0];
        let w = [0.3, 1.0, 0.8, -0.2];
        let v = prototype_naive(&p, &w, 2, &[0], 1.0);
        let (c0, c1) = (0.3 / (0.3f64.powi(2) + 0.8f64.powi(2)).sqrt(), -0.2 / (1.0f64 + 0.04).sqrt());
        assert!((v + (c0.exp() / (c0.exp() + c1.exp())).ln()).abs() < 1e-12);
    }
}
