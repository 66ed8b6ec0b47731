#![allow(dead_code)]

use rejuv_core::pruning::Scope;

/// Flatten, stable sort on magnitude, take the top `keep` entries.
/// `tenths` is the ratio in tenths so the keep count is pure integer math.
pub fn prune_oracle(tensors: &[(String, Vec<f32>)], tenths: usize, scope: Scope) -> Vec<Vec<bool>> {
    let keep = |n: usize| n * (10 - tenths) / 10;
    let select = |flat: Vec<(usize, usize, f32)>, k: usize, out: &mut Vec<Vec<bool>>| {
        let mut flat = flat;
        flat.sort_by(|a, b| b.2.abs().partial_cmp(&a.2.abs()).unwrap());
        for &(t, i, _) in flat.iter().take(k) {
            out[t][i] = true;
        }
    };
    let mut out: Vec<Vec<bool>> = tensors.iter().map(|(_, d)| vec![false; d.len()]).collect();
    match scope {
        Scope::Local => {
            for (t, (_, d)) in tensors.iter().enumerate() {
                let flat = d.iter().enumerate().map(|(i, &v)| (t, i, v)).collect();
                select(flat, keep(d.len()).max(1), &mut out);
            }
        }
        Scope::Global => {
            let mut sorted: Vec<usize> = (0..tensors.len()).collect();
            sorted.sort_by(|&a, &b| tensors[a].0.cmp(&tensors[b].0));
            let flat = sorted.iter().flat_map(|&t| tensors[t].1.iter().enumerate().map(move |(i, &v)| (t, i, v))).collect();
            let total = tensors.iter().map(|(_, d)| d.len()).sum();
            select(flat, keep(total), &mut out);
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Singular values of the column-centered matrix, descending.
pub fn dense_singular_values(m: &[Vec<f64>]) -> Vec<f64> {
    let rows = m.len();
    let d = m[0].len();
    let mean: Vec<f64> = (0..d).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / rows as f64).collect();
    let c: Vec<Vec<f64>> = m.iter().map(|r| r.iter().zip(&mean).map(|(x, mu)| x - mu).collect()).collect();
    let gram = (0..d).map(|a| (0..d).map(|b| c.iter().map(|r| r[a] * r[b]).sum()).collect()).collect();
    jacobi_eigenvalues(gram).into_iter().map(|l: f64| l.max(0.0).sqrt()).collect()
}

/// Exact two-sided sign-test p-value from binomial coefficients in u128.
pub fn binomial_sign_p(wins: u64, losses: u64) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let choose = |k: u64| (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128);
    let (lo, hi) = (wins.min(losses), wins.max(losses));
    let mass: u128 = (0..=lo).map(choose).sum::<u128>() + (hi..=n).map(choose).sum::<u128>();
    (mass as f64 / 2f64.powi(n as i32)).min(1.0)
}
