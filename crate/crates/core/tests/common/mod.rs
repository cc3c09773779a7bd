//! Solver-free statistics for one-dimensional ensembles, where both
//! coarse-grained matrices of an interval are the harmonic mean of its cells.

#![allow(dead_code)]

use cgflow::{CoefficientField, EnsembleSpec};

pub fn harmonic_mean(values: &[f64]) -> f64 {
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct OracleLevel {
    pub abar: f64,
    pub abar_se: f64,
    pub astar_inv: f64,
    pub astar_inv_se: f64,
    pub theta: f64,
    pub theta_se: f64,
    pub tau_prev: Option<(f64, f64)>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn sample_cov(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Per-sample tile averages of `H` and `1/H` at every level, then the
/// annealed statistics, for samples with seeds `seed + i`.
pub fn flow_1d(spec: &EnsembleSpec, max_level: u32, samples: usize) -> Vec<OracleLevel> {
    let per_sample: Vec<Vec<(f64, f64)>> = (0..samples)
        .map(|i| {
            let field = CoefficientField::generate(&spec.with_seed(spec.seed.wrapping_add(i as u64)), 1, max_level).unwrap();
            let cells: Vec<f64> = (0..field.cell_count()).map(|c| field.cell_mat(c).get(0, 0)).collect();
            (0..=max_level)
                .map(|n| {
                    let tiles: Vec<f64> = cells.chunks(3usize.pow(n)).map(harmonic_mean).collect();
                    (mean(&tiles), mean(&tiles.iter().map(|h| 1.0 / h).collect::<Vec<_>>()))
                })
                .collect()
        })
        .collect();
    let count = samples as f64;
    let column = |n: usize, which: usize| -> Vec<f64> {
        per_sample.iter().map(|s| if which == 0 { s[n].0 } else { s[n].1 }).collect()
    };
    let mut out: Vec<OracleLevel> = Vec::new();
    for n in 0..=max_level as usize {
        let (xs, ys) = (column(n, 0), column(n, 1));
        let (a, b) = (mean(&xs), mean(&ys));
        let (va, vb, cov) = (sample_var(&xs) / count, sample_var(&ys) / count, sample_cov(&xs, &ys) / count);
        let tau_prev = (n > 0).then(|| {
            let m0 = (a / b).sqrt();
            let (p2, q2) = (1.0 / m0, m0);
            let (xp, yp) = (column(n - 1, 0), column(n - 1, 1));
            let diffs: Vec<f64> = (0..samples).map(|i| 0.5 * p2 * (xp[i] - xs[i]) + 0.5 * q2 * (yp[i] - ys[i])).collect();
            let tau = 0.5 * p2 * (mean(&xp) - a) + 0.5 * q2 * (mean(&yp) - b);
            (tau, (sample_var(&diffs) / count).sqrt())
        });
        out.push(OracleLevel {
            abar: a,
            abar_se: va.sqrt(),
            astar_inv: b,
            astar_inv_se: vb.sqrt(),
            theta: a * b,
            theta_se: (b * b * va + a * a * vb + 2.0 * a * b * cov).max(0.0).sqrt(),
            tau_prev,
        });
    }
    out
}

/// Smallest level with `Θ ≤ 1 + σ`.
pub fn first_scale(thetas: impl IntoIterator<Item = f64>, sigma: f64) -> Option<u32> {
    thetas.into_iter().position(|t| t <= 1.0 + sigma).map(|n| n as u32)
}

pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
