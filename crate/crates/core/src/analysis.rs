//! Encoder-representation trajectories: per-checkpoint mean encoder states
//! reduced to two dimensions by truncated SVD.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{PaddedBatch, Pair, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::train::PhaseKind;

pub const MAX_ITERATIONS: usize = 1000;
pub const TOLERANCE: f64 = 1e-10;
pub const TRAJECTORY_HEADER: &str = "checkpoint_id,phase,dim1,dim2";

const BATCH: usize = 64;

/// Mean of the final encoder states: first over the non-pad positions of each
/// sentence (its EOS included), then over sentences.
pub fn encoder_mean_vector(model: &Transformer, corpus: &ParallelCorpus) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Data("encoder mean over an empty corpus".into()));
    }
    let d = model.config.d_model;
    let mut total = vec![0.0f64; d];
    for chunk in corpus.pairs.chunks(BATCH) {
        let pairs: Vec<&Pair> = chunk.iter().collect();
        let batch = PaddedBatch::from_pairs(&pairs);
        let states = model.encode_batch(&batch)?;
        for i in 0..batch.batch {
            let mut sent = vec![0.0f64; d];
            let mut n = 0usize;
            for j in 0..batch.src_len {
                let pos = i * batch.src_len + j;
                if batch.src_pad[pos] {
                    continue;
                }
                n += 1;
                for (s, &v) in sent.iter_mut().zip(&states.data[pos * d..(pos + 1) * d]) {
                    *s += v as f64;
                }
            }
            for (t, s) in total.iter_mut().zip(&sent) {
                *t += s / n as f64;
            }
        }
    }
    Ok(total.into_iter().map(|t| t / corpus.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// Unit right singular vectors, one per row, by descending singular value.
    pub components: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    /// Centered rows projected onto the components, `[m][k]`.
    pub reduced: Vec<Vec<f64>>,
    /// Column means removed before the decomposition.
    pub mean: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn mat_vec(g: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    g.iter().map(|row| dot(row, v)).collect()
}

/// Top-`k` singular triplets of the column-centered matrix, by power
/// iteration on the Gram matrix with deflation.
pub fn truncated_svd(matrix: &[Vec<f64>], k: usize) -> Result<Svd> {
    let m = matrix.len();
    let d = matrix.first().map_or(0, Vec::len);
    if matrix.iter().any(|r| r.len() != d) {
        return Err(Error::Usage("truncated_svd: rows have different lengths".into()));
    }
    if k == 0 || k > m.min(d) {
        return Err(Error::Usage(format!("truncated_svd: k = {k} must lie in 1..={} for a {m}x{d} matrix", m.min(d))));
    }
    if matrix.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("truncated_svd: matrix has non-finite entries".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| matrix.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
    let centered: Vec<Vec<f64>> = matrix.iter().map(|r| r.iter().zip(&mean).map(|(x, mu)| x - mu).collect()).collect();
    let mut gram: Vec<Vec<f64>> = (0..d).map(|a| (0..d).map(|b| centered.iter().map(|r| r[a] * r[b]).sum()).collect()).collect();

    // Eigenvalues below this are rounding noise; comparing them relatively
    // would never settle.
    let floor = 1e-12 * (0..d).map(|i| gram[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5bd1_e995);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut singular_values = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for c in &components {
            let p = dot(&v, c);
            v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
        }
        normalize(&mut v);
        let mut lambda = dot(&v, &mat_vec(&gram, &v));
        let mut converged = false;
        for _ in 0..MAX_ITERATIONS {
            let mut w = mat_vec(&gram, &v);
            // Keep the iterate orthogonal to earlier components so rounding
            // does not drift it back into the deflated subspace.
            for c in &components {
                let p = dot(&w, c);
                w.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
            if normalize(&mut w) == 0.0 {
                // Remaining spectrum is zero; any orthogonal direction serves.
                lambda = 0.0;
                converged = true;
                break;
            }
            let next = dot(&w, &mat_vec(&gram, &w));
            v = w;
            let done = (next - lambda).abs() <= TOLERANCE * next.abs().max(floor);
            lambda = next;
            if done {
                converged = true;
                break;
            }
        }
        if !converged {
            let gv = mat_vec(&gram, &v);
            let residual = gv.iter().zip(&v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
            return Err(Error::Numerical(format!(
                "truncated_svd: power iteration did not converge in {MAX_ITERATIONS} iterations (residual {residual:e})"
            )));
        }
        let imax = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        if v[imax] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let lambda = lambda.max(0.0);
        for a in 0..d {
            for b in 0..d {
                gram[a][b] -= lambda * v[a] * v[b];
            }
        }
        singular_values.push(lambda.sqrt());
        components.push(v);
    }
    let reduced = centered.iter().map(|r| components.iter().map(|c| dot(r, c)).collect()).collect();
    Ok(Svd { components, singular_values, reduced, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub checkpoint_id: String,
    pub phase: PhaseKind,
    pub coord: [f64; 2],
}

/// One point per checkpoint, in the given order.
pub fn trajectory(checkpoints: &[(String, PhaseKind, Transformer)], dev: &ParallelCorpus) -> Result<Vec<TrajectoryPoint>> {
    if checkpoints.len() < 3 {
        return Err(Error::Usage(format!("trajectory needs at least 3 checkpoints, got {}", checkpoints.len())));
    }
    let rows = checkpoints.iter().map(|(_, _, m)| encoder_mean_vector(m, dev)).collect::<Result<Vec<_>>>()?;
    let svd = truncated_svd(&rows, 2)?;
    Ok(checkpoints
        .iter()
        .zip(&svd.reduced)
        .map(|((id, phase, _), r)| TrajectoryPoint { checkpoint_id: id.clone(), phase: *phase, coord: [r[0], r[1]] })
        .collect())
}

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut out = format!("{TRAJECTORY_HEADER}\n");
    for p in points {
        writeln!(out, "{},{},{},{}", p.checkpoint_id, p.phase, p.coord[0], p.coord[1]).unwrap();
    }
    out
}

fn phase_color(phase: PhaseKind) -> &'static str {
    match phase {
        PhaseKind::Base => "#1f77b4",
        PhaseKind::PruTrain => "#d62728",
        PhaseKind::RejTrain => "#2ca02c",
        PhaseKind::ConTrain => "#7f7f7f",
    }
}

/// Scatter plot with arrows joining consecutive points of the same phase.
pub fn trajectory_svg(points: &[TrajectoryPoint]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const PAD: f64 = 40.0;
    let span = |i: usize| {
        let lo = points.iter().map(|p| p.coord[i]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.coord[i]).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (x0, xs) = span(0);
    let (y0, ys) = span(1);
    let px = |p: &TrajectoryPoint| (PAD + (p.coord[0] - x0) / xs * (W - 2.0 * PAD), H - PAD - (p.coord[1] - y0) / ys * (H - 2.0 * PAD));
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    s.push_str("<defs>\n");
    for phase in [PhaseKind::Base, PhaseKind::ConTrain, PhaseKind::PruTrain, PhaseKind::RejTrain] {
        writeln!(
            s,
            r#"<marker id="arrow-{phase}" markerWidth="8" markerHeight="8" refX="7" refY="4" orient="auto"><path d="M0,0 L8,4 L0,8 z" fill="{}"/></marker>"#,
            phase_color(phase)
        )
        .unwrap();
    }
    s.push_str("</defs>\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for phase in [PhaseKind::Base, PhaseKind::ConTrain, PhaseKind::PruTrain, PhaseKind::RejTrain] {
        let same: Vec<&TrajectoryPoint> = points.iter().filter(|p| p.phase == phase).collect();
        let dash = if phase == PhaseKind::ConTrain { r#" stroke-dasharray="4 3""# } else { "" };
        for pair in same.windows(2) {
            let (a, b) = (px(pair[0]), px(pair[1]));
            writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="1.5"{dash} marker-end="url(#arrow-{phase})"/>"#,
                a.0,
                a.1,
                b.0,
                b.1,
                phase_color(phase)
            )
            .unwrap();
        }
    }
    for p in points {
        let (x, y) = px(p);
        writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{}"><title>{} ({})</title></circle>"#,
            phase_color(p.phase),
            p.checkpoint_id,
            p.phase
        )
        .unwrap();
    }
    for (i, phase) in [PhaseKind::Base, PhaseKind::PruTrain, PhaseKind::RejTrain, PhaseKind::ConTrain].iter().enumerate() {
        let y = 16.0 + 16.0 * i as f64;
        writeln!(
            s,
            r#"<rect x="10" y="{:.0}" width="10" height="10" fill="{}"/><text x="26" y="{:.0}" font-family="sans-serif" font-size="12">{phase}</text>"#,
            y - 9.0,
            phase_color(*phase),
            y
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Loads checkpoint files, orders them by (step, phase) and computes their
/// trajectory points.
pub fn trajectory_from_files(paths: &[std::path::PathBuf], dev: &ParallelCorpus) -> Result<Vec<TrajectoryPoint>> {
    let mut cks = paths
        .iter()
        .map(|p| {
            let ck = crate::checkpoint::Checkpoint::load(p)?;
            let model = ck.model()?;
            Ok((ck.step, ck.phase, ck.id, model, p.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    cks.sort_by(|a, b| (a.0, a.1, &a.4).cmp(&(b.0, b.1, &b.4)));
    let labelled: Vec<(String, PhaseKind, Transformer)> = cks
        .into_iter()
        .map(|(step, phase, id, model, path)| {
            let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_string);
            (stem.unwrap_or_else(|| format!("{id}_{step:06}")), phase, model)
        })
        .collect();
    trajectory(&labelled, dev)
}
