//! Losses in f64; each returns the mean loss and its gradient w.r.t. the input.

use crate::error::{Error, Result};

/// Mean negative log-softmax of the true class over `n` rows of `k` logits.
pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    if k == 0 || logits.len() != n * k || n == 0 {
        return Err(Error::shape(format!(
            "cross entropy over {} logits with {n} labels and {k} classes",
            logits.len()
        )));
    }
    let mut grad = vec![0.0; n * k];
    let mut total = 0.0;
    for (i, (&label, row)) in labels.iter().zip(logits.chunks_exact(k)).enumerate() {
        if label >= k {
            return Err(Error::invalid(format!("label {label} outside 0..{k}")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = &mut grad[i * k..(i + 1) * k];
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - log_z).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Contrastive loss over `rows` embeddings of width `d`, where rows `2k` and
/// `2k + 1` form a positive pair and all other rows act as negatives.
pub fn nt_xent(embeddings: &[f64], d: usize, temperature: f64) -> Result<(f64, Vec<f64>)> {
    if d == 0 || !embeddings.len().is_multiple_of(d) {
        return Err(Error::shape("embedding buffer is not a whole number of rows"));
    }
    let rows = embeddings.len() / d;
    if !rows.is_multiple_of(2) {
        return Err(Error::shape(format!("{rows} embeddings cannot form positive pairs")));
    }
    if rows < 4 {
        return Err(Error::invalid("nt-xent needs at least two pairs so that negatives exist"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let mut norms = Vec::with_capacity(rows);
    let mut u = vec![0.0; rows * d];
    for (i, row) in embeddings.chunks_exact(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid(format!("embedding {i} has norm {norm}")));
        }
        norms.push(norm);
        for (o, v) in u[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = v / norm;
        }
    }
    let dot = |i: usize, j: usize| -> f64 { u[i * d..(i + 1) * d].iter().zip(&u[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum() };
    let mut sim = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in i..rows {
            let s = dot(i, j) / temperature;
            sim[i * rows + j] = s;
            sim[j * rows + i] = s;
        }
    }
    // coefficient on s_ij in the mean loss
    let mut ds = vec![0.0; rows * rows];
    let mut total = 0.0;
    let scale = 1.0 / rows as f64;
    for i in 0..rows {
        let pos = i ^ 1;
        let row = &sim[i * rows..(i + 1) * rows];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[pos];
        for j in (0..rows).filter(|&j| j != i) {
            ds[i * rows + j] += scale * (row[j] - log_z).exp();
        }
        ds[i * rows + pos] -= scale;
    }
    let mut du = vec![0.0; rows * d];
    for i in 0..rows {
        for j in (0..rows).filter(|&j| j != i) {
            let c = (ds[i * rows + j] + ds[j * rows + i]) / temperature;
            if c == 0.0 {
                continue;
            }
            for (g, v) in du[i * d..(i + 1) * d].iter_mut().zip(&u[j * d..(j + 1) * d]) {
                *g += c * v;
            }
        }
    }
    let mut grad = vec![0.0; rows * d];
    for i in 0..rows {
        let ui = &u[i * d..(i + 1) * d];
        let dui = &du[i * d..(i + 1) * d];
        let proj: f64 = ui.iter().zip(dui).map(|(a, b)| a * b).sum();
        for ((g, a), b) in grad[i * d..(i + 1) * d].iter_mut().zip(ui).zip(dui) {
            *g = (b - a * proj) / norms[i];
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let (l, _) = cross_entropy(&[0.0; 8], 4, &[0, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let (l, _) = cross_entropy(&[1000.0, 0.0, 0.0], 3, &[0]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn bad_labels_and_shapes() {
        assert!(cross_entropy(&[0.0; 4], 2, &[2, 0]).is_err());
        assert!(cross_entropy(&[0.0; 5], 2, &[0, 0]).is_err());
    }

    #[test]
    fn identical_embeddings_give_log_three() {
        let (l, _) = nt_xent(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2, 0.5).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_rejections() {
        assert!(nt_xent(&[1.0, 0.0, 0.0, 1.0], 2, 0.5).is_err());
        assert!(nt_xent(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0], 2, 0.5).is_err());
        assert!(nt_xent(&[1.0; 6], 2, 0.5).is_err());
        assert!(nt_xent(&[1.0; 8], 2, 0.0).is_err());
    }
}
