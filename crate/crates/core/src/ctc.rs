//! Connectionist temporal classification: log-space forward/backward
//! recursion and greedy decoding.

use ndarray::{Array2, ArrayView2};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Smallest number of frames that can emit `target` (repeats need a blank).
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `-log P(target | log_probs)` and its gradient with respect to every entry
/// of `log_probs` (`T × (V+1)`). `None` when the target cannot be aligned.
pub fn forward_backward(
    log_probs: ArrayView2<'_, f64>,
    target: &[usize],
    blank: usize,
) -> Option<(f64, Array2<f64>)> {
    let (t_len, n_sym) = log_probs.dim();
    if t_len == 0 || min_frames(target) > t_len {
        return None;
    }
    debug_assert!(target.iter().all(|&k| k < n_sym && k != blank));

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &k in target {
        ext.push(k);
        ext.push(blank);
    }
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = Array2::from_elem((t_len, s_len), ninf);
    alpha[[0, 0]] = log_probs[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = log_probs[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = log_add(a, alpha[[t - 1, s - 1]]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[[t - 1, s - 2]]);
            }
            if a > ninf {
                alpha[[t, s]] = a + log_probs[[t, ext[s]]];
            }
        }
    }

    let mut beta = Array2::from_elem((t_len, s_len), ninf);
    beta[[t_len - 1, s_len - 1]] = log_probs[[t_len - 1, ext[s_len - 1]]];
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = log_probs[[t_len - 1, ext[s_len - 2]]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[[t + 1, s]];
            if s + 1 < s_len {
                b = log_add(b, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[[t + 1, s + 2]]);
            }
            if b > ninf {
                beta[[t, s]] = b + log_probs[[t, ext[s]]];
            }
        }
    }

    let mut log_p = alpha[[t_len - 1, s_len - 1]];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[[t_len - 1, s_len - 2]]);
    }
    if !log_p.is_finite() {
        return None;
    }

    // d(-log P)/d log y_t(k) = -Σ_{s: ext[s]=k} α_t(s) β_t(s) / (y_t(k) P)
    let mut grad = Array2::zeros((t_len, n_sym));
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[[t, s]] + beta[[t, s]];
            if ab > ninf {
                let k = ext[s];
                grad[[t, k]] -= (ab - log_probs[[t, k]] - log_p).exp();
            }
        }
    }
    Some((-log_p, grad))
}

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode(posteriors: ArrayView2<'_, f64>, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in posteriors.rows() {
        let best = argmax(row.iter().copied());
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Index of the first maximum.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Collapse a frame-level alignment into its label sequence.
pub fn collapse(alignment: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in alignment {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_frame_single_label() {
        let p: f64 = 0.7;
        let lp = array![[p.ln(), (1.0 - p).ln()]];
        let (loss, _) = forward_backward(lp.view(), &[0], 1).unwrap();
        assert!((loss + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_a_blank() {
        let lp = Array2::from_elem((2, 3), (1.0f64 / 3.0).ln());
        assert!(forward_backward(lp.view(), &[0, 0], 2).is_none());
        let lp = Array2::from_elem((3, 3), (1.0f64 / 3.0).ln());
        let (loss, _) = forward_backward(lp.view(), &[0, 0], 2).unwrap();
        // only "a _ a" collapses to "aa" in three frames
        assert!((loss - 3.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_collapse_rules() {
        let blank = 2;
        assert_eq!(collapse(&[0, 0, 2, 1], blank), vec![0, 1]);
        assert_eq!(collapse(&[2, 2, 2], blank), Vec::<usize>::new());
        assert_eq!(collapse(&[0, 2, 0], blank), vec![0, 0]);
        let post = array![[0.9, 0.05, 0.05], [0.1, 0.1, 0.8], [0.2, 0.7, 0.1]];
        assert_eq!(greedy_decode(post.view(), blank), vec![0, 1]);
    }
}
