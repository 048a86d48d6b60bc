//! Reference implementations shared by the oracle and acceptance suites.
#![allow(dead_code)]

use hte_lab::causal_tree::{fit_causal_tree, CausalTreeParams};
use hte_lab::data::{Dataset, Matrix};
use hte_lab::forests::TreeNode;
use hte_lab::mars::{forward_candidates, MarsParams};
use hte_lab::propensity::StrataAssignment;
use hte_lab::rng::stream;
use rand::Rng;

/// Features on an integer grid (so ties occur), random arms with the first
/// eight rows alternating, and an effect in the first feature.
pub fn grid_fixture(n: usize, p: usize, levels: u32, seed: u64) -> (Matrix, Vec<u8>, Vec<f64>) {
    let mut rng = stream(seed);
    let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(0..levels) as f64).collect();
    let mut t: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    for (i, ti) in t.iter_mut().enumerate().take(8) {
        *ti = (i % 2) as u8;
    }
    let y: Vec<f64> = (0..n)
        .map(|i| x[i * p] * f64::from(t[i]) + rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    (Matrix::new(n, p, x).unwrap(), t, y)
}

pub fn rel_eq(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

// ---------- causal split score ----------

fn arm_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var_of_mean = if v.len() < 2 {
        0.0
    } else {
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0) / n
    };
    (m, var_of_mean)
}

/// Stratum-weighted effect and its variance over `rows`.
fn stratified_tau(y: &[f64], t: &[u8], strata: &[usize], s_count: usize, rows: &[usize]) -> Option<(f64, f64)> {
    let (mut w, mut a, mut v) = (0.0, 0.0, 0.0);
    for s in 1..=s_count {
        let arm = |k: u8| -> Vec<f64> {
            rows.iter().filter(|&&i| strata[i] == s && t[i] == k).map(|&i| y[i]).collect()
        };
        let (y1, y0) = (arm(1), arm(0));
        if y1.is_empty() || y0.is_empty() {
            continue;
        }
        let ns = (y1.len() + y0.len()) as f64;
        let ((m1, v1), (m0, v0)) = (arm_stats(&y1), arm_stats(&y0));
        w += ns;
        a += ns * (m1 - m0);
        v += ns * ns * (v1 + v0);
    }
    (w > 0.0).then(|| (a / w, v / (w * w)))
}

fn child_viable(t: &[u8], strata: &[usize], s_count: usize, rows: &[usize], min: usize) -> bool {
    let count = |k: u8, s: Option<usize>| {
        rows.iter().filter(|&&i| t[i] == k && s.is_none_or(|s| strata[i] == s)).count()
    };
    count(1, None) >= min
        && count(0, None) >= min
        && (1..=s_count).any(|s| count(1, Some(s)) >= min && count(0, Some(s)) >= min)
}

/// T-statistic of splitting at `x_j < thr`, or `None` if a child is not viable.
pub fn split_score(d: &Dataset, sa: &StrataAssignment, min: usize, j: usize, thr: f64) -> Option<f64> {
    let (l, r): (Vec<usize>, Vec<usize>) = (0..d.n()).partition(|&i| d.features().get(i, j) < thr);
    let (t, y, s) = (d.treatment(), d.response(), &sa.strata);
    if !child_viable(t, s, sa.n_strata, &l, min) || !child_viable(t, s, sa.n_strata, &r, min) {
        return None;
    }
    let (tl, vl) = stratified_tau(y, t, s, sa.n_strata, &l)?;
    let (tr, vr) = stratified_tau(y, t, s, sa.n_strata, &r)?;
    let diff = (tl - tr).abs();
    Some(if vl + vr > 0.0 {
        diff / (vl + vr).sqrt()
    } else if diff > 0.0 {
        f64::INFINITY
    } else {
        0.0
    })
}

/// Fits a depth-1 causal tree and checks its split against every candidate.
pub fn check_root_split(d: &Dataset, sa: &StrataAssignment, min: usize) -> Result<(), String> {
    let mut best = 0.0f64;
    for j in 0..d.p() {
        let mut vals = d.features().column(j);
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            if let Some(s) = split_score(d, sa, min, j, (w[0] + w[1]) / 2.0) {
                best = best.max(s);
            }
        }
    }
    let params = CausalTreeParams {
        max_depth: 1,
        min_leaf_per_arm: min,
        ..Default::default()
    };
    let got = match fit_causal_tree(d, sa, &params, &mut stream(0)) {
        // Root not viable, so no child can be either.
        Err(_) => 0.0,
        Ok(tree) => match &tree.root {
            TreeNode::Leaf { .. } => 0.0,
            TreeNode::Split { feature, threshold, .. } => {
                split_score(d, sa, min, *feature, *threshold).ok_or("chosen split is not viable")?
            }
        },
    };
    if rel_eq(got, best, 1e-9) {
        Ok(())
    } else {
        Err(format!("chosen split scores {got}, exhaustive maximum {best}"))
    }
}

// ---------- causal MARS entry gain ----------

fn reduction(r: &[f64], h: &[f64], rows: &[usize]) -> f64 {
    let num: f64 = rows.iter().map(|&i| r[i] * h[i]).sum();
    let den: f64 = rows.iter().map(|&i| h[i] * h[i]).sum();
    if den > 0.0 {
        num * num / den
    } else {
        0.0
    }
}

/// First forward step, unstratified: every candidate's dRSS recomputed as
/// per-arm minus shared single-column least squares on the arm-centred
/// residuals.
pub fn check_first_step_drss(d: &Dataset, min_support: usize) -> Result<(), String> {
    let n = d.n();
    let params = MarsParams {
        max_terms: 1,
        min_support,
        max_knots: 64,
        ..Default::default()
    };
    let cands = forward_candidates(d, None, &params, 0).map_err(|e| e.to_string())?;
    let arm = |k: u8| -> Vec<usize> { (0..n).filter(|&i| d.treatment()[i] == k).collect() };
    let (a1, a0) = (arm(1), arm(0));
    let mean = |rows: &[usize]| rows.iter().map(|&i| d.response()[i]).sum::<f64>() / rows.len() as f64;
    let (m1, m0) = (mean(&a1), mean(&a0));
    let r: Vec<f64> = (0..n)
        .map(|i| d.response()[i] - if d.treatment()[i] == 1 { m1 } else { m0 })
        .collect();
    let all: Vec<usize> = (0..n).collect();

    let mut expected = 0;
    for j in 0..d.p() {
        let mut vals = d.features().column(j);
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        vals.pop();
        for &c in &vals {
            let xj = |i: usize| d.features().get(i, j);
            let hp: Vec<f64> = (0..n).map(|i| (xj(i) - c).max(0.0)).collect();
            let hn: Vec<f64> = (0..n).map(|i| (c - xj(i)).max(0.0)).collect();
            let sup = |h: &[f64], rows: &[usize]| rows.iter().filter(|&&i| h[i] != 0.0).count();
            let kp = sup(&hp, &a1) >= min_support && sup(&hp, &a0) >= min_support;
            let kn = sup(&hn, &a1) >= min_support && sup(&hn, &a0) >= min_support;
            if !kp && !kn {
                continue;
            }
            expected += 1;
            let mut drss = 0.0;
            for (h, keep) in [(&hp, kp), (&hn, kn)] {
                if keep {
                    drss += reduction(&r, h, &a1) + reduction(&r, h, &a0) - reduction(&r, h, &all);
                }
            }
            let got = cands
                .iter()
                .find(|m| m.parent == 0 && m.feature == j && m.knot == c)
                .ok_or(format!("missing candidate feature {j} knot {c}"))?;
            if (got.keep_pos, got.keep_neg) != (kp, kn) {
                return Err(format!("support flags differ at feature {j} knot {c}"));
            }
            if !rel_eq(got.drss, drss, 1e-9) {
                return Err(format!("dRSS {} vs direct {drss} at feature {j} knot {c}", got.drss));
            }
        }
    }
    if cands.len() != expected {
        return Err(format!("{} candidates, expected {expected}", cands.len()));
    }
    Ok(())
}
