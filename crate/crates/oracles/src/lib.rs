//! Slow, obviously-correct reference implementations.
//!
//! Everything here is written against plain `Vec`s with no shared code from
//! the `superad` crate, so a bug in a production kernel cannot leak into the
//! value it is checked against.

/// Squared Euclidean distance, accumulated left to right in `f64`.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-first k-center greedy, recomputing each point's distance to the
/// whole selected set at every step. Seed = farthest point from the centroid;
/// ties go to the lowest index; only unselected points are eligible.
pub fn kcenter_greedy(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = points.len();
    let d = points[0].len();
    let mut centroid = vec![0.0; d];
    for p in points {
        for (c, x) in centroid.iter_mut().zip(p) {
            *c += x;
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let dist = sq_dist(p, &centroid);
        if dist > best_d {
            best_d = dist;
            best = i;
        }
    }
    let mut selected = vec![best];
    while selected.len() < k {
        let mut pick = usize::MAX;
        let mut pick_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected.contains(&i) {
                continue;
            }
            let mut nearest = f64::INFINITY;
            for &s in &selected {
                nearest = nearest.min(sq_dist(&points[i], &points[s]));
            }
            if nearest > pick_d {
                pick_d = nearest;
                pick = i;
            }
        }
        selected.push(pick);
    }
    selected
}

/// Coverage radius (max over points of min distance to `centers`), not squared.
pub fn coverage_radius(points: &[Vec<f64>], centers: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|&c| sq_dist(p, &points[c]))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Sample covariance (denominator n-1) of the rows of `x`.
pub fn covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for a in 0..d {
        for b in 0..d {
            let mut s = 0.0;
            for r in x {
                s += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
            cov[a][b] = s / (n as f64 - 1.0);
        }
    }
    cov
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                total += a[i][j] * a[i][j];
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off <= 1e-30 * total.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i][i]).collect();
    (values, v)
}

/// Top eigenpair of the sample covariance of `x`: (eigenvalue, unit eigenvector).
pub fn top_principal_axis(x: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let (values, vectors) = jacobi_eigen(covariance(x));
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    let axis: Vec<f64> = vectors.iter().map(|row| row[best]).collect();
    let norm = axis.iter().map(|x| x * x).sum::<f64>().sqrt();
    (values[best], axis.into_iter().map(|x| x / norm).collect())
}

/// Minimum cosine distance of each test vector to any bank row, by double loop.
/// Zero test vectors score 2.
pub fn nn_cosine_distance(test: &[Vec<f64>], bank: &[Vec<f64>]) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    test.iter()
        .map(|t| {
            let tn = norm(t);
            if tn == 0.0 {
                return 2.0;
            }
            let mut best = f64::NEG_INFINITY;
            for b in bank {
                let bn = norm(b);
                let dot: f64 = t.iter().zip(b).map(|(x, y)| x * y).sum();
                best = best.max(dot / (tn * bn));
            }
            1.0 - best
        })
        .collect()
}

fn integrate_to_limit(mut pts: Vec<(f64, f64)>, limit: f64) -> f64 {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut area = 0.0;
    for w in pts.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

fn unique_sorted(scores: &[f64]) -> Vec<f64> {
    let mut u = scores.to_vec();
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    u.dedup();
    u
}

/// FPR-limited ROC area by enumerating every threshold and counting directly.
pub fn roc_area_to_limit(scores: &[f64], labels: &[bool], limit: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut pts = vec![(0.0, 0.0)];
    for t in unique_sorted(scores) {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                if l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        pts.push((fp / neg, tp / pos));
    }
    integrate_to_limit(pts, limit)
}

/// 8-connected component labels by iterative depth-first search; 0 = background.
pub fn label_components(h: usize, w: usize, mask: &[bool]) -> (Vec<usize>, usize) {
    let mut labels = vec![0usize; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        let mut stack = vec![start];
        labels[start] = next;
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as i64, (p % w) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, next)
}

/// One image for the PRO oracle: `(height, width, scores, ground truth)`.
pub type ProImage = (usize, usize, Vec<f64>, Vec<bool>);

/// FPR-limited PRO area by enumerating every pooled threshold.
pub fn pro_area_to_limit(images: &[ProImage], limit: f64) -> f64 {
    let mut comps: Vec<Vec<(usize, usize)>> = Vec::new();
    for (idx, (h, w, _, gt)) in images.iter().enumerate() {
        let (labels, n) = label_components(*h, *w, gt);
        for lab in 1..=n {
            comps.push(
                labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == lab)
                    .map(|(p, _)| (idx, p))
                    .collect(),
            );
        }
    }
    let neg: f64 = images
        .iter()
        .map(|(_, _, _, gt)| gt.iter().filter(|&&g| !g).count() as f64)
        .sum();
    let pooled: Vec<f64> = images.iter().flat_map(|im| im.2.iter().copied()).collect();
    let mut pts = vec![(0.0, 0.0)];
    for t in unique_sorted(&pooled) {
        let mut fp = 0.0;
        for (_, _, s, gt) in images {
            for (v, &g) in s.iter().zip(gt) {
                if !g && *v >= t {
                    fp += 1.0;
                }
            }
        }
        let mut pro = 0.0;
        for comp in &comps {
            let hit = comp.iter().filter(|&&(i, p)| images[i].2[p] >= t).count();
            pro += hit as f64 / comp.len() as f64;
        }
        pts.push((fp / neg, pro / comps.len() as f64));
    }
    integrate_to_limit(pts, limit)
}

/// Confusion-count F1 of `pred` against `gt`; 0 when undefined.
pub fn f1(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    }
}

/// Best F1 over "score > t" for t in {just below min} ∪ unique scores.
/// Returns (threshold, f1) with ties resolved toward the smaller threshold.
/// The below-min candidate is reported as `f64::NEG_INFINITY`.
pub fn best_f1_exhaustive(scores: &[f64], gt: &[bool]) -> (f64, f64) {
    let mut cands = vec![f64::NEG_INFINITY];
    cands.extend(unique_sorted(scores));
    let mut best = (f64::NAN, -1.0);
    for t in cands {
        let pred: Vec<bool> = scores.iter().map(|&s| s > t).collect();
        let v = f1(&pred, gt);
        if v > best.1 {
            best = (t, v);
        }
    }
    best
}

/// Binary hole filling: false cells not 4-connected to the border become true.
pub fn fill_holes(h: usize, w: usize, mask: &[bool]) -> Vec<bool> {
    let mut reached = vec![false; h * w];
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !mask[r * w + c] {
                reached[r * w + c] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        let mut visit = |nr: usize, nc: usize| {
            let q = nr * w + nc;
            if !mask[q] && !reached[q] {
                reached[q] = true;
                stack.push((nr, nc));
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < h {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < w {
            visit(r, c + 1);
        }
    }
    (0..h * w).map(|p| mask[p] || !reached[p]).collect()
}
