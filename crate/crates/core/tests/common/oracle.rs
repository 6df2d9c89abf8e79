//! Brute-force reference implementations of the evaluation metrics.

use ndarray::Array2;

/// AUROC by comparing every positive with every negative; ties count ½.
pub fn auroc_pairs(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// `(hits, size)` ratio pairs; min over max compared by cross-multiplication.
fn ratio_of_extremes(rates: &[(usize, usize)]) -> f64 {
    let mut lo = rates[0];
    let mut hi = rates[0];
    for &r in rates {
        if r.0 * lo.1 < lo.0 * r.1 {
            lo = r;
        }
        if r.0 * hi.1 > hi.0 * r.1 {
            hi = r;
        }
    }
    if hi.0 == 0 {
        1.0
    } else {
        (lo.0 as f64 / lo.1 as f64) / (hi.0 as f64 / hi.1 as f64)
    }
}

fn count(n: usize, pred: impl Fn(usize) -> bool) -> usize {
    (0..n).filter(|&i| pred(i)).count()
}

/// `None` when some group is empty.
pub fn dpm_counting(y_pred: &[usize], s: &[usize], m: usize, groups: usize) -> Option<f64> {
    let n = y_pred.len();
    let mut total = 0.0;
    for class in 0..m {
        let mut rates = Vec::new();
        for g in 0..groups {
            let size = count(n, |i| s[i] == g);
            if size == 0 {
                return None;
            }
            rates.push((count(n, |i| s[i] == g && y_pred[i] == class), size));
        }
        total += ratio_of_extremes(&rates);
    }
    Some(total / m as f64)
}

/// Classes missing from every group count 1; classes missing from only
/// some groups are left out.
pub fn eom_counting(y: &[usize], y_pred: &[usize], s: &[usize], m: usize, groups: usize) -> Option<f64> {
    let n = y.len();
    if (0..groups).any(|g| count(n, |i| s[i] == g) == 0) {
        return None;
    }
    let (mut total, mut counted) = (0.0, 0usize);
    for class in 0..m {
        let rates: Vec<(usize, usize)> = (0..groups)
            .map(|g| {
                let support = count(n, |i| s[i] == g && y[i] == class);
                let hits = count(n, |i| s[i] == g && y[i] == class && y_pred[i] == class);
                (hits, support)
            })
            .collect();
        let present = rates.iter().filter(|r| r.1 > 0).count();
        if present == groups {
            total += ratio_of_extremes(&rates);
            counted += 1;
        } else if present == 0 {
            total += 1.0;
            counted += 1;
        }
    }
    Some(if counted == 0 { 1.0 } else { total / counted as f64 })
}

/// Accuracy-based PQD; `None` for an empty group or an all-wrong best group.
pub fn pqd_accuracy_counting(y: &[usize], y_pred: &[usize], s: &[usize], groups: usize) -> Option<f64> {
    let n = y.len();
    let mut rates = Vec::new();
    for g in 0..groups {
        let size = count(n, |i| s[i] == g);
        if size == 0 {
            return None;
        }
        rates.push((count(n, |i| s[i] == g && y[i] == y_pred[i]), size));
    }
    if groups == 1 {
        return Some(1.0);
    }
    if rates.iter().all(|r| r.0 == 0) {
        return None;
    }
    Some(ratio_of_extremes(&rates))
}

/// Exact W1 between uniform empirical measures on the rows of `a` and `b`,
/// solved as a transportation problem by successive shortest paths.
/// Row `i` of `a` supplies `m` units, row `j` of `b` absorbs `n` units.
pub fn transport_w1(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (n, m) = (a.nrows(), b.nrows());
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| (&a.row(i) - &b.row(j)).mapv(|v| v * v).sum().sqrt())
                .collect()
        })
        .collect();
    // flow[i][j] on the bipartite edges; residual arcs are derived from it
    let mut flow = vec![vec![0usize; m]; n];
    let mut supply = vec![m; n];
    let mut demand = vec![n; m];
    loop {
        // Bellman–Ford over nodes: 0..n sources, n..n+m sinks, from a
        // virtual root connected to every source with remaining supply.
        let nodes = n + m;
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        for i in 0..n {
            if supply[i] > 0 {
                dist[i] = 0.0;
            }
        }
        for _ in 0..nodes {
            let mut changed = false;
            for i in 0..n {
                for j in 0..m {
                    if dist[i] + cost[i][j] < dist[n + j] - 1e-12 {
                        dist[n + j] = dist[i] + cost[i][j];
                        prev[n + j] = i;
                        changed = true;
                    }
                    if flow[i][j] > 0 && dist[n + j] - cost[i][j] < dist[i] - 1e-12 {
                        dist[i] = dist[n + j] - cost[i][j];
                        prev[i] = n + j;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let Some(end) = (0..m)
            .filter(|&j| demand[j] > 0 && dist[n + j].is_finite())
            .min_by(|&x, &y| dist[n + x].total_cmp(&dist[n + y]))
        else {
            break;
        };
        // walk back to find the path and its bottleneck
        let mut path = vec![n + end];
        let mut node = n + end;
        while prev[node] != usize::MAX {
            node = prev[node];
            path.push(node);
        }
        path.reverse();
        let start = path[0];
        let mut push = supply[start].min(demand[end]);
        for w in path.windows(2) {
            if w[0] >= n {
                push = push.min(flow[w[1]][w[0] - n]);
            }
        }
        for w in path.windows(2) {
            if w[0] < n {
                flow[w[0]][w[1] - n] += push;
            } else {
                flow[w[1]][w[0] - n] -= push;
            }
        }
        supply[start] -= push;
        demand[end] -= push;
    }
    assert!(supply.iter().all(|&s| s == 0), "transport did not saturate");
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += flow[i][j] as f64 * cost[i][j];
        }
    }
    total / (n * m) as f64
}
