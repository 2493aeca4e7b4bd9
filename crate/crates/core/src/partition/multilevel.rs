//! Multilevel partitioning internals: weighted work graphs, heavy-edge
//! matching coarsening, greedy graph-growing initial partitions, and
//! FM-style boundary refinement with an explicit balance legalizer.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::SpatialGraph;

/// Undirected graph with node and edge weights, used while coarsening.
#[derive(Debug, Clone)]
pub struct WeightedGraph {
    pub node_weight: Vec<i64>,
    /// Sorted adjacency: (neighbor, edge weight).
    pub adj: Vec<Vec<(usize, i64)>>,
}

impl WeightedGraph {
    pub fn from_spatial(g: &SpatialGraph) -> Self {
        let adj = (0..g.n())
            .map(|v| g.neighbors(v).iter().map(|&u| (u, 1)).collect())
            .collect();
        WeightedGraph {
            node_weight: vec![1; g.n()],
            adj,
        }
    }

    pub fn from_edges(n: usize, node_weight: Vec<i64>, edges: &[(usize, usize, i64)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        WeightedGraph { node_weight, adj }
    }

    pub fn n(&self) -> usize {
        self.node_weight.len()
    }

    pub fn total_weight(&self) -> i64 {
        self.node_weight.iter().sum()
    }

    pub fn edge_cut(&self, part: &[usize]) -> i64 {
        let mut cut = 0;
        for u in 0..self.n() {
            for &(v, w) in &self.adj[u] {
                if u < v && part[u] != part[v] {
                    cut += w;
                }
            }
        }
        cut
    }
}

/// One round of heavy-edge maximal matching. Matched pairs whose combined
/// weight exceeds `max_node_weight` are skipped so coarse nodes stay
/// placeable. Returns the coarse graph and the fine-to-coarse map.
pub fn coarsen(g: &WeightedGraph, max_node_weight: i64, rng: &mut ChaCha8Rng) -> (WeightedGraph, Vec<usize>) {
    let n = g.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut mate = vec![usize::MAX; n];
    for &u in &order {
        if mate[u] != usize::MAX {
            continue;
        }
        let mut best: Option<(i64, usize)> = None;
        for &(v, w) in &g.adj[u] {
            if v != u
                && mate[v] == usize::MAX
                && g.node_weight[u] + g.node_weight[v] <= max_node_weight
            {
                let better = match best {
                    None => true,
                    Some((bw, bv)) => w > bw || (w == bw && v < bv),
                };
                if better {
                    best = Some((w, v));
                }
            }
        }
        if let Some((_, v)) = best {
            mate[u] = v;
            mate[v] = u;
        }
    }

    // Coarse ids in ascending order of the smaller endpoint.
    let mut cmap = vec![usize::MAX; n];
    let mut next = 0;
    for u in 0..n {
        if cmap[u] != usize::MAX {
            continue;
        }
        cmap[u] = next;
        if mate[u] != usize::MAX {
            cmap[mate[u]] = next;
        }
        next += 1;
    }

    let mut node_weight = vec![0i64; next];
    for u in 0..n {
        node_weight[cmap[u]] += g.node_weight[u];
    }
    // Merge parallel edges by summing multiplicities.
    let mut edge_acc: std::collections::BTreeMap<(usize, usize), i64> = std::collections::BTreeMap::new();
    for u in 0..n {
        for &(v, w) in &g.adj[u] {
            if u < v {
                let (ca, cb) = (cmap[u], cmap[v]);
                if ca != cb {
                    let key = (ca.min(cb), ca.max(cb));
                    *edge_acc.entry(key).or_insert(0) += w;
                }
            }
        }
    }
    let edges: Vec<(usize, usize, i64)> = edge_acc.into_iter().map(|((a, b), w)| (a, b, w)).collect();
    (WeightedGraph::from_edges(next, node_weight, &edges), cmap)
}

/// Greedy graph growing: grow each part by repeatedly absorbing the
/// unassigned node with the strongest connection to it, until the part
/// reaches its weight target. Leftover nodes go to the last part.
pub fn initial_partition(g: &WeightedGraph, p: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.n();
    let total = g.total_weight();
    let mut part = vec![usize::MAX; n];
    let mut remaining = total;
    for pi in 0..p {
        let parts_left = (p - pi) as i64;
        let target = (remaining + parts_left - 1) / parts_left;
        if pi == p - 1 {
            for u in 0..n {
                if part[u] == usize::MAX {
                    part[u] = pi;
                }
            }
            break;
        }
        let unassigned: Vec<usize> = (0..n).filter(|&u| part[u] == usize::MAX).collect();
        if unassigned.is_empty() {
            break;
        }
        let seed = unassigned[rng.gen_range(0..unassigned.len())];
        part[seed] = pi;
        let mut weight = g.node_weight[seed];
        // gain[u] = connection weight of unassigned u to the growing part
        let mut gain = vec![0i64; n];
        for &(v, w) in &g.adj[seed] {
            gain[v] += w;
        }
        while weight < target {
            let mut best: Option<(i64, usize)> = None;
            for u in 0..n {
                if part[u] == usize::MAX && gain[u] > 0 {
                    let better = match best {
                        None => true,
                        Some((bg, bu)) => gain[u] > bg || (gain[u] == bg && u < bu),
                    };
                    if better {
                        best = Some((gain[u], u));
                    }
                }
            }
            let pick = match best {
                Some((_, u)) => u,
                // Disconnected frontier: take the lowest-index unassigned node.
                None => match (0..n).find(|&u| part[u] == usize::MAX) {
                    Some(u) => u,
                    None => break,
                },
            };
            part[pick] = pi;
            weight += g.node_weight[pick];
            for &(v, w) in &g.adj[pick] {
                gain[v] += w;
            }
        }
        remaining -= weight;
    }
    // Guarantee non-empty parts: steal the least-connected node of the
    // heaviest multi-node part for any part that got nothing.
    let mut sizes = vec![0usize; p];
    for &pi in &part {
        sizes[pi] += 1;
    }
    for pi in 0..p {
        while sizes[pi] == 0 {
            let donor = (0..p).filter(|&q| sizes[q] >= 2).max_by_key(|&q| sizes[q]).expect("p <= n");
            let u = (0..n)
                .filter(|&u| part[u] == donor)
                .min_by_key(|&u| {
                    g.adj[u]
                        .iter()
                        .filter(|&&(v, _)| part[v] == donor)
                        .map(|&(_, w)| w)
                        .sum::<i64>()
                })
                .unwrap();
            part[u] = pi;
            sizes[donor] -= 1;
            sizes[pi] += 1;
        }
    }
    part
}

fn part_weights(g: &WeightedGraph, part: &[usize], p: usize) -> Vec<i64> {
    let mut w = vec![0i64; p];
    for (u, &pi) in part.iter().enumerate() {
        w[pi] += g.node_weight[u];
    }
    w
}

fn part_counts(part: &[usize], p: usize) -> Vec<usize> {
    let mut c = vec![0usize; p];
    for &pi in part {
        c[pi] += 1;
    }
    c
}

/// Force every part under `cap` (by weight) and non-empty, choosing the
/// moves that hurt the cut least. Feasible whenever all node weights are
/// at most `cap` and p <= n, which holds on the finest (unit-weight) level.
pub fn legalize(g: &WeightedGraph, part: &mut [usize], p: usize, cap: i64) {
    let n = g.n();
    let mut weights = part_weights(g, part, p);
    let mut counts = part_counts(part, p);

    loop {
        let over = (0..p).find(|&q| weights[q] > cap);
        let q = match over {
            Some(q) => q,
            None => break,
        };
        // Candidate targets: lightest parts first.
        let mut best: Option<(i64, usize, usize)> = None; // (cut delta, node, target)
        for u in 0..n {
            if part[u] != q || counts[q] <= 1 {
                continue;
            }
            let wu = g.node_weight[u];
            let mut to_part = vec![0i64; p];
            let mut internal = 0i64;
            for &(v, w) in &g.adj[u] {
                if part[v] == q {
                    internal += w;
                } else {
                    to_part[part[v]] += w;
                }
            }
            for t in 0..p {
                if t == q || weights[t] + wu > cap {
                    continue;
                }
                let delta = internal - to_part[t];
                let better = match best {
                    None => true,
                    Some((bd, bu, bt)) => {
                        delta < bd || (delta == bd && (weights[t], u, t) < (weights[bt], bu, bt))
                    }
                };
                if better {
                    best = Some((delta, u, t));
                }
            }
        }
        match best {
            Some((_, u, t)) => {
                weights[q] -= g.node_weight[u];
                weights[t] += g.node_weight[u];
                counts[q] -= 1;
                counts[t] += 1;
                part[u] = t;
            }
            None => break, // nothing movable at this level; finer level will fix it
        }
    }

    // Fill empty parts from the heaviest donors.
    loop {
        let empty = (0..p).find(|&q| counts[q] == 0);
        let q = match empty {
            Some(q) => q,
            None => break,
        };
        let donor = (0..p).filter(|&t| counts[t] >= 2).max_by_key(|&t| (weights[t], t)).expect("p <= n");
        let u = (0..n)
            .filter(|&u| part[u] == donor)
            .min_by_key(|&u| {
                let internal: i64 = g.adj[u].iter().filter(|&&(v, _)| part[v] == donor).map(|&(_, w)| w).sum();
                (internal, u)
            })
            .unwrap();
        part[u] = q;
        weights[donor] -= g.node_weight[u];
        weights[q] += g.node_weight[u];
        counts[donor] -= 1;
        counts[q] += 1;
    }

    // On unit-weight graphs also raise undersized parts to floor(n/p), so
    // sizes land in [floor(n/p), cap] and pairwise merging stays feasible.
    if g.node_weight.iter().all(|&w| w == 1) {
        let floor = (n / p) as i64;
        loop {
            let low = (0..p).filter(|&q| weights[q] < floor).min_by_key(|&q| (weights[q], q));
            let q = match low {
                Some(q) => q,
                None => break,
            };
            let donor = match (0..p).filter(|&t| weights[t] > floor).max_by_key(|&t| (weights[t], t)) {
                Some(d) => d,
                None => break,
            };
            let u = (0..n)
                .filter(|&u| part[u] == donor)
                .min_by_key(|&u| {
                    let internal: i64 =
                        g.adj[u].iter().filter(|&&(v, _)| part[v] == donor).map(|&(_, w)| w).sum();
                    let toward: i64 =
                        g.adj[u].iter().filter(|&&(v, _)| part[v] == q).map(|&(_, w)| w).sum();
                    (internal - toward, u)
                })
                .unwrap();
            part[u] = q;
            weights[donor] -= 1;
            weights[q] += 1;
            counts[donor] -= 1;
            counts[q] += 1;
        }
    }
}

/// Boundary refinement: greedy single-node moves with positive gain, then
/// pairwise swaps when single moves are exhausted (needed at imbalance 0,
/// where no single move can stay within the cap). The cut never increases;
/// part weights stay within [min_weight.max(1 node), cap].
pub fn refine(
    g: &WeightedGraph,
    part: &mut [usize],
    p: usize,
    cap: i64,
    min_weight: i64,
    max_passes: usize,
) {
    if p <= 1 {
        return;
    }
    let n = g.n();
    for _pass in 0..max_passes {
        let mut weights = part_weights(g, part, p);
        let mut counts = part_counts(part, p);
        let mut improved = false;

        // Phase 1: single moves.
        loop {
            let mut best: Option<(i64, usize, usize)> = None; // (gain, node, target)
            for u in 0..n {
                let from = part[u];
                if counts[from] <= 1 || weights[from] - g.node_weight[u] < min_weight {
                    continue;
                }
                let wu = g.node_weight[u];
                let mut internal = 0i64;
                let mut ext: std::collections::BTreeMap<usize, i64> = std::collections::BTreeMap::new();
                for &(v, w) in &g.adj[u] {
                    if part[v] == from {
                        internal += w;
                    } else {
                        *ext.entry(part[v]).or_insert(0) += w;
                    }
                }
                for (&t, &wt) in &ext {
                    if weights[t] + wu > cap {
                        continue;
                    }
                    let gain = wt - internal;
                    if gain > 0 {
                        let better = match best {
                            None => true,
                            Some((bg, bu, _)) => gain > bg || (gain == bg && u < bu),
                        };
                        if better {
                            best = Some((gain, u, t));
                        }
                    }
                }
            }
            match best {
                Some((_, u, t)) => {
                    let from = part[u];
                    weights[from] -= g.node_weight[u];
                    weights[t] += g.node_weight[u];
                    counts[from] -= 1;
                    counts[t] += 1;
                    part[u] = t;
                    improved = true;
                }
                None => break,
            }
        }

        // Phase 2: swaps between boundary nodes of different parts.
        let boundary: Vec<usize> = (0..n)
            .filter(|&u| g.adj[u].iter().any(|&(v, _)| part[v] != part[u]))
            .collect();
        loop {
            let mut best: Option<(i64, usize, usize)> = None; // (gain, u, v)
            for (ai, &u) in boundary.iter().enumerate() {
                let pu = part[u];
                let mut u_int = 0i64;
                let mut u_ext: std::collections::BTreeMap<usize, i64> = std::collections::BTreeMap::new();
                for &(x, w) in &g.adj[u] {
                    if part[x] == pu {
                        u_int += w;
                    } else {
                        *u_ext.entry(part[x]).or_insert(0) += w;
                    }
                }
                for &v in boundary.iter().skip(ai + 1) {
                    let pv = part[v];
                    if pv == pu {
                        continue;
                    }
                    let wu = g.node_weight[u];
                    let wv = g.node_weight[v];
                    if weights[pu] - wu + wv > cap
                        || weights[pv] - wv + wu > cap
                        || weights[pu] - wu + wv < min_weight
                        || weights[pv] - wv + wu < min_weight
                    {
                        continue;
                    }
                    let mut v_int = 0i64;
                    let mut v_to_pu = 0i64;
                    let mut uv = 0i64;
                    for &(x, w) in &g.adj[v] {
                        if x == u {
                            uv = w;
                        }
                        if part[x] == pv {
                            v_int += w;
                        } else if part[x] == pu {
                            v_to_pu += w;
                        }
                    }
                    let u_to_pv = u_ext.get(&pv).copied().unwrap_or(0);
                    let gain = (u_to_pv - u_int) + (v_to_pu - v_int) - 2 * uv;
                    if gain > 0 {
                        let better = match best {
                            None => true,
                            Some((bg, bu, bv)) => gain > bg || (gain == bg && (u, v) < (bu, bv)),
                        };
                        if better {
                            best = Some((gain, u, v));
                        }
                    }
                }
            }
            match best {
                Some((_, u, v)) => {
                    let (pu, pv) = (part[u], part[v]);
                    weights[pu] += g.node_weight[v] - g.node_weight[u];
                    weights[pv] += g.node_weight[u] - g.node_weight[v];
                    part[u] = pv;
                    part[v] = pu;
                    improved = true;
                }
                None => break,
            }
        }

        if !improved {
            break;
        }
    }
}

/// Full multilevel pipeline on a weighted graph: coarsen, partition the
/// coarsest level, then project back with legalization and refinement.
pub fn multilevel_partition(g: &WeightedGraph, p: usize, cap: i64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let coarsen_stop = (4 * p).max(40);
    let match_cap = ((g.total_weight() + p as i64 - 1) / p as i64).max(2);

    let mut levels: Vec<(WeightedGraph, Vec<usize>)> = Vec::new();
    let mut current = g.clone();
    while current.n() > coarsen_stop {
        let (coarse, cmap) = coarsen(&current, match_cap, rng);
        if coarse.n() as f64 > current.n() as f64 * 0.95 {
            break; // matching stalled
        }
        levels.push((current, cmap));
        current = coarse;
    }

    let min_weight = |wg: &WeightedGraph| -> i64 {
        if wg.node_weight.iter().all(|&w| w == 1) { (wg.n() / p) as i64 } else { 0 }
    };
    let mut part = initial_partition(&current, p, rng);
    legalize(&current, &mut part, p, cap);
    refine(&current, &mut part, p, cap, min_weight(&current), 8);

    while let Some((fine, cmap)) = levels.pop() {
        let mut fine_part = vec![0usize; fine.n()];
        for u in 0..fine.n() {
            fine_part[u] = part[cmap[u]];
        }
        legalize(&fine, &mut fine_part, p, cap);
        refine(&fine, &mut fine_part, p, cap, min_weight(&fine), 8);
        part = fine_part;
    }
    part
}
