//! Balanced graph partitions, the nested multiscale hierarchy, padded
//! memory layouts, and the coarse hop-distance tables between parts.

mod multilevel;

pub use multilevel::{coarsen, initial_partition, legalize, multilevel_partition, refine, WeightedGraph};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{spd_table, spd_tables, SpatialGraph, SpdTable};
use crate::tensor::{Real, Tensor};

/// A disjoint cover of the graph's nodes by `p` non-empty parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub p: usize,
    pub assignment: Vec<usize>,
    pub parts: Vec<Vec<usize>>,
}

impl Partition {
    /// Build from a raw assignment, checking the partition invariants:
    /// disjoint cover, every part non-empty, and (when `cap` is given)
    /// no part larger than the balance bound.
    pub fn from_assignment(assignment: Vec<usize>, p: usize, cap: Option<usize>) -> Result<Self> {
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); p];
        for (node, &pi) in assignment.iter().enumerate() {
            if pi >= p {
                return Err(Error::invalid(format!("node {} assigned to part {} of {}", node, pi, p)));
            }
            parts[pi].push(node);
        }
        for (pi, part) in parts.iter().enumerate() {
            if part.is_empty() {
                return Err(Error::invalid(format!("part {} is empty", pi)));
            }
            if let Some(cap) = cap {
                if part.len() > cap {
                    return Err(Error::invalid(format!(
                        "part {} has {} nodes, balance bound is {}",
                        pi,
                        part.len(),
                        cap
                    )));
                }
            }
        }
        Ok(Partition { p, assignment, parts })
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn max_part_size(&self) -> usize {
        self.parts.iter().map(|p| p.len()).max().unwrap_or(0)
    }
}

/// The balance bound: ceil(n / p) * (1 + imbalance), floored to a count.
pub fn balance_cap(n: usize, p: usize, imbalance: f64) -> usize {
    let target = n.div_ceil(p) as f64;
    (target * (1.0 + imbalance)).floor() as usize
}

/// Number of edges whose endpoints land in different parts.
pub fn edge_cut(graph: &SpatialGraph, assignment: &[usize]) -> usize {
    graph
        .edges()
        .iter()
        .filter(|&&(a, b)| assignment[a] != assignment[b])
        .count()
}

/// Balanced multilevel partition: heavy-edge matching coarsening, greedy
/// graph-growing initial parts, boundary refinement on the way back up.
/// Deterministic for a fixed (graph, p, imbalance, seed).
pub fn partition_graph(graph: &SpatialGraph, p: usize, imbalance: f64, seed: u64) -> Result<Partition> {
    let n = graph.n();
    if p == 0 || p > n {
        return Err(Error::invalid(format!("cannot split {} nodes into {} parts", n, p)));
    }
    if imbalance < 0.0 {
        return Err(Error::invalid("imbalance must be >= 0"));
    }
    let cap = balance_cap(n, p, imbalance);
    let assignment = if p == 1 {
        vec![0; n]
    } else if p == n {
        (0..n).collect()
    } else {
        let wg = WeightedGraph::from_spatial(graph);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        multilevel_partition(&wg, p, cap as i64, &mut rng)
    };
    Partition::from_assignment(assignment, p, Some(cap))
}

/// Uniformly random balanced partition; the reference point for cut
/// quality and the partitioner-free ablation.
pub fn random_balanced_partition(n: usize, p: usize, seed: u64) -> Result<Partition> {
    if p == 0 || p > n {
        return Err(Error::invalid(format!("cannot split {} nodes into {} parts", n, p)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n];
    for (rank, &node) in order.iter().enumerate() {
        assignment[node] = rank % p;
    }
    Partition::from_assignment(assignment, p, Some(n.div_ceil(p)))
}

/// How `n` stations map into a padded `p x m` block structure.
#[derive(Debug, Clone)]
pub struct Layout {
    pub p: usize,
    pub m: usize,
    /// Node order grouped by part (a permutation of 0..n).
    pub perm: Vec<usize>,
    /// p*m booleans, true = slot holds a real node; real slots precede
    /// padding within each row.
    pub pad_mask: Vec<bool>,
    /// Flat slot -> node (None = padding). Length p*m.
    pub slots: Vec<Option<usize>>,
    /// node -> flat slot index (p*m + m form). Length n.
    pub positions: Vec<usize>,
}

impl Layout {
    pub fn new(partition: &Partition) -> Self {
        let p = partition.p;
        let m = partition.max_part_size();
        let n = partition.n();
        let mut perm = Vec::with_capacity(n);
        let mut pad_mask = vec![false; p * m];
        let mut slots = vec![None; p * m];
        let mut positions = vec![0usize; n];
        for (pi, part) in partition.parts.iter().enumerate() {
            for (mi, &node) in part.iter().enumerate() {
                perm.push(node);
                pad_mask[pi * m + mi] = true;
                slots[pi * m + mi] = Some(node);
                positions[node] = pi * m + mi;
            }
        }
        Layout { p, m, perm, pad_mask, slots, positions }
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }
}

/// Reshape station-major `[N, D]` values into padded `[P, M, D]` blocks;
/// padded slots are zero-filled.
pub fn apply_layout(values: &Tensor, layout: &Layout) -> Result<Tensor> {
    if values.rank() != 2 || values.shape()[0] != layout.n() {
        return Err(Error::shape(
            "apply_layout",
            format!("want [{}, D], got {:?}", layout.n(), values.shape()),
        ));
    }
    let d = values.shape()[1];
    let src = values.data();
    let mut out = vec![0.0 as Real; layout.p * layout.m * d];
    for (si, slot) in layout.slots.iter().enumerate() {
        if let Some(node) = *slot {
            out[si * d..(si + 1) * d].copy_from_slice(&src[node * d..(node + 1) * d]);
        }
    }
    Tensor::new(vec![layout.p, layout.m, d], out)
}

/// Inverse of `apply_layout` on the real slots.
pub fn invert_layout(values: &Tensor, layout: &Layout) -> Result<Tensor> {
    if values.rank() != 3 || values.shape()[0] != layout.p || values.shape()[1] != layout.m {
        return Err(Error::shape(
            "invert_layout",
            format!("want [{}, {}, D], got {:?}", layout.p, layout.m, values.shape()),
        ));
    }
    let d = values.shape()[2];
    let src = values.data();
    let n = layout.n();
    let mut out = vec![0.0 as Real; n * d];
    for (node, &slot) in layout.positions.iter().enumerate() {
        out[node * d..(node + 1) * d].copy_from_slice(&src[slot * d..(slot + 1) * d]);
    }
    Tensor::new(vec![n, d], out)
}

/// Quotient of the graph by a partition: parts become nodes weighted by
/// size, cross-edge counts become edge weights.
pub fn quotient_graph(graph: &SpatialGraph, partition: &Partition) -> WeightedGraph {
    let p = partition.p;
    let node_weight: Vec<i64> = partition.parts.iter().map(|pt| pt.len() as i64).collect();
    let mut acc: std::collections::BTreeMap<(usize, usize), i64> = std::collections::BTreeMap::new();
    for (a, b) in graph.edges() {
        let (pa, pb) = (partition.assignment[a], partition.assignment[b]);
        if pa != pb {
            let key = (pa.min(pb), pa.max(pb));
            *acc.entry(key).or_insert(0) += 1;
        }
    }
    let edges: Vec<(usize, usize, i64)> = acc.into_iter().map(|((a, b), w)| (a, b, w)).collect();
    WeightedGraph::from_edges(p, node_weight, &edges)
}

/// Hop distances between parts on the quotient graph (parts are adjacent
/// iff at least one cross edge exists); -1 between disconnected parts.
pub fn coarse_spd(partition: &Partition, graph: &SpatialGraph) -> Result<SpdTable> {
    let q = quotient_graph(graph, partition);
    let edges: Vec<(usize, usize)> = (0..q.n())
        .flat_map(|a| q.adj[a].iter().filter(move |&&(b, _)| a < b).map(move |&(b, _)| (a, b)))
        .collect();
    let qg = SpatialGraph::from_edges(q.n(), &edges)?;
    let all: Vec<usize> = (0..q.n()).collect();
    spd_table(&qg, &all)
}

/// One resolution level of the hierarchy: the partition, its memory
/// layout, per-part hop tables, and the part-level hop table.
#[derive(Debug, Clone)]
pub struct HierarchyLevel {
    pub partition: Partition,
    pub layout: Layout,
    pub intra_spd: Vec<SpdTable>,
    pub coarse: SpdTable,
}

/// L nested partitions with part counts halving per level; level l+1 parts
/// are unions of exactly two level-l parts.
#[derive(Debug, Clone)]
pub struct PartitionHierarchy {
    pub levels: Vec<HierarchyLevel>,
}

impl PartitionHierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// Pair the parts of `partition` into groups of exactly two, preferring
/// heavy cross-edge pairs, subject to merged sizes staying under `cap`.
/// Returns old part -> merged part.
fn pair_merge(graph: &SpatialGraph, partition: &Partition, cap: usize) -> Result<Vec<usize>> {
    let p = partition.p;
    debug_assert_eq!(p % 2, 0);
    let q = quotient_graph(graph, partition);
    let sizes: Vec<usize> = partition.parts.iter().map(|pt| pt.len()).collect();

    let mut pairs: Vec<(i64, usize, usize)> = Vec::new();
    for a in 0..p {
        for &(b, w) in &q.adj[a] {
            if a < b {
                pairs.push((w, a, b));
            }
        }
    }
    pairs.sort_by(|x, y| (y.0, x.1, x.2).cmp(&(x.0, y.1, y.2)));

    let mut mate = vec![usize::MAX; p];
    for &(_, a, b) in &pairs {
        if mate[a] == usize::MAX && mate[b] == usize::MAX && sizes[a] + sizes[b] <= cap {
            mate[a] = b;
            mate[b] = a;
        }
    }
    // Leftovers: big with small.
    let mut rest: Vec<usize> = (0..p).filter(|&i| mate[i] == usize::MAX).collect();
    rest.sort_by_key(|&i| (std::cmp::Reverse(sizes[i]), i));
    while rest.len() >= 2 {
        let big = rest[0];
        let small = *rest.last().unwrap();
        mate[big] = small;
        mate[small] = big;
        rest.remove(0);
        rest.pop();
    }

    // Repair oversize pairs by swapping partners with other pairs.
    'repair: for _ in 0..p {
        let over = (0..p).find(|&a| a < mate[a] && sizes[a] + sizes[mate[a]] > cap);
        let (a, b) = match over {
            Some(a) => (a, mate[a]),
            None => break,
        };
        for c in 0..p {
            if c == a || c == b {
                continue;
            }
            let d = mate[c];
            if d == a || d == b || c > d {
                continue;
            }
            // try (a,c)+(b,d) and (a,d)+(b,c)
            for &(x, y) in &[(c, d), (d, c)] {
                if sizes[a] + sizes[x] <= cap && sizes[b] + sizes[y] <= cap {
                    mate[a] = x;
                    mate[x] = a;
                    mate[b] = y;
                    mate[y] = b;
                    continue 'repair;
                }
            }
        }
        // Local swaps cannot fix it: fall back to pairing largest with
        // smallest globally, which minimizes the maximum pair size. If even
        // that violates the cap, no pairing exists.
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(sizes[i]), i));
        for i in 0..p / 2 {
            let (big, small) = (order[i], order[p - 1 - i]);
            mate[big] = small;
            mate[small] = big;
        }
        if let Some(bad) = (0..p).find(|&i| sizes[i] + sizes[mate[i]] > cap) {
            return Err(Error::invalid(format!(
                "cannot merge parts of sizes {} and {} within balance bound {}",
                sizes[bad], sizes[mate[bad]], cap
            )));
        }
        break;
    }

    // Merged part ids in ascending order of the smaller member.
    let mut merged = vec![usize::MAX; p];
    let mut next = 0;
    for a in 0..p {
        if merged[a] == usize::MAX {
            merged[a] = next;
            merged[mate[a]] = next;
            next += 1;
        }
    }
    Ok(merged)
}

fn level_from_partition(graph: &SpatialGraph, partition: Partition) -> Result<HierarchyLevel> {
    let layout = Layout::new(&partition);
    let intra_spd = spd_tables(graph, &partition.parts)?;
    let coarse = coarse_spd(&partition, graph)?;
    Ok(HierarchyLevel { partition, layout, intra_spd, coarse })
}

/// Hierarchy from an explicit level-1 partition: each further level merges
/// part pairs of the quotient graph, so nesting is exact by construction.
pub fn build_hierarchy_from_level1(
    graph: &SpatialGraph,
    level1: Partition,
    levels: usize,
    imbalance: f64,
) -> Result<PartitionHierarchy> {
    let n = graph.n();
    let p0 = level1.p;
    if levels == 0 {
        return Err(Error::invalid("hierarchy needs at least one level"));
    }
    if levels > 1 && p0 % (1usize << (levels - 1)) != 0 {
        return Err(Error::invalid(format!(
            "p0 = {} not divisible by 2^{}",
            p0,
            levels - 1
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = level1;
    for level in 0..levels {
        if level > 0 {
            let p_next = current.p / 2;
            let cap = balance_cap(n, p_next, imbalance);
            let merged = pair_merge(graph, &current, cap)?;
            let assignment: Vec<usize> = current.assignment.iter().map(|&pi| merged[pi]).collect();
            current = Partition::from_assignment(assignment, p_next, Some(cap))?;
        }
        out.push(level_from_partition(graph, current.clone())?);
    }
    Ok(PartitionHierarchy { levels: out })
}

/// Partition the graph into `p0` parts and stack `levels` nested levels on
/// top, halving the part count each time.
pub fn build_hierarchy(
    graph: &SpatialGraph,
    p0: usize,
    levels: usize,
    imbalance: f64,
    seed: u64,
) -> Result<PartitionHierarchy> {
    if levels == 0 {
        return Err(Error::invalid("hierarchy needs at least one level"));
    }
    if levels > 1 && p0 % (1usize << (levels - 1)) != 0 {
        return Err(Error::invalid(format!("p0 = {} not divisible by 2^{}", p0, levels - 1)));
    }
    let level1 = partition_graph(graph, p0, imbalance, seed)?;
    build_hierarchy_from_level1(graph, level1, levels, imbalance)
}
