//! Station graph construction and shortest-path-distance tables.
//!
//! Stations become nodes; an undirected edge joins two stations whose
//! great-circle distance is strictly below a threshold `epsilon_km`. Hop
//! distances inside induced subgraphs feed the attention bias tables, with
//! `-1` marking unreachable pairs.

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Geographic coordinate in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoCoord {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoCoord {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !lat_deg.is_finite() || !lon_deg.is_finite() {
            return Err(Error::invalid("coordinates must be finite"));
        }
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(Error::invalid(format!("latitude {} out of [-90, 90]", lat_deg)));
        }
        if lon_deg <= -180.0 || lon_deg > 180.0 {
            return Err(Error::invalid(format!("longitude {} out of (-180, 180]", lon_deg)));
        }
        Ok(GeoCoord { lat_deg, lon_deg })
    }

    pub fn lat_rad(&self) -> f64 {
        self.lat_deg.to_radians()
    }

    pub fn lon_rad(&self) -> f64 {
        self.lon_deg.to_radians()
    }

    /// Polar angle from the north pole, in radians.
    pub fn colat_rad(&self) -> f64 {
        std::f64::consts::FRAC_PI_2 - self.lat_rad()
    }
}

/// The stations under study: unique ids plus one coordinate per id.
#[derive(Debug, Clone)]
pub struct StationSet {
    pub ids: Vec<String>,
    pub coords: Vec<GeoCoord>,
}

impl StationSet {
    pub fn new(ids: Vec<String>, coords: Vec<GeoCoord>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("station set must not be empty"));
        }
        if ids.len() != coords.len() {
            return Err(Error::invalid(format!(
                "{} ids but {} coordinates",
                ids.len(),
                coords.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate station id `{}`", id)));
            }
        }
        Ok(StationSet { ids, coords })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Undirected station graph as adjacency lists (sorted, no self-loops).
#[derive(Debug, Clone)]
pub struct SpatialGraph {
    n: usize,
    adj: Vec<Vec<usize>>,
    edge_count: usize,
}

impl SpatialGraph {
    /// Build from an explicit edge list; used by tests and the partitioner.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("graph must have at least one node"));
        }
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a == b {
                return Err(Error::invalid(format!("self-loop at node {}", a)));
            }
            if a >= n || b >= n {
                return Err(Error::invalid(format!("edge ({}, {}) out of range", a, b)));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut edge_count = 0;
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
            edge_count += list.len();
        }
        Ok(SpatialGraph {
            n,
            adj,
            edge_count: edge_count / 2,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a].binary_search(&b).is_ok()
    }

    /// Unordered edge pairs with a < b, ascending.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for a in 0..self.n {
            for &b in &self.adj[a] {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

/// Great-circle distance in kilometers between two coordinates.
pub fn haversine_km(a: GeoCoord, b: GeoCoord) -> f64 {
    let (lat1, lon1) = (a.lat_rad(), a.lon_rad());
    let (lat2, lon2) = (b.lat_rad(), b.lon_rad());
    let sin_dlat = ((lat2 - lat1) / 2.0).sin();
    let sin_dlon = ((lon2 - lon1) / 2.0).sin();
    let h = sin_dlat * sin_dlat + lat1.cos() * lat2.cos() * sin_dlon * sin_dlon;
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Connect every station pair strictly closer than `epsilon_km`.
pub fn build_spatial_graph(stations: &StationSet, epsilon_km: f64) -> Result<SpatialGraph> {
    if stations.is_empty() {
        return Err(Error::invalid("cannot build a graph over zero stations"));
    }
    if !(epsilon_km >= 0.0) {
        return Err(Error::invalid("epsilon_km must be >= 0"));
    }
    let n = stations.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if haversine_km(stations.coords[i], stations.coords[j]) < epsilon_km {
                edges.push((i, j));
            }
        }
    }
    SpatialGraph::from_edges(n, &edges)
}

/// Convenience threshold: the `quantile`-th percentile (in [0, 1]) of the
/// distance to each station's k-th nearest neighbor. Not part of the core
/// method; a practical way to pick `epsilon_km` when no value is given.
pub fn epsilon_from_knn_quantile(stations: &StationSet, k: usize, quantile: f64) -> Result<f64> {
    let n = stations.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k must be in [1, {}), got {}", n, k)));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::invalid("quantile must be in [0, 1]"));
    }
    let mut kth = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for i in 0..n {
        dists.clear();
        for j in 0..n {
            if i != j {
                dists.push(haversine_km(stations.coords[i], stations.coords[j]));
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        kth.push(dists[k - 1]);
    }
    kth.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((quantile * (n - 1) as f64).round() as usize).min(n - 1);
    Ok(kth[idx])
}

/// Symmetric hop-count table over a node subset, `-1` for unreachable pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdTable {
    k: usize,
    entries: Vec<i32>,
}

impl SpdTable {
    pub fn from_entries(k: usize, entries: Vec<i32>) -> Result<Self> {
        if entries.len() != k * k {
            return Err(Error::invalid("SPD table must be k x k"));
        }
        Ok(SpdTable { k, entries })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.entries[i * self.k + j]
    }

    pub fn entries(&self) -> &[i32] {
        &self.entries
    }
}

/// BFS hop distances within the subgraph induced by `subset`.
///
/// Paths may only use subset members; entry (i, j) indexes positions in
/// `subset`, not global node ids.
pub fn spd_table(graph: &SpatialGraph, subset: &[usize]) -> Result<SpdTable> {
    let k = subset.len();
    let mut local = vec![usize::MAX; graph.n()];
    for (pos, &v) in subset.iter().enumerate() {
        if v >= graph.n() {
            return Err(Error::invalid(format!("subset node {} out of range", v)));
        }
        if local[v] != usize::MAX {
            return Err(Error::invalid(format!("duplicate subset entry {}", v)));
        }
        local[v] = pos;
    }

    let mut entries = vec![-1i32; k * k];
    let mut dist = vec![-1i32; k];
    let mut queue = std::collections::VecDeque::new();
    for (src, &v) in subset.iter().enumerate() {
        dist.iter_mut().for_each(|d| *d = -1);
        dist[src] = 0;
        queue.clear();
        queue.push_back(v);
        while let Some(u) = queue.pop_front() {
            let du = dist[local[u]];
            for &w in graph.neighbors(u) {
                let pw = local[w];
                if pw != usize::MAX && dist[pw] < 0 {
                    dist[pw] = du + 1;
                    queue.push_back(w);
                }
            }
        }
        entries[src * k..(src + 1) * k].copy_from_slice(&dist);
    }
    SpdTable::from_entries(k, entries)
}

/// SPD tables for many subsets, fanned out over up to `max_threads` threads
/// (or the `S2CAST_THREADS` cap). Output order matches input order, so the
/// result is independent of scheduling.
pub fn spd_tables(graph: &SpatialGraph, subsets: &[Vec<usize>]) -> Result<Vec<SpdTable>> {
    let threads = thread_cap().min(subsets.len().max(1));
    if threads <= 1 || subsets.len() <= 1 {
        return subsets.iter().map(|s| spd_table(graph, s)).collect();
    }
    let mut slots: Vec<Option<Result<SpdTable>>> = (0..subsets.len()).map(|_| None).collect();
    let chunk = subsets.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (subsets_chunk, slots_chunk) in subsets.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (subset, slot) in subsets_chunk.iter().zip(slots_chunk.iter_mut()) {
                    *slot = Some(spd_table(graph, subset));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

/// Worker-thread cap: `S2CAST_THREADS` if set, else available parallelism.
pub fn thread_cap() -> usize {
    if let Ok(v) = std::env::var("S2CAST_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coord(lat: f64, lon: f64) -> GeoCoord {
        GeoCoord::new(lat, lon).unwrap()
    }

    #[test]
    fn haversine_identical_points_is_zero() {
        assert_eq!(haversine_km(coord(10.0, 20.0), coord(10.0, 20.0)), 0.0);
    }

    #[test]
    fn haversine_antipodal_on_equator() {
        // Half circumference: pi * R.
        let d = haversine_km(coord(0.0, 0.0), coord(0.0, 180.0));
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_KM).abs() < 0.01);
        assert!((d - 20015.09).abs() < 0.01);
    }

    #[test]
    fn haversine_quarter_circumference() {
        let d = haversine_km(coord(0.0, 0.0), coord(0.0, 90.0));
        assert!((d - std::f64::consts::FRAC_PI_2 * EARTH_RADIUS_KM).abs() < 0.01);
        assert!((d - 10007.54).abs() < 0.01);
    }

    #[test]
    fn haversine_symmetric_nonnegative() {
        let pts = [
            coord(89.9, 10.0),
            coord(-45.0, -170.0),
            coord(0.0, 180.0),
            coord(12.3, -45.6),
            coord(-89.9, 0.1),
        ];
        for &a in &pts {
            for &b in &pts {
                let ab = haversine_km(a, b);
                let ba = haversine_km(b, a);
                assert!(ab >= 0.0);
                assert_eq!(ab, ba);
            }
        }
    }

    fn stations(coords: Vec<GeoCoord>) -> StationSet {
        let ids = (0..coords.len()).map(|i| format!("S{}", i)).collect();
        StationSet::new(ids, coords).unwrap()
    }

    #[test]
    fn zero_epsilon_gives_empty_edge_set() {
        let s = stations(vec![coord(0.0, 0.0), coord(0.0, 0.0), coord(1.0, 1.0)]);
        let g = build_spatial_graph(&s, 0.0).unwrap();
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn line_of_stations_links_neighbors_only() {
        // Three stations on the equator, roughly 5 km apart in longitude.
        let step = 5.0 / (EARTH_RADIUS_KM * std::f64::consts::PI / 180.0);
        let s = stations(vec![
            coord(0.0, 0.0),
            coord(0.0, step),
            coord(0.0, 2.0 * step),
        ]);
        let d01 = haversine_km(s.coords[0], s.coords[1]);
        let d02 = haversine_km(s.coords[0], s.coords[2]);
        assert!((d01 - 5.0).abs() < 0.01);
        assert!(d02 > 6.0);
        let g = build_spatial_graph(&s, 6.0).unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 2));
        assert!(!g.has_edge(0, 2));
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn coincident_stations_connect() {
        let s = stations(vec![coord(10.0, 10.0), coord(10.0, 10.0)]);
        let g = build_spatial_graph(&s, 1.0).unwrap();
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn empty_station_set_rejected() {
        assert!(StationSet::new(vec![], vec![]).is_err());
    }

    #[test]
    fn graph_matches_bruteforce_pairwise_check() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let coords: Vec<GeoCoord> = (0..120)
            .map(|_| coord(rng.gen_range(-80.0..80.0), rng.gen_range(-179.0..180.0)))
            .collect();
        let s = stations(coords);
        let eps = 900.0;
        let g = build_spatial_graph(&s, eps).unwrap();
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                let want = haversine_km(s.coords[i], s.coords[j]) < eps;
                assert_eq!(g.has_edge(i, j), want, "pair ({}, {})", i, j);
            }
        }
    }

    #[test]
    fn spd_path_graph() {
        let g = SpatialGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let t = spd_table(&g, &[0, 1, 2]).unwrap();
        assert_eq!(t.get(0, 2), 2);
        assert_eq!(t.get(2, 0), 2);
        for i in 0..3 {
            assert_eq!(t.get(i, i), 0);
        }
    }

    #[test]
    fn spd_disconnected_components_get_sentinel() {
        let g = SpatialGraph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let t = spd_table(&g, &[0, 1, 2, 3]).unwrap();
        assert_eq!(t.get(0, 2), -1);
        assert_eq!(t.get(1, 3), -1);
        assert_eq!(t.get(0, 1), 1);
        assert_eq!(t.get(2, 3), 1);
    }

    #[test]
    fn spd_uses_only_subset_nodes() {
        // 0-1-2 path: without node 1 in the subset, 0 and 2 are unreachable.
        let g = SpatialGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let t = spd_table(&g, &[0, 2]).unwrap();
        assert_eq!(t.get(0, 1), -1);
    }

    #[test]
    fn spd_rejects_duplicate_subset() {
        let g = SpatialGraph::from_edges(3, &[(0, 1)]).unwrap();
        assert!(spd_table(&g, &[0, 0]).is_err());
    }

    /// Floyd-Warshall oracle used to validate the BFS tables.
    fn floyd_warshall(g: &SpatialGraph, subset: &[usize]) -> Vec<i32> {
        let k = subset.len();
        const INF: i64 = i64::MAX / 4;
        let mut d = vec![INF; k * k];
        for i in 0..k {
            d[i * k + i] = 0;
        }
        for (i, &u) in subset.iter().enumerate() {
            for (j, &v) in subset.iter().enumerate() {
                if g.has_edge(u, v) {
                    d[i * k + j] = 1;
                }
            }
        }
        for m in 0..k {
            for i in 0..k {
                for j in 0..k {
                    let via = d[i * k + m] + d[m * k + j];
                    if via < d[i * k + j] {
                        d[i * k + j] = via;
                    }
                }
            }
        }
        d.iter().map(|&v| if v >= INF { -1 } else { v as i32 }).collect()
    }

    #[test]
    fn spd_matches_floyd_warshall_on_random_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..30 {
            let n = rng.gen_range(2..=30);
            let mut edges = Vec::new();
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.gen_bool(0.15) {
                        edges.push((a, b));
                    }
                }
            }
            let g = SpatialGraph::from_edges(n, &edges).unwrap();
            let mut subset: Vec<usize> = (0..n).collect();
            subset.retain(|_| rng.gen_bool(0.8));
            if subset.is_empty() {
                continue;
            }
            let t = spd_table(&g, &subset).unwrap();
            assert_eq!(t.entries(), floyd_warshall(&g, &subset).as_slice(), "trial {}", trial);
        }
    }

    #[test]
    fn parallel_spd_matches_serial() {
        let g = SpatialGraph::from_edges(6, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let subsets = vec![vec![0, 1, 2], vec![3, 4, 5], vec![0, 5]];
        let par = spd_tables(&g, &subsets).unwrap();
        for (i, subset) in subsets.iter().enumerate() {
            assert_eq!(par[i], spd_table(&g, subset).unwrap());
        }
    }

    #[test]
    fn coordinate_validation() {
        assert!(GeoCoord::new(91.0, 0.0).is_err());
        assert!(GeoCoord::new(0.0, -180.0).is_err());
        assert!(GeoCoord::new(0.0, 180.0).is_ok());
        assert!(GeoCoord::new(f64::NAN, 0.0).is_err());
    }
}
