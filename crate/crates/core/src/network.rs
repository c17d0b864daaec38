//! Road networks, travel demand, and path enumeration.
//!
//! Parses TNTP-format link and trips files plus an expansion-coefficient CSV,
//! enumerates loopless candidate paths per origin-destination pair with Yen's
//! algorithm, and builds the demand-weighted link-path incidence matrix that
//! the solvers operate on.

use std::collections::BinaryHeap;
use std::collections::HashSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::simplex::{BlockLayout, BlockSimplexVector};

/// A directed link with cost and expansion parameters.
///
/// Node ids are zero-based internally; input files use one-based ids.
#[derive(Debug, Clone)]
pub struct Link {
    pub tail: usize,
    pub head: usize,
    /// Free-flow travel time.
    pub free_flow_time: f64,
    /// Congestion coefficient of the quartic delay term.
    pub bpr_coeff: f64,
    /// Existing capacity.
    pub capacity: f64,
    /// Investment cost coefficient (cost per squared expansion unit).
    pub invest_coeff: f64,
    /// Upper bound on capacity expansion; zero for non-expandable links.
    pub expansion_ub: f64,
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    pub nodes: usize,
    pub links: Vec<Link>,
}

impl RoadNetwork {
    pub fn validate(&self) -> Result<()> {
        for (idx, link) in self.links.iter().enumerate() {
            if link.tail >= self.nodes || link.head >= self.nodes {
                return Err(Error::Validation(format!(
                    "link {} endpoints ({}, {}) outside node range 0..{}",
                    idx + 1,
                    link.tail,
                    link.head,
                    self.nodes
                )));
            }
            if link.tail == link.head {
                return Err(Error::Validation(format!("link {} is a self-loop", idx + 1)));
            }
            if !(link.capacity > 0.0) {
                return Err(Error::Validation(format!(
                    "link {} has nonpositive capacity {}",
                    idx + 1,
                    link.capacity
                )));
            }
            if link.free_flow_time < 0.0 || link.bpr_coeff < 0.0 || link.expansion_ub < 0.0 {
                return Err(Error::Validation(format!(
                    "link {} has negative parameters",
                    idx + 1
                )));
            }
        }
        Ok(())
    }

    /// Link ids with a strictly positive expansion bound, in file order.
    pub fn expandable_links(&self) -> Vec<usize> {
        self.links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.expansion_ub > 0.0)
            .map(|(a, _)| a)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandEntry {
    pub origin: usize,
    pub destination: usize,
    pub demand: f64,
}

#[derive(Debug, Clone)]
pub struct DemandTable {
    pub entries: Vec<DemandEntry>,
}

impl DemandTable {
    pub fn total_demand(&self) -> f64 {
        self.entries.iter().map(|e| e.demand).sum()
    }
}

/// Candidate path sets per OD pair plus the demand-weighted incidence matrix.
///
/// Row (i, j) of the incidence holds the demand of population i at every link
/// used by its j-th path and zero elsewhere, so link flows are `incidence^T h`.
#[derive(Debug, Clone)]
pub struct PathFlowSpace {
    layout: Arc<BlockLayout>,
    /// `paths[i][j]` is the j-th candidate path of OD pair i as a link-id sequence.
    pub paths: Vec<Vec<Vec<usize>>>,
    pub od_pairs: Vec<DemandEntry>,
    incidence: DMatrix<f64>,
}

impl PathFlowSpace {
    /// Builds a space from explicit path lists, deriving layout and incidence.
    pub fn from_parts(
        paths: Vec<Vec<Vec<usize>>>,
        od_pairs: Vec<DemandEntry>,
        num_links: usize,
    ) -> Result<Self> {
        if paths.len() != od_pairs.len() {
            return Err(Error::Shape(
                "one path list per demand entry required".into(),
            ));
        }
        let layout = BlockLayout::new(paths.iter().map(Vec::len).collect())?;
        let mut incidence = DMatrix::zeros(layout.total_dim(), num_links);
        for (i, entry) in od_pairs.iter().enumerate() {
            let base = layout.range(i).start;
            for (j, path) in paths[i].iter().enumerate() {
                for &a in path {
                    if a >= num_links {
                        return Err(Error::Validation(format!("path uses unknown link {a}")));
                    }
                    incidence[(base + j, a)] = entry.demand;
                }
            }
        }
        Ok(PathFlowSpace {
            layout,
            paths,
            od_pairs,
            incidence,
        })
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn num_populations(&self) -> usize {
        self.layout.num_blocks()
    }

    pub fn total_paths(&self) -> usize {
        self.layout.total_dim()
    }

    /// Demand-weighted link-path incidence, shape (total paths) x (links).
    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    pub fn num_links(&self) -> usize {
        self.incidence.ncols()
    }
}

/// Aggregates path flows into link flows: `x = incidence^T h`.
pub fn link_flows(space: &PathFlowSpace, h: &BlockSimplexVector) -> Result<DVector<f64>> {
    if !Arc::ptr_eq(h.layout(), space.layout()) && h.layout().as_ref() != space.layout().as_ref() {
        return Err(Error::Shape(
            "path-flow vector does not match the path space layout".into(),
        ));
    }
    Ok(space.incidence.tr_mul(h.as_vector()))
}

// ---------------------------------------------------------------------------
// TNTP parsing
// ---------------------------------------------------------------------------

fn parse_metadata(text: &str) -> Result<(Vec<(usize, &str)>, std::collections::HashMap<String, String>)> {
    let mut meta = std::collections::HashMap::new();
    let mut body = Vec::new();
    let mut in_meta = true;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('~') {
            continue;
        }
        if in_meta {
            if line.starts_with('<') {
                if line.starts_with("<END OF METADATA>") {
                    in_meta = false;
                    continue;
                }
                let close = line.find('>').ok_or_else(|| {
                    Error::parse(lineno + 1, "metadata line missing closing '>'")
                })?;
                let key = line[1..close].trim().to_string();
                let value = line[close + 1..].trim().to_string();
                meta.insert(key, value);
                continue;
            }
            // Some files omit <END OF METADATA>; first non-bracket line starts the body.
            in_meta = false;
        }
        body.push((lineno + 1, raw));
    }
    Ok((body, meta))
}

fn meta_count(
    meta: &std::collections::HashMap<String, String>,
    key: &str,
) -> Result<usize> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::parse(1, format!("missing metadata <{key}>")))?;
    raw.trim()
        .parse::<usize>()
        .map_err(|_| Error::parse(1, format!("metadata <{key}> is not a count: {raw:?}")))
}

fn parse_link_file(text: &str) -> Result<(usize, Vec<Link>)> {
    let (body, meta) = parse_metadata(text)?;
    let nodes = meta_count(&meta, "NUMBER OF NODES")?;
    let expected_links = meta_count(&meta, "NUMBER OF LINKS")?;

    let mut links = Vec::with_capacity(expected_links);
    for (lineno, raw) in body {
        let record = raw.trim().trim_end_matches(';').trim();
        if record.is_empty() {
            continue;
        }
        let fields: Vec<&str> = record.split_whitespace().collect();
        if fields.len() < 10 {
            return Err(Error::parse(
                lineno,
                format!("link record has {} fields, expected 10", fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::parse(lineno, format!("field {} is not a number: {:?}", i + 1, fields[i])))
        };
        let tail = num(0)? as usize;
        let head = num(1)? as usize;
        if tail == 0 || head == 0 {
            return Err(Error::parse(lineno, "node ids are one-based, got 0"));
        }
        let capacity = num(2)?;
        let free_flow_time = num(4)?;
        let tntp_b = num(5)?;
        links.push(Link {
            tail: tail - 1,
            head: head - 1,
            free_flow_time,
            // TNTP stores the delay multiplier relative to free-flow time.
            bpr_coeff: tntp_b * free_flow_time,
            capacity,
            invest_coeff: 0.0,
            expansion_ub: 0.0,
        });
    }
    if links.len() != expected_links {
        return Err(Error::Validation(format!(
            "link file declared {} links but contains {}",
            expected_links,
            links.len()
        )));
    }
    Ok((nodes, links))
}

fn parse_trips_file(text: &str) -> Result<Vec<DemandEntry>> {
    let (body, _meta) = parse_metadata(text)?;
    let mut entries = Vec::new();
    let mut origin: Option<usize> = None;
    for (lineno, raw) in body {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix("Origin") {
            let id: usize = rest.trim().parse().map_err(|_| {
                Error::parse(lineno, format!("bad origin id: {:?}", rest.trim()))
            })?;
            if id == 0 {
                return Err(Error::parse(lineno, "node ids are one-based, got 0"));
            }
            origin = Some(id - 1);
            continue;
        }
        let o = origin.ok_or_else(|| Error::parse(lineno, "demand record before any Origin line"))?;
        for part in line.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (dest_s, flow_s) = part
                .split_once(':')
                .ok_or_else(|| Error::parse(lineno, format!("expected 'dest : flow', got {part:?}")))?;
            let dest: usize = dest_s.trim().parse().map_err(|_| {
                Error::parse(lineno, format!("bad destination id: {:?}", dest_s.trim()))
            })?;
            if dest == 0 {
                return Err(Error::parse(lineno, "node ids are one-based, got 0"));
            }
            let flow: f64 = flow_s.trim().parse().map_err(|_| {
                Error::parse(lineno, format!("bad demand value: {:?}", flow_s.trim()))
            })?;
            if flow < 0.0 {
                return Err(Error::Validation(format!(
                    "negative demand {flow} for OD ({}, {dest})",
                    o + 1
                )));
            }
            if flow == 0.0 {
                continue;
            }
            if dest - 1 == o {
                return Err(Error::Validation(format!(
                    "positive demand on self pair ({}, {dest})",
                    o + 1
                )));
            }
            entries.push(DemandEntry {
                origin: o,
                destination: dest - 1,
                demand: flow,
            });
        }
    }
    Ok(entries)
}

fn apply_expansion_csv(text: &str, links: &mut [Link]) -> Result<()> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "expansion CSV is empty"))?;
    let cols: Vec<String> = header
        .split(',')
        .map(|c| c.trim().to_ascii_lowercase())
        .collect();
    let has_b = match cols.as_slice() {
        [l, d, u] if l == "link" && d == "d" && u == "u" => false,
        [l, d, u, b] if l == "link" && d == "d" && u == "u" && b == "b" => true,
        _ => {
            return Err(Error::parse(
                1,
                format!("expansion CSV header must be 'link,d,u[,B]', got {header:?}"),
            ))
        }
    };
    for (lineno, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = if has_b { 4 } else { 3 };
        if fields.len() != expected {
            return Err(Error::parse(
                lineno + 1,
                format!("expected {expected} fields, got {}", fields.len()),
            ));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(lineno + 1, format!("bad link index {:?}", fields[0])))?;
        if idx == 0 || idx > links.len() {
            return Err(Error::Validation(format!(
                "expansion CSV references unknown link {idx} (file has {} links)",
                links.len()
            )));
        }
        let parse_f = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::parse(lineno + 1, format!("bad number {:?}", fields[i])))
        };
        let link = &mut links[idx - 1];
        link.invest_coeff = parse_f(1)?;
        link.expansion_ub = parse_f(2)?;
        if has_b {
            link.bpr_coeff = parse_f(3)?;
        }
    }
    Ok(())
}

/// Parses TNTP link and trips text plus the expansion CSV into network data.
///
/// The expansion CSV (`link,d,u[,B]`, one-based link indices in file order)
/// assigns investment coefficients and expansion bounds; links it omits keep
/// `d = u = 0`. When present, its `B` column overrides the congestion
/// coefficient; otherwise the TNTP record's multiplier times free-flow time
/// is used (0.15 times free-flow time for classic inputs).
pub fn parse_tntp(
    network_text: &str,
    trips_text: &str,
    expansion_text: &str,
) -> Result<(RoadNetwork, DemandTable)> {
    let (nodes, mut links) = parse_link_file(network_text)?;
    apply_expansion_csv(expansion_text, &mut links)?;
    let net = RoadNetwork { nodes, links };
    net.validate()?;
    let entries = parse_trips_file(trips_text)?;
    for e in &entries {
        if e.origin >= nodes || e.destination >= nodes {
            return Err(Error::Validation(format!(
                "demand pair ({}, {}) outside node range",
                e.origin + 1,
                e.destination + 1
            )));
        }
    }
    Ok((net, DemandTable { entries }))
}

// ---------------------------------------------------------------------------
// Shortest paths
// ---------------------------------------------------------------------------

/// Outgoing adjacency: `out[node]` lists link ids sorted ascending.
fn adjacency(net: &RoadNetwork) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); net.nodes];
    for (a, link) in net.links.iter().enumerate() {
        out[link.tail].push(a);
    }
    out
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap on (dist, node id) for deterministic pop order.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Deterministic Dijkstra on free-flow times returning a link-id path.
///
/// `banned_nodes` and `banned_links` support the spur searches of Yen's
/// algorithm. Ties resolve by heap order and ascending link id.
fn dijkstra(
    net: &RoadNetwork,
    out: &[Vec<usize>],
    source: usize,
    target: usize,
    banned_nodes: &HashSet<usize>,
    banned_links: &HashSet<usize>,
) -> Option<(Vec<usize>, f64)> {
    let mut dist = vec![f64::INFINITY; net.nodes];
    let mut pred: Vec<Option<usize>> = vec![None; net.nodes];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry {
        dist: 0.0,
        node: source,
    });
    while let Some(HeapEntry { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        if node == target {
            break;
        }
        for &a in &out[node] {
            if banned_links.contains(&a) {
                continue;
            }
            let link = &net.links[a];
            if banned_nodes.contains(&link.head) {
                continue;
            }
            let nd = d + link.free_flow_time;
            if nd < dist[link.head] {
                dist[link.head] = nd;
                pred[link.head] = Some(a);
                heap.push(HeapEntry {
                    dist: nd,
                    node: link.head,
                });
            }
        }
    }
    if !dist[target].is_finite() {
        return None;
    }
    let mut path = Vec::new();
    let mut node = target;
    while node != source {
        let a = pred[node]?;
        path.push(a);
        node = net.links[a].tail;
    }
    path.reverse();
    Some((path, dist[target]))
}

fn path_cost(net: &RoadNetwork, path: &[usize]) -> f64 {
    path.iter().map(|&a| net.links[a].free_flow_time).sum()
}

fn path_nodes(net: &RoadNetwork, origin: usize, path: &[usize]) -> Vec<usize> {
    let mut nodes = Vec::with_capacity(path.len() + 1);
    nodes.push(origin);
    for &a in path {
        nodes.push(net.links[a].head);
    }
    nodes
}

/// Orders candidate paths by cost, then lexicographically by link sequence.
fn candidate_cmp(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
}

/// Yen's k-shortest loopless paths between one OD pair.
fn yen_paths(
    net: &RoadNetwork,
    out: &[Vec<usize>],
    origin: usize,
    destination: usize,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let no_nodes = HashSet::new();
    let no_links = HashSet::new();
    let Some((first, cost)) = dijkstra(net, out, origin, destination, &no_nodes, &no_links) else {
        return Err(Error::Disconnected {
            origin: origin + 1,
            destination: destination + 1,
        });
    };
    let mut accepted: Vec<(f64, Vec<usize>)> = vec![(cost, first)];
    let mut candidates: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    seen.insert(accepted[0].1.clone());

    while accepted.len() < k {
        let prev = accepted.last().unwrap().1.clone();
        for i in 0..prev.len() {
            let root = &prev[..i];
            let spur_node = if i == 0 {
                origin
            } else {
                net.links[prev[i - 1]].head
            };
            let mut banned_links = HashSet::new();
            for (_, path) in &accepted {
                if path.len() > i && path[..i] == *root {
                    banned_links.insert(path[i]);
                }
            }
            // Loopless: spur path may not revisit nodes already on the root.
            let mut banned_nodes: HashSet<usize> =
                path_nodes(net, origin, root).into_iter().collect();
            banned_nodes.remove(&spur_node);
            if let Some((spur, _)) =
                dijkstra(net, out, spur_node, destination, &banned_nodes, &banned_links)
            {
                let mut full = root.to_vec();
                full.extend(spur);
                if seen.insert(full.clone()) {
                    let cost = path_cost(net, &full);
                    let cand = (cost, full);
                    let pos = candidates
                        .binary_search_by(|c| candidate_cmp(c, &cand))
                        .unwrap_or_else(|p| p);
                    candidates.insert(pos, cand);
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        accepted.push(candidates.remove(0));
    }
    accepted.sort_by(candidate_cmp);
    Ok(accepted.into_iter().map(|(_, p)| p).collect())
}

/// Enumerates up to `k` loopless shortest paths per OD pair (free-flow times)
/// and assembles the demand-weighted incidence.
///
/// OD pairs with zero demand are absent from the table by construction; each
/// remaining pair must be connected. Ties in path cost break lexicographically
/// on the link-id sequence, so the result is deterministic.
pub fn k_shortest_paths(
    net: &RoadNetwork,
    demand: &DemandTable,
    k: usize,
) -> Result<PathFlowSpace> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    if demand.entries.is_empty() {
        return Err(Error::Validation("demand table is empty".into()));
    }
    let out = adjacency(net);
    let mut paths = Vec::with_capacity(demand.entries.len());
    let mut sizes = Vec::with_capacity(demand.entries.len());
    for entry in &demand.entries {
        let od_paths = yen_paths(net, &out, entry.origin, entry.destination, k)?;
        sizes.push(od_paths.len());
        paths.push(od_paths);
    }
    let layout = BlockLayout::new(sizes)?;
    let mut incidence = DMatrix::zeros(layout.total_dim(), net.links.len());
    for (i, entry) in demand.entries.iter().enumerate() {
        let base = layout.range(i).start;
        for (j, path) in paths[i].iter().enumerate() {
            for &a in path {
                incidence[(base + j, a)] = entry.demand;
            }
        }
    }
    Ok(PathFlowSpace {
        layout,
        paths,
        od_pairs: demand.entries.clone(),
        incidence,
    })
}
