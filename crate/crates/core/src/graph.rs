//! Adjacency structure over areal units.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected adjacency over areal units with connected-component labels.
///
/// Areas are addressed by position in `ids`; neighbour lists are sorted and
/// symmetric. The graph is immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    neighbors: Vec<Vec<usize>>,
    n_edges: usize,
    component: Vec<usize>,
    n_components: usize,
}

impl AreaGraph {
    /// Builds a graph from index pairs. Duplicate edges (in either
    /// orientation) are merged; self-loops are rejected.
    pub fn from_index_edges(ids: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = ids.len();
        let mut index = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate area id '{id}'")));
            }
        }
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::input(format!("edge ({a}, {b}) out of range for {n} areas")));
            }
            if a == b {
                return Err(Error::input(format!("self-loop on area '{}'", ids[a])));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        let neighbors: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let n_edges = neighbors.iter().map(Vec::len).sum::<usize>() / 2;
        let (component, n_components) = label_components(&neighbors);
        Ok(Self {
            ids,
            index,
            neighbors,
            n_edges,
            component,
            n_components,
        })
    }

    pub fn n_areas(&self) -> usize {
        self.ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Unordered edges as `(lo, hi)` index pairs, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_edges);
        for (i, nb) in self.neighbors.iter().enumerate() {
            out.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn component_labels(&self) -> &[usize] {
        &self.component
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    /// Area indices grouped by component, in label order.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_components];
        for (i, &c) in self.component.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.n_components <= 1
    }

    /// Areas with no neighbours.
    pub fn isolated(&self) -> Vec<usize> {
        (0..self.n_areas()).filter(|&i| self.neighbors[i].is_empty()).collect()
    }

    pub fn degree(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Seed plus every area within graph distance `k` of a seed member.
    pub fn k_order_closure(&self, seed: &BTreeSet<usize>, k: usize) -> BTreeSet<usize> {
        let mut dist: HashMap<usize, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        for &s in seed {
            dist.insert(s, 0);
            queue.push_back(s);
        }
        while let Some(v) = queue.pop_front() {
            let d = dist[&v];
            if d == k {
                continue;
            }
            for &w in &self.neighbors[v] {
                if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(w) {
                    e.insert(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist.into_keys().collect()
    }

    /// Id-based form of [`AreaGraph::k_order_closure`].
    pub fn k_order_closure_ids(&self, seed: &[&str], k: usize) -> Result<BTreeSet<String>> {
        let idx = seed
            .iter()
            .map(|id| {
                self.index_of(id)
                    .ok_or_else(|| Error::input(format!("unknown area id '{id}'")))
            })
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(self
            .k_order_closure(&idx, k)
            .into_iter()
            .map(|i| self.ids[i].clone())
            .collect())
    }

    /// Subgraph induced by `areas` (ascending original order is preserved).
    pub fn induced(&self, areas: &BTreeSet<usize>) -> AreaGraph {
        let local: HashMap<usize, usize> = areas.iter().enumerate().map(|(l, &g)| (g, l)).collect();
        let ids = areas.iter().map(|&g| self.ids[g].clone()).collect();
        let mut edges = Vec::new();
        for (&g, &l) in &local {
            for w in &self.neighbors[g] {
                if let Some(&lw) = local.get(w) {
                    if l < lw {
                        edges.push((l, lw));
                    }
                }
            }
        }
        edges.sort_unstable();
        AreaGraph::from_index_edges(ids, &edges).expect("induced subgraph of a valid graph")
    }
}

/// Builds a graph from id pairs, validating every endpoint against `area_ids`.
pub fn load_graph(edge_list: &[(String, String)], area_ids: &[String]) -> Result<AreaGraph> {
    let mut index = HashMap::with_capacity(area_ids.len());
    for (i, id) in area_ids.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(Error::input(format!("duplicate area id '{id}'")));
        }
    }
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::input(format!("unknown area id '{id}' in edge list")))
    };
    let edges = edge_list
        .iter()
        .map(|(a, b)| Ok((lookup(a)?, lookup(b)?)))
        .collect::<Result<Vec<_>>>()?;
    AreaGraph::from_index_edges(area_ids.to_vec(), &edges)
}

/// Parses a tab-separated edge list (`id1<TAB>id2`, `#` comments).
pub fn parse_edge_list(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t').map(str::trim).filter(|s| !s.is_empty());
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => out.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::input(format!(
                    "edge list line {}: expected 'id1<TAB>id2', got '{raw}'",
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_edge_list(&text)
}

pub fn write_edge_list(graph: &AreaGraph) -> String {
    let mut s = String::from("# id1\tid2\n");
    for (a, b) in graph.edges() {
        s.push_str(graph.id(a));
        s.push('\t');
        s.push_str(graph.id(b));
        s.push('\n');
    }
    s
}

fn label_components(neighbors: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let n = neighbors.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        stack.push(start);
        while let Some(v) = stack.pop() {
            for &w in &neighbors[v] {
                if label[w] == usize::MAX {
                    label[w] = next;
                    stack.push(w);
                }
            }
        }
        next += 1;
    }
    (label, next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    West,
    Midwest,
    South,
    Northeast,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Region::West => "West",
            Region::Midwest => "Midwest",
            Region::South => "South",
            Region::Northeast => "Northeast",
        };
        f.write_str(s)
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "west" => Ok(Region::West),
            "midwest" => Ok(Region::Midwest),
            "south" => Ok(Region::South),
            "northeast" => Ok(Region::Northeast),
            other => Err(Error::input(format!("unknown region '{other}'"))),
        }
    }
}

/// Population class of an area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Urbanicity {
    Large,
    Medium,
    Rural,
}

impl Urbanicity {
    pub const LARGE_MIN: f64 = 1_000_000.0;
    pub const MEDIUM_MIN: f64 = 50_000.0;

    pub fn from_population(pop: f64) -> Self {
        if pop >= Self::LARGE_MIN {
            Urbanicity::Large
        } else if pop >= Self::MEDIUM_MIN {
            Urbanicity::Medium
        } else {
            Urbanicity::Rural
        }
    }
}

impl fmt::Display for Urbanicity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Urbanicity::Large => "Large",
            Urbanicity::Medium => "Medium",
            Urbanicity::Rural => "Rural",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaMeta {
    pub area_id: String,
    pub state_code: String,
    pub region: Region,
    pub urbanicity: Urbanicity,
}

/// Reads `area_id,state,region,urbanicity_pop`; the population column is
/// the reference-year population used for the urbanicity class.
pub fn read_area_meta(path: &Path) -> Result<Vec<AreaMeta>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_area_meta(file)
}

pub fn parse_area_meta<R: std::io::Read>(reader: R) -> Result<Vec<AreaMeta>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["area_id", "state", "region", "urbanicity_pop"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::input(format!(
            "area metadata header must be '{}', got '{}'",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let area_id = rec[0].to_string();
        if !seen.insert(area_id.clone()) {
            return Err(Error::input(format!("area metadata line {line}: duplicate area '{area_id}'")));
        }
        let region: Region = rec[2]
            .parse()
            .map_err(|e| Error::input(format!("area metadata line {line}: {e}")))?;
        let pop: f64 = rec[3]
            .parse()
            .map_err(|_| Error::input(format!("area metadata line {line}: bad population '{}'", &rec[3])))?;
        out.push(AreaMeta {
            area_id,
            state_code: rec[1].to_string(),
            region,
            urbanicity: Urbanicity::from_population(pop),
        });
    }
    Ok(out)
}
