use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Star,
    RandomGnp,
    Complete,
    Explicit,
}

/// Undirected contact graph over clients `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub kind: TopologyKind,
    adj: Vec<BTreeSet<usize>>,
}

/// Result of a diameter query on a possibly disconnected subgraph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Diameter {
    Connected(usize),
    Disconnected,
}

impl Topology {
    pub fn empty(n: usize, kind: TopologyKind) -> Self {
        Topology {
            kind,
            adj: vec![BTreeSet::new(); n],
        }
    }

    pub fn ring(n: usize) -> Self {
        let mut t = Self::empty(n, TopologyKind::Ring);
        if n > 1 {
            for i in 0..n {
                t.add_edge(i, (i + 1) % n);
            }
        }
        t
    }

    /// Client 0 is the hub.
    pub fn star(n: usize) -> Self {
        let mut t = Self::empty(n, TopologyKind::Star);
        for i in 1..n {
            t.add_edge(0, i);
        }
        t
    }

    pub fn complete(n: usize) -> Self {
        let mut t = Self::empty(n, TopologyKind::Complete);
        for i in 0..n {
            for j in i + 1..n {
                t.add_edge(i, j);
            }
        }
        t
    }

    pub fn gnp<R: Rng>(n: usize, p: f64, rng: &mut R) -> Self {
        let mut t = Self::empty(n, TopologyKind::RandomGnp);
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(p) {
                    t.add_edge(i, j);
                }
            }
        }
        t
    }

    pub fn explicit(n: usize, edges: &[(usize, usize)]) -> Result<Self, String> {
        let mut t = Self::empty(n, TopologyKind::Explicit);
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(format!("edge ({a}, {b}) names a client outside 0..{n}"));
            }
            if a == b {
                return Err(format!("self-loop on client {a}"));
            }
            t.add_edge(a, b);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn add_edge(&mut self, a: usize, b: usize) -> bool {
        let fresh = self.adj[a].insert(b);
        self.adj[b].insert(a);
        fresh
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a].contains(&b)
    }

    pub fn neighbors(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[a].iter().copied()
    }

    pub fn degree(&self, a: usize) -> usize {
        self.adj[a].len()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, ns) in self.adj.iter().enumerate() {
            out.extend(ns.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    /// Copy without the given edges.
    pub fn without_edges(&self, cut: &BTreeSet<(usize, usize)>) -> Topology {
        let mut t = Topology::empty(self.len(), self.kind);
        for (a, b) in self.edges() {
            if !cut.contains(&(a, b)) {
                t.add_edge(a, b);
            }
        }
        t
    }

    fn bfs(&self, src: usize, alive: &[bool]) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        dist[src] = Some(0);
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            let d = dist[u].expect("queued nodes have a distance");
            for v in self.neighbors(u) {
                if alive[v] && dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    q.push_back(v);
                }
            }
        }
        dist
    }

    /// Connected components of the subgraph induced by `alive`.
    pub fn components(&self, alive: &[bool]) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for s in 0..self.len() {
            if !alive[s] || seen[s] {
                continue;
            }
            let comp: Vec<usize> = self
                .bfs(s, alive)
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.map(|_| i))
                .collect();
            for &i in &comp {
                seen[i] = true;
            }
            out.push(comp);
        }
        out
    }

    /// Longest shortest path within one component.
    pub fn component_diameter(&self, comp: &[usize], alive: &[bool]) -> usize {
        comp.iter()
            .map(|&s| self.bfs(s, alive).iter().filter_map(|d| *d).max().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    /// Largest diameter over the components of the `alive` subgraph.
    pub fn max_component_diameter(&self, alive: &[bool]) -> usize {
        self.components(alive)
            .iter()
            .map(|c| self.component_diameter(c, alive))
            .max()
            .unwrap_or(0)
    }
}

/// Exact diameter of the subgraph induced by `online`, by BFS from every
/// node.
pub fn graph_diameter(topology: &Topology, online: &[bool]) -> Diameter {
    let comps = topology.components(online);
    match comps.len() {
        0 => Diameter::Connected(0),
        1 => Diameter::Connected(topology.component_diameter(&comps[0], online)),
        _ => Diameter::Disconnected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_shapes() {
        let all = |n| vec![true; n];
        assert_eq!(graph_diameter(&Topology::ring(10), &all(10)), Diameter::Connected(5));
        assert_eq!(graph_diameter(&Topology::star(101), &all(101)), Diameter::Connected(2));
        assert_eq!(graph_diameter(&Topology::complete(5), &all(5)), Diameter::Connected(1));
        assert_eq!(graph_diameter(&Topology::ring(1), &all(1)), Diameter::Connected(0));
    }

    #[test]
    fn offline_nodes_split_the_graph() {
        let mut alive = vec![true; 10];
        alive[0] = false;
        assert_eq!(graph_diameter(&Topology::ring(10), &alive), Diameter::Connected(8));
        alive[5] = false;
        assert_eq!(graph_diameter(&Topology::ring(10), &alive), Diameter::Disconnected);
        assert_eq!(Topology::ring(10).max_component_diameter(&alive), 3);
    }

    #[test]
    fn explicit_rejects_bad_edges() {
        assert!(Topology::explicit(3, &[(0, 3)]).is_err());
        assert!(Topology::explicit(3, &[(1, 1)]).is_err());
        assert_eq!(Topology::explicit(3, &[(0, 1), (1, 0)]).unwrap().edges(), vec![(0, 1)]);
    }
}
