use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::time::{Bandwidth, VirtualTime};
use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub u32);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    #[default]
    Host,
    Switch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default)]
    pub kind: NodeKind,
    /// Only meaningful for switches.
    #[serde(default)]
    pub forwarding_latency_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub latency_ns: u64,
    /// 0 means infinite.
    #[serde(default)]
    pub bandwidth_mbps: u64,
}

/// Declarative description of a network: named nodes and bidirectional links.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

impl TopologySpec {
    /// A single switch with every host attached by an identical link.
    pub fn star(switch: &str, forwarding_latency_ns: u64, hosts: &[&str], link_latency_ns: u64) -> Self {
        let mut spec = TopologySpec::default();
        spec.add_switch(switch, forwarding_latency_ns);
        for h in hosts {
            spec.add_host(h);
            spec.add_link(h, switch, link_latency_ns);
        }
        spec
    }

    pub fn add_host(&mut self, name: &str) -> &mut Self {
        self.nodes.push(NodeSpec { name: name.to_string(), kind: NodeKind::Host, forwarding_latency_ns: 0 });
        self
    }

    pub fn add_switch(&mut self, name: &str, forwarding_latency_ns: u64) -> &mut Self {
        self.nodes.push(NodeSpec {
            name: name.to_string(),
            kind: NodeKind::Switch,
            forwarding_latency_ns,
        });
        self
    }

    pub fn add_link(&mut self, a: &str, b: &str, latency_ns: u64) -> &mut Self {
        self.links.push(LinkSpec { a: a.to_string(), b: b.to_string(), latency_ns, bandwidth_mbps: 0 });
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub endpoint_a: NodeId,
    pub endpoint_b: NodeId,
    pub latency: VirtualTime,
    pub bandwidth: Bandwidth,
}

#[derive(Debug, Clone)]
struct NodeEntry {
    name: String,
    kind: NodeKind,
    forwarding_latency: VirtualTime,
    /// (neighbour, link) pairs in link declaration order; the position is the port number.
    ports: Vec<(NodeId, LinkId)>,
}

/// A resolved path between two nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub links: Vec<LinkId>,
    /// Switches traversed strictly between source and destination.
    pub via: Vec<NodeId>,
    /// Sum of link and forwarding latencies; serialization is added per message.
    pub fixed_latency: VirtualTime,
    bandwidths: Vec<Bandwidth>,
}

impl Route {
    pub fn delay(&self, size_bytes: u32) -> VirtualTime {
        self.fixed_latency
            + self
                .bandwidths
                .iter()
                .map(|bw| bw.serialization_delay(size_bytes))
                .sum()
    }

    fn local() -> Self {
        Route { links: Vec::new(), via: Vec::new(), fixed_latency: VirtualTime::ZERO, bandwidths: Vec::new() }
    }
}

/// Immutable network topology with precomputed routes.
///
/// Routes are minimum-latency paths in which only switches forward; hosts are
/// always path endpoints. Ties are broken by hop count and then node id.
#[derive(Debug, Clone)]
pub struct Topology {
    nodes: Vec<NodeEntry>,
    by_name: HashMap<String, NodeId>,
    links: Vec<Link>,
    routes: Vec<Vec<Option<Route>>>,
}

impl Topology {
    pub fn build(spec: &TopologySpec) -> Result<Topology, SimError> {
        let mut nodes = Vec::with_capacity(spec.nodes.len());
        let mut by_name = HashMap::new();
        for (i, n) in spec.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            if by_name.insert(n.name.clone(), id).is_some() {
                return Err(SimError::DuplicateNode(n.name.clone()));
            }
            nodes.push(NodeEntry {
                name: n.name.clone(),
                kind: n.kind,
                forwarding_latency: match n.kind {
                    NodeKind::Switch => VirtualTime::from_nanos(n.forwarding_latency_ns),
                    NodeKind::Host => VirtualTime::ZERO,
                },
                ports: Vec::new(),
            });
        }

        let mut links = Vec::with_capacity(spec.links.len());
        for (i, l) in spec.links.iter().enumerate() {
            let lookup = |name: &str| {
                by_name.get(name).copied().ok_or_else(|| SimError::DanglingEndpoint {
                    link: i,
                    endpoint: name.to_string(),
                })
            };
            let a = lookup(&l.a)?;
            let b = lookup(&l.b)?;
            if a == b {
                return Err(SimError::SelfLoop(l.a.clone()));
            }
            let id = LinkId(i as u32);
            links.push(Link {
                endpoint_a: a,
                endpoint_b: b,
                latency: VirtualTime::from_nanos(l.latency_ns),
                bandwidth: Bandwidth::from_mbps(l.bandwidth_mbps),
            });
            nodes[a.index()].ports.push((b, id));
            nodes[b.index()].ports.push((a, id));
        }

        let mut topo = Topology { nodes, by_name, links, routes: Vec::new() };
        topo.routes = (0..topo.nodes.len()).map(|s| topo.shortest_paths(NodeId(s as u32))).collect();
        Ok(topo)
    }

    fn shortest_paths(&self, src: NodeId) -> Vec<Option<Route>> {
        let n = self.nodes.len();
        // (latency, hops, predecessor link)
        let mut best: Vec<Option<(VirtualTime, u32, Option<(NodeId, LinkId)>)>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        best[src.index()] = Some((VirtualTime::ZERO, 0, None));
        heap.push(Reverse((VirtualTime::ZERO, 0u32, src)));
        while let Some(Reverse((dist, hops, node))) = heap.pop() {
            match best[node.index()] {
                Some((d, h, _)) if (d, h) < (dist, hops) => continue,
                _ => {}
            }
            let entry = &self.nodes[node.index()];
            if node != src && entry.kind == NodeKind::Host {
                continue;
            }
            let forward = if node == src { VirtualTime::ZERO } else { entry.forwarding_latency };
            for &(next, link) in &entry.ports {
                let cand = (dist + forward + self.links[link.0 as usize].latency, hops + 1);
                let better = match best[next.index()] {
                    None => true,
                    Some((d, h, Some((prev, _)))) => {
                        cand < (d, h) || (cand == (d, h) && node < prev)
                    }
                    Some((_, _, None)) => false,
                };
                if better {
                    best[next.index()] = Some((cand.0, cand.1, Some((node, link))));
                    heap.push(Reverse((cand.0, cand.1, next)));
                }
            }
        }

        (0..n)
            .map(|d| {
                let dst = NodeId(d as u32);
                if dst == src {
                    return Some(Route::local());
                }
                let (fixed_latency, _, _) = best[d]?;
                let mut links = Vec::new();
                let mut via = Vec::new();
                let mut cur = dst;
                while let Some((_, _, Some((prev, link)))) = best[cur.index()] {
                    links.push(link);
                    if prev != src {
                        via.push(prev);
                    }
                    cur = prev;
                }
                links.reverse();
                via.reverse();
                let bandwidths = links
                    .iter()
                    .map(|l| self.links[l.0 as usize].bandwidth)
                    .filter(|bw| !bw.is_infinite())
                    .collect();
                Some(Route { links, via, fixed_latency, bandwidths })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn node(&self, name: &str) -> Result<NodeId, SimError> {
        self.by_name.get(name).copied().ok_or_else(|| SimError::UnknownNode(name.to_string()))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.index()].name
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        self.nodes[id.index()].kind
    }

    pub fn forwarding_latency(&self, id: NodeId) -> VirtualTime {
        self.nodes[id.index()].forwarding_latency
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    /// Port count of a node (one port per attached link).
    pub fn port_count(&self, id: NodeId) -> usize {
        self.nodes[id.index()].ports.len()
    }

    pub fn route(&self, src: NodeId, dst: NodeId) -> Result<&Route, SimError> {
        self.routes
            .get(src.index())
            .and_then(|row| row.get(dst.index()))
            .and_then(Option::as_ref)
            .ok_or(SimError::NoPath { src, dst })
    }

    /// One-way latency of a message of `size_bytes` between two nodes, excluding NIC terms.
    pub fn path_latency(&self, src: NodeId, dst: NodeId, size_bytes: u32) -> Result<VirtualTime, SimError> {
        Ok(self.route(src, dst)?.delay(size_bytes))
    }

    /// Fails if any pair of the named nodes is mutually unreachable.
    pub fn require_connected(&self, names: &[&str]) -> Result<(), SimError> {
        let ids = names.iter().map(|n| self.node(n)).collect::<Result<Vec<_>, _>>()?;
        for &a in &ids {
            for &b in &ids {
                if self.route(a, b).is_err() {
                    return Err(SimError::Disconnected(self.name(a).to_string(), self.name(b).to_string()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_host_to_host_latency() {
        let spec = TopologySpec::star("sw", 300, &["h0", "h1", "h2", "h3"], 43);
        let topo = Topology::build(&spec).unwrap();
        let h0 = topo.node("h0").unwrap();
        let h3 = topo.node("h3").unwrap();
        assert_eq!(topo.path_latency(h0, h3, 64).unwrap(), VirtualTime::from_nanos(386));
        let route = topo.route(h0, h3).unwrap();
        assert_eq!(route.via, vec![topo.node("sw").unwrap()]);
        assert_eq!(route.links.len(), 2);
    }

    #[test]
    fn host_to_switch_excludes_forwarding_latency() {
        let spec = TopologySpec::star("sw", 300, &["h0"], 43);
        let topo = Topology::build(&spec).unwrap();
        let lat = topo.path_latency(topo.node("h0").unwrap(), topo.node("sw").unwrap(), 0).unwrap();
        assert_eq!(lat, VirtualTime::from_nanos(43));
    }

    #[test]
    fn zero_latency_direct_link() {
        let mut spec = TopologySpec::default();
        spec.add_host("a").add_host("b").add_link("a", "b", 0);
        let topo = Topology::build(&spec).unwrap();
        let (a, b) = (topo.node("a").unwrap(), topo.node("b").unwrap());
        assert_eq!(topo.path_latency(a, b, 1500).unwrap(), VirtualTime::ZERO);
    }

    #[test]
    fn dangling_endpoint_is_rejected() {
        let mut spec = TopologySpec::default();
        spec.add_host("a").add_link("a", "n9", 10);
        match Topology::build(&spec) {
            Err(SimError::DanglingEndpoint { endpoint, .. }) => assert_eq!(endpoint, "n9"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_node_is_rejected() {
        let mut spec = TopologySpec::default();
        spec.add_host("a").add_host("a");
        assert!(matches!(Topology::build(&spec), Err(SimError::DuplicateNode(_))));
    }

    #[test]
    fn hosts_do_not_forward() {
        // a - b - c with b a host: no path a->c
        let mut spec = TopologySpec::default();
        spec.add_host("a").add_host("b").add_host("c");
        spec.add_link("a", "b", 1).add_link("b", "c", 1);
        let topo = Topology::build(&spec).unwrap();
        let (a, c) = (topo.node("a").unwrap(), topo.node("c").unwrap());
        assert!(matches!(topo.route(a, c), Err(SimError::NoPath { .. })));
        assert!(matches!(topo.require_connected(&["a", "c"]), Err(SimError::Disconnected(..))));
    }

    #[test]
    fn multi_hop_picks_lowest_latency() {
        let mut spec = TopologySpec::default();
        spec.add_host("a").add_host("b");
        spec.add_switch("s1", 10).add_switch("s2", 10).add_switch("s3", 500);
        spec.add_link("a", "s1", 5).add_link("s1", "s2", 5).add_link("s2", "b", 5);
        spec.add_link("a", "s3", 1).add_link("s3", "b", 1);
        let topo = Topology::build(&spec).unwrap();
        let (a, b) = (topo.node("a").unwrap(), topo.node("b").unwrap());
        // 5+10+5+10+5 = 35 < 1+500+1
        assert_eq!(topo.path_latency(a, b, 0).unwrap(), VirtualTime::from_nanos(35));
    }

    #[test]
    fn serialization_added_per_finite_link() {
        let mut spec = TopologySpec::default();
        spec.add_host("a").add_host("b");
        spec.links.push(LinkSpec { a: "a".into(), b: "b".into(), latency_ns: 0, bandwidth_mbps: 100 });
        let topo = Topology::build(&spec).unwrap();
        let (a, b) = (topo.node("a").unwrap(), topo.node("b").unwrap());
        assert_eq!(topo.path_latency(a, b, 100).unwrap(), VirtualTime::from_nanos(8000));
    }
}
