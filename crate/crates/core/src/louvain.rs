//! Louvain modularity optimization over the interaction graph.
//!
//! Edge weights are the pair weights `W({i,j})`, so `m` equals the number of
//! edges in the multigraph. Nodes are visited in ascending user id and ties
//! on the best gain keep the node where it is, else pick the lowest
//! community id; the result is fully deterministic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::UserId;
use crate::graph::InteractionGraph;

pub type CommunityId = u32;
pub type Assignment = BTreeMap<UserId, CommunityId>;

#[derive(Debug, Error)]
pub enum LouvainError {
    #[error("user {0} has no community assignment")]
    Unassigned(UserId),
    #[error("user {0} is not a node of the graph")]
    UnknownNode(UserId),
    #[error("community {0} does not exist")]
    UnknownCommunity(CommunityId),
    #[error("invalid Louvain configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("partition file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LouvainConfig {
    /// Smallest modularity gain accepted as an improvement.
    pub epsilon: f64,
    /// Cap on the number of levels (local-move phases followed by aggregation).
    pub max_passes: usize,
    /// Independent runs with different fixed visit orders; the best is kept.
    pub restarts: usize,
    /// Graphs with at most this many nodes get an extra polishing stage after
    /// each run: Kernighan-Lin sweeps, plus retries seeded from merged and
    /// spectrally bisected communities. The stage is quadratic or worse in the
    /// node count, hence the cap.
    pub refine_node_limit: usize,
}

impl Default for LouvainConfig {
    fn default() -> Self {
        LouvainConfig { epsilon: 1e-12, max_passes: 32, restarts: 8, refine_node_limit: 128 }
    }
}

impl LouvainConfig {
    pub fn validate(&self) -> Result<(), LouvainError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(LouvainError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_passes == 0 {
            return Err(LouvainError::Config("max_passes must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(LouvainError::Config("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    assignment: Assignment,
    communities: BTreeMap<CommunityId, BTreeSet<UserId>>,
    modularity_q: f64,
}

impl Partition {
    /// Wraps an assignment covering every node of `graph`, computing its modularity.
    pub fn from_assignment(graph: &InteractionGraph, assignment: Assignment) -> Result<Self, LouvainError> {
        let q = modularity(graph, &assignment)?;
        Ok(Self::with_modularity(assignment, q))
    }

    fn with_modularity(assignment: Assignment, modularity_q: f64) -> Self {
        let mut communities: BTreeMap<CommunityId, BTreeSet<UserId>> = BTreeMap::new();
        for (&u, &c) in &assignment {
            communities.entry(c).or_default().insert(u);
        }
        Partition { assignment, communities, modularity_q }
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn communities(&self) -> &BTreeMap<CommunityId, BTreeSet<UserId>> {
        &self.communities
    }

    pub fn community_of(&self, user: UserId) -> Option<CommunityId> {
        self.assignment.get(&user).copied()
    }

    pub fn modularity_q(&self) -> f64 {
        self.modularity_q
    }

    pub fn len(&self) -> usize {
        self.communities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.communities.is_empty()
    }

    /// `# modularity_q=<Q>` then `node_id,community_id` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), LouvainError> {
        writeln!(out, "# modularity_q={}", self.modularity_q)?;
        writeln!(out, "node_id,community_id")?;
        for (u, c) in &self.assignment {
            writeln!(out, "{u},{c}")?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`Partition::write_csv`]. The stored modularity
    /// is taken as-is; use [`Partition::from_assignment`] to recompute it.
    pub fn read_csv<R: BufRead>(source: R) -> Result<Self, LouvainError> {
        let mut assignment = Assignment::new();
        let mut q = None;
        let mut saw_header = false;
        for (idx, line) in source.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let bad = |message: String| LouvainError::Parse { line: idx + 1, message };
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("modularity_q=") {
                    q = Some(v.trim().parse::<f64>().map_err(|e| bad(format!("bad modularity_q: {e}")))?);
                }
                continue;
            }
            if !saw_header {
                if line != "node_id,community_id" {
                    return Err(bad(format!("expected header `node_id,community_id`, found `{line}`")));
                }
                saw_header = true;
                continue;
            }
            let (u, c) = line.split_once(',').ok_or_else(|| bad("expected two fields".into()))?;
            let u: UserId = u.trim().parse().map_err(|_| bad(format!("bad node_id `{u}`")))?;
            let c: CommunityId = c.trim().parse().map_err(|_| bad(format!("bad community_id `{c}`")))?;
            if assignment.insert(u, c).is_some() {
                return Err(bad(format!("node {u} assigned twice")));
            }
        }
        let q = q.ok_or(LouvainError::Parse { line: 1, message: "missing `# modularity_q=` line".into() })?;
        Ok(Self::with_modularity(assignment, q))
    }
}

/// Newman-Girvan modularity with `A_ij = W({i,j})`. A graph without edges has
/// modularity 0.
pub fn modularity(graph: &InteractionGraph, assignment: &Assignment) -> Result<f64, LouvainError> {
    let community = dense_assignment(graph, assignment)?;
    let m = graph.edge_count() as f64;
    if m == 0.0 {
        return Ok(0.0);
    }
    let mut internal: HashMap<CommunityId, f64> = HashMap::new();
    let mut total: HashMap<CommunityId, f64> = HashMap::new();
    for (a, b, w) in graph.weighted_pairs() {
        let w = w as f64;
        *total.entry(community[a]).or_default() += w;
        *total.entry(community[b]).or_default() += w;
        if community[a] == community[b] {
            *internal.entry(community[a]).or_default() += 2.0 * w;
        }
    }
    let two_m = 2.0 * m;
    let mut keys: Vec<_> = total.keys().copied().collect();
    keys.sort_unstable();
    Ok(keys
        .into_iter()
        .map(|c| {
            let tot = total[&c] / two_m;
            internal.get(&c).copied().unwrap_or(0.0) / two_m - tot * tot
        })
        .sum())
}

fn dense_assignment(graph: &InteractionGraph, assignment: &Assignment) -> Result<Vec<CommunityId>, LouvainError> {
    graph
        .nodes()
        .iter()
        .map(|u| assignment.get(u).copied().ok_or(LouvainError::Unassigned(*u)))
        .collect()
}

fn adjacency(graph: &InteractionGraph) -> Vec<Vec<(usize, f64)>> {
    let mut adj = vec![Vec::new(); graph.node_count()];
    for (a, b, w) in graph.weighted_pairs() {
        adj[a].push((b, w as f64));
        adj[b].push((a, w as f64));
    }
    adj
}

/// Where a single-node move sends the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveTarget {
    Community(CommunityId),
    /// A new community holding only the moved node.
    Fresh,
}

/// Incremental bookkeeping for single-node moves on a fixed graph.
#[derive(Debug, Clone)]
pub struct ModularityState<'g> {
    graph: &'g InteractionGraph,
    adj: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
    m: f64,
    community: Vec<CommunityId>,
    total: HashMap<CommunityId, f64>,
    size: HashMap<CommunityId, usize>,
}

impl<'g> ModularityState<'g> {
    pub fn new(graph: &'g InteractionGraph, assignment: &Assignment) -> Result<Self, LouvainError> {
        let community = dense_assignment(graph, assignment)?;
        let adj = adjacency(graph);
        let degree: Vec<f64> = adj.iter().map(|n| n.iter().map(|(_, w)| w).sum()).collect();
        let mut total = HashMap::new();
        let mut size = HashMap::new();
        for (i, &c) in community.iter().enumerate() {
            *total.entry(c).or_insert(0.0) += degree[i];
            *size.entry(c).or_insert(0) += 1;
        }
        Ok(ModularityState { graph, adj, degree, m: graph.edge_count() as f64, community, total, size })
    }

    fn node(&self, user: UserId) -> Result<usize, LouvainError> {
        self.graph.node_index(user).ok_or(LouvainError::UnknownNode(user))
    }

    /// Change in modularity if `user` leaves its community for `target`.
    pub fn delta_modularity(&self, user: UserId, target: MoveTarget) -> Result<f64, LouvainError> {
        let i = self.node(user)?;
        let from = self.community[i];
        let to = match target {
            MoveTarget::Community(c) => {
                if !self.size.get(&c).is_some_and(|&s| s > 0) {
                    return Err(LouvainError::UnknownCommunity(c));
                }
                Some(c)
            }
            MoveTarget::Fresh => None,
        };
        if to == Some(from) || self.m == 0.0 {
            return Ok(0.0);
        }
        let mut k_from = 0.0;
        let mut k_to = 0.0;
        for &(j, w) in &self.adj[i] {
            let c = self.community[j];
            if c == from {
                k_from += w;
            } else if Some(c) == to {
                k_to += w;
            }
        }
        let k_i = self.degree[i];
        let tot_from = self.total[&from] - k_i;
        let tot_to = to.map_or(0.0, |c| self.total[&c]);
        let m = self.m;
        Ok((k_to - k_from) / m - k_i * (tot_to - tot_from) / (2.0 * m * m))
    }

    /// Applies a move and returns the community the node ended up in.
    pub fn apply_move(&mut self, user: UserId, target: MoveTarget) -> Result<CommunityId, LouvainError> {
        let i = self.node(user)?;
        let to = match target {
            MoveTarget::Community(c) => {
                if !self.size.get(&c).is_some_and(|&s| s > 0) {
                    return Err(LouvainError::UnknownCommunity(c));
                }
                c
            }
            MoveTarget::Fresh => {
                self.size.iter().filter(|(_, &s)| s > 0).map(|(&c, _)| c).max().map_or(0, |c| c + 1)
            }
        };
        let from = self.community[i];
        if from == to {
            return Ok(to);
        }
        let k_i = self.degree[i];
        *self.total.get_mut(&from).expect("current community is tracked") -= k_i;
        *self.size.get_mut(&from).expect("current community is tracked") -= 1;
        *self.total.entry(to).or_insert(0.0) += k_i;
        *self.size.entry(to).or_insert(0) += 1;
        self.community[i] = to;
        Ok(to)
    }

    pub fn assignment(&self) -> Assignment {
        self.graph.nodes().iter().copied().zip(self.community.iter().copied()).collect()
    }

    /// Communities adjacent to `user`, excluding its own.
    pub fn neighbor_communities(&self, user: UserId) -> Result<BTreeSet<CommunityId>, LouvainError> {
        let i = self.node(user)?;
        let own = self.community[i];
        Ok(self.adj[i].iter().map(|&(j, _)| self.community[j]).filter(|&c| c != own).collect())
    }
}

/// A weighted graph at one aggregation level. `self_loop[i]` counts the
/// internal weight of super-node `i` twice, so `degree[i] = self_loop[i] + Σ adj`.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    self_loop: Vec<f64>,
    degree: Vec<f64>,
}

impl Level {
    fn len(&self) -> usize {
        self.adj.len()
    }

    fn aggregate(&self, community: &[usize], count: usize) -> Level {
        let mut self_loop = vec![0.0; count];
        let mut degree = vec![0.0; count];
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); count];
        for i in 0..self.len() {
            let ci = community[i];
            self_loop[ci] += self.self_loop[i];
            degree[ci] += self.degree[i];
            for &(j, w) in &self.adj[i] {
                let cj = community[j];
                if cj == ci {
                    self_loop[ci] += w;
                } else {
                    *maps[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        let adj = maps.into_iter().map(|m| m.into_iter().collect()).collect();
        Level { adj, self_loop, degree }
    }
}

/// Repeated sweeps of single-node moves until no move gains more than
/// `epsilon`. `community` is updated in place; returns whether anything moved.
fn local_moves(level: &Level, m: f64, epsilon: f64, order: VisitOrder, community: &mut [usize]) -> bool {
    let n = level.len();
    let mut total = vec![0.0; n];
    let mut size = vec![0usize; n];
    for i in 0..n {
        total[community[i]] += level.degree[i];
        size[community[i]] += 1;
    }
    let mut empty: BTreeSet<usize> = (0..n).filter(|&c| size[c] == 0).collect();
    let mut link = vec![0.0; n];
    let mut marked = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    let two_m = 2.0 * m;
    let threshold = epsilon * m;
    let mut any_move = false;

    let visit = order.sequence(n);
    loop {
        let mut moved = false;
        for &i in &visit {
            let own = community[i];
            let k_i = level.degree[i];
            touched.clear();
            touched.push(own);
            marked[own] = true;
            for &(j, w) in &level.adj[i] {
                let c = community[j];
                if !marked[c] {
                    marked[c] = true;
                    touched.push(c);
                }
                link[c] += w;
            }
            total[own] -= k_i;
            size[own] -= 1;

            // m * gain(c) = k_i,c - tot_c * k_i / 2m; ΔQ(own -> c) = (gain(c) - gain(own)) / m.
            let gain = |c: usize| link[c] - total[c] * k_i / two_m;
            let stay = gain(own);
            let mut best = own;
            let mut best_gain = f64::NEG_INFINITY;
            touched[1..].sort_unstable();
            for &c in &touched[1..] {
                let g = gain(c);
                if g > best_gain {
                    best_gain = g;
                    best = c;
                }
            }
            let mut target = own;
            if best != own && best_gain - stay > threshold {
                target = best;
            } else if size[own] > 0 && -stay > threshold {
                // Leaving for an empty community gains -stay, which beats every neighbor here.
                if let Some(&fresh) = empty.iter().next() {
                    target = fresh;
                }
            }
            if target != own {
                moved = true;
                if size[own] == 0 {
                    empty.insert(own);
                }
                empty.remove(&target);
            }
            community[i] = target;
            total[target] += k_i;
            size[target] += 1;
            for &c in &touched {
                link[c] = 0.0;
                marked[c] = false;
            }
        }
        if !moved {
            break;
        }
        any_move = true;
    }
    any_move
}

/// Renumbers communities by first appearance; returns the count.
fn renumber(community: &mut [usize]) -> usize {
    let mut map: HashMap<usize, usize> = HashMap::new();
    for c in community.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

/// Order in which one local-move sweep visits nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VisitOrder {
    Ascending,
    Descending,
    Shuffled(u64),
}

impl VisitOrder {
    /// Run `k` of a restart sequence: ascending, descending, then fixed seeds.
    fn for_run(k: usize) -> Self {
        match k {
            0 => VisitOrder::Ascending,
            1 => VisitOrder::Descending,
            k => VisitOrder::Shuffled(k as u64),
        }
    }

    fn sequence(self, n: usize) -> Vec<usize> {
        match self {
            VisitOrder::Ascending => (0..n).collect(),
            VisitOrder::Descending => (0..n).rev().collect(),
            VisitOrder::Shuffled(seed) => {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut v: Vec<usize> = (0..n).collect();
                v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                v
            }
        }
    }
}

/// One multilevel run. Each round runs local moves on the original nodes
/// (starting from the current partition), then aggregates and keeps
/// optimizing on super-nodes. It stops once a round changes nothing, so the
/// result is locally optimal for single-node moves unless `max_passes`
/// levels run out first.
fn multilevel(base: &Level, m: f64, config: &LouvainConfig, order: VisitOrder, start: Vec<usize>) -> Vec<usize> {
    let mut membership = start;
    let mut passes = 0;
    while passes < config.max_passes {
        passes += 1;
        let mut changed = local_moves(base, m, config.epsilon, order, &mut membership);
        let mut count = renumber(&mut membership);
        let mut level = base.aggregate(&membership, count);
        while passes < config.max_passes {
            let mut upper: Vec<usize> = (0..count).collect();
            passes += 1;
            if !local_moves(&level, m, config.epsilon, order, &mut upper) {
                break;
            }
            changed = true;
            let upper_count = renumber(&mut upper);
            for c in membership.iter_mut() {
                *c = upper[*c];
            }
            level = level.aggregate(&upper, upper_count);
            count = upper_count;
        }
        if !changed {
            break;
        }
    }
    log::debug!("louvain run ({order:?}) finished after {passes} level passes");
    renumber(&mut membership);
    membership
}

/// One Kernighan-Lin style sweep over single-node moves.
///
/// Every node moves exactly once, each step taking the best available move
/// among nodes not yet moved even when it lowers modularity. The partition is
/// then rolled back to the best point seen along the way. Returns the gain
/// kept (zero when the sweep found nothing better).
fn fine_tune(base: &Level, m: f64, epsilon: f64, community: &mut [usize]) -> f64 {
    let n = base.len();
    let mut total = vec![0.0; n];
    let mut size = vec![0usize; n];
    for i in 0..n {
        total[community[i]] += base.degree[i];
        size[community[i]] += 1;
    }
    let two_m = 2.0 * m;
    let mut moved = vec![false; n];
    let mut link: HashMap<usize, f64> = HashMap::new();
    let mut history: Vec<(usize, usize)> = Vec::with_capacity(n);
    let (mut running, mut best, mut best_len) = (0.0, 0.0, 0);

    for _ in 0..n {
        // (ΔQ, node, target); None target means a fresh community.
        let mut step: Option<(f64, usize, Option<usize>)> = None;
        for i in (0..n).filter(|&i| !moved[i]) {
            let own = community[i];
            let k_i = base.degree[i];
            link.clear();
            for &(j, w) in &base.adj[i] {
                *link.entry(community[j]).or_insert(0.0) += w;
            }
            let own_link = link.get(&own).copied().unwrap_or(0.0);
            let own_rest = total[own] - k_i;
            let delta = |l: f64, tot: f64| ((l - own_link) - k_i * (tot - own_rest) / two_m) / m;
            let mut targets: Vec<usize> = link.keys().copied().filter(|&c| c != own).collect();
            targets.sort_unstable();
            let mut consider = |dq: f64, target: Option<usize>| {
                if step.is_none_or(|(best_dq, _, _)| dq > best_dq) {
                    step = Some((dq, i, target));
                }
            };
            for c in targets {
                consider(delta(link[&c], total[c]), Some(c));
            }
            if size[own] > 1 {
                consider(delta(0.0, 0.0), None);
            }
        }
        let Some((dq, i, target)) = step else { break };
        let from = community[i];
        let to = target.unwrap_or_else(|| (0..n).find(|&c| size[c] == 0).expect("a node left a community"));
        community[i] = to;
        total[from] -= base.degree[i];
        size[from] -= 1;
        total[to] += base.degree[i];
        size[to] += 1;
        moved[i] = true;
        history.push((i, from));
        running += dq;
        if running > best + epsilon {
            best = running;
            best_len = history.len();
        }
    }
    for &(i, from) in history[best_len..].iter().rev() {
        community[i] = from;
    }
    best
}

/// Alternates fine-tuning sweeps with multilevel rounds until a sweep stops
/// paying off.
fn refine(base: &Level, m: f64, config: &LouvainConfig, membership: &mut Vec<usize>) {
    for _ in 0..config.max_passes {
        if fine_tune(base, m, config.epsilon, membership) <= config.epsilon {
            break;
        }
        renumber(membership);
        *membership = multilevel(base, m, config, VisitOrder::Ascending, std::mem::take(membership));
    }
}

/// Partitions obtained by fusing two adjacent communities of `membership`,
/// plus the single-community partition.
fn merged_variants(base: &Level, membership: &[usize]) -> Vec<Vec<usize>> {
    let mut adjacent = BTreeSet::new();
    for (i, row) in base.adj.iter().enumerate() {
        for &(j, _) in row {
            let (a, b) = (membership[i], membership[j]);
            if a < b {
                adjacent.insert((a, b));
            }
        }
    }
    let mut out = vec![vec![0; membership.len()]];
    out.extend(
        adjacent
            .into_iter()
            .map(|(a, b)| membership.iter().map(|&c| if c == b { a } else { c }).collect()),
    );
    out
}

/// Partitions obtained by bisecting one community along the sign of the
/// leading eigenvector of its generalized modularity matrix.
fn split_variants(base: &Level, m: f64, membership: &[usize]) -> Vec<Vec<usize>> {
    const ITERATIONS: usize = 500;
    let n = membership.len();
    let count = membership.iter().max().map_or(0, |&c| c + 1);
    let two_m = 2.0 * m;
    let mut out = Vec::new();
    for g in 0..count {
        let members: Vec<usize> = (0..n).filter(|&i| membership[i] == g).collect();
        if members.len() < 2 {
            continue;
        }
        let mut local = vec![usize::MAX; n];
        for (pos, &i) in members.iter().enumerate() {
            local[i] = pos;
        }
        let k_g: f64 = members.iter().map(|&i| base.degree[i]).sum();
        let inner: Vec<f64> = members
            .iter()
            .map(|&i| base.adj[i].iter().filter(|&&(j, _)| membership[j] == g).map(|&(_, w)| w).sum())
            .collect();
        let diagonal: Vec<f64> =
            members.iter().zip(&inner).map(|(&i, &kin)| kin - base.degree[i] * k_g / two_m).collect();
        // Shift so the spectrum is non-negative and power iteration finds the
        // algebraically largest eigenvalue.
        let shift = members
            .iter()
            .zip(&inner)
            .zip(&diagonal)
            .map(|((&i, &kin), &d)| kin + base.degree[i] * k_g / two_m + d.abs())
            .fold(0.0, f64::max);
        let mut x: Vec<f64> = (0..members.len()).map(|p| 1.0 + ((p * 7919) % 13) as f64 / 13.0).collect();
        let mut y = vec![0.0; members.len()];
        for _ in 0..ITERATIONS {
            let kx: f64 = members.iter().zip(&x).map(|(&i, &v)| base.degree[i] * v).sum();
            for (p, &i) in members.iter().enumerate() {
                let ax: f64 =
                    base.adj[i].iter().filter(|&&(j, _)| membership[j] == g).map(|&(j, w)| w * x[local[j]]).sum();
                y[p] = ax - base.degree[i] * kx / two_m - diagonal[p] * x[p] + shift * x[p];
            }
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            for (xp, yp) in x.iter_mut().zip(&y) {
                *xp = yp / norm;
            }
        }
        if x.iter().all(|&v| v > 0.0) || x.iter().all(|&v| v <= 0.0) {
            continue;
        }
        let mut candidate = membership.to_vec();
        for (p, &i) in members.iter().enumerate() {
            if x[p] > 0.0 {
                candidate[i] = count;
            }
        }
        out.push(candidate);
    }
    out
}

fn level_modularity(base: &Level, m: f64, membership: &[usize]) -> f64 {
    let count = membership.iter().max().map_or(0, |c| c + 1);
    let mut internal = vec![0.0; count];
    let mut total = vec![0.0; count];
    for i in 0..base.len() {
        let c = membership[i];
        total[c] += base.degree[i];
        for &(j, w) in &base.adj[i] {
            if membership[j] == c {
                internal[c] += w;
            }
        }
    }
    let two_m = 2.0 * m;
    internal.iter().zip(&total).map(|(i, t)| i / two_m - (t / two_m) * (t / two_m)).sum()
}

/// Partitions the graph by Louvain modularity optimization.
///
/// The first run visits nodes in ascending id order. When `restarts > 1`,
/// further runs use descending order and then fixed-seed shuffles; the
/// partition with the highest modularity wins, earlier runs winning ties.
/// Everything is deterministic for a given graph and config.
pub fn louvain(graph: &InteractionGraph, config: &LouvainConfig) -> Result<Partition, LouvainError> {
    config.validate()?;
    let n = graph.node_count();
    let nodes = graph.nodes();
    if graph.edge_count() == 0 {
        if n > 0 {
            log::warn!("graph has no edges; every node stays in its own community");
        }
        let assignment = nodes.iter().enumerate().map(|(i, &u)| (u, i as CommunityId)).collect();
        return Ok(Partition::with_modularity(assignment, 0.0));
    }
    let m = graph.edge_count() as f64;
    let adj = adjacency(graph);
    let degree = adj.iter().map(|a| a.iter().map(|(_, w)| w).sum()).collect();
    let base = Level { adj, self_loop: vec![0.0; n], degree };

    let mut best: Option<(f64, Vec<usize>)> = None;
    for run in 0..config.restarts {
        let mut membership = multilevel(&base, m, config, VisitOrder::for_run(run), (0..n).collect());
        if n <= config.refine_node_limit {
            refine(&base, m, config, &mut membership);
            let mut variants = merged_variants(&base, &membership);
            variants.extend(split_variants(&base, m, &membership));
            variants.extend(split_variants(&base, m, &vec![0; n]));
            for mut candidate in variants {
                refine(&base, m, config, &mut candidate);
                if level_modularity(&base, m, &candidate) > level_modularity(&base, m, &membership) + config.epsilon {
                    membership = candidate;
                }
            }
        }
        let q = level_modularity(&base, m, &membership);
        if best.as_ref().is_none_or(|(best_q, _)| q > best_q + config.epsilon) {
            best = Some((q, membership));
        }
    }
    let (_, membership) = best.expect("restarts >= 1");
    let assignment: Assignment =
        nodes.iter().zip(&membership).map(|(&u, &c)| (u, c as CommunityId)).collect();
    Partition::from_assignment(graph, assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeAttributes, GraphEdge};
    use chrono::TimeDelta;

    fn graph(pairs: &[(UserId, UserId)]) -> InteractionGraph {
        let edges = pairs
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| GraphEdge {
                asker: a,
                answerer: b,
                attrs: EdgeAttributes { e_key: format!("{k}/{k}"), e_accepted: false, e_time: TimeDelta::zero() },
            })
            .collect();
        InteractionGraph::from_edges([], edges).unwrap()
    }

    fn two_triangles() -> InteractionGraph {
        graph(&[(1, 2), (2, 3), (3, 1), (4, 5), (5, 6), (6, 4)])
    }

    fn assign(pairs: &[(UserId, CommunityId)]) -> Assignment {
        pairs.iter().copied().collect()
    }

    #[test]
    fn modularity_hand_values() {
        let g = graph(&[(1, 2)]);
        assert_eq!(modularity(&g, &assign(&[(1, 0), (2, 0)])).unwrap(), 0.0);
        assert!((modularity(&g, &assign(&[(1, 0), (2, 1)])).unwrap() + 0.5).abs() < 1e-9);
        let t = two_triangles();
        let split = assign(&[(1, 0), (2, 0), (3, 0), (4, 1), (5, 1), (6, 1)]);
        assert!((modularity(&t, &split).unwrap() - 0.5).abs() < 1e-9);
        assert!(matches!(modularity(&g, &assign(&[(1, 0)])), Err(LouvainError::Unassigned(2))));
    }

    #[test]
    fn delta_hand_values() {
        let g = graph(&[(1, 2)]);
        let state = ModularityState::new(&g, &assign(&[(1, 0), (2, 1)])).unwrap();
        assert!((state.delta_modularity(2, MoveTarget::Community(0)).unwrap() - 0.5).abs() < 1e-9);
        assert_eq!(state.delta_modularity(2, MoveTarget::Community(1)).unwrap(), 0.0);
        assert!(matches!(state.delta_modularity(9, MoveTarget::Fresh), Err(LouvainError::UnknownNode(9))));
        assert!(matches!(
            state.delta_modularity(1, MoveTarget::Community(7)),
            Err(LouvainError::UnknownCommunity(7))
        ));
    }

    #[test]
    fn two_triangles_are_recovered() {
        let p = louvain(&two_triangles(), &LouvainConfig::default()).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.communities()[&0], [1, 2, 3].into());
        assert_eq!(p.communities()[&1], [4, 5, 6].into());
        assert!((p.modularity_q() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn single_edge_merges() {
        let p = louvain(&graph(&[(1, 2)]), &LouvainConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.modularity_q(), 0.0);
    }

    #[test]
    fn edgeless_graph_stays_singleton() {
        let g = InteractionGraph::from_edges([1, 2, 3], vec![]).unwrap();
        let p = louvain(&g, &LouvainConfig::default()).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.modularity_q(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LouvainConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(LouvainConfig { max_passes: 0, ..Default::default() }.validate().is_err());
        assert!(LouvainConfig { restarts: 0, ..Default::default() }.validate().is_err());
        assert!(LouvainConfig::default().validate().is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let p = louvain(&two_triangles(), &LouvainConfig::default()).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# modularity_q=0.5\nnode_id,community_id\n1,0\n"), "{text}");
        assert_eq!(Partition::read_csv(buf.as_slice()).unwrap(), p);
    }
}
