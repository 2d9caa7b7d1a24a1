//! Hierarchical navigable small-world graph over unit vectors.
//!
//! Removal is by tombstone: deleted nodes keep routing searches but are never
//! reported. The owning index rebuilds the graph once tombstones outnumber
//! live nodes.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 keeps twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            // Sized for recall@5 >= 0.99 on unstructured 256-d unit vectors,
            // the hardest case the index is expected to see.
            m: 32,
            ef_construction: 400,
            ef_search: 400,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    sim: f32,
    node: u32,
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.node.cmp(&self.node))
    }
}

#[derive(Debug, Clone)]
struct Node {
    key: u64,
    vector: Vec<f32>,
    links: Vec<Vec<u32>>,
    deleted: bool,
}

#[derive(Debug, Clone)]
pub struct Hnsw {
    params: HnswParams,
    level_mult: f64,
    nodes: Vec<Node>,
    entry: Option<u32>,
    max_level: usize,
    rng: ChaCha8Rng,
    live: usize,
    positions: HashMap<u64, u32>,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Hnsw {
    pub fn new(params: HnswParams) -> Self {
        let level_mult = 1.0 / (params.m.max(2) as f64).ln();
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        Hnsw {
            params,
            level_mult,
            nodes: Vec::new(),
            entry: None,
            max_level: 0,
            rng,
            live: 0,
            positions: HashMap::new(),
        }
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn live_len(&self) -> usize {
        self.live
    }

    pub fn tombstones(&self) -> usize {
        self.nodes.len() - self.live
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn random_level(&mut self) -> usize {
        let u: f64 = self.rng.random::<f64>();
        // 1 - u is in (0, 1], so the log is finite
        ((-(1.0 - u).ln()) * self.level_mult).floor() as usize
    }

    fn sim(&self, query: &[f32], node: u32) -> f32 {
        dot(query, &self.nodes[node as usize].vector)
    }

    fn greedy(&self, query: &[f32], mut current: u32, level: usize) -> u32 {
        let mut best = self.sim(query, current);
        loop {
            let mut moved = false;
            for &n in &self.nodes[current as usize].links[level] {
                let s = self.sim(query, n);
                if s > best {
                    best = s;
                    current = n;
                    moved = true;
                }
            }
            if !moved {
                return current;
            }
        }
    }

    /// Best-first beam search on one layer. Returns up to `ef` nodes sorted by
    /// descending similarity.
    fn search_layer(&self, query: &[f32], entry: u32, ef: usize, level: usize) -> Vec<Scored> {
        let mut visited = vec![false; self.nodes.len()];
        visited[entry as usize] = true;
        let first = Scored {
            sim: self.sim(query, entry),
            node: entry,
        };
        let mut frontier = BinaryHeap::from([first]);
        let mut best: BinaryHeap<Reverse<Scored>> = BinaryHeap::from([Reverse(first)]);
        while let Some(cand) = frontier.pop() {
            let worst = best.peek().map(|r| r.0.sim).unwrap_or(f32::NEG_INFINITY);
            if cand.sim < worst && best.len() >= ef {
                break;
            }
            for &n in &self.nodes[cand.node as usize].links[level] {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let s = Scored {
                    sim: self.sim(query, n),
                    node: n,
                };
                let worst = best.peek().map(|r| r.0.sim).unwrap_or(f32::NEG_INFINITY);
                if best.len() < ef || s.sim > worst {
                    frontier.push(s);
                    best.push(Reverse(s));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = best.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the new
    /// node than to every neighbour already kept; fill remaining slots with
    /// the closest pruned candidates.
    fn select_neighbors(&self, candidates: &[Scored], max: usize) -> Vec<u32> {
        let mut kept: Vec<Scored> = Vec::with_capacity(max);
        let mut pruned = Vec::new();
        for &c in candidates {
            if kept.len() >= max {
                break;
            }
            let cv = &self.nodes[c.node as usize].vector;
            let dominated = kept
                .iter()
                .any(|k| dot(cv, &self.nodes[k.node as usize].vector) > c.sim);
            if dominated {
                pruned.push(c);
            } else {
                kept.push(c);
            }
        }
        for c in pruned {
            if kept.len() >= max {
                break;
            }
            kept.push(c);
        }
        kept.into_iter().map(|s| s.node).collect()
    }

    pub fn insert(&mut self, key: u64, vector: Vec<f32>) {
        let level = self.random_level();
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            key,
            vector,
            links: vec![Vec::new(); level + 1],
            deleted: false,
        });
        self.positions.insert(key, id);
        self.live += 1;
        let Some(mut entry) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return;
        };
        let query = self.nodes[id as usize].vector.clone();
        for l in (level + 1..=self.max_level).rev() {
            entry = self.greedy(&query, entry, l);
        }
        for l in (0..=level.min(self.max_level)).rev() {
            let candidates = self.search_layer(&query, entry, self.params.ef_construction, l);
            let max = self.max_links(l);
            let neighbors = self.select_neighbors(&candidates, self.params.m.min(max));
            self.nodes[id as usize].links[l] = neighbors.clone();
            for n in neighbors {
                self.nodes[n as usize].links[l].push(id);
                if self.nodes[n as usize].links[l].len() > max {
                    self.shrink(n, l, max);
                }
            }
            entry = candidates[0].node;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(id);
        }
    }

    fn shrink(&mut self, node: u32, level: usize, max: usize) {
        let v = self.nodes[node as usize].vector.clone();
        let mut scored: Vec<Scored> = self.nodes[node as usize].links[level]
            .iter()
            .map(|&n| Scored {
                sim: self.sim(&v, n),
                node: n,
            })
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        self.nodes[node as usize].links[level] = self.select_neighbors(&scored, max);
    }

    /// Marks the node carrying `key` deleted. Returns false if absent.
    pub fn remove(&mut self, key: u64) -> bool {
        match self.positions.remove(&key) {
            Some(pos) => {
                self.nodes[pos as usize].deleted = true;
                self.live -= 1;
                true
            }
            None => false,
        }
    }

    /// Up to `ef` live `(key, approximate similarity)` pairs, best first.
    pub fn search(&self, query: &[f32], ef: usize) -> Vec<(u64, f32)> {
        let Some(mut entry) = self.entry else {
            return Vec::new();
        };
        for l in (1..=self.max_level).rev() {
            entry = self.greedy(query, entry, l);
        }
        let ef = ef.max(self.params.ef_search);
        self.search_layer(query, entry, ef, 0)
            .into_iter()
            .filter(|s| !self.nodes[s.node as usize].deleted)
            .map(|s| (self.nodes[s.node as usize].key, s.sim))
            .collect()
    }
}
