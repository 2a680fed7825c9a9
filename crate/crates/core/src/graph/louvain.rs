use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Partition, SignedGraph};
use crate::error::{Error, Result};

pub const DEFAULT_RESTARTS: usize = 100;

const EPS: f64 = 1e-12;

/// One level of the aggregation hierarchy. Weights are split by sign and
/// stored as magnitudes; self-loops hold weight internal to a super-node.
struct Level {
    adj: Vec<Vec<(usize, f64, f64)>>,
    self_pos: Vec<f64>,
    self_neg: Vec<f64>,
    k_pos: Vec<f64>,
    k_neg: Vec<f64>,
}

impl Level {
    fn from_graph(g: &SignedGraph) -> Level {
        let n = g.n_nodes();
        let mut adj = vec![Vec::new(); n];
        for e in g.edges() {
            let (p, q) = if e.weight > 0.0 { (e.weight, 0.0) } else { (0.0, -e.weight) };
            adj[e.i].push((e.j, p, q));
            adj[e.j].push((e.i, p, q));
        }
        Level {
            adj,
            self_pos: vec![0.0; n],
            self_neg: vec![0.0; n],
            k_pos: g.k_pos().to_vec(),
            k_neg: g.k_neg().to_vec(),
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    /// Collapse communities (labels `0..n_comm`) into super-nodes.
    fn aggregate(&self, comm: &[usize], n_comm: usize) -> Level {
        let mut self_pos = vec![0.0; n_comm];
        let mut self_neg = vec![0.0; n_comm];
        let mut k_pos = vec![0.0; n_comm];
        let mut k_neg = vec![0.0; n_comm];
        let mut between: Vec<std::collections::BTreeMap<usize, (f64, f64)>> = vec![Default::default(); n_comm];
        for u in 0..self.len() {
            let cu = comm[u];
            self_pos[cu] += self.self_pos[u];
            self_neg[cu] += self.self_neg[u];
            k_pos[cu] += self.k_pos[u];
            k_neg[cu] += self.k_neg[u];
            for &(v, p, q) in &self.adj[u] {
                let cv = comm[v];
                if cu == cv {
                    // Each internal edge is seen from both ends.
                    self_pos[cu] += p / 2.0;
                    self_neg[cu] += q / 2.0;
                } else {
                    let slot = between[cu].entry(cv).or_insert((0.0, 0.0));
                    slot.0 += p;
                    slot.1 += q;
                }
            }
        }
        let adj = between
            .into_iter()
            .map(|m| m.into_iter().map(|(v, (p, q))| (v, p, q)).collect())
            .collect();
        Level {
            adj,
            self_pos,
            self_neg,
            k_pos,
            k_neg,
        }
    }
}

struct Objective {
    m_pos: f64,
    m_neg: f64,
}

impl Objective {
    /// Gain of inserting an isolated node into a community, relative to
    /// leaving it alone.
    fn gain(&self, to_pos: f64, to_neg: f64, tot_pos: f64, tot_neg: f64, k_pos: f64, k_neg: f64) -> f64 {
        let mut g = 0.0;
        if self.m_pos > 0.0 {
            g += to_pos / self.m_pos - tot_pos * k_pos / (2.0 * self.m_pos * self.m_pos);
        }
        if self.m_neg > 0.0 {
            g -= to_neg / self.m_neg - tot_neg * k_neg / (2.0 * self.m_neg * self.m_neg);
        }
        g
    }
}

/// Greedy local moves until no node can strictly improve the objective.
fn local_moves(level: &Level, comm: &mut [usize], obj: &Objective, rng: &mut ChaCha8Rng) {
    let n = level.len();
    let mut tot_pos = vec![0.0; n];
    let mut tot_neg = vec![0.0; n];
    let mut size = vec![0usize; n];
    for u in 0..n {
        tot_pos[comm[u]] += level.k_pos[u];
        tot_neg[comm[u]] += level.k_neg[u];
        size[comm[u]] += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut link_pos = vec![0.0; n];
    let mut link_neg = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();
    loop {
        let mut moved = false;
        for &u in &order {
            let home = comm[u];
            let (kp, kn) = (level.k_pos[u], level.k_neg[u]);
            tot_pos[home] -= kp;
            tot_neg[home] -= kn;
            size[home] -= 1;
            for &c in &touched {
                link_pos[c] = 0.0;
                link_neg[c] = 0.0;
            }
            touched.clear();
            touched.push(home);
            for &(v, p, q) in &level.adj[u] {
                let c = comm[v];
                if link_pos[c] == 0.0 && link_neg[c] == 0.0 && !touched.contains(&c) {
                    touched.push(c);
                }
                link_pos[c] += p;
                link_neg[c] += q;
            }
            let stay = obj.gain(link_pos[home], link_neg[home], tot_pos[home], tot_neg[home], kp, kn);
            let mut best = home;
            let mut best_gain = stay;
            // With negative weights a community need not be adjacent to gain.
            for c in 0..n {
                if c == home || size[c] == 0 {
                    continue;
                }
                let g = obj.gain(link_pos[c], link_neg[c], tot_pos[c], tot_neg[c], kp, kn);
                if g > best_gain + EPS {
                    best = c;
                    best_gain = g;
                }
            }
            // An empty community scores zero; negative ties can make isolation best.
            if best_gain < -EPS && size[home] > 0 {
                if let Some(empty) = (0..n).find(|&c| size[c] == 0) {
                    best = empty;
                }
            }
            comm[u] = best;
            tot_pos[best] += kp;
            tot_neg[best] += kn;
            size[best] += 1;
            if best != home {
                moved = true;
            }
        }
        if !moved {
            return;
        }
    }
}

fn compact(comm: &mut [usize]) -> usize {
    let relabeled = super::relabel(comm);
    let n = relabeled.iter().max().map_or(0, |m| m + 1);
    comm.copy_from_slice(&relabeled);
    n
}

fn single_run(graph: &SignedGraph, obj: &Objective, start: Vec<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = graph.n_nodes();
    let base = Level::from_graph(graph);
    let mut membership: Vec<usize> = (0..n).collect();
    let mut level = Level::from_graph(graph);
    let mut comm = start;
    loop {
        local_moves(&level, &mut comm, obj, rng);
        let n_comm = compact(&mut comm);
        for m in membership.iter_mut() {
            *m = comm[*m];
        }
        if n_comm == level.len() {
            break;
        }
        level = level.aggregate(&comm, n_comm);
        comm = (0..n_comm).collect();
    }
    // Final node-level refinement from the aggregated solution.
    local_moves(&base, &mut membership, obj, rng);
    compact(&mut membership);
    membership
}

/// Louvain community detection maximizing signed modularity.
///
/// Restart 0 starts from singletons; later restarts start from a seeded
/// random partition. Each restart visits nodes in its own random order and
/// the partition with the highest signed modularity wins, ties going to the
/// earliest restart. A node moves only on a strictly positive gain, and among equal
/// best gains the lowest community id is taken.
pub fn louvain(graph: &SignedGraph, n_restarts: usize, seed: u64) -> Result<Partition> {
    if graph.n_nodes() == 0 {
        return Err(Error::invalid("louvain on an empty graph"));
    }
    if n_restarts == 0 {
        return Err(Error::config("louvain needs at least one restart"));
    }
    let obj = Objective {
        m_pos: graph.m_pos(),
        m_neg: graph.m_neg(),
    };
    let runs: Vec<Partition> = (0..n_restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let n = graph.n_nodes();
            let start = if r == 0 {
                (0..n).collect()
            } else {
                let k = rng.gen_range(1..=n);
                (0..n).map(|_| rng.gen_range(0..k)).collect()
            };
            let assignment = single_run(graph, &obj, start, &mut rng);
            Partition::new(graph, &assignment)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, p) in runs.iter().enumerate() {
        if p.signed_modularity > runs[best].signed_modularity + EPS {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}
