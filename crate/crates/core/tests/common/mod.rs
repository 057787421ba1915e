//! Independent oracles shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use degas::pruning::EdgeAlpha;
use degas::search_space::graph::Topology;
use degas::search_space::{EdgeClass, Genotype};
use degas::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn refl(i: isize, n: usize) -> usize {
    // mirror without repeating the edge sample
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

pub type Plane = Vec<Vec<f64>>;

fn blur2d(p: &Plane) -> Plane {
    let (h, w) = (p.len(), p[0].len());
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (a, ka) in K.iter().enumerate() {
                for (b, kb) in K.iter().enumerate() {
                    let yy = refl(y as isize + a as isize - 2, h);
                    let xx = refl(x as isize + b as isize - 2, w);
                    acc += ka * kb * p[yy][xx];
                }
            }
            out[y][x] = acc;
        }
    }
    out
}

fn down(p: &Plane) -> Plane {
    let b = blur2d(p);
    b.iter().step_by(2).map(|r| r.iter().step_by(2).copied().collect()).collect()
}

fn expand(p: &Plane) -> Plane {
    let (h, w) = (p.len(), p[0].len());
    let mut up = vec![vec![0.0; 2 * w]; 2 * h];
    for y in 0..h {
        for x in 0..w {
            up[2 * y][2 * x] = p[y][x];
        }
    }
    blur2d(&up).into_iter().map(|r| r.into_iter().map(|v| 4.0 * v).collect()).collect()
}

pub fn oracle_bands(p: &Plane, levels: usize) -> Vec<Plane> {
    let mut bands = Vec::new();
    let mut g = p.clone();
    for _ in 0..levels {
        let d = down(&g);
        let e = expand(&d);
        bands.push(
            g.iter()
                .zip(&e)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        );
        g = d;
    }
    bands.push(g);
    bands
}

pub fn planes(t: &Tensor) -> Vec<Plane> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    t.data()
        .chunks(h * w)
        .map(|c| c.chunks(w).map(|r| r.to_vec()).collect())
        .collect()
}

pub fn oracle_lap1(x: &Tensor, y: &Tensor, levels: usize) -> f64 {
    let (px, py) = (planes(x), planes(y));
    let mut sums = vec![0.0; levels + 1];
    let mut counts = vec![0usize; levels + 1];
    for (a, b) in px.iter().zip(&py) {
        let (ba, bb) = (oracle_bands(a, levels), oracle_bands(b, levels));
        for j in 0..=levels {
            for (ra, rb) in ba[j].iter().zip(&bb[j]) {
                for (u, v) in ra.iter().zip(rb) {
                    sums[j] += (u - v).abs();
                    counts[j] += 1;
                }
            }
        }
    }
    (0..=levels).map(|j| 4f64.powi(j as i32) * sums[j] / counts[j] as f64).sum()
}

/// stem, u1, n1, u2 with residuals stem -> u2 and u1 -> u2.
pub fn four_nodes() -> Topology {
    let mut t = Topology::new(2, 1, 4, 8, 8).unwrap();
    let n2 = t.node_index("n2").unwrap();
    t.nodes.truncate(n2);
    t.edges.retain(|e| e.target != n2);
    assert_eq!(t.nodes.len(), 4);
    assert_eq!(t.edges.len(), 5);
    t
}

pub fn draw(t: &Topology, rng: &mut ChaCha8Rng, coarse: bool) -> Vec<EdgeAlpha> {
    t.edges
        .iter()
        .map(|e| {
            let k = rng.gen_range(1..=3usize).max(if e.class == EdgeClass::Residual { 2 } else { 1 });
            let mut candidates: Vec<String> = (0..k).map(|i| format!("op{}_{i}", e.id)).collect();
            if e.class == EdgeClass::Residual {
                *candidates.last_mut().unwrap() = "zero".into();
            }
            let alpha = (0..k)
                .map(|_| if coarse { rng.gen_range(0..3) as f64 } else { rng.gen_range(-3.0..3.0) })
                .collect();
            EdgeAlpha {
                edge: e.id,
                candidates,
                alpha,
            }
        })
        .collect()
}

fn soft(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Per node: (direct op, residual (source, op)).
pub fn oracle(t: &Topology, alphas: &[EdgeAlpha]) -> Vec<(String, Option<(String, String)>)> {
    let mut out = Vec::new();
    for node in 1..t.nodes.len() {
        let mut pairs = Vec::new();
        for ea in alphas {
            let e = &t.edges[ea.edge];
            if e.target != node {
                continue;
            }
            for (i, w) in soft(&ea.alpha).into_iter().enumerate() {
                pairs.push((w, i, ea.edge));
            }
        }
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let (_, ci, eid) = pairs[0];
        let direct = alphas
            .iter()
            .find(|ea| t.edges[ea.edge].target == node && t.edges[ea.edge].class.is_direct())
            .unwrap();
        let dw = soft(&direct.alpha);
        let mut best = 0;
        for i in 1..dw.len() {
            if dw[i] > dw[best] {
                best = i;
            }
        }
        let win = &t.edges[eid];
        let res = if win.class == EdgeClass::Residual {
            let name = &alphas.iter().find(|ea| ea.edge == eid).unwrap().candidates[ci];
            (name != "zero").then(|| (t.nodes[win.source].id.clone(), name.clone()))
        } else {
            None
        };
        out.push((direct.candidates[best].clone(), res));
    }
    out
}

pub fn flatten(g: &Genotype) -> Vec<(String, Option<(String, String)>)> {
    g.nodes
        .iter()
        .map(|n| (n.op.clone(), n.residual.as_ref().map(|r| (r.source.clone(), r.op.clone()))))
        .collect()
}
