//! Message-passing encoders producing every intermediate layer.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph};
use crate::params::{glorot_uniform, ParamId, ParamSet};
use crate::tensor::{DenseMatrix, SparseCsr, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gcn,
    Gat,
    Gin,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Gcn => "gcn",
            Arch::Gat => "gat",
            Arch::Gin => "gin",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Arch::Gcn),
            "gat" => Ok(Arch::Gat),
            "gin" => Ok(Arch::Gin),
            other => Err(Error::Config(format!("unknown model {other:?}, expected gcn|gat|gin"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: Arch,
    /// Number of message-passing layers `L`; the stack holds `L + 1` matrices.
    pub depth: usize,
    pub hidden: usize,
    pub input_dim: usize,
    /// Adds `I` to the adjacency (GCN) or every attention neighborhood (GAT).
    /// GIN already carries its own self term and ignores this flag.
    #[serde(default)]
    pub self_loops: bool,
    #[serde(default = "default_slope")]
    pub gat_slope: f64,
}

fn default_slope() -> f64 {
    0.2
}

impl EncoderConfig {
    pub fn new(arch: Arch, depth: usize, hidden: usize, input_dim: usize) -> Self {
        Self {
            arch,
            depth,
            hidden,
            input_dim,
            self_loops: false,
            gat_slope: default_slope(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        if self.hidden < 1 || self.input_dim < 1 {
            return Err(Error::Config("hidden and input widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sparse operators an encoder needs for one graph, built once per run.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    /// `D^{-1/2} A D^{-1/2}` (with self-loops if configured).
    pub norm_adj: Arc<SparseCsr>,
    /// Attention neighborhoods; isolated nodes always attend to themselves.
    pub attention: Arc<SparseCsr>,
    /// Raw 0/1 adjacency without self-loops.
    pub raw_adj: Arc<SparseCsr>,
}

impl GraphOperators {
    pub fn new(g: &Graph, self_loops: bool) -> Self {
        let raw = g.adjacency(false);
        let attention = if self_loops {
            g.adjacency(true)
        } else {
            let degrees = g.degrees();
            let mut triplets = Vec::with_capacity(raw.nnz() + 1);
            for i in 0..raw.rows() {
                if degrees[i] == 0 {
                    triplets.push((i, i, 1.0));
                }
                triplets.extend(raw.row(i).0.iter().map(|&j| (i, j, 1.0)));
            }
            SparseCsr::from_triplets(raw.rows(), raw.cols(), triplets)
                .expect("adjacency plus isolated self edges is a valid pattern")
        };
        Self {
            norm_adj: Arc::new(normalize_adjacency(g, self_loops)),
            attention: Arc::new(attention),
            raw_adj: Arc::new(raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum LayerParams {
    Gcn { w: ParamId, b: ParamId },
    Gat { w: ParamId, att: ParamId },
    Gin { eps: ParamId, w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

/// Encoder parameter handles into a shared [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    cfg: EncoderConfig,
    w0: ParamId,
    b0: ParamId,
    layers: Vec<LayerParams>,
}

impl Encoder {
    /// Glorot-uniform weights and attention vectors, zero biases, GIN `eps = 0`.
    pub fn init(cfg: &EncoderConfig, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (f, d) = (cfg.input_dim, cfg.hidden);
        let w0 = params.push("enc.w0", glorot_uniform(f, d, rng));
        let b0 = params.push("enc.b0", DenseMatrix::zeros(1, d));
        let layers = (1..=cfg.depth)
            .map(|l| match cfg.arch {
                Arch::Gcn => LayerParams::Gcn {
                    w: params.push(format!("enc.l{l}.w"), glorot_uniform(d, d, rng)),
                    b: params.push(format!("enc.l{l}.b"), DenseMatrix::zeros(1, d)),
                },
                Arch::Gat => LayerParams::Gat {
                    w: params.push(format!("enc.l{l}.w"), glorot_uniform(d, d, rng)),
                    att: params.push(format!("enc.l{l}.att"), glorot_uniform(1, 2 * d, rng)),
                },
                Arch::Gin => LayerParams::Gin {
                    eps: params.push(format!("enc.l{l}.eps"), DenseMatrix::zeros(1, 1)),
                    w1: params.push(format!("enc.l{l}.w1"), glorot_uniform(d, d, rng)),
                    b1: params.push(format!("enc.l{l}.b1"), DenseMatrix::zeros(1, d)),
                    w2: params.push(format!("enc.l{l}.w2"), glorot_uniform(d, d, rng)),
                    b2: params.push(format!("enc.l{l}.b2"), DenseMatrix::zeros(1, d)),
                },
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            w0,
            b0,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    /// Records the full layer stack `h0..hL` on `tape`. `bound` holds the
    /// tape leaves of the parameter set, indexed by [`ParamId`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        ops: &GraphOperators,
        x: Var,
    ) -> Result<Vec<Var>> {
        let p = |id: ParamId| bound[id.0];
        let mut h = input_transform(tape, x, p(self.w0), p(self.b0))?;
        let mut stack = Vec::with_capacity(self.layers.len() + 1);
        stack.push(h);
        for (k, layer) in self.layers.iter().enumerate() {
            let last = k + 1 == self.layers.len();
            h = match *layer {
                LayerParams::Gcn { w, b } => gcn_layer(tape, h, &ops.norm_adj, p(w), p(b), last)?,
                LayerParams::Gat { w, att } => {
                    gat_layer(tape, h, &ops.attention, p(w), p(att), self.cfg.gat_slope, last)?
                }
                LayerParams::Gin { eps, w1, b1, w2, b2 } => gin_layer(
                    tape,
                    h,
                    &ops.raw_adj,
                    p(eps),
                    [p(w1), p(b1), p(w2), p(b2)],
                    last,
                )?,
            };
            stack.push(h);
        }
        Ok(stack)
    }
}

/// `h0 = X·W0 + b0`
pub fn input_transform(tape: &mut Tape, x: Var, w0: Var, b0: Var) -> Result<Var> {
    let xw = tape.matmul(x, w0)?;
    tape.add_row(xw, b0)
}

/// `ReLU(Â·h·W + b)`, without the ReLU on the last layer.
pub fn gcn_layer(
    tape: &mut Tape,
    h: Var,
    norm_adj: &Arc<SparseCsr>,
    w: Var,
    b: Var,
    last: bool,
) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let agg = tape.spmm(norm_adj, hw)?;
    let out = tape.add_row(agg, b)?;
    Ok(if last { out } else { tape.relu(out) })
}

/// Single-head attention over the nonzero pattern of `neighborhoods`.
pub fn gat_layer(
    tape: &mut Tape,
    h: Var,
    neighborhoods: &Arc<SparseCsr>,
    w: Var,
    att: Var,
    slope: f64,
    last: bool,
) -> Result<Var> {
    let wh = tape.matmul(h, w)?;
    let out = tape.gat_aggregate(wh, att, neighborhoods, slope)?;
    Ok(if last { out } else { tape.relu(out) })
}

/// `MLP((1 + eps)·h + A·h)` with `MLP(z) = ReLU(z·W1 + b1)·W2 + b2`, followed
/// by a ReLU except on the last layer. `mlp` is `[W1, b1, W2, b2]`.
pub fn gin_layer(
    tape: &mut Tape,
    h: Var,
    raw_adj: &Arc<SparseCsr>,
    eps: Var,
    mlp: [Var; 4],
    last: bool,
) -> Result<Var> {
    let [w1, b1, w2, b2] = mlp;
    let neigh = tape.spmm(raw_adj, h)?;
    let scaled = tape.mul_scalar(h, eps)?;
    let selfterm = tape.add(h, scaled)?;
    let z = tape.add(selfterm, neigh)?;
    let z1 = tape.matmul(z, w1)?;
    let z1 = tape.add_row(z1, b1)?;
    let z1 = tape.relu(z1);
    let z2 = tape.matmul(z1, w2)?;
    let out = tape.add_row(z2, b2)?;
    Ok(if last { out } else { tape.relu(out) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gat_attention;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> Graph {
        Graph::new(
            DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap(),
            vec![(0, 1), (1, 2)],
            vec![0, 1, 0],
            2,
        )
        .unwrap()
    }

    fn run(g: &Graph, cfg: &EncoderConfig, seed: u64) -> Vec<DenseMatrix> {
        let mut params = ParamSet::new();
        let enc = Encoder::init(cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let ops = GraphOperators::new(g, cfg.self_loops);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(g.features().clone());
        let stack = enc.forward(&mut tape, &bound, &ops, x).unwrap();
        stack.iter().map(|&v| tape.value(v).clone()).collect()
    }

    #[test]
    fn input_transform_matches_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = glorot_uniform(5, 8, &mut rng);
        let w = glorot_uniform(8, 4, &mut rng);
        let b = glorot_uniform(1, 4, &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
        let h = input_transform(&mut tape, xv, wv, bv).unwrap();
        let oracle = DenseMatrix::from_fn(5, 4, |i, j| {
            (0..8).map(|k| x.get(i, k) * w.get(k, j)).sum::<f64>() + b.get(0, j)
        });
        assert!(tape.value(h).max_abs_diff(&oracle) < 1e-14);

        let zero = tape.constant(DenseMatrix::zeros(5, 8));
        let h = input_transform(&mut tape, zero, wv, bv).unwrap();
        for i in 0..5 {
            assert_eq!(tape.value(h).row(i), b.row(0));
        }
    }

    #[test]
    fn gcn_depth2_matches_straight_line_oracle() {
        let g = path3();
        let cfg = EncoderConfig::new(Arch::Gcn, 2, 3, 2);
        let got = run(&g, &cfg, 9);

        let mut params = ParamSet::new();
        Encoder::init(&cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let v = params.values();
        let (w0, b0, w1, b1, w2, b2) = (&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]);
        // P3 without self-loops: degrees (1, 2, 1)
        let s = 1.0 / 2f64.sqrt();
        let a = DenseMatrix::from_rows(&[[0.0, s, 0.0], [s, 0.0, s], [0.0, s, 0.0]]).unwrap();
        let h0 = g.features().matmul(w0).unwrap().add_row(b0).unwrap();
        let h1 = a.matmul(&h0.matmul(w1).unwrap()).unwrap().add_row(b1).unwrap().map(|x| x.max(0.0));
        let h2 = a.matmul(&h1.matmul(w2).unwrap()).unwrap().add_row(b2).unwrap();
        assert_eq!(got.len(), 3);
        for (g, o) in got.iter().zip([h0, h1, h2]) {
            assert!(g.max_abs_diff(&o) < 1e-14);
        }
    }

    #[test]
    fn gcn_identity_cases() {
        let mut tape = Tape::new();
        let h = tape.constant(DenseMatrix::from_rows(&[[1.0, 2.0], [0.0, 3.0]]).unwrap());
        let w = tape.param(DenseMatrix::identity(2));
        let b = tape.param(DenseMatrix::zeros(1, 2));
        let eye = Arc::new(SparseCsr::identity(2));
        let out = gcn_layer(&mut tape, h, &eye, w, b, false).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
        let zero = Arc::new(SparseCsr::zeros(2, 2));
        let out = gcn_layer(&mut tape, h, &zero, w, b, false).unwrap();
        assert_eq!(tape.value(out), &DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn gat_single_node_and_symmetric_neighbors() {
        let g = Graph::new(DenseMatrix::filled(1, 2, 0.5), vec![], vec![0], 1).unwrap();
        let ops = GraphOperators::new(&g, false);
        assert_eq!(ops.attention.get(0, 0), 1.0);
        let mut tape = Tape::new();
        let h = tape.constant(DenseMatrix::from_rows(&[[1.0, -2.0]]).unwrap());
        let w = tape.param(DenseMatrix::identity(2));
        let att = tape.param(DenseMatrix::from_rows(&[[0.3, -0.1, 0.7, 0.2]]).unwrap());
        let out = gat_layer(&mut tape, h, &ops.attention, w, att, 0.2, false).unwrap();
        assert_eq!(tape.value(out).row(0), &[1.0, 0.0]);

        // node 0 with two neighbors carrying identical features
        let star = Graph::new(DenseMatrix::zeros(3, 1), vec![(0, 1), (0, 2)], vec![0; 3], 1).unwrap();
        let ops = GraphOperators::new(&star, false);
        let whv = DenseMatrix::from_rows(&[[0.1, 0.4], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let (_, alpha) = gat_attention(&whv, &DenseMatrix::from_rows(&[[0.3, -0.1, 0.7, 0.2]]).unwrap(), &ops.attention, 0.2).unwrap();
        assert!((alpha[0] - 0.5).abs() < 1e-15 && (alpha[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gat_star_matches_per_edge_loops() {
        let g = Graph::new(DenseMatrix::zeros(4, 1), vec![(0, 1), (0, 2), (0, 3)], vec![0; 4], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hv = glorot_uniform(4, 3, &mut rng).scale(3.0);
        let wv = glorot_uniform(3, 3, &mut rng);
        let av = glorot_uniform(1, 6, &mut rng);
        for self_loops in [false, true] {
            let ops = GraphOperators::new(&g, self_loops);
            let mut tape = Tape::new();
            let (h, w, a) = (tape.constant(hv.clone()), tape.param(wv.clone()), tape.param(av.clone()));
            let out = gat_layer(&mut tape, h, &ops.attention, w, a, 0.2, false).unwrap();

            let wh = hv.matmul(&wv).unwrap();
            let neighbors = |i: usize| -> Vec<usize> {
                (0..4)
                    .filter(|&j| (i != j && (i == 0 || j == 0)) || (self_loops && i == j))
                    .collect()
            };
            for i in 0..4 {
                let nb = neighbors(i);
                let e: Vec<f64> = nb
                    .iter()
                    .map(|&j| {
                        let s: f64 = (0..3).map(|k| av.get(0, k) * wh.get(i, k) + av.get(0, 3 + k) * wh.get(j, k)).sum();
                        if s > 0.0 { s } else { 0.2 * s }
                    })
                    .collect();
                let z: f64 = e.iter().map(|v| v.exp()).sum();
                for k in 0..3 {
                    let o: f64 = nb.iter().zip(&e).map(|(&j, &v)| v.exp() / z * wh.get(j, k)).sum();
                    assert!((tape.value(out).get(i, k) - o.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gin_triangle_with_identity_mlp() {
        let mut tape = Tape::new();
        let hv = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 5.0], [7.0, 11.0]]).unwrap();
        let tri = Graph::new(DenseMatrix::zeros(3, 1), vec![(0, 1), (1, 2), (0, 2)], vec![0; 3], 1).unwrap();
        let adj = Arc::new(tri.adjacency(false));
        let h = tape.constant(hv.clone());
        let eye = tape.param(DenseMatrix::identity(2));
        let zero = tape.param(DenseMatrix::zeros(1, 2));
        for e in [0.0, 0.5, -1.0] {
            let eps = tape.param(DenseMatrix::scalar(e));
            let out = gin_layer(&mut tape, h, &adj, eps, [eye, zero, eye, zero], true).unwrap();
            for i in 0..3 {
                for k in 0..2 {
                    let others: f64 = (0..3).filter(|&j| j != i).map(|j| hv.get(j, k)).sum();
                    assert!((tape.value(out).get(i, k) - ((1.0 + e) * hv.get(i, k) + others)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stack_has_depth_plus_one_layers() {
        let g = path3();
        for arch in [Arch::Gcn, Arch::Gat, Arch::Gin] {
            for depth in [1, 3] {
                let got = run(&g, &EncoderConfig::new(arch, depth, 4, 2), 0);
                assert_eq!(got.len(), depth + 1);
                assert!(got.iter().all(|m| m.shape() == (3, 4) && m.is_finite()));
            }
        }
    }

    #[test]
    fn zero_depth_is_rejected() {
        let cfg = EncoderConfig::new(Arch::Gcn, 0, 4, 2);
        assert!(Encoder::init(&cfg, &mut ParamSet::new(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
