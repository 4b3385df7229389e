use super::{Activation, BoundParams, MlpSpec, NnError, Params};
use crate::numcore::{Graph, Tensor, Var};

/// Negative-side slope of the LeakyReLU inside the GATv2 scorer.
pub const LEAKY_SLOPE: f64 = 0.2;

/// One agent graph: node features plus edge weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub node_features: Tensor,
    pub edge_weights: Tensor,
}

impl GraphBatch {
    /// Fully connected graph with self-edges.
    pub fn complete(node_features: Tensor) -> Self {
        let n = node_features.rows();
        Self {
            node_features,
            edge_weights: Tensor::ones(n, n),
        }
    }

    pub fn with_weights(node_features: Tensor, edge_weights: Tensor) -> Result<Self, NnError> {
        let n = node_features.rows();
        if edge_weights.shape() != [n, n] {
            return Err(NnError::Width {
                expected: n,
                found: edge_weights.cols(),
            });
        }
        check_weights(&edge_weights)?;
        Ok(Self {
            node_features,
            edge_weights,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.node_features.rows()
    }
}

pub(crate) fn check_weights(w: &Tensor) -> Result<(), NnError> {
    if w.data().iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)) {
        Ok(())
    } else {
        Err(NnError::EdgeWeights)
    }
}

/// Graph output of one GATv2 forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GatOutput {
    pub embeddings: Tensor,
    /// row-stochastic over positive-weight edges
    pub attention: Tensor,
    /// pre-softmax logits, `-inf` where the edge weight is zero
    pub scores: Tensor,
}

/// Stack of affine layers; hidden layers use `spec.activation`, the optional
/// output layer is linear.
pub fn mlp_forward<'g>(
    params: &BoundParams<'g>,
    prefix: &str,
    input: Var<'g>,
    spec: &MlpSpec,
    output: Option<usize>,
) -> Result<Var<'g>, NnError> {
    let mut x = input;
    let layers = spec.hidden.len() + usize::from(output.is_some());
    for i in 0..layers {
        let w = params.get(&format!("{prefix}.{i}.weight"))?;
        let b = params.get(&format!("{prefix}.{i}.bias"))?;
        let (xw, ww) = (x.shape()[1], w.shape()[0]);
        if xw != ww {
            return Err(NnError::Width {
                expected: ww,
                found: xw,
            });
        }
        x = x.matmul(&w)?.add_row(&b)?;
        if i < spec.hidden.len() {
            x = spec.activation.apply(x);
        }
    }
    Ok(x)
}

/// Symmetric-normalized graph convolution `h_i' = Σ_j A_ij (deg_i deg_j)^-1/2 φ h_j`
/// over a binary adjacency that includes self-edges.
pub fn gcn_layer_forward(phi: &Tensor, graph: &GraphBatch) -> Result<Tensor, NnError> {
    let a = &graph.edge_weights;
    let n = graph.num_agents();
    if a.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(NnError::EdgeWeights);
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    if let Some(i) = deg.iter().position(|&d| d == 0.0) {
        return Err(NnError::Num(crate::numcore::NumError::Invalid(format!(
            "node {i} has degree 0"
        ))));
    }
    let transformed = graph.node_features.matmul(phi)?;
    let h = transformed.cols();
    let mut out = Tensor::zeros(n, h);
    for i in 0..n {
        for j in 0..n {
            if a.get(i, j) == 0.0 {
                continue;
            }
            let c = 1.0 / (deg[i] * deg[j]).sqrt();
            for k in 0..h {
                let v = out.get(i, k) + c * transformed.get(j, k);
                out.set(i, k, v);
            }
        }
    }
    Ok(out)
}

/// Tape handles produced by [`gatv2_layer`].
#[derive(Clone, Copy)]
pub struct GatVars<'g> {
    pub embeddings: Var<'g>,
    pub attention: Var<'g>,
    pub scores: Var<'g>,
}

/// Single-head GATv2 over `B` stacked graphs of `n` nodes each.
///
/// `x` is `(B·n)×d` and `weights` is `(B·n)×n`. Scores are
/// `e_ij = aᵀ LeakyReLU(W_dst h_i + W_src h_j)` and messages are `W_src h_j`.
pub fn gatv2_layer<'g>(
    params: &BoundParams<'g>,
    x: Var<'g>,
    weights: Var<'g>,
    n: usize,
    activation: Activation,
) -> Result<GatVars<'g>, NnError> {
    let w_src = params.get("gat.w_src")?;
    let w_dst = params.get("gat.w_dst")?;
    let att = params.get("gat.att")?;
    let rows = x.shape()[0];
    let messages = x.matmul(&w_src)?;
    let targets = x.matmul(&w_dst)?;
    let pairs = targets.pair_sum(&messages, n)?.leaky_relu(LEAKY_SLOPE);
    let scores = pairs.matmul(&att)?.reshape(rows, n)?;
    let attention = scores.masked_softmax(&weights)?;
    let embeddings = activation.apply(attention.block_matmul(&messages, n)?);
    Ok(GatVars {
        embeddings,
        attention,
        scores,
    })
}

/// GATv2 attention logits for one graph, `-inf` on zero-weight edges.
pub fn gatv2_scores(params: &Params, graph: &GraphBatch) -> Result<Tensor, NnError> {
    let g = Graph::inference();
    let bound = params.bind(&g, false);
    let n = graph.num_agents();
    let x = g.constant(graph.node_features.clone());
    let w = g.constant(graph.edge_weights.clone());
    let out = gatv2_layer(&bound, x, w, n, Activation::Identity)?;
    Ok(sentinel_scores(&out.scores.value(), &graph.edge_weights))
}

pub(crate) fn sentinel_scores(scores: &Tensor, weights: &Tensor) -> Tensor {
    let mut s = scores.clone();
    for (v, w) in s.data_mut().iter_mut().zip(weights.data()) {
        if *w <= 0.0 {
            *v = f64::NEG_INFINITY;
        }
    }
    s
}

/// Masked softmax of a single row (see [`Var::masked_softmax`]).
pub fn masked_softmax_row(scores: &[f64], weights: &[f64]) -> Result<Vec<f64>, NnError> {
    let g = Graph::inference();
    let s = g.constant(Tensor::row_vector(scores));
    let w = g.constant(Tensor::row_vector(weights));
    check_weights(&w.value())?;
    Ok(s.masked_softmax(&w)?.value().into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use rand::SeedableRng;

    fn bound_mlp<'g>(g: &'g Graph, w: Tensor, b: Tensor) -> BoundParams<'g> {
        Params::new(vec![("m.0.weight".into(), w), ("m.0.bias".into(), b)]).bind(g, false)
    }

    #[test]
    fn mlp_examples() {
        let g = Graph::inference();
        let p = bound_mlp(&g, Tensor::zeros(3, 2), Tensor::zeros(1, 2));
        let x = g.constant(Tensor::from_rows(&[[1.0, -2.0, 3.0]]).unwrap());
        let out = mlp_forward(&p, "m", x, &MlpSpec::identity(), Some(2)).unwrap();
        assert_eq!(out.value().data(), &[0.0, 0.0]);

        let p = bound_mlp(&g, Tensor::eye(2), Tensor::zeros(1, 2));
        let x = g.constant(Tensor::zeros(1, 2));
        let out = mlp_forward(&p, "m", x, &MlpSpec::new(&[2], Activation::Tanh), None).unwrap();
        assert_eq!(out.value().data(), &[0.0, 0.0]);

        let p = bound_mlp(&g, Tensor::scalar(2.0), Tensor::scalar(1.0));
        let x = g.constant(Tensor::scalar(-3.0));
        let out = mlp_forward(&p, "m", x, &MlpSpec::new(&[1], Activation::Relu), None).unwrap();
        assert_eq!(out.item(), 0.0);

        let x = g.constant(Tensor::zeros(1, 4));
        assert!(matches!(
            mlp_forward(&p, "m", x, &MlpSpec::new(&[1], Activation::Relu), None),
            Err(NnError::Width { expected: 1, found: 4 })
        ));
    }

    #[test]
    fn gcn_examples() {
        let single = GraphBatch::complete(Tensor::from_rows(&[[0.4, -1.0]]).unwrap());
        assert_eq!(gcn_layer_forward(&Tensor::eye(2), &single).unwrap(), single.node_features);

        let v = [0.3, 0.7, -2.0];
        let two = GraphBatch::complete(Tensor::from_rows(&[v, v]).unwrap());
        let out = gcn_layer_forward(&Tensor::eye(3), &two).unwrap();
        for r in 0..2 {
            for (a, b) in out.row(r).iter().zip(&v) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let zero = gcn_layer_forward(&Tensor::zeros(3, 4), &two).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));

        let isolated = GraphBatch::with_weights(Tensor::zeros(2, 1), Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()).unwrap();
        assert!(gcn_layer_forward(&Tensor::eye(1), &isolated).is_err());
    }

    fn gat_params(enc: usize, h: usize, w_src: Tensor, w_dst: Tensor, att: Tensor) -> Params {
        assert_eq!(w_src.shape(), [enc, h]);
        Params::new(vec![
            ("gat.w_src".into(), w_src),
            ("gat.w_dst".into(), w_dst),
            ("gat.att".into(), att),
        ])
    }

    #[test]
    fn gatv2_score_examples() {
        let p = gat_params(1, 1, Tensor::scalar(1.0), Tensor::scalar(1.0), Tensor::scalar(1.0));
        let graph = GraphBatch::complete(Tensor::column_vector(&[1.0, 2.0]));
        let e = gatv2_scores(&p, &graph).unwrap();
        assert_eq!(e.get(0, 1), 3.0);

        let p0 = gat_params(1, 1, Tensor::scalar(1.0), Tensor::scalar(1.0), Tensor::scalar(0.0));
        assert!(gatv2_scores(&p0, &graph).unwrap().data().iter().all(|&x| x == 0.0));

        let same = GraphBatch::complete(Tensor::from_rows(&[[0.5, 1.0]; 3]).unwrap());
        let p2 = gat_params(
            2,
            2,
            Tensor::from_rows(&[[0.3, -0.2], [1.0, 0.4]]).unwrap(),
            Tensor::from_rows(&[[-0.7, 0.1], [0.2, 0.9]]).unwrap(),
            Tensor::column_vector(&[1.5, -0.5]),
        );
        let e = gatv2_scores(&p2, &same).unwrap();
        for r in 0..3 {
            assert!(e.row(r).iter().all(|&x| x == e.get(r, 0)));
        }

        let masked = GraphBatch::with_weights(graph.node_features.clone(), Tensor::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(gatv2_scores(&p, &masked).unwrap().get(0, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn self_edge_only_passes_own_message() {
        let arch = Architecture::for_task(crate::envs::TaskId::Navigation);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let params = Params::init(&arch, 3, &mut rng);
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.0, 0.0, 1.0, 1.0], [0.5, -0.2, 0.1, 0.0, -1.0, 1.0], [0.9, 0.9, 0.0, 0.3, 0.0, 0.0]]).unwrap();
        let g = Graph::inference();
        let bound = params.bind(&g, false);
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::eye(3));
        let out = gatv2_layer(&bound, xv, w, 3, Activation::Tanh).unwrap();
        let expect = x.matmul(params.get("gat.w_src").unwrap()).unwrap().map(f64::tanh);
        // the lone surviving edge carries α = 1/(1 + ε)
        assert!(out.embeddings.value().max_abs_diff(&expect) < 1e-11);
        assert!(out.attention.value().max_abs_diff(&Tensor::eye(3)) < 1e-11);
    }

    #[test]
    fn softmax_row_helper() {
        let a = masked_softmax_row(&[2f64.ln(), 0.0], &[1.0, 1.0]).unwrap();
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-12 && (a[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(masked_softmax_row(&[0.0], &[1.5]).is_err());
    }
}
