//! Single-head graph attention over the agents of each sample.
//!
//! For projected features `Wh_i = W h_enc_i`, the score of agent `j` seen from
//! agent `i` is `LeakyReLU(a_src . Wh_i + a_dst . Wh_j)`; scores are
//! softmax-normalized over the agents of the same sample and the fused
//! vector is `ELU(sum_j alpha_ij Wh_j)`.

use rand::Rng;

use crate::autodiff::{xavier_uniform, Bound, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Row-stochastic attention coefficients, one row per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub agents: usize,
    /// Row-major `agents x agents`; masked entries are exactly zero.
    pub weights: Vec<f64>,
}

impl AttentionWeights {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.agents..(i + 1) * self.agents]
    }
}

/// Which agents may attend to which. Agents of one sample form a complete
/// graph; samples in a batch never see each other.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentGraph {
    pub group: Vec<usize>,
}

impl AgentGraph {
    pub fn single(agents: usize) -> Self {
        AgentGraph { group: vec![0; agents] }
    }

    pub fn len(&self) -> usize {
        self.group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        let g = &self.group;
        g.iter().flat_map(|a| g.iter().map(move |b| a == b)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Gat {
    pub weight: ParamId,
    pub attn_src: ParamId,
    pub attn_dst: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Gat {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(vec![out_dim, in_dim], in_dim, out_dim, rng),
        );
        let attn_src = store.add(
            format!("{name}.attn_src"),
            xavier_uniform(vec![out_dim, 1], out_dim, 1, rng),
        );
        let attn_dst = store.add(
            format!("{name}.attn_dst"),
            xavier_uniform(vec![out_dim, 1], out_dim, 1, rng),
        );
        Gat {
            weight,
            attn_src,
            attn_dst,
            in_dim,
            out_dim,
        }
    }

    /// `h_enc: [agents, in_dim] -> (h_gat: [agents, out_dim], alpha)`.
    /// `alpha` is the `[agents, agents]` attention node.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, h_enc: Var, graph: &AgentGraph) -> Result<(Var, Var)> {
        let shape = tape.value(h_enc).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape(
                "gat_fuse",
                format!("expected [agents, {}], got {:?}", self.in_dim, shape),
            ));
        }
        let agents = shape[0];
        if agents == 0 || graph.len() != agents {
            return Err(Error::shape(
                "gat_fuse",
                format!("{} agents with a graph over {}", agents, graph.len()),
            ));
        }
        let wh = tape.linear(h_enc, bound.var(self.weight), None)?;
        let src = tape.matmul(wh, bound.var(self.attn_src))?;
        let dst = tape.matmul(wh, bound.var(self.attn_dst))?;
        let src = tape.reshape(src, vec![agents])?;
        let dst = tape.reshape(dst, vec![agents])?;
        let scores = tape.outer_add(src, dst)?;
        let scores = tape.leaky_relu(scores, LEAKY_SLOPE)?;
        let alpha = tape.masked_softmax(scores, Some(&graph.mask()))?;
        let mixed = tape.matmul(alpha, wh)?;
        Ok((tape.elu(mixed)?, alpha))
    }

    pub fn fuse(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h_enc: Var,
        graph: &AgentGraph,
    ) -> Result<(Var, AttentionWeights)> {
        let (h, alpha) = self.forward(tape, bound, h_enc, graph)?;
        let weights = AttentionWeights {
            agents: graph.len(),
            weights: tape.value(alpha).data().to_vec(),
        };
        Ok((h, weights))
    }
}

/// `[h_enc_ego ; h_gat_ego]` for the listed ego rows.
pub fn build_condition(tape: &mut Tape, h_enc: Var, h_gat: Var, ego_rows: &[usize]) -> Result<Var> {
    let enc = tape.gather_rows(h_enc, ego_rows)?;
    let gat = tape.gather_rows(h_gat, ego_rows)?;
    tape.concat(&[enc, gat], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use crate::test_util::{probe_sum, random, rng};

    fn setup(in_dim: usize, out_dim: usize) -> (ParamStore, Gat) {
        let mut store = ParamStore::new();
        let gat = Gat::new(&mut store, "gat", in_dim, out_dim, &mut rng(3));
        (store, gat)
    }

    fn fuse(store: &ParamStore, gat: &Gat, h: Tensor, graph: &AgentGraph) -> (Vec<f64>, AttentionWeights) {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(h);
        let (out, w) = gat.fuse(&mut tape, &bound, x, graph).unwrap();
        (tape.value(out).data().to_vec(), w)
    }

    #[test]
    fn single_agent_attends_to_itself() {
        let (store, gat) = setup(5, 4);
        let h = random(&[1, 5], 1);
        let (out, w) = fuse(&store, &gat, h.clone(), &AgentGraph::single(1));
        assert_eq!(w.weights, vec![1.0]);

        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(h);
        let wh = tape.linear(x, bound.var(gat.weight), None).unwrap();
        let own = tape.elu(wh).unwrap();
        assert_eq!(tape.value(own).data(), out.as_slice());
    }

    #[test]
    fn identical_agents_share_attention() {
        let (store, gat) = setup(5, 4);
        let row = random(&[1, 5], 2).into_data();
        let h = Tensor::new(vec![2, 5], [row.clone(), row].concat()).unwrap();
        let (_, w) = fuse(&store, &gat, h, &AgentGraph::single(2));
        assert_eq!(w.weights, vec![0.5; 4]);
    }

    #[test]
    fn rows_sum_to_one_and_other_samples_get_zero() {
        let (store, gat) = setup(5, 4);
        let graph = AgentGraph {
            group: vec![0, 0, 0, 1, 1, 2],
        };
        let (_, w) = fuse(&store, &gat, random(&[6, 5], 3), &graph);
        for i in 0..6 {
            let row = w.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (j, &v) in row.iter().enumerate() {
                assert!(v >= 0.0);
                if graph.group[i] != graph.group[j] {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn ego_fusion_ignores_neighbor_order() {
        let (store, gat) = setup(5, 4);
        let h = random(&[4, 5], 4).into_data();
        let perm = [0usize, 3, 1, 2];
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| h[r * 5..(r + 1) * 5].to_vec()).collect();
        let graph = AgentGraph::single(4);
        let (a, _) = fuse(&store, &gat, Tensor::new(vec![4, 5], h).unwrap(), &graph);
        let (b, _) = fuse(&store, &gat, Tensor::new(vec![4, 5], permuted).unwrap(), &graph);
        for (x, y) in a[..4].iter().zip(&b[..4]) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn mismatched_width_is_a_shape_error() {
        let (store, gat) = setup(5, 4);
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![2, 6]));
        assert!(matches!(
            gat.forward(&mut tape, &bound, x, &AgentGraph::single(2)),
            Err(Error::Shape { op: "gat_fuse", .. })
        ));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (store, gat) = setup(4, 3);
        let graph = AgentGraph {
            group: vec![0, 0, 0, 1, 1],
        };
        let mut inputs = vec![random(&[5, 4], 5)];
        inputs.extend(store.values());
        let err = grad_check(
            |tape, vars| {
                let bound = Bound::from_vars(vars[1..].to_vec());
                let (h, _) = gat.forward(tape, &bound, vars[0], &graph)?;
                probe_sum(tape, h)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn condition_layout() {
        let mut tape = Tape::new();
        let enc = tape.constant(random(&[3, 24], 6));
        let gat = tape.constant(Tensor::zeros(vec![3, 16]));
        let c = build_condition(&mut tape, enc, gat, &[0, 2]).unwrap();
        let v = tape.value(c);
        assert_eq!(v.shape(), &[2, 40]);
        assert_eq!(&v.data()[..24], &tape.value(enc).data()[..24]);
        assert_eq!(&v.data()[40..64], &tape.value(enc).data()[48..72]);
        assert!(v.data()[24..40].iter().all(|&x| x == 0.0));
    }
}
