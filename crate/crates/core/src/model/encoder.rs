use thiserror::Error;

use super::input::GraphInput;
use super::{EncoderIds, Model, TaskGroup};
use crate::nn::{Mat, Tape, Var, NO_ROW};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("non-finite value in {0}")]
pub struct NumericsError(pub String);

#[derive(Debug, Clone, Default)]
pub struct EncodeOptions {
    /// Constant per-head `(N+1)×(N+1)` matrices added to the attention bias.
    pub extra_bias: Option<Vec<Mat>>,
}

/// Encoder output on a tape: rows `0..n` are atoms, row `n` the super node.
#[derive(Debug, Clone, Copy)]
pub struct Encoding {
    pub reps: Var,
    pub n: usize,
}

impl Encoding {
    pub fn atoms(&self, t: &mut Tape) -> Var {
        t.slice_rows(self.reps, 0, self.n)
    }

    pub fn super_node(&self, t: &mut Tape) -> Var {
        t.slice_rows(self.reps, self.n, 1)
    }
}

/// Encoder output as plain matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGraph {
    pub node_reps: Mat,
    pub graph_rep: Vec<f64>,
    /// Per head, `(N+1)×(N+1)`, super node last.
    pub bias: Vec<Mat>,
}

impl Model {
    fn node_embedding(&self, t: &mut Tape, e: &EncoderIds, input: &GraphInput, reaction_type: Option<u8>) -> Var {
        let n = input.n;
        let mut super_idx = vec![NO_ROW; n + 1];
        super_idx[n] = 0;
        let mut lookups = vec![
            (t.param(e.element), input.element.clone()),
            (t.param(e.charge), input.charge.clone()),
            (t.param(e.hydrogens), input.hydrogens.clone()),
            (t.param(e.aromatic), input.aromatic.clone()),
            (t.param(e.ring), input.ring.clone()),
            (t.param(e.degree), input.degree.clone()),
            (t.param(e.super_node), super_idx),
        ];
        if let (Some(table), Some(ty)) = (e.reaction_type, reaction_type) {
            assert!((1..=10).contains(&ty), "reaction type {ty} outside 1..10");
            let mut idx = vec![NO_ROW; n + 1];
            idx[n] = (ty - 1) as u32;
            lookups.push((t.param(table), idx));
        }
        t.lookup_sum(lookups)
    }

    /// `(N+1)²×H` matrix of local lookups (plus the virtual edge) and,
    /// separately, of the RBF global item; `None` where masked.
    fn bias_items(&self, t: &mut Tape, e: &EncoderIds, input: &GraphInput) -> (Option<Var>, Option<Var>) {
        let local = (!self.config.mask_local && self.config.max_hop > 0).then(|| {
            let mut lookups: Vec<(Var, Vec<u32>)> =
                e.local.iter().zip(&input.local).map(|(id, idx)| (t.param(*id), idx.clone())).collect();
            lookups.push((t.param(e.virtual_edge), input.virtual_edge.clone()));
            t.lookup_sum(lookups)
        });
        let global = (!self.config.mask_global).then(|| {
            let (mean, std) = (t.param(e.rbf_mean), t.param(e.rbf_std));
            t.rbf(mean, std, input.dists.clone())
        });
        (local, global)
    }

    fn head_biases(&self, t: &mut Tape, e: &EncoderIds, input: &GraphInput, opts: &EncodeOptions) -> Vec<Option<Var>> {
        let m = input.n + 1;
        let pairs = match self.bias_items(t, e, input) {
            (Some(l), Some(g)) => Some(t.add(l, g)),
            (l, g) => l.or(g),
        };
        (0..self.config.n_head)
            .map(|h| {
                let base = pairs.map(|p| t.column_to_square(p, h, m));
                match (&opts.extra_bias, base) {
                    (Some(extra), Some(b)) => {
                        let c = t.constant(extra[h].clone());
                        Some(t.add(b, c))
                    }
                    (Some(extra), None) => Some(t.constant(extra[h].clone())),
                    (None, b) => b,
                }
            })
            .collect()
    }

    /// Runs the encoder of `group` on the tape.
    pub fn encode_on(
        &self,
        t: &mut Tape,
        input: &GraphInput,
        reaction_type: Option<u8>,
        group: TaskGroup,
        opts: &EncodeOptions,
    ) -> Encoding {
        let e = self.encoder_for(group);
        let (d_k, heads) = (self.config.d_k, self.config.n_head);
        let scale = 1.0 / (d_k as f64).sqrt();
        let biases = self.head_biases(t, e, input, opts);
        let mut h = self.node_embedding(t, e, input, reaction_type);
        for layer in &e.layers {
            let (g1, b1) = (t.param(layer.ln1_g), t.param(layer.ln1_b));
            let x = t.layer_norm(h, g1, b1);
            let (wq, wk, wv) = (t.param(layer.wq), t.param(layer.wk), t.param(layer.wv));
            let q = t.matmul(x, wq);
            let k = t.matmul(x, wk);
            let v = t.matmul(x, wv);
            let mut outs = Vec::with_capacity(heads);
            for (head, bias) in biases.iter().enumerate() {
                let qh = t.slice_cols(q, head * d_k, d_k);
                let kh = t.slice_cols(k, head * d_k, d_k);
                let vh = t.slice_cols(v, head * d_k, d_k);
                let s = t.matmul_t(qh, kh);
                let mut s = t.scale(s, scale);
                if let Some(b) = bias {
                    s = t.add(s, *b);
                }
                let a = t.softmax_rows(s);
                outs.push(t.matmul(a, vh));
            }
            let o = t.concat_cols(&outs);
            let (wo, bo) = (t.param(layer.wo), t.param(layer.bo));
            let o = t.matmul(o, wo);
            let o = t.add_row(o, bo);
            h = t.add(h, o);
            let (g2, b2) = (t.param(layer.ln2_g), t.param(layer.ln2_b));
            let x = t.layer_norm(h, g2, b2);
            let (w1, bias1, w2, bias2) = (t.param(layer.w1), t.param(layer.b1), t.param(layer.w2), t.param(layer.b2));
            let f = t.matmul(x, w1);
            let f = t.add_row(f, bias1);
            let f = t.gelu(f);
            let f = t.matmul(f, w2);
            let f = t.add_row(f, bias2);
            h = t.add(h, f);
        }
        Encoding { reps: h, n: input.n }
    }

    /// Initial node matrix: atom rows, then the super node.
    pub fn embed_nodes(&self, input: &GraphInput, reaction_type: Option<u8>) -> Mat {
        let mut t = Tape::new(&self.params);
        let v = self.node_embedding(&mut t, self.encoder_for(TaskGroup::Rcp), input, reaction_type);
        t.value(v).clone()
    }

    /// Per-head attention bias, `(N+1)×(N+1)` each.
    pub fn attention_bias(&self, input: &GraphInput) -> Vec<Mat> {
        let (local, global) = self.bias_item_matrices(input);
        let m = input.n + 1;
        (0..self.config.n_head)
            .map(|h| {
                let mut b = local.as_ref().map_or_else(|| Mat::zeros(m, m), |l| l[h].clone());
                if let Some(g) = &global {
                    b.add_assign(&g[h]);
                }
                b
            })
            .collect()
    }

    /// Local and global bias items per head; `None` when masked.
    pub fn bias_item_matrices(&self, input: &GraphInput) -> (Option<Vec<Mat>>, Option<Vec<Mat>>) {
        let mut t = Tape::new(&self.params);
        let (local, global) = self.bias_items(&mut t, self.encoder_for(TaskGroup::Rcp), input);
        let m = input.n + 1;
        let split = |t: &mut Tape, v: Var| -> Vec<Mat> {
            (0..self.config.n_head)
                .map(|h| {
                    let sq = t.column_to_square(v, h, m);
                    t.value(sq).clone()
                })
                .collect()
        };
        let local = local.map(|v| split(&mut t, v));
        let global = global.map(|v| split(&mut t, v));
        (local, global)
    }

    /// Encodes one graph with the shared (reaction-center) encoder.
    pub fn encode(
        &self,
        input: &GraphInput,
        reaction_type: Option<u8>,
        opts: &EncodeOptions,
    ) -> Result<EncodedGraph, NumericsError> {
        let mut t = Tape::new(&self.params);
        let enc = self.encode_on(&mut t, input, reaction_type, TaskGroup::Rcp, opts);
        let reps = t.value(enc.reps);
        if !reps.is_finite() {
            return Err(NumericsError("encoder output".into()));
        }
        let d = self.config.d;
        let node_reps = Mat::from_vec(input.n, d, reps.data[..input.n * d].to_vec());
        let graph_rep = reps.row(input.n).to_vec();
        let mut bias = self.attention_bias(input);
        if let Some(extra) = &opts.extra_bias {
            for (b, e) in bias.iter_mut().zip(extra) {
                b.add_assign(e);
            }
        }
        Ok(EncodedGraph {
            node_reps,
            graph_rep,
            bias,
        })
    }
}
