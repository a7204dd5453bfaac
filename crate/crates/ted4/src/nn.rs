//! Small fully connected networks with tanh hidden layers.
//!
//! The same parameters drive two forward paths: a tape path used during
//! training and a plain path used for coding and decoding. Both call into
//! the same matrix kernel so encoder and decoder arithmetic is identical.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{LeafBinding, ParamGroup, ParamId, ParamStore};
use crate::tape::{matmul_raw, Id, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    /// (weight, bias) parameter per layer; weight is (in, out), bias (1, out).
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Mlp {
        assert!(dims.len() >= 2);
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let wid = store.add(format!("{prefix}.w{l}"), (fan_in, fan_out), w, group);
            let bid = store.add(
                format!("{prefix}.b{l}"),
                (1, fan_out),
                vec![0.0; fan_out],
                group,
            );
            layers.push((wid, bid));
        }
        Mlp { dims: dims.to_vec(), layers }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Tape forward for a (batch, in) input. Hidden layers tanh, output linear.
    pub fn forward_tape(&self, tape: &mut Tape, binding: &LeafBinding, x: Id) -> Id {
        let mut h = x;
        for (l, (wid, bid)) in self.layers.iter().enumerate() {
            let w = binding.leaf(*wid);
            let b = binding.leaf(*bid);
            h = tape.matmul(h, w);
            h = tape.add_row(h, b);
            if l + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Plain forward for a (batch, in) row-major input.
    pub fn forward_plain(&self, store: &ParamStore, x: &[f64], batch: usize) -> Vec<f64> {
        assert_eq!(x.len(), batch * self.input_dim());
        let mut h = x.to_vec();
        let mut h_cols = self.input_dim();
        for (l, (wid, bid)) in self.layers.iter().enumerate() {
            let w = store.get(*wid);
            let b = store.get(*bid);
            let out_cols = w.shape.1;
            let mut y = matmul_raw(&h, &w.data, batch, h_cols, out_cols);
            for i in 0..batch {
                for j in 0..out_cols {
                    y[i * out_cols + j] += b.data[j];
                }
            }
            if l + 1 < self.layers.len() {
                for v in &mut y {
                    *v = v.tanh();
                }
            }
            h = y;
            h_cols = out_cols;
        }
        h
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, _)| self.dims[l] * self.dims[l + 1] + self.dims[l + 1])
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plain_and_tape_forward_agree() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::new(&mut store, "t", &[4, 8, 3], ParamGroup::Nets, &mut rng);
        let x: Vec<f64> = (0..8).map(|i| (i as f64) * 0.17 - 0.5).collect();

        let plain = mlp.forward_plain(&store, &x, 2);

        let mut tape = Tape::new();
        let binding = store.bind_all(&mut tape);
        let xid = tape.constant(x.clone(), (2, 4));
        let out = mlp.forward_tape(&mut tape, &binding, xid);
        assert_eq!(tape.value(out), &plain[..]);
    }

    #[test]
    fn single_linear_layer_matches_hand_product() {
        // One layer, no hidden activation: y = x W + b.
        let mut store = ParamStore::new();
        let w = store.add("m.w0", (2, 2), vec![1.0, 2.0, 3.0, 4.0], ParamGroup::Nets);
        let b = store.add("m.b0", (1, 2), vec![0.5, -0.5], ParamGroup::Nets);
        let mlp = Mlp { dims: vec![2, 2], layers: vec![(w, b)] };
        let y = mlp.forward_plain(&store, &[1.0, 1.0], 1);
        assert_eq!(y, vec![4.5, 5.5]);
    }

    #[test]
    fn hidden_layer_matches_hand_computed_tanh() {
        // 1 -> 2 -> 1 with fixed weights, compared against explicit arithmetic.
        let mut store = ParamStore::new();
        let w0 = store.add("m.w0", (1, 2), vec![0.3, -0.8], ParamGroup::Nets);
        let b0 = store.add("m.b0", (1, 2), vec![0.1, 0.2], ParamGroup::Nets);
        let w1 = store.add("m.w1", (2, 1), vec![1.5, -0.4], ParamGroup::Nets);
        let b1 = store.add("m.b1", (1, 1), vec![0.05], ParamGroup::Nets);
        let mlp = Mlp { dims: vec![1, 2, 1], layers: vec![(w0, b0), (w1, b1)] };
        let x = 0.7;
        let h0 = (0.3 * x + 0.1_f64).tanh();
        let h1 = (-0.8 * x + 0.2_f64).tanh();
        let expected = 1.5 * h0 - 0.4 * h1 + 0.05;
        let y = mlp.forward_plain(&store, &[x], 1);
        assert!((y[0] - expected).abs() < 1e-15);
    }
}
