use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Multi-layer perceptron with SiLU between layers and a linear output.
///
/// Layer `k` owns `{prefix}.w{k}` (`in x out`) and `{prefix}.b{k}` (`1 x out`).
/// Two `Mlp`s built with the same prefix share parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    widths: Vec<usize>,
    output_gain: f64,
}

impl Mlp {
    /// `widths` lists the input width followed by each layer's output width.
    pub fn new(prefix: impl Into<String>, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        Self {
            prefix: prefix.into(),
            widths: widths.to_vec(),
            output_gain: 1.0,
        }
    }

    /// Scales the init range of the last layer. Coordinate-weight MLPs use a
    /// small gain so that stacked layers start close to the identity map.
    pub fn with_output_gain(mut self, gain: f64) -> Self {
        self.output_gain = gain;
        self
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Output width of layer `k`.
    pub fn layer_width(&self, k: usize) -> usize {
        self.widths[k + 1]
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(&self, k: usize) -> String {
        format!("{}.w{}", self.prefix, k)
    }

    pub fn bias_name(&self, k: usize) -> String {
        format!("{}.b{}", self.prefix, k)
    }

    /// Glorot-uniform weights (times the output gain on the last layer), zero biases. Each weight matrix draws from its
    /// own stream derived from `seed` and its name.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for k in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.widths[k], self.widths[k + 1]);
            let name = self.weight_name(k);
            let gain = if k + 1 == self.num_layers() { self.output_gain } else { 1.0 };
            let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut r = rng::rng(rng::derive(seed, rng::hash_str(&name)));
            let data = (0..fan_in * fan_out).map(|_| r.random_range(-a..a)).collect();
            store.insert(&name, Tensor::new(fan_in, fan_out, data).expect("sized"));
            store.insert(&self.bias_name(k), Tensor::zeros(1, fan_out));
        }
    }

    /// Finishes a forward pass given the first layer's affine output
    /// (`x W0 + b0`), computed by the caller in some cheaper factored form.
    pub fn forward_tail(&self, tape: &mut Tape, store: &ParamStore, first: Var) -> Result<Var> {
        let mut h = first;
        for k in 1..self.num_layers() {
            h = tape.silu(h)?;
            let w = tape.param(store, &self.weight_name(k))?;
            let b = tape.param(store, &self.bias_name(k))?;
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.shape(x)[1] != self.input_width() {
            return Err(Error::Shape {
                op: "mlp",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.input_width()],
            });
        }
        let mut h = x;
        for k in 0..self.num_layers() {
            let w = tape.param(store, &self.weight_name(k))?;
            let b = tape.param(store, &self.bias_name(k))?;
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if k + 1 < self.num_layers() {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_width_and_registration() {
        let mlp = Mlp::new("phi", &[4, 8, 3]);
        let mut store = ParamStore::new();
        mlp.init(&mut store, 1);
        assert_eq!(
            store.names().collect::<Vec<_>>(),
            ["phi.b0", "phi.b1", "phi.w0", "phi.w1"]
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(5, 4, 0.5)).unwrap();
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[5, 3]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mlp = Mlp::new("m", &[10, 6]);
        let (mut a, mut b) = (ParamStore::new(), ParamStore::new());
        mlp.init(&mut a, 7);
        mlp.init(&mut b, 7);
        assert_eq!(a, b);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(a.value("m.w0").unwrap().max_abs() < bound);
        assert!(a.value("m.b0").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let mlp = Mlp::new("m", &[3, 2]);
        let mut store = ParamStore::new();
        mlp.init(&mut store, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 4)).unwrap();
        assert!(matches!(
            mlp.forward(&mut tape, &store, x),
            Err(Error::Shape { op: "mlp", .. })
        ));
    }
}
