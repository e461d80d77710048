//! Parameterized layers shared by the networks: dense layers, MLPs and
//! rulebook convolutions. Each layer only remembers its parameter ids; the
//! values live in a [`ParamStore`].

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Rulebook, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Glorot,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, t: &mut Tape, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => t.relu(x),
            Activation::LeakyRelu(s) => t.leaky_relu(x, s),
        }
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, cin: usize, cout: usize, init: Init, rng: &mut impl Rng) -> Result<Self> {
        let w = match init {
            Init::Glorot => store.register_glorot(&format!("{name}.w"), &[cin, cout], cin, cout, rng)?,
            Init::Zeros => store.register_zeros(&format!("{name}.w"), &[cin, cout])?,
        };
        let b = store.register_zeros(&format!("{name}.b"), &[cout])?;
        Ok(Linear { w, b, cin, cout })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let y = t.matmul(x, w)?;
        t.add_row(y, b)
    }
}

/// Dense layers with a shared hidden activation and none on the output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn register(store: &mut ParamStore, name: &str, dims: &[usize], hidden: Activation, rng: &mut impl Rng) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, d)| Linear::register(store, &format!("{name}.{l}"), d[0], d[1], Init::Glorot, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, hidden })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            x = layer.forward(t, store, x)?;
            if l < last {
                x = self.hidden.apply(t, x);
            }
        }
        Ok(x)
    }
}

/// Convolution whose geometry comes from a rulebook at call time.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub taps: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        taps: usize,
        cin: usize,
        cout: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let wname = format!("{name}.w");
        let w = match init {
            Init::Glorot => store.register_glorot(&wname, &[taps, cin, cout], taps * cin, taps * cout, rng)?,
            Init::Zeros => store.register(&wname, &[taps, cin, cout], Tensor::zeros(taps * cin, cout))?,
        };
        let b = store.register_zeros(&format!("{name}.b"), &[cout])?;
        Ok(Conv { w, b, taps, cin, cout })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, rb: &Arc<Rulebook>) -> Result<Var> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let y = t.conv(x, w, rb.clone())?;
        t.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let l = Linear::register(&mut s, "l", 10, 6, Init::Glorot, &mut rng).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(s.value(l.w).data().iter().all(|v| v.abs() <= bound));
        assert!(s.value(l.w).max_abs() > 0.0);
        assert!(s.value(l.b).data().iter().all(|&v| v == 0.0));
        assert_eq!(s.dims(l.w), &[10, 6]);
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let m = Mlp::register(&mut s, "m", &[4, 8, 2], Activation::Relu, &mut rng).unwrap();
        for id in s.ids().collect::<Vec<_>>() {
            s.value_mut(id).fill(0.0);
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(3, 4, 1.0));
        let y = m.forward(&mut t, &s, x).unwrap();
        assert_eq!(t.value(y), &Tensor::zeros(3, 2));
    }
}
