//! Small building blocks shared by the networks: linear layers, two-layer
//! MLPs, and a parameter-visitation trait the optimizer and checkpoints
//! drive by name.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Uniform treatment of trainable parameters. Implementations must visit
/// parameters in a fixed order with stable names.
pub trait Params {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_parameters(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, p| out.push((name, p.clone())));
        out
    }

    fn clear_grads(&mut self) {
        self.visit_params("", &mut |_, p| p.clear_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.numel());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Dense layer `y = x W + b` with weight shape `[fan_in, fan_out]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let std = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| gaussian(rng) * std).collect();
        Linear {
            weight: Tensor::param(w, &[fan_in, fan_out]).expect("shape matches data"),
            bias: bias.then(|| Tensor::param(vec![0.0; fan_out], &[fan_out]).unwrap()),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let y = tape.matmul(x, &self.weight)?;
        match &self.bias {
            Some(b) => tape.add(&y, b),
            None => Ok(y),
        }
    }
}

impl Params for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "w"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "b"), b);
        }
    }
}

/// Two dense layers with SiLU in between.
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Mlp2 {
        Mlp2 {
            l1: Linear::init(rng, d_in, d_hidden, true),
            l2: Linear::init(rng, d_hidden, d_out, true),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.forward(tape, x)?;
        let h = tape.silu(&h);
        self.l2.forward(tape, &h)
    }

    /// Forward with dropout on the hidden activation.
    pub fn forward_dropout(&self, tape: &Tape, x: &Tensor, rate: f64) -> Result<Tensor> {
        let h = self.l1.forward(tape, x)?;
        let h = tape.silu(&h);
        let h = tape.dropout(&h, rate)?;
        self.l2.forward(tape, &h)
    }
}

impl Params for Mlp2 {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.l1.visit_params(&join(prefix, "l1"), f);
        self.l2.visit_params(&join(prefix, "l2"), f);
    }
}

/// Standard normal via Box-Muller; keeps `rand` usage version-stable.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_forward_shapes_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::init(&mut rng, 3, 5, true);
        let tape = Tape::eval();
        let x = Tensor::zeros(&[4, 3]);
        let y = lin.forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), &[4, 5]);
        assert_eq!(y.to_vec(), vec![0.0; 20]); // zero bias init
    }

    #[test]
    fn visit_order_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp2::init(&mut rng, 2, 3, 1);
        let names: Vec<String> = mlp.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["l1.w", "l1.b", "l2.w", "l2.b"]);
    }
}
