//! Translation-equivariant CNN decoders operating on `[B, C, M]` grids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Output features per grid cell.
pub const DECODER_OUT: usize = 8;
const KERNEL: usize = 5;
const PAD: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Pointwise lift to 8 channels, then 8→16→16→16→16→8.
    Shallow,
    /// Twelve-layer U-Net with skip connections, at full resolution.
    Deep,
}

const SHALLOW: [(usize, usize); 5] = [(8, 16), (16, 16), (16, 16), (16, 16), (16, 8)];

// (c_in, c_out) for layers 1..=12; layers 8..12 read concatenated skips
const DEEP: [(usize, usize); 12] = [
    (8, 8),
    (8, 16),
    (16, 16),
    (16, 32),
    (32, 32),
    (32, 64),
    (64, 32),
    (64, 32),
    (64, 16),
    (32, 16),
    (32, 8),
    (16, 8),
];

// layer index (1-based) -> the earlier layer whose output is concatenated in front
const SKIPS: [(usize, usize); 5] = [(8, 5), (9, 4), (10, 3), (11, 2), (12, 1)];

pub fn init_decoder<F: Scalar, R: Rng + ?Sized>(kind: DecoderKind, in_channels: usize, store: &mut ParamStore<F>, rng: &mut R) {
    store.init_conv("dec.lift", in_channels, 8, 1, rng);
    match kind {
        DecoderKind::Shallow => {
            for (i, &(ci, co)) in SHALLOW.iter().enumerate() {
                store.init_conv(&format!("dec.{i}"), ci, co, KERNEL, rng);
            }
        }
        DecoderKind::Deep => {
            for (i, &(ci, co)) in DEEP.iter().enumerate() {
                store.init_conv(&format!("dec.l{}", i + 1), ci, co, KERNEL, rng);
            }
        }
    }
}

/// `[B, C_in, M] → [B, 8, M]`; ReLU between layers, none after the last.
pub fn decoder_forward<'t, F: Scalar>(kind: DecoderKind, params: &Bound<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
    let h = params.conv("dec.lift", x, 0)?;
    match kind {
        DecoderKind::Shallow => {
            let mut h = h;
            for i in 0..SHALLOW.len() {
                h = params.conv(&format!("dec.{i}"), h, PAD)?;
                if i + 1 < SHALLOW.len() {
                    h = h.relu();
                }
            }
            Ok(h)
        }
        DecoderKind::Deep => {
            let mut outs: Vec<Var<'t, F>> = Vec::with_capacity(12);
            let mut h = h;
            for layer in 1..=12 {
                let input = match SKIPS.iter().find(|(l, _)| *l == layer) {
                    Some(&(_, from)) => Var::concat(&[outs[from - 1], h], 1)?,
                    None => h,
                };
                h = params.conv(&format!("dec.l{layer}"), input, PAD)?;
                if layer < 12 {
                    h = h.relu();
                }
                outs.push(h);
            }
            Ok(h)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{normal_vec, rng_from_seed};
    use crate::tensor::{Tape, Tensor};

    fn run(kind: DecoderKind, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let tape = Tape::new();
        let b = store.bind(&tape);
        decoder_forward(kind, &b, tape.constant(x.clone())).unwrap().value()
    }

    #[test]
    fn shapes_and_zero_init() {
        for kind in [DecoderKind::Shallow, DecoderKind::Deep] {
            let mut store = ParamStore::new();
            init_decoder(kind, 2, &mut store, &mut rng_from_seed(1));
            let x = Tensor::new(vec![3, 2, 40], normal_vec(&mut rng_from_seed(2), 240)).unwrap();
            let y = run(kind, &store, &x);
            assert_eq!(y.shape(), &[3, 8, 40]);
            assert_eq!(y, run(kind, &store, &x));
            let names: Vec<String> = store.names().map(String::from).collect();
            for n in names {
                let t = store.get_mut(&n).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                if n.ends_with(".b") {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.5);
                }
            }
            let last_bias = 0.5;
            assert!(run(kind, &store, &x).data().iter().all(|&v| v == last_bias));
        }
    }

    #[test]
    fn shift_equivariance_on_interior() {
        for kind in [DecoderKind::Shallow, DecoderKind::Deep] {
            let mut store = ParamStore::new();
            init_decoder(kind, 2, &mut store, &mut rng_from_seed(3));
            let base = normal_vec::<f64, _>(&mut rng_from_seed(4), 2 * 160);
            let s = 7;
            let x = Tensor::new(vec![1, 2, 150], (0..2).flat_map(|c| base[c * 160..c * 160 + 150].to_vec()).collect()).unwrap();
            let xs = Tensor::new(vec![1, 2, 150], (0..2).flat_map(|c| base[c * 160 + s..c * 160 + s + 150].to_vec()).collect()).unwrap();
            let (y, ys) = (run(kind, &store, &x), run(kind, &store, &xs));
            let reach = 2 * 12 + 2;
            for c in 0..8 {
                for m in reach + s..150 - reach {
                    let a = y.data()[c * 150 + m];
                    let b = ys.data()[c * 150 + m - s];
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }
}
