use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Residual blocks in a plane encoder; each holds two 3x3 convolutions.
pub const PLANE_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapKind {
    /// Affine layers with ReLU between them; the last layer is linear.
    Mlp { widths: Vec<usize> },
    /// 1x1 input projection, residual 3x3 blocks, 1x1 output projection.
    PlaneEncoder { c_in: usize, hidden: usize, c_out: usize },
}

impl MapKind {
    pub fn param_count(&self) -> usize {
        match self {
            MapKind::Mlp { widths } => widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
            MapKind::PlaneEncoder { c_in, hidden, c_out } => {
                (c_in * hidden + hidden) + PLANE_BLOCKS * 2 * (hidden * hidden * 9 + hidden) + (hidden * c_out + c_out)
            }
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            MapKind::Mlp { widths } => {
                format!("mlp[{}]", widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","))
            }
            MapKind::PlaneEncoder { c_in, hidden, c_out } => format!("plane[{c_in},{hidden},{c_out}]"),
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            MapKind::Mlp { widths } => widths[0],
            MapKind::PlaneEncoder { c_in, .. } => *c_in,
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            MapKind::Mlp { widths } => *widths.last().unwrap(),
            MapKind::PlaneEncoder { c_out, .. } => *c_out,
        }
    }

    /// `(fan_in, fan_out, weight count, bias count)` of every weight layer in
    /// parameter order.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        match self {
            MapKind::Mlp { widths } => widths.windows(2).map(|w| (w[0], w[1], w[0] * w[1], w[1])).collect(),
            MapKind::PlaneEncoder { c_in, hidden, c_out } => {
                let mut v = vec![(*c_in, *hidden, c_in * hidden, *hidden)];
                for _ in 0..PLANE_BLOCKS * 2 {
                    v.push((hidden * 9, hidden * 9, hidden * hidden * 9, *hidden));
                }
                v.push((*hidden, *c_out, hidden * c_out, *c_out));
                v
            }
        }
    }
}

/// A learnable function with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableMap {
    pub kind: MapKind,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl LearnableMap {
    /// Glorot-uniform weights `U(-a, a)`, `a = √(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn init(kind: MapKind, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut params = Vec::with_capacity(kind.param_count());
        for (fan_in, fan_out, nw, nb) in kind.layers() {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..nw).map(|_| r.random_range(-a..a)));
            params.extend(std::iter::repeat_n(0.0, nb));
        }
        Self { kind, params, seed }
    }

    pub fn mlp(widths: &[usize], seed: u64) -> Self {
        Self::init(MapKind::Mlp { widths: widths.to_vec() }, seed)
    }

    pub fn plane_encoder(c_in: usize, hidden: usize, c_out: usize, seed: u64) -> Self {
        Self::init(MapKind::PlaneEncoder { c_in, hidden, c_out }, seed)
    }

    pub fn zeros(kind: MapKind) -> Self {
        let n = kind.param_count();
        Self { kind, params: vec![0.0; n], seed: 0 }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Records the map applied to `x` on `tape`; parameter gradients land at
    /// `offset..offset + param_count()`.
    pub fn forward_on(&self, tape: &mut Tape, x: NodeId, offset: usize) -> Result<NodeId> {
        match &self.kind {
            MapKind::Mlp { widths } => {
                let shape = &tape.value(x).shape;
                if shape.len() != 2 || shape[1] != widths[0] {
                    return Err(Error::shape(format!("[B, {}]", widths[0]), format!("{shape:?}")));
                }
                let mut h = x;
                let mut at = 0;
                let last = widths.len() - 2;
                for (l, w) in widths.windows(2).enumerate() {
                    let (din, dout) = (w[0], w[1]);
                    let wn = tape.param(&[din, dout], &self.params[at..at + din * dout], offset + at);
                    at += din * dout;
                    let bn = tape.param(&[dout], &self.params[at..at + dout], offset + at);
                    at += dout;
                    h = tape.matmul(h, wn)?;
                    h = tape.add_bias(h, bn)?;
                    if l != last {
                        h = tape.relu(h);
                    }
                }
                Ok(h)
            }
            MapKind::PlaneEncoder { c_in, hidden, c_out } => {
                let shape = tape.value(x).shape.clone();
                if shape.len() != 3 || shape[0] != *c_in {
                    return Err(Error::shape(format!("[{c_in}, H, W]"), format!("{shape:?}")));
                }
                if shape[1] < 4 || shape[2] < 4 {
                    return Err(Error::shape("spatial dims >= 4", format!("{shape:?}")));
                }
                let mut at = 0;
                let mut conv = |tape: &mut Tape, h: NodeId, cin: usize, cout: usize, k: usize| -> Result<NodeId> {
                    let nw = cout * cin * k * k;
                    let wn = tape.param(&[cout, cin * k * k], &self.params[at..at + nw], offset + at);
                    at += nw;
                    let bn = tape.param(&[cout], &self.params[at..at + cout], offset + at);
                    at += cout;
                    tape.conv2d(h, wn, bn, k)
                };
                let h0 = conv(tape, x, *c_in, *hidden, 1)?;
                let mut h = tape.relu(h0);
                for _ in 0..PLANE_BLOCKS {
                    let t = conv(tape, h, *hidden, *hidden, 3)?;
                    let t = tape.relu(t);
                    let t = conv(tape, t, *hidden, *hidden, 3)?;
                    h = tape.add(h, t)?;
                }
                conv(tape, h, *hidden, *c_out, 1)
            }
        }
    }

    /// Untaped evaluation.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let out = self.forward_on(&mut tape, xi, 0)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts_follow_widths() {
        assert_eq!(MapKind::Mlp { widths: vec![3, 4, 2] }.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        let k = MapKind::PlaneEncoder { c_in: 5, hidden: 4, c_out: 3 };
        assert_eq!(k.param_count(), 5 * 4 + 4 + 6 * (4 * 4 * 9 + 4) + 4 * 3 + 3);
        assert_eq!(LearnableMap::init(k.clone(), 1).params.len(), k.param_count());
    }

    #[test]
    fn zero_mlp_gives_zero() {
        let m = LearnableMap::zeros(MapKind::Mlp { widths: vec![3, 8, 2] });
        let x = Tensor::from_rows(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).unwrap();
        assert!(m.forward(&x).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_affine_layer() {
        let mut m = LearnableMap::zeros(MapKind::Mlp { widths: vec![3, 3] });
        for i in 0..3 {
            m.params[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_rows(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn mlp_matches_dense_oracle() {
        let m = LearnableMap::mlp(&[3, 5, 2], 42);
        let x = Tensor::from_rows(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let got = m.forward(&x).unwrap();
        let p = &m.params;
        let (w1, b1) = (&p[0..15], &p[15..20]);
        let (w2, b2) = (&p[20..30], &p[30..32]);
        for r in 0..4 {
            let xr = x.row(r);
            let h: Vec<f64> =
                (0..5).map(|j| (b1[j] + (0..3).map(|i| xr[i] * w1[i * 5 + j]).sum::<f64>()).max(0.0)).collect();
            for k in 0..2 {
                let o = b2[k] + (0..5).map(|j| h[j] * w2[j * 2 + k]).sum::<f64>();
                assert!((o - got.row(r)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_shape_error_names_sizes() {
        let m = LearnableMap::mlp(&[3, 2], 1);
        let err = m.forward(&Tensor::zeros(&[2, 4])).unwrap_err().to_string();
        assert!(err.contains("[B, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn plane_encoder_shapes_and_zero() {
        let m = LearnableMap::zeros(MapKind::PlaneEncoder { c_in: 2, hidden: 3, c_out: 4 });
        let out = m.forward(&Tensor::zeros(&[2, 5, 6])).unwrap();
        assert_eq!(out.shape, vec![4, 5, 6]);
        assert!(out.data.iter().all(|&v| v == 0.0));
        assert!(m.forward(&Tensor::zeros(&[2, 3, 6])).is_err());
        assert!(m.forward(&Tensor::zeros(&[3, 5, 6])).is_err());
    }

    #[test]
    fn plane_encoder_output_width() {
        let m = LearnableMap::plane_encoder(257, 8, 128, 3);
        let out = m.forward(&Tensor::zeros(&[257, 64, 64])).unwrap();
        assert_eq!(out.shape, vec![128, 64, 64]);
    }

    #[test]
    fn plane_encoder_with_idle_blocks_is_pixelwise_mlp() {
        let (c_in, hidden, c_out) = (3, 4, 2);
        let mut m = LearnableMap::plane_encoder(c_in, hidden, c_out, 8);
        let in_len = c_in * hidden + hidden;
        let block_len = PLANE_BLOCKS * 2 * (hidden * hidden * 9 + hidden);
        m.params[in_len..in_len + block_len].fill(0.0);
        // Oracle MLP: conv weights are [cout, cin]; MLP weights are [din, dout].
        let mut mlp = LearnableMap::zeros(MapKind::Mlp { widths: vec![c_in, hidden, c_out] });
        let (w_in, b_in) = (&m.params[..c_in * hidden], &m.params[c_in * hidden..in_len]);
        let tail = &m.params[in_len + block_len..];
        let (w_out, b_out) = (&tail[..hidden * c_out], &tail[hidden * c_out..]);
        for o in 0..hidden {
            for i in 0..c_in {
                mlp.params[i * hidden + o] = w_in[o * c_in + i];
            }
        }
        mlp.params[c_in * hidden..in_len].copy_from_slice(b_in);
        let off = in_len;
        for o in 0..c_out {
            for i in 0..hidden {
                mlp.params[off + i * c_out + o] = w_out[o * hidden + i];
            }
        }
        mlp.params[off + hidden * c_out..].copy_from_slice(b_out);

        let (h, w) = (5, 4);
        let x = Tensor::new(vec![c_in, h, w], (0..c_in * h * w).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let out = m.forward(&x).unwrap();
        for px in 0..h * w {
            let pix: Vec<f64> = (0..c_in).map(|c| x.data[c * h * w + px]).collect();
            let y = mlp.forward(&Tensor::from_rows(1, c_in, pix).unwrap()).unwrap();
            for c in 0..c_out {
                assert!((y.data[c] - out.data[c * h * w + px]).abs() < 1e-12);
            }
        }
    }
}
