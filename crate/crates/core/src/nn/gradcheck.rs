//! Central finite-difference checks of tape gradients.

use rand::Rng as _;

use crate::error::Result;
use crate::rng;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;
/// Maximum accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Gradient magnitude below which errors are measured absolutely; keeps
/// cancellation noise in `(f(p+h) - f(p-h)) / 2h` from dominating near-zero
/// gradients.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, GRAD_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub worst: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Checked entries whose difference quotient exceeds [`GRAD_FLOOR`].
    pub significant: usize,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.worst < GRAD_TOLERANCE
    }
}

/// Compares the tape gradient of the scalar built by `build(tape, params)`
/// with central differences at each of `indices`.
pub fn check_gradients<F>(params: &[f64], indices: &[usize], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[f64]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let analytic = tape.backward(loss, params.len())?.params;
    let eval = |p: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, p)?;
        Ok(t.value(l).item())
    };
    let mut p = params.to_vec();
    let mut out = GradCheck { worst: 0.0, worst_index: 0, checked: 0, significant: 0 };
    for &i in indices {
        let x = p[i];
        p[i] = x + h;
        let up = eval(&p)?;
        p[i] = x - h;
        let down = eval(&p)?;
        p[i] = x;
        let fd = (up - down) / (2.0 * h);
        let e = relative_error(analytic[i], fd);
        out.significant += (fd.abs() > GRAD_FLOOR) as usize;
        if e > out.worst || out.checked == 0 {
            out.worst = e;
            out.worst_index = i;
        }
        out.checked += 1;
    }
    Ok(out)
}

/// `n` distinct indices below `len` (all of them when `n >= len`).
pub fn random_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::seeded(seed);
    rand::seq::index::sample(&mut r, len, n.min(len)).into_vec()
}

/// Reduces any node to a scalar through a fixed random linear readout, so
/// every output entry carries a distinct weight.
pub fn random_readout(tape: &mut Tape, x: NodeId, seed: u64) -> Result<NodeId> {
    let n = tape.value(x).len();
    let flat = tape.reshape(x, &[1, n])?;
    let mut r = rng::seeded(seed);
    let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let wn = tape.input(Tensor::from_rows(n, 1, w)?);
    let y = tape.matmul(flat, wn)?;
    Ok(tape.mean(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BilinearTaps, LearnableMap, MapKind};

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check_map(kind: MapKind, input: Tensor, seed: u64) -> GradCheck {
        let map = LearnableMap::init(kind, seed);
        let idx = random_indices(map.param_count(), 20, seed + 1);
        check_gradients(&map.params, &idx, FD_STEP, |tape, p| {
            let mut m = map.clone();
            m.params = p.to_vec();
            let x = tape.input(input.clone());
            let y = m.forward_on(tape, x, 0)?;
            random_readout(tape, y, seed + 2)
        })
        .unwrap()
    }

    #[test]
    fn mlp_gradients_match_differences() {
        let kind = MapKind::Mlp { widths: vec![5, 7, 6, 3] };
        let res = check_map(kind, random_tensor(&[9, 5], 3), 11);
        assert_eq!(res.checked, 20);
        assert!(res.passes(), "{res:?}");
    }

    #[test]
    fn plane_encoder_gradients_match_differences() {
        let kind = MapKind::PlaneEncoder { c_in: 3, hidden: 4, c_out: 2 };
        let res = check_map(kind, random_tensor(&[3, 5, 6], 4), 12);
        assert!(res.passes(), "{res:?}");
    }

    #[test]
    fn structural_ops_match_differences() {
        // One graph touching every remaining op: parameters feed a plane that
        // is sampled, gathered, pooled, concatenated, sliced and scored.
        let n = 2 * 4 * 4 + 6 * 2 + 2 * 3;
        let params = random_tensor(&[n], 5).data;
        let taps: Vec<BilinearTaps> = vec![
            [(0, 0.1), (1, 0.2), (4, 0.3), (5, 0.4)],
            [(6, 0.5), (7, 0.25), (10, 0.125), (11, 0.125)],
            [(15, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)],
        ];
        let idx: Vec<usize> = (0..n).collect();
        let res = check_gradients(&params, &idx, FD_STEP, |tape, p| {
            let plane = tape.param(&[2, 4, 4], &p[..32], 0);
            let feat = tape.bilinear(plane, taps.clone())?;
            let extra = tape.param(&[6, 2], &p[32..44], 32);
            let rows = tape.concat_rows(&[feat, extra])?;
            let picked = tape.gather_rows(rows, &[0, 2, 4, 4, 8, 1])?;
            let pooled = tape.segment_max(picked, &[0, 1, 1, 0, 2, 2], 3)?;
            let tr = tape.transpose(pooled)?;
            let back = tape.transpose(tr)?;
            let w = tape.param(&[2, 3], &p[44..50], 44);
            let lin = tape.matmul(back, w)?;
            let both = tape.concat_cols(&[lin, pooled])?;
            let sl = tape.slice_cols(both, 1, 3)?;
            let b = tape.input(Tensor::new(vec![3], vec![0.1, -0.2, 0.3])?);
            let sb = tape.add_bias(sl, b)?;
            let sum = tape.add(sb, sl)?;
            let scaled = tape.scale(sum, 0.7);
            let p1 = tape.sigmoid(scaled);
            let r = tape.relu(scaled);
            let bce = tape.bce(p1, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0])?;
            let target = [0.5, -0.3, 2.5, 0.0, 0.1, -2.0, 0.9, 0.2, 0.0];
            let mask = [true, true, true, false, true, true, true, true, true];
            let sl1 = tape.smooth_l1(r, &target, Some(&mask))?;
            let ro = random_readout(tape, scaled, 9)?;
            tape.weighted_sum(&[(bce, 1.5), (sl1, 2.0), (ro, 0.5)])
        })
        .unwrap();
        assert!(res.passes(), "{res:?}");
    }

    #[test]
    fn checker_catches_a_wrong_gradient() {
        // The second copy of `p` enters untracked, so the tape sees half of
        // the true gradient.
        let params = vec![0.3, -0.4];
        let res = check_gradients(&params, &[0, 1], FD_STEP, |tape, p| {
            let x = tape.param(&[2], p, 0);
            let y = tape.input(Tensor::new(vec![2], p.to_vec())?);
            let s = tape.add(x, y)?;
            Ok(tape.mean(s))
        })
        .unwrap();
        assert!(!res.passes());
        assert!((res.worst - 0.5).abs() < 1e-6);
    }

    #[test]
    fn relative_error_floors_small_gradients() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-9, 2e-9) < 1e-4);
    }
}
