//! Raw numeric kernels shared by the tape and by tape-free code paths.

/// `out += a·b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a·bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out += aᵀ·b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose_last2(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        let src = &x[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Exp,
    EluPlusOne,
    Sigmoid,
    Silu,
    Gelu,
    Softplus,
    Abs,
    Square,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    pub(crate) fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::EluPlusOne => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    pub(crate) fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::EluPlusOne => {
                if x > 0.0 {
                    1.0
                } else {
                    y
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

/// 2×2 mean pooling over the `H, W` axes of `[outer, H, W, D]`.
pub(crate) fn avg_pool2(x: &[f64], outer: usize, h: usize, w: usize, d: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; outer * ho * wo * d];
    for o in 0..outer {
        for i in 0..ho {
            for j in 0..wo {
                let dst = ((o * ho + i) * wo + j) * d;
                let r0 = ((o * h + 2 * i) * w + 2 * j) * d;
                let r1 = r0 + w * d;
                // pairwise so a constant block averages back exactly
                for c in 0..d {
                    out[dst + c] =
                        ((x[r0 + c] + x[r0 + d + c]) + (x[r1 + c] + x[r1 + d + c])) * 0.25;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling over `[outer, H, W, D]`.
pub(crate) fn upsample2(x: &[f64], outer: usize, h: usize, w: usize, d: usize) -> Vec<f64> {
    let (hu, wu) = (2 * h, 2 * w);
    let mut out = vec![0.0; outer * hu * wu * d];
    for o in 0..outer {
        for i in 0..hu {
            for j in 0..wu {
                let src = ((o * h + i / 2) * w + j / 2) * d;
                let dst = ((o * hu + i) * wu + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// Sum of each 2×2 block (adjoint of nearest upsampling).
pub(crate) fn block_sum2(g: &[f64], outer: usize, h: usize, w: usize, d: usize) -> Vec<f64> {
    let mut out = avg_pool2(g, outer, 2 * h, 2 * w, d);
    out.iter_mut().for_each(|v| *v *= 4.0);
    out
}

/// Depthwise correlation with zero padding: `[outer, H, W, D] ⋆ [kh, kw, D]`.
pub(crate) fn dwconv2(
    x: &[f64],
    k: &[f64],
    outer: usize,
    (h, w, d): (usize, usize, usize),
    (kh, kw): (usize, usize),
) -> Vec<f64> {
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..h {
            for j in 0..w {
                let dst = ((o * h + i) * w + j) * d;
                for a in 0..kh {
                    let ii = i as isize + a as isize - ch;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for b in 0..kw {
                        let jj = j as isize + b as isize - cw;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let src = ((o * h + ii as usize) * w + jj as usize) * d;
                        let kk = (a * kw + b) * d;
                        for c in 0..d {
                            out[dst + c] += k[kk + c] * x[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`dwconv2`] with respect to input and kernel.
pub(crate) fn dwconv2_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    outer: usize,
    (h, w, d): (usize, usize, usize),
    (kh, kw): (usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for o in 0..outer {
        for i in 0..h {
            for j in 0..w {
                let dst = ((o * h + i) * w + j) * d;
                for a in 0..kh {
                    let ii = i as isize + a as isize - ch;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for b in 0..kw {
                        let jj = j as isize + b as isize - cw;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let src = ((o * h + ii as usize) * w + jj as usize) * d;
                        let kk = (a * kw + b) * d;
                        for c in 0..d {
                            gx[src + c] += k[kk + c] * g[dst + c];
                            gk[kk + c] += x[src + c] * g[dst + c];
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_plus_one_is_positive() {
        let mut x = -100.0;
        while x <= 100.0 {
            assert!(Unary::EluPlusOne.eval(x) > 0.0, "not positive at {x}");
            x += 0.25;
        }
        assert_eq!(Unary::EluPlusOne.eval(0.0), 1.0);
    }

    #[test]
    fn pool_single_block() {
        let out = avg_pool2(&[0.0, 2.0, 4.0, 6.0], 1, 2, 2, 1);
        assert_eq!(out, vec![3.0]);
    }

    #[test]
    fn box_kernel_on_constant() {
        let (h, w) = (5, 4);
        let c = 1.5;
        let x = vec![c; h * w];
        let k = vec![1.0; 9];
        let out = dwconv2(&x, &k, 1, (h, w, 1), (3, 3));
        // direct summation oracle: count of in-bounds neighbours times c
        for i in 0..h {
            for j in 0..w {
                let mut n = 0;
                for di in -1i32..=1 {
                    for dj in -1i32..=1 {
                        let (a, b) = (i as i32 + di, j as i32 + dj);
                        if a >= 0 && a < h as i32 && b >= 0 && b < w as i32 {
                            n += 1;
                        }
                    }
                }
                assert_eq!(out[i * w + j], n as f64 * c);
            }
        }
        assert_eq!(out[1 * w + 1], 9.0 * c);
    }
}
