//! Per-sample compute kernels. Every function works on one item laid out
//! channel-major (`C × H × W`) and accumulates parameter gradients in place.

/// Valid output index range for a tap offset `d ∈ {-1, 0, 1}` over length `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n - 1 } else { n };
    (lo, hi)
}

/// Unfolds a `C × H × W` item into a `(C·9) × (H·W)` patch matrix (zero padding).
fn im2col(input: &[f64], c_in: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    col.fill(0.0);
    for i in 0..c_in {
        let plane = &input[i * hw..(i + 1) * hw];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = tap_range(dy, h);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x0, x1) = tap_range(dx, w);
                let row = &mut col[(i * 9 + ky * 3 + kx) * hw..(i * 9 + ky * 3 + kx + 1) * hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch-matrix gradients back onto the item.
fn col2im(col: &[f64], c_in: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    out.fill(0.0);
    for i in 0..c_in {
        let plane = &mut out[i * hw..(i + 1) * hw];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = tap_range(dy, h);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x0, x1) = tap_range(dx, w);
                let row = &col[(i * 9 + ky * 3 + kx) * hw..(i * 9 + ky * 3 + kx + 1) * hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `C = alpha·A·B + beta·C` over row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let hw = h * w;
    let k = c_in * 9;
    let c_out = bias.len();
    let mut col = vec![0.0; k * hw];
    im2col(input, c_in, h, w, &mut col);
    for (o, plane) in out[..c_out * hw].chunks_mut(hw).enumerate() {
        plane.fill(bias[o]);
    }
    gemm(c_out, k, hw, weight, (k, 1), &col, (hw, 1), 1.0, out);
}

/// Writes the input gradient; accumulates into `grad_weight` and `grad_bias`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    grad_in: &mut [f64],
) {
    let hw = h * w;
    let k = c_in * 9;
    let c_out = grad_bias.len();
    for (o, plane) in grad_out[..c_out * hw].chunks(hw).enumerate() {
        grad_bias[o] += plane.iter().sum::<f64>();
    }
    let mut col = vec![0.0; k * hw];
    im2col(input, c_in, h, w, &mut col);
    // dW += G · colᵀ
    gemm(c_out, hw, k, grad_out, (hw, 1), &col, (1, hw), 1.0, grad_weight);
    // dcol = Wᵀ · G
    gemm(k, c_out, hw, weight, (1, k), grad_out, (hw, 1), 0.0, &mut col);
    col2im(&col, c_in, h, w, grad_in);
}

pub(crate) fn maxpool2_forward(input: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                out[ch * oh * ow + y * ow + x] = plane[pool_argmax(plane, w, y, x)];
            }
        }
    }
}

/// Index of the window maximum; ties go to the first element in row-major order.
#[inline]
fn pool_argmax(plane: &[f64], w: usize, y: usize, x: usize) -> usize {
    let candidates = [
        2 * y * w + 2 * x,
        2 * y * w + 2 * x + 1,
        (2 * y + 1) * w + 2 * x,
        (2 * y + 1) * w + 2 * x + 1,
    ];
    let mut best = candidates[0];
    for &idx in &candidates[1..] {
        if plane[idx] > plane[best] {
            best = idx;
        }
    }
    best
}

pub(crate) fn maxpool2_backward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let (oh, ow) = (h / 2, w / 2);
    grad_in.fill(0.0);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let idx = pool_argmax(plane, w, y, x);
                grad_in[ch * h * w + idx] += grad_out[ch * oh * ow + y * ow + x];
            }
        }
    }
}

pub(crate) fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let in_dim = input.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        *slot = bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub(crate) fn dense_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    grad_in: &mut [f64],
) {
    let in_dim = input.len();
    grad_in.fill(0.0);
    for (o, &g) in grad_out.iter().enumerate() {
        grad_bias[o] += g;
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        let grow = &mut grad_weight[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            grow[i] += g * input[i];
            grad_in[i] += row[i] * g;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
