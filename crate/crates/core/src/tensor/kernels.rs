//! Raw buffer kernels shared by the graph's forward and backward passes.

use super::{numel, Float};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, len, inner) block extents.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        out.extend_from_slice(data);
        return out;
    }
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner_len]);
        } else {
            let mut off = base;
            for _ in 0..inner_len {
                out.push(data[off]);
                off += inner_stride;
            }
        }
        // advance the odometer over all but the innermost axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Same-rank broadcast: every axis must match or be 1 on one side.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(s)
        .map(|((&d, &o), st)| if d == o { st } else { 0 })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out_shape`.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let n = numel(out_shape);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_zip<T: Float>(
    a: &[T],
    ash: &[usize],
    b: &[T],
    bsh: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if ash == bsh {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(ash, out_shape);
    let sb = broadcast_strides(bsh, out_shape);
    let mut out = vec![T::zero(); numel(out_shape)];
    for_each_broadcast(out_shape, &sa, &sb, |i, ia, ib| out[i] = f(a[ia], b[ib]));
    out
}

/// Gradient helpers for broadcast binary ops: accumulates `g(out_i, a, b)`
/// into a buffer shaped like operand `which` (0 → a, 1 → b).
pub(crate) fn broadcast_grad<T: Float>(
    gy: &[T],
    a: &[T],
    ash: &[usize],
    b: &[T],
    bsh: &[usize],
    out_shape: &[usize],
    which: usize,
    g: impl Fn(T, T, T) -> T,
) -> Vec<T> {
    let target = if which == 0 { ash } else { bsh };
    if ash == bsh {
        return gy
            .iter()
            .zip(a.iter().zip(b))
            .map(|(&d, (&x, &y))| g(d, x, y))
            .collect();
    }
    let sa = broadcast_strides(ash, out_shape);
    let sb = broadcast_strides(bsh, out_shape);
    let mut out = vec![T::zero(); numel(target)];
    for_each_broadcast(out_shape, &sa, &sb, |i, ia, ib| {
        let v = g(gy[i], a[ia], b[ib]);
        if which == 0 {
            out[ia] += v;
        } else {
            out[ib] += v;
        }
    });
    out
}

/// Batched `c[bt] = op(a[bt]) · op(b[bt])` over contiguous `m×k`/`k×n` blocks.
/// `ta`/`tb` mark operands stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm<T: Float>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    let small = m * n * k < 4096;
    for bt in 0..batch {
        let ab = &a[bt * m * k..(bt + 1) * m * k];
        let bb = &b[bt * k * n..(bt + 1) * k * n];
        let cb = &mut c[bt * m * n..(bt + 1) * m * n];
        if small {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        let av = ab[(i as isize * rsa + p as isize * csa) as usize];
                        let bv = bb[(p as isize * rsb + j as isize * csb) as usize];
                        acc += av * bv;
                    }
                    let slot = &mut cb[i * n + j];
                    *slot = if accumulate { *slot + acc } else { acc };
                }
            }
        } else {
            // SAFETY: the slices above are exactly m·k, k·n and m·n long and the
            // strides address them in bounds.
            unsafe {
                T::gemm_raw(
                    m,
                    k,
                    n,
                    ab.as_ptr(),
                    rsa,
                    csa,
                    bb.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    cb.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
}
