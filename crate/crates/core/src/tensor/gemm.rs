//! Dense matrix products behind the convolution kernels.

/// Arithmetic used inside the convolution matrix products. Tensors always
/// store `f64`; `Single` rounds the operands to `f32` for the product only,
/// which roughly doubles throughput at the cost of ~1e-7 relative error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

/// `c (m×n) = op(a) (m×k) · op(b) (k×n)`, overwriting `c` or adding into
/// it. Operands are row-major; `*_t` means the buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    precision: Precision,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    match precision {
        Precision::Double => unsafe {
            // SAFETY: slice lengths checked above match the strides.
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Precision::Single => {
            let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            let mut c32 = vec![0f32; m * n];
            unsafe {
                // SAFETY: as above, on the converted copies.
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    rsa,
                    csa,
                    b32.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            if accumulate {
                c.iter_mut().zip(&c32).for_each(|(d, &s)| *d += f64::from(s));
            } else {
                c.iter_mut().zip(&c32).for_each(|(d, &s)| *d = f64::from(s));
            }
        }
    }
}
