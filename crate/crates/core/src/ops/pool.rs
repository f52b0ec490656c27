use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Scalar, Tensor};

fn windows(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<(usize, usize)> {
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(config_err!(
            "cannot pool {h}x{w} down to {out_h}x{out_w}"
        ));
    }
    if h % out_h != 0 || w % out_w != 0 {
        return Err(config_err!(
            "pooling windows must tile exactly: {h}x{w} is not a multiple of {out_h}x{out_w}"
        ));
    }
    Ok((h / out_h, w / out_w))
}

/// Average pooling of N×C×H×W down to N×C×out_h×out_w over equal,
/// non-overlapping windows.
pub fn adaptive_avg_pool<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (wh, ww) = windows(h, w, out_h, out_w)?;
    let norm = T::from_f64_lossy(1.0 / (wh * ww) as f64);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = T::zero();
                for y in oy * wh..(oy + 1) * wh {
                    for v in &plane[y * w + ox * ww..y * w + (ox + 1) * ww] {
                        acc = acc + *v;
                    }
                }
                dst[oy * out_w + ox] = acc * norm;
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)?.finite("adaptive_avg_pool")
}

/// Spreads each pooled gradient uniformly over its window.
pub fn adaptive_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, out_h, out_w) = grad_out.dims4()?;
    let (wh, ww) = windows(in_h, in_w, out_h, out_w)?;
    let norm = T::from_f64_lossy(1.0 / (wh * ww) as f64);
    let g = grad_out.data();
    let mut dx = vec![T::zero(); n * c * in_h * in_w];
    for p in 0..n * c {
        let src = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
        let plane = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for y in 0..in_h {
            for x in 0..in_w {
                plane[y * in_w + x] = src[(y / wh) * out_w + x / ww] * norm;
            }
        }
    }
    Tensor::new(vec![n, c, in_h, in_w], dx)
}

/// Mean over the spatial axes: N×C×H×W → N×C.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let norm = T::from_f64_lossy(1.0 / (h * w) as f64);
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * norm)
        .collect();
    Tensor::new(vec![n, c], out)?.finite("global_avg_pool")
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = grad_out.dims2()?;
    if h == 0 || w == 0 {
        return Err(dim_err!("global_avg_pool_backward: empty spatial extent"));
    }
    let norm = T::from_f64_lossy(1.0 / (h * w) as f64);
    let mut dx = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g * norm, h * w));
    }
    Tensor::new(vec![n, c, h, w], dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 8, 8], 1.75).unwrap();
        for (oh, ow) in [(4, 4), (2, 8), (1, 1)] {
            let y = adaptive_avg_pool(&x, oh, ow).unwrap();
            assert!(y.data().iter().all(|&v| v == 1.75));
        }
    }

    #[test]
    fn recovers_block_constant_values() {
        // 4x4 map whose 2x2 blocks hold 1,2,3,4
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| {
            let (y, x) = (i / 4, i % 4);
            [[1.0, 2.0], [3.0, 4.0]][y / 2][x / 2]
        })
        .unwrap();
        let y = adaptive_avg_pool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn non_tiling_windows_are_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 4]).unwrap();
        assert!(matches!(adaptive_avg_pool(&x, 2, 2), Err(crate::Error::Config(_))));
        assert!(matches!(adaptive_avg_pool(&x, 6, 2), Err(crate::Error::Config(_))));
    }
}
