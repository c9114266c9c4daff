use super::Tensor;
use crate::error::{Error, Result};

/// Block-average low-pass projection `phi_N`.
///
/// Rank-1 tensors are filtered along their single axis; for higher ranks the
/// last two axes are spatial and every leading index is an independent plane.
/// Each axis is averaged over blocks of `min(n, extent)` and the block mean is
/// written back to every member of the block. When the extent is not a
/// multiple of the block size, the trailing partial block is padded by
/// replicating its last element, which keeps the map linear and idempotent.
pub fn low_pass(x: &Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("low-pass factor must be >= 1".into()));
    }
    let mut out = x.clone();
    if n == 1 {
        return Ok(out);
    }
    let shape = x.shape();
    let (planes, h, w) = match shape.len() {
        1 => (1, 1, shape[0]),
        _ => {
            let h = shape[shape.len() - 2];
            let w = shape[shape.len() - 1];
            (x.len() / (h * w), h, w)
        }
    };
    let data = out.data_mut();
    let mut col = vec![0.0; h];
    for p in 0..planes {
        let plane = &mut data[p * h * w..(p + 1) * h * w];
        for row in plane.chunks_exact_mut(w) {
            block_average(row, n);
        }
        if h > 1 {
            for c in 0..w {
                for r in 0..h {
                    col[r] = plane[r * w + c];
                }
                block_average(&mut col, n);
                for r in 0..h {
                    plane[r * w + c] = col[r];
                }
            }
        }
    }
    Ok(out)
}

fn block_average(line: &mut [f64], n: usize) {
    let block = n.min(line.len());
    for chunk in line.chunks_mut(block) {
        let last = *chunk.last().expect("chunks are non-empty");
        let pad = (block - chunk.len()) as f64;
        let mean = (chunk.iter().sum::<f64>() + pad * last) / block as f64;
        chunk.iter_mut().for_each(|v| *v = mean);
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn vector_block_means() {
        let x = Tensor::from_vec(vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(low_pass(&x, 2).unwrap().data(), &[1.0, 1.0, 5.0, 5.0]);
    }

    #[test]
    fn two_by_two_is_global_mean() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert!(low_pass(&x, 2).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn oversized_factor_is_global_mean() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let y = low_pass(&x, 16).unwrap();
        assert!(y.data().iter().all(|&v| (v - 4.0).abs() < 1e-15));
    }

    #[test]
    fn partial_block_replicates_edge() {
        let x = Tensor::from_vec(vec![1.0, 3.0, 5.0]);
        // second block [5] padded to [5, 5]
        assert_eq!(low_pass(&x, 2).unwrap().data(), &[2.0, 2.0, 5.0]);
    }

    #[test]
    fn zero_factor_rejected() {
        assert!(low_pass(&Tensor::from_vec(vec![1.0]), 0).is_err());
    }

    fn dyadic_image() -> impl Strategy<Value = (Tensor, usize)> {
        (1usize..4, 1usize..20, 1usize..20, 1usize..9).prop_flat_map(|(c, h, w, n)| {
            prop::collection::vec(-256i32..256, c * h * w).prop_map(move |v| {
                let data = v.into_iter().map(|k| f64::from(k) / 8.0).collect();
                (Tensor::new(vec![c, h, w], data).unwrap(), n)
            })
        })
    }

    proptest! {
        #[test]
        fn idempotent_on_dyadic_inputs((x, n) in dyadic_image()) {
            let once = low_pass(&x, n).unwrap();
            let twice = low_pass(&once, n).unwrap();
            prop_assert!(once.max_abs_diff(&twice).unwrap() < 1e-12);
            let (h, w) = (x.shape()[1], x.shape()[2]);
            if n.is_power_of_two() && n <= h && n <= w {
                prop_assert_eq!(once, twice);
            }
        }

        #[test]
        fn linear((x, n) in dyadic_image(), a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            let mut rng = crate::numerics::RngStream::new(seed, 0);
            let y = crate::numerics::gaussian_draw(&mut rng, x.shape());
            let lhs = low_pass(&x.axpby(a, &y, b).unwrap(), n).unwrap();
            let rhs = low_pass(&x, n).unwrap().axpby(a, &low_pass(&y, n).unwrap(), b).unwrap();
            let scale = 1.0 + lhs.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12 * scale);
        }
    }
}
