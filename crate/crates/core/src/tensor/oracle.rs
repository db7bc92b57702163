use super::{Scalar, Tensor};

/// Central-difference gradient of a scalar function at `p`, one coordinate at a time.
pub fn fd_gradient_oracle<T, F>(mut f: F, p: &Tensor<T>, h: T) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let mut probe = p.clone();
    let two_h = h + h;
    let mut out = Vec::with_capacity(p.numel());
    for i in 0..p.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / two_h);
    }
    Tensor::new(p.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = Tensor::new(vec![1], vec![3.0f64]).unwrap();
        let g = fd_gradient_oracle(|t| t.data()[0] * t.data()[0], &p, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::new(vec![4], vec![1.0f64, -2.0, 0.5, 9.0]).unwrap();
        let g = fd_gradient_oracle(|_| 42.0, &p, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
