/// Rotary position embedding over adjacent `(2i, 2i + 1)` pairs of each head.
#[derive(Debug, Clone)]
pub struct RotaryEmbedding {
    head_dim: usize,
    inv_freq: Vec<f64>,
}

impl RotaryEmbedding {
    pub const DEFAULT_THETA: f64 = 10_000.0;

    pub fn new(head_dim: usize, theta: f64) -> Self {
        assert!(head_dim.is_multiple_of(2), "rotary head_dim must be even");
        let inv_freq = (0..head_dim / 2).map(|i| theta.powf(-((2 * i) as f64) / head_dim as f64)).collect();
        Self { head_dim, inv_freq }
    }

    /// Rotates every head of `x` (laid out head-major) in place for `position`.
    pub fn apply(&self, x: &mut [f64], position: usize) {
        for head in x.chunks_exact_mut(self.head_dim) {
            for (i, freq) in self.inv_freq.iter().enumerate() {
                let angle = position as f64 * freq;
                let (sin, cos) = angle.sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_identity() {
        let rope = RotaryEmbedding::new(4, RotaryEmbedding::DEFAULT_THETA);
        let mut x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let orig = x.clone();
        rope.apply(&mut x, 0);
        assert_eq!(x, orig);
    }

    #[test]
    fn rotation_preserves_norm() {
        let rope = RotaryEmbedding::new(8, RotaryEmbedding::DEFAULT_THETA);
        let mut x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let before: f64 = x.iter().map(|v| v * v).sum();
        rope.apply(&mut x, 37);
        let after: f64 = x.iter().map(|v| v * v).sum();
        assert!((before - after).abs() < 1e-10);
    }

    #[test]
    fn relative_positions_give_equal_dot_products() {
        let rope = RotaryEmbedding::new(4, RotaryEmbedding::DEFAULT_THETA);
        let q0 = vec![0.3, -0.1, 0.7, 0.2];
        let k0 = vec![-0.4, 0.9, 0.1, 0.5];
        let dot_at = |pq: usize, pk: usize| {
            let (mut q, mut k) = (q0.clone(), k0.clone());
            rope.apply(&mut q, pq);
            rope.apply(&mut k, pk);
            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>()
        };
        assert!((dot_at(5, 2) - dot_at(13, 10)).abs() < 1e-12);
    }
}
