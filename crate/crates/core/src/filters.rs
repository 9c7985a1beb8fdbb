//! Plain (non-differentiable) volume filters.

use voxgrad::{AxisMap, Tensor};

/// Normalized Gaussian taps over `[-radius, radius]`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing with mirror boundaries, truncated at 3σ.
pub fn gaussian_smooth(data: &[f64], shape: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let kernel = gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize);
    let mut t = Tensor::new(&shape, data.to_vec());
    for axis in 0..3 {
        t = AxisMap::same_filter_reflect(shape[axis], &kernel).apply(&t, axis);
    }
    t.into_data()
}

/// Drops 26-connected components with fewer than `min_size` voxels.
pub fn remove_small_components(mask: &[bool], shape: [usize; 3], min_size: usize) -> Vec<bool> {
    let [d, h, w] = shape;
    let mut out = vec![false; mask.len()];
    let mut seen = vec![false; mask.len()];
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut component = Vec::new();
        while let Some(i) = stack.pop() {
            component.push(i);
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            for nz in z.saturating_sub(1)..(z + 2).min(d) {
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        let j = (nz * h + ny) * w + nx;
                        if mask[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        if component.len() >= min_size {
            for i in component {
                out[i] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_preserves_constants() {
        let s = gaussian_smooth(&[0.4; 5 * 4 * 3], [5, 4, 3], 2.0);
        assert!(s.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn small_components_are_dropped() {
        let shape = [7, 7, 7];
        let mut m = vec![false; 343];
        m[49 + 7 + 1] = true;
        // a diagonal line of five voxels is one 26-connected component
        for k in 1..6 {
            m[k * 49 + k * 7 + 5] = true;
        }
        let kept = remove_small_components(&m, shape, 5);
        assert!(!kept[49 + 7 + 1]);
        assert_eq!(kept.iter().filter(|&&v| v).count(), 5);
        assert_eq!(remove_small_components(&m, shape, 1), m);
        assert!(remove_small_components(&m, shape, 6).iter().all(|&v| !v));
    }
}
