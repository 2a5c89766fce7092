//! Window partitioning, cyclic shifts and the shifted-window attention mask.
//!
//! Feature maps are `[height, width, channels]` (batched: `[batch, height,
//! width, channels]`). Windows are ordered row-major over the window grid and
//! tokens row-major inside a window.

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

fn check_dims(height: usize, width: usize, window: usize, shift: usize) -> Result<()> {
    if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
        return Err(Error::validation(format!("feature map {height}x{width} is not divisible by window {window}")));
    }
    if shift >= window {
        return Err(Error::validation(format!("shift {shift} must be smaller than window {window}")));
    }
    Ok(())
}

/// Source offsets for `[batch·windows, window², channels]` taken from a
/// `[batch, height, width, channels]` map rolled by `−shift` on both axes.
pub fn window_index(
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    window: usize,
    shift: usize,
) -> Result<Vec<usize>> {
    check_dims(height, width, window, shift)?;
    let (wy, wx) = (height / window, width / window);
    let mut index = Vec::with_capacity(batch * height * width * channels);
    for b in 0..batch {
        for gy in 0..wy {
            for gx in 0..wx {
                for ty in 0..window {
                    for tx in 0..window {
                        let y = (gy * window + ty + shift) % height;
                        let x = (gx * window + tx + shift) % width;
                        let base = ((b * height + y) * width + x) * channels;
                        index.extend(base..base + channels);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Inverse of a bijective gather index.
pub fn invert_index(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (k, &i) in index.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

fn map_dims(x: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::validation(format!("expected a [height, width, channels] map, got {s:?}"))),
    }
}

/// `[H, W, C]` → `[windows, window², C]`, after rolling by `−shift`.
pub fn window_partition<T: Real>(x: &Tensor<T>, window: usize, shift: usize) -> Result<Tensor<T>> {
    let (h, w, c) = map_dims(x)?;
    let index = window_index(1, h, w, c, window, shift)?;
    let data = index.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(vec![(h / window) * (w / window), window * window, c], data)
}

/// Inverse of [`window_partition`] for a map of `height × width`.
pub fn window_reverse<T: Real>(
    windows: &Tensor<T>,
    height: usize,
    width: usize,
    window: usize,
    shift: usize,
) -> Result<Tensor<T>> {
    let c = *windows.shape().last().unwrap_or(&0);
    let index = window_index(1, height, width, c, window, shift)?;
    if windows.numel() != index.len() {
        return Err(Error::Shape { op: "window_reverse", lhs: windows.shape().to_vec(), rhs: vec![height, width, c] });
    }
    let mut out = vec![T::zero(); index.len()];
    for (k, &i) in index.iter().enumerate() {
        out[i] = windows.data()[k];
    }
    Tensor::new(vec![height, width, c], out)
}

/// Region label per pixel of the rolled map: pixels that were not contiguous
/// before the roll get different labels.
fn region_labels(height: usize, width: usize, window: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            labels.push(band(y, height) * 3 + band(x, width));
        }
    }
    labels
}

/// Additive mask `[windows, window², window²]`: 0 for token pairs from the
/// same region, −∞ otherwise. All zeros when `shift == 0`.
pub fn shifted_window_mask(height: usize, width: usize, window: usize, shift: usize) -> Result<Tensor<f64>> {
    check_dims(height, width, window, shift)?;
    let n = window * window;
    let windows = (height / window) * (width / window);
    if shift == 0 {
        return Ok(Tensor::zeros(vec![windows, n, n]));
    }
    let labels = region_labels(height, width, window, shift);
    // partition the label map without rolling: labels are already in rolled coordinates
    let part = window_index(1, height, width, 1, window, 0)?;
    let mut data = Vec::with_capacity(windows * n * n);
    for win in 0..windows {
        let ids = &part[win * n..(win + 1) * n];
        for &i in ids {
            for &j in ids {
                data.push(if labels[i] == labels[j] { 0.0 } else { f64::NEG_INFINITY });
            }
        }
    }
    Tensor::new(vec![windows, n, n], data)
}

/// Flat index into a `[(2w−1)², heads]` bias table for each token pair.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let span = 2 * window - 1;
    let n = window * window;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
            let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
            index.push(dy as usize * span + dx as usize);
        }
    }
    index
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![h, w, c], (0..h * w * c).map(|i| i as f64 * 0.25 - 3.0).collect()).unwrap()
    }

    #[test]
    fn roundtrip_without_shift() {
        let x = ramp(8, 8, 3);
        let win = window_partition(&x, 4, 0).unwrap();
        assert_eq!(win.shape(), &[4, 16, 3]);
        assert_eq!(window_reverse(&win, 8, 8, 4, 0).unwrap(), x);
    }

    #[test]
    fn roundtrip_with_shift() {
        let x = ramp(8, 8, 2);
        let win = window_partition(&x, 4, 2).unwrap();
        assert_ne!(win.data(), window_partition(&x, 4, 0).unwrap().data());
        assert_eq!(window_reverse(&win, 8, 8, 4, 2).unwrap(), x);
    }

    #[test]
    fn indivisible_maps_are_rejected() {
        let x = ramp(6, 8, 1);
        assert!(window_partition(&x, 4, 0).is_err());
        assert!(shifted_window_mask(8, 8, 4, 4).is_err());
    }

    #[test]
    fn mask_matches_spatial_adjacency() {
        let (h, w, win, s) = (8, 8, 4, 2);
        let mask = shifted_window_mask(h, w, win, s).unwrap();
        let n = win * win;
        // original (pre-roll) coordinates of every token in every window
        let coords: Vec<(usize, usize)> = {
            let idx = window_index(1, h, w, 1, win, s).unwrap();
            idx.iter().map(|&i| (i / w, i % w)).collect()
        };
        for wi in 0..4 {
            for i in 0..n {
                let mut unmasked = 0;
                for j in 0..n {
                    let (a, b) = (coords[wi * n + i], coords[wi * n + j]);
                    let near = a.0.abs_diff(b.0) < win && a.1.abs_diff(b.1) < win;
                    let m = mask.data()[(wi * n + i) * n + j];
                    assert_eq!(m == 0.0, near, "window {wi} pair ({i},{j})");
                    if m == 0.0 {
                        unmasked += 1;
                    }
                }
                assert!(unmasked >= 1);
            }
        }
    }

    #[test]
    fn relative_index_is_symmetric_around_centre() {
        let idx = relative_position_index(3);
        assert_eq!(idx.len(), 81);
        // diagonal pairs map to the zero offset at the table centre
        for i in 0..9 {
            assert_eq!(idx[i * 9 + i], 2 * 5 + 2);
        }
        assert!(idx.iter().all(|&k| k < 25));
    }
}
