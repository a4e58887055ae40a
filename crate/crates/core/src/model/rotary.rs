//! Rotary position embedding over consecutive (even, odd) pairs.

use crate::error::{Error, Result};

/// Rotates `x` (one head's query or key, length `head_dim`) in place. Pair
/// `k` is rotated by `position · base^(−2k/head_dim)`.
pub fn apply_rotary_in_place(x: &mut [f32], position: usize, base: f32) -> Result<()> {
    let head_dim = x.len();
    if !head_dim.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "rotary needs an even head dimension, got {head_dim}"
        )));
    }
    if position == 0 {
        return Ok(());
    }
    let base = f64::from(base);
    for k in 0..head_dim / 2 {
        let freq = base.powf(-2.0 * k as f64 / head_dim as f64);
        let angle = position as f64 * freq;
        let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
        let (a, b) = (x[2 * k], x[2 * k + 1]);
        x[2 * k] = a * cos - b * sin;
        x[2 * k + 1] = a * sin + b * cos;
    }
    Ok(())
}

pub fn apply_rotary(x: &[f32], position: usize, head_dim: usize) -> Result<Vec<f32>> {
    if x.len() != head_dim {
        return Err(Error::Shape(format!(
            "rotary input has {} values for head_dim {head_dim}",
            x.len()
        )));
    }
    let mut out = x.to_vec();
    apply_rotary_in_place(&mut out, position, 10_000.0)?;
    Ok(out)
}
