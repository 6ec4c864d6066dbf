//! Frequency-mode bookkeeping for hard truncation.
//!
//! "Low frequency" means small absolute frequency index under standard
//! DFT wrapping: along the height axis, keeping X absolute frequencies
//! means physical rows {0..X-1} plus the conjugate partners {h-X+1..h-1};
//! along the stored half-spectrum width, columns are absolute
//! frequencies already.

use crate::error::{invalid, Result};

/// ceil(frac * n); the number of absolute frequencies kept on one axis.
pub fn kept_count(n: usize, frac: f64) -> Result<usize> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(invalid(
            "truncate_modes",
            format!("keep_fraction {frac} outside (0, 1]"),
        ));
    }
    Ok(((frac * n as f64).ceil() as usize).max(1).min(n))
}

/// Physical row indices kept when the lowest `x_abs` absolute frequencies
/// survive, in canonical order: positive frequencies ascending, then the
/// negative partners ascending.
pub fn kept_rows(h: usize, x_abs: usize) -> Vec<usize> {
    if x_abs == 0 || h == 0 {
        return Vec::new();
    }
    if 2 * x_abs - 1 >= h {
        return (0..h).collect();
    }
    (0..x_abs).chain(h - x_abs + 1..h).collect()
}

/// Reconstruct the kept-row list from a reduced row count. Uncapped
/// reduced spectra always have an odd row count (2X-1), so the mapping is
/// unambiguous.
pub fn rows_for_reduced(full_h: usize, reduced_rows: usize) -> Result<Vec<usize>> {
    if reduced_rows == full_h {
        return Ok((0..full_h).collect());
    }
    if reduced_rows % 2 == 0 || reduced_rows > full_h {
        return Err(invalid(
            "pad_modes",
            format!("cannot place {reduced_rows} rows into a height-{full_h} spectrum"),
        ));
    }
    Ok(kept_rows(full_h, (reduced_rows + 1) / 2))
}
