use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

/// Intersection over union. Two empty masks score 1.0.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::DimensionMismatch(format!(
            "jaccard of {:?} and {:?} masks",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
