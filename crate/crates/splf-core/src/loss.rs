//! Training objective: binary cross-entropy on logits, summed over the four
//! decode levels without weighting.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sum of per-level mean BCE losses. Exactly four saliency maps are
/// expected; anything else indicates a miswired decode loop.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, logits: &[Tensor<T>], gt: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.len() != 4 {
        return Err(Error::Usage(format!("expected 4 saliency maps, got {}", logits.len())));
    }
    let mut total = g.bce_with_logits(&logits[0], gt)?;
    for l in &logits[1..] {
        let term = g.bce_with_logits(l, gt)?;
        total = g.add(&total, &term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_heads_required() {
        let mut g = Graph::<f32>::new();
        let l = Tensor::zeros(&[1, 1, 4, 4]);
        let gt = Tensor::zeros(&[1, 1, 4, 4]);
        let three = [l.clone(), l.clone(), l.clone()];
        assert!(matches!(total_loss(&mut g, &three, &gt), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_logits_give_four_ln_two() {
        let mut g = Graph::<f32>::new();
        let l = Tensor::zeros(&[2, 1, 4, 4]);
        let gt = Tensor::full(&[2, 1, 4, 4], 1.0);
        let maps = [l.clone(), l.clone(), l.clone(), l.clone()];
        let loss = total_loss(&mut g, &maps, &gt).unwrap();
        let expect = 4.0 * (2.0f64).ln();
        assert!((loss.item() as f64 - expect).abs() < 1e-6);
    }
}
