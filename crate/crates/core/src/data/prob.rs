//! Softmax and arg-max over class logits.
//!
//! Stored logits are single precision; every reduction here runs in `f64`.

use crate::data::Prediction;
use crate::error::{Error, Result};

fn check_finite(values: &[f32]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidLogits("empty logit vector".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidLogits(format!("non-finite logit at class {i}")));
    }
    Ok(())
}

/// Softmax of `logits / temperature`, computed with max-subtraction.
pub fn softmax(logits: &[f32], temperature: f64) -> Result<Vec<f64>> {
    check_finite(logits)?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::contract(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut out: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Arg-max class and its softmax confidence at temperature 1.
pub fn top_prediction(logits: &[f32]) -> Result<Prediction> {
    check_finite(logits)?;
    // argmax on the raw logits so ties are decided before any rounding in exp
    let mut class_id = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[class_id] {
            class_id = i;
        }
    }
    let max = logits[class_id] as f64;
    let denom: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    Ok(Prediction {
        class_id,
        confidence: 1.0 / denom,
    })
}

impl Prediction {
    /// Arg-max of an already normalized probability vector.
    pub fn from_probs(probs: &[f64]) -> Result<Prediction> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidLogits(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let class_id = argmax(probs).ok_or_else(|| Error::InvalidLogits("empty probability vector".into()))?;
        Ok(Prediction {
            class_id,
            confidence: probs[class_id],
        })
    }
}
