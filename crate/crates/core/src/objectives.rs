//! Mask supervision and classification losses.
//!
//! Per sample, with part maps `f_p`, soft targets `M_p` and logit `ŷ`:
//!
//! ```text
//! mask_p = Σ_ij bce(f_p[ij], M_p[ij])          (sum over cells)
//! class  = bce(ŷ, y)
//! total  = class + λ Σ_p mask_p
//! ```
//!
//! `bce(z, t) = max(z, 0) − z·t + ln(1 + e^−|z|)` is the logit form of binary
//! cross-entropy. Batch values are means over samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::masks::{RegionId, RegionMaskSet};
use crate::nn::{Aggregation, Network, NetworkParams, Real};

pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskReduction {
    #[default]
    Sum,
    Mean,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of logit `z` against target `t ∈ [0, 1]`.
pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn check_map(map: &[f64], target: &Grid) -> Result<()> {
    if map.len() != target.as_slice().len() {
        return Err(Error::InvalidInput(format!(
            "map has {} cells but target is {}x{}",
            map.len(),
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

pub fn mask_loss(map: &[f64], target: &Grid, reduction: MaskReduction) -> Result<f64> {
    check_map(map, target)?;
    let sum: f64 = map.iter().zip(target.as_slice()).map(|(&z, &t)| bce_with_logits(z, t)).sum();
    Ok(match reduction {
        MaskReduction::Sum => sum,
        MaskReduction::Mean => sum / map.len() as f64,
    })
}

/// `∂ mask_loss / ∂ f[ij] = σ(f[ij]) − M[ij]` (divided by cell count in mean mode).
pub fn mask_loss_grad(map: &[f64], target: &Grid, reduction: MaskReduction) -> Result<Vec<f64>> {
    check_map(map, target)?;
    let scale = match reduction {
        MaskReduction::Sum => 1.0,
        MaskReduction::Mean => 1.0 / map.len() as f64,
    };
    Ok(map
        .iter()
        .zip(target.as_slice())
        .map(|(&z, &t)| scale * (sigmoid(z) - t))
        .collect())
}

pub fn class_loss(logit: f64, label: u8) -> f64 {
    bce_with_logits(logit, label as f64)
}

pub fn class_loss_grad(logit: f64, label: u8) -> f64 {
    sigmoid(logit) - label as f64
}

/// Affine classifier weights for each subnet (one subnet unless ensemble).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub layers: Vec<(Vec<f64>, f64)>,
}

impl ClassifierParams {
    pub fn from_network<T: Real>(net: &Network, params: &NetworkParams<T>) -> Self {
        Self {
            layers: net
                .classifier_slots()
                .into_iter()
                .map(|(w, b)| {
                    (
                        params.tensor(w).iter().map(|v| v.as_f64()).collect(),
                        params.tensor(b)[0].as_f64(),
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Spatial mean of each part map.
    pub pooled: Vec<f64>,
    pub aggregate: f64,
    pub logit: f64,
    pub score: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_classifier(aggregation: Aggregation, n_parts: usize, classifier: &ClassifierParams) -> Result<()> {
    let ok = match aggregation {
        Aggregation::Ensemble => {
            classifier.layers.len() == n_parts && classifier.layers.iter().all(|(w, _)| w.len() == 1)
        }
        Aggregation::Fc => classifier.layers.len() == 1 && classifier.layers[0].0.len() == n_parts,
        Aggregation::Mean | Aggregation::Max => classifier.layers.len() == 1 && classifier.layers[0].0.len() == 1,
    };
    if !ok || n_parts == 0 {
        return Err(Error::Config(format!(
            "{aggregation} aggregation does not match {n_parts} parts and the classifier shape"
        )));
    }
    Ok(())
}

/// Pools each part map and applies the aggregation + classifier pathway.
pub fn classify(maps: &[&[f64]], aggregation: Aggregation, classifier: &ClassifierParams) -> Result<Prediction> {
    check_classifier(aggregation, maps.len(), classifier)?;
    if maps.iter().any(|m| m.is_empty()) {
        return Err(Error::InvalidInput("empty part map".into()));
    }
    let pooled: Vec<f64> = maps.iter().map(|m| mean(m)).collect();
    let (aggregate, logit) = match aggregation {
        Aggregation::Mean | Aggregation::Max => {
            let agg = if aggregation == Aggregation::Mean {
                mean(&pooled)
            } else {
                pooled[argmax(&pooled)]
            };
            let (w, b) = &classifier.layers[0];
            (agg, w[0] * agg + b)
        }
        Aggregation::Fc => {
            let (w, b) = &classifier.layers[0];
            let z = w.iter().zip(&pooled).map(|(a, p)| a * p).sum::<f64>() + b;
            (z, z)
        }
        Aggregation::Ensemble => {
            let logits: Vec<f64> = classifier
                .layers
                .iter()
                .zip(&pooled)
                .map(|((w, b), p)| w[0] * p + b)
                .collect();
            let z = mean(&logits);
            (z, z)
        }
    };
    Ok(Prediction {
        pooled,
        aggregate,
        logit,
        score: sigmoid(logit),
    })
}

/// Gradients of a scalar loss through [`classify`] given `dlogit = ∂L/∂ŷ`.
/// Returns `∂L/∂pooled` per part and `∂L/∂(weights, bias)` per classifier layer.
pub fn classify_backward(
    prediction: &Prediction,
    dlogit: f64,
    aggregation: Aggregation,
    classifier: &ClassifierParams,
) -> (Vec<f64>, Vec<(Vec<f64>, f64)>) {
    let n = prediction.pooled.len();
    let mut dpooled = vec![0.0; n];
    match aggregation {
        Aggregation::Mean | Aggregation::Max => {
            let (w, _) = &classifier.layers[0];
            let dagg = dlogit * w[0];
            if aggregation == Aggregation::Mean {
                dpooled.iter_mut().for_each(|d| *d = dagg / n as f64);
            } else {
                dpooled[argmax(&prediction.pooled)] = dagg;
            }
            (dpooled, vec![(vec![dlogit * prediction.aggregate], dlogit)])
        }
        Aggregation::Fc => {
            let (w, _) = &classifier.layers[0];
            for (d, wi) in dpooled.iter_mut().zip(w) {
                *d = dlogit * wi;
            }
            (dpooled, vec![(prediction.pooled.iter().map(|p| dlogit * p).collect(), dlogit)])
        }
        Aggregation::Ensemble => {
            let s = dlogit / n as f64;
            let layers = classifier
                .layers
                .iter()
                .zip(&prediction.pooled)
                .zip(dpooled.iter_mut())
                .map(|(((w, _), p), d)| {
                    *d = s * w[0];
                    (vec![s * p], s)
                })
                .collect();
            (dpooled, layers)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mask_loss: Vec<(RegionId, f64)>,
    pub class_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn mask_sum(&self) -> f64 {
        self.mask_loss.iter().map(|(_, v)| v).sum()
    }

    /// Component-wise mean over samples; `total` stays consistent with the components.
    pub fn mean(items: &[LossBreakdown]) -> Result<LossBreakdown> {
        let first = items.first().ok_or_else(|| Error::InvalidInput("no losses to average".into()))?;
        let n = items.len() as f64;
        let mask_loss = first
            .mask_loss
            .iter()
            .enumerate()
            .map(|(i, (r, _))| (*r, items.iter().map(|b| b.mask_loss[i].1).sum::<f64>() / n))
            .collect::<Vec<_>>();
        let class_loss = items.iter().map(|b| b.class_loss).sum::<f64>() / n;
        let mask_sum: f64 = mask_loss.iter().map(|(_, v)| v).sum();
        Ok(LossBreakdown {
            total: class_loss + first.lambda * mask_sum,
            mask_loss,
            class_loss,
            lambda: first.lambda,
        })
    }
}

/// Loss of one sample. `maps` follow `parts`; `targets` is the sample's mask
/// set (all zero for real images).
pub fn total_loss(
    maps: &[&[f64]],
    parts: &[RegionId],
    targets: &RegionMaskSet,
    logit: f64,
    label: u8,
    lambda: f64,
    reduction: MaskReduction,
) -> Result<LossBreakdown> {
    if maps.len() != parts.len() {
        return Err(Error::InvalidInput(format!(
            "{} maps for {} configured parts",
            maps.len(),
            parts.len()
        )));
    }
    let mask_loss = parts
        .iter()
        .zip(maps)
        .map(|(&r, m)| Ok((r, mask_loss(m, &targets.get(r).values, reduction)?)))
        .collect::<Result<Vec<_>>>()?;
    let class_loss = class_loss(logit, label);
    let mask_sum: f64 = mask_loss.iter().map(|(_, v)| v).sum();
    Ok(LossBreakdown {
        mask_loss,
        class_loss,
        total: class_loss + lambda * mask_sum,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    /// Direct composition with σ and logs, valid away from saturation.
    fn naive_bce(z: f64, t: f64) -> f64 {
        let s = 1.0 / (1.0 + (-z).exp());
        -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn analytic_mask_loss_values() {
        let z = Grid::zeros(2, 2);
        let v = mask_loss(&[0.0; 4], &z, MaskReduction::Sum).unwrap();
        assert!((v - 4.0 * LN_2).abs() < 1e-12);
        let v = mask_loss(&[20.0; 4], &Grid::filled(2, 2, 1.0), MaskReduction::Sum).unwrap();
        let expected = 4.0 * (-20.0f64).exp().ln_1p();
        assert!(rel(v, expected) < 1e-12);
        assert!((v - 8.2e-9).abs() < 1e-10);
        let m = mask_loss(&[0.0; 4], &z, MaskReduction::Mean).unwrap();
        assert!((m - LN_2).abs() < 1e-12);
    }

    #[test]
    fn mask_loss_shape_mismatch() {
        assert!(matches!(
            mask_loss(&[0.0; 3], &Grid::zeros(2, 2), MaskReduction::Sum),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn mask_loss_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let z: Vec<f64> = (0..9).map(|_| rng.random_range(-6.0..6.0)).collect();
            let t = Grid::from_vec(3, 3, (0..9).map(|_| rng.random::<f64>()).collect());
            let oracle: f64 = z.iter().zip(t.as_slice()).map(|(&a, &b)| naive_bce(a, b)).sum();
            assert!(rel(mask_loss(&z, &t, MaskReduction::Sum).unwrap(), oracle) < 1e-12);
        }
    }

    #[test]
    fn class_loss_values() {
        assert!((class_loss(0.0, 1) - LN_2).abs() < 1e-15);
        assert!(rel(class_loss(20.0, 1), (-20.0f64).exp().ln_1p()) < 1e-12);
        assert!((class_loss(20.0, 1) - 2.061e-9).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let z = rng.random_range(-8.0..8.0);
            let y = rng.random_range(0..2u8);
            assert!(rel(class_loss(z, y), naive_bce(z, y as f64)) < 1e-12);
        }
        assert!(class_loss(1000.0, 0).is_finite());
        assert!(class_loss(-1000.0, 1).is_finite());
    }

    fn single(w: f64, b: f64) -> ClassifierParams {
        ClassifierParams { layers: vec![(vec![w], b)] }
    }

    #[test]
    fn aggregation_modes() {
        let maps: Vec<Vec<f64>> = [2.0, 4.0, 6.0, 8.0].iter().map(|&v| vec![v; 4]).collect();
        let refs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
        let p = classify(&refs, Aggregation::Mean, &single(1.0, 0.0)).unwrap();
        assert_eq!(p.aggregate, 5.0);
        let p = classify(&refs, Aggregation::Max, &single(1.0, 0.0)).unwrap();
        assert_eq!(p.aggregate, 8.0);
        assert!(matches!(
            classify(&refs, Aggregation::Fc, &single(1.0, 0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identity_pathway_for_single_part() {
        let map = vec![1.7; 9];
        let p = classify(&[&map], Aggregation::Mean, &single(1.0, 0.0)).unwrap();
        assert!((p.logit - 1.7).abs() < 1e-15);
        assert!((p.score - sigmoid(1.7)).abs() < 1e-15);
    }

    #[test]
    fn fc_matches_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let maps: Vec<Vec<f64>> = (0..4).map(|_| (0..16).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let refs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = 0.3;
        let p = classify(&refs, Aggregation::Fc, &ClassifierParams { layers: vec![(w.clone(), b)] }).unwrap();
        let mut oracle = b;
        for (m, wi) in maps.iter().zip(&w) {
            let mut s = 0.0;
            for v in m {
                s += v;
            }
            oracle += wi * s / 16.0;
        }
        assert!((p.logit - oracle).abs() < 1e-12);
    }

    #[test]
    fn ensemble_averages_logits() {
        let a = vec![1.0; 4];
        let b = vec![3.0; 4];
        let c = ClassifierParams {
            layers: vec![(vec![2.0], 0.0), (vec![1.0], 1.0)],
        };
        let p = classify(&[&a, &b], Aggregation::Ensemble, &c).unwrap();
        assert!((p.logit - 3.0).abs() < 1e-15);
    }

    #[test]
    fn mean_aggregation_equals_pool_of_concatenated_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps: Vec<Vec<f64>> = (0..4).map(|_| (0..36).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let refs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
        let p = classify(&refs, Aggregation::Mean, &single(1.0, 0.0)).unwrap();
        let concat: Vec<f64> = maps.concat();
        assert!((p.aggregate - mean(&concat)).abs() < 1e-12);
    }

    #[test]
    fn composed_total_loss_for_real_image() {
        let map = vec![0.0; 4];
        let targets = RegionMaskSet::zeros((2, 2));
        let b = total_loss(&[&map], &[RegionId::Mouth], &targets, 0.0, 0, 10.0, MaskReduction::Sum).unwrap();
        assert!((b.total - (LN_2 + 40.0 * LN_2)).abs() < 1e-12);
        assert!((b.total - 28.4190).abs() < 1e-4);
        let b0 = total_loss(&[&map], &[RegionId::Mouth], &targets, 0.3, 1, 0.0, MaskReduction::Sum).unwrap();
        assert_eq!(b0.total, b0.class_loss);
    }

    #[test]
    fn four_part_total_matches_component_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let maps: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let refs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
        let masks = RegionId::ALL.map(|region| crate::masks::RegionMask {
            region,
            values: Grid::from_vec(2, 2, (0..4).map(|_| rng.random::<f64>()).collect()),
        });
        let set = RegionMaskSet::new(masks).unwrap();
        let logit = rng.random_range(-2.0..2.0);
        let b = total_loss(&refs, &RegionId::ALL, &set, logit, 1, 10.0, MaskReduction::Sum).unwrap();
        let mut oracle = naive_bce(logit, 1.0);
        for (m, r) in maps.iter().zip(RegionId::ALL) {
            oracle += 10.0
                * m.iter()
                    .zip(set.get(r).values.as_slice())
                    .map(|(&z, &t)| naive_bce(z, t))
                    .sum::<f64>();
        }
        assert!(rel(b.total, oracle) < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t = Grid::from_vec(3, 3, (0..9).map(|_| rng.random::<f64>()).collect());
        let g = mask_loss_grad(&z, &t, MaskReduction::Sum).unwrap();
        let h = 1e-5;
        for i in 0..9 {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (mask_loss(&zp, &t, MaskReduction::Sum).unwrap() - mask_loss(&zm, &t, MaskReduction::Sum).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
        for &(zz, y) in &[(0.4, 1u8), (-1.3, 0u8)] {
            let fd = (class_loss(zz + h, y) - class_loss(zz - h, y)) / (2.0 * h);
            assert!((fd - class_loss_grad(zz, y)).abs() < 1e-8);
        }
    }

    #[test]
    fn classify_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let maps: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let refs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
        let cases = [
            (Aggregation::Mean, single(0.7, 0.1)),
            (Aggregation::Max, single(-1.2, 0.4)),
            (Aggregation::Fc, ClassifierParams { layers: vec![(vec![0.3, -0.5, 0.9], 0.2)] }),
            (
                Aggregation::Ensemble,
                ClassifierParams {
                    layers: vec![(vec![0.3], 0.1), (vec![-0.5], 0.0), (vec![0.9], -0.2)],
                },
            ),
        ];
        for (agg, c) in cases {
            let p = classify(&refs, agg, &c).unwrap();
            let (dpooled, dlayers) = classify_backward(&p, 1.0, agg, &c);
            let h = 1e-6;
            for part in 0..3 {
                let shift = |d: f64| {
                    let shifted: Vec<Vec<f64>> = maps
                        .iter()
                        .enumerate()
                        .map(|(i, m)| m.iter().map(|v| if i == part { v + d } else { *v }).collect())
                        .collect();
                    let r: Vec<&[f64]> = shifted.iter().map(|m| m.as_slice()).collect();
                    classify(&r, agg, &c).unwrap().logit
                };
                let fd = (shift(h) - shift(-h)) / (2.0 * h);
                assert!((fd - dpooled[part]).abs() < 1e-7, "{agg} part {part}");
            }
            for (li, (dw, db)) in dlayers.iter().enumerate() {
                for wi in 0..dw.len() {
                    let mut cp = c.clone();
                    cp.layers[li].0[wi] += h;
                    let mut cm = c.clone();
                    cm.layers[li].0[wi] -= h;
                    let fd = (classify(&refs, agg, &cp).unwrap().logit - classify(&refs, agg, &cm).unwrap().logit) / (2.0 * h);
                    assert!((fd - dw[wi]).abs() < 1e-7);
                }
                let mut cp = c.clone();
                cp.layers[li].1 += h;
                let mut cm = c.clone();
                cm.layers[li].1 -= h;
                let fd = (classify(&refs, agg, &cp).unwrap().logit - classify(&refs, agg, &cm).unwrap().logit) / (2.0 * h);
                assert!((fd - db).abs() < 1e-7);
            }
        }
    }
}
