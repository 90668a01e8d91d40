use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::features::SpeechFeatures;
use crate::nn::{Graph, Tensor, Var};
use crate::seed;

/// Cleaner outputs of one refinement iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput {
    pub pre_postnet: Tensor,
    pub post_postnet: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLoss {
    pub pre_postnet_total: f64,
    pub post_postnet_total: f64,
}

/// Loss components summed over every scored output (pre/post Post-Net × iterations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanerLossReport {
    pub l1: f64,
    pub l2sq: f64,
    pub sc: f64,
    pub per_iteration: Vec<IterationLoss>,
    pub total: f64,
}

/// `‖S−Ŝ‖₁ + ‖S−Ŝ‖₂² + ‖S−Ŝ‖₂²/‖S‖₂²` with entrywise norms.
fn term(s: &Tensor, s_hat: &Tensor, s_sq: f64) -> (f64, f64, f64) {
    let (mut l1, mut l2) = (0.0, 0.0);
    for (a, b) in s.data().iter().zip(s_hat.data()) {
        let d = a - b;
        l1 += d.abs();
        l2 += d * d;
    }
    (l1, l2, l2 / s_sq)
}

pub fn cleaner_loss(s: &SpeechFeatures, outputs: &[IterationOutput]) -> Result<CleanerLossReport> {
    cleaner_loss_tensors(&s.values, outputs)
}

pub fn cleaner_loss_tensors(s: &Tensor, outputs: &[IterationOutput]) -> Result<CleanerLossReport> {
    ensure!(!outputs.is_empty(), "no cleaner outputs to score");
    let s_sq = s.sq_sum();
    ensure!(
        s_sq > 0.0,
        "target features are all zero; the normalized loss term is undefined"
    );
    let mut report = CleanerLossReport {
        l1: 0.0,
        l2sq: 0.0,
        sc: 0.0,
        per_iteration: Vec::with_capacity(outputs.len()),
        total: 0.0,
    };
    for out in outputs {
        let mut totals = [0.0; 2];
        for (slot, t) in [&out.pre_postnet, &out.post_postnet]
            .into_iter()
            .enumerate()
        {
            ensure!(
                t.shape() == s.shape(),
                "output shape {:?} differs from target {:?}",
                t.shape(),
                s.shape()
            );
            let (l1, l2, sc) = term(s, t, s_sq);
            report.l1 += l1;
            report.l2sq += l2;
            report.sc += sc;
            totals[slot] = l1 + l2 + sc;
        }
        report.per_iteration.push(IterationLoss {
            pre_postnet_total: totals[0],
            post_postnet_total: totals[1],
        });
    }
    report.total = report.l1 + report.l2sq + report.sc;
    Ok(report)
}

/// Differentiable loss of `outputs` (pairs of pre/post Post-Net predictions) against `s`.
pub fn loss_graph<'g>(g: &'g Graph, s: &Tensor, outputs: &[(Var<'g>, Var<'g>)]) -> Result<Var<'g>> {
    let s_sq = s.sq_sum();
    ensure!(
        s_sq > 0.0,
        "target features are all zero; the normalized loss term is undefined"
    );
    let target = g.constant(s.clone());
    let mut total: Option<Var<'g>> = None;
    for &(pre, post) in outputs {
        for o in [pre, post] {
            let diff = target.sub(o);
            let l2 = diff.square().sum();
            let t = diff.abs().sum().add(l2).add(l2.scale(1.0 / s_sq));
            total = Some(match total {
                Some(acc) => acc.add(t),
                None => t,
            });
        }
    }
    total.ok_or_else(|| crate::Error::Validation("no cleaner outputs to score".into()))
}

/// Takes the same `n_frames` window from the clean and degraded features.
///
/// The offset is uniform over `0..=K - n_frames`, drawn from `rng_seed`.
pub fn crop_training_frames(
    s: &SpeechFeatures,
    x: &SpeechFeatures,
    rng_seed: u64,
    n_frames: usize,
) -> Result<(SpeechFeatures, SpeechFeatures, usize)> {
    let k = s.num_frames();
    ensure!(
        x.num_frames() == k,
        "clean ({k}) and degraded ({}) frame counts differ",
        x.num_frames()
    );
    ensure!(n_frames >= 1, "crop length must be positive");
    ensure!(
        k >= n_frames,
        "utterance has {k} frames, fewer than the {n_frames}-frame crop"
    );
    let offset = seed::rng(rng_seed).random_range(0..=k - n_frames);
    let crop = |f: &SpeechFeatures| SpeechFeatures {
        values: f.values.slice_rows(offset, n_frames),
        ..f.clone()
    };
    Ok((crop(s), crop(x), offset))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(t: &Tensor) -> IterationOutput {
        IterationOutput {
            pre_postnet: t.clone(),
            post_postnet: t.clone(),
        }
    }

    #[test]
    fn identity_example_by_hand() {
        let s = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let z = Tensor::zeros(&[2, 2]);
        let (l1, l2, sc) = term(&s, &z, s.sq_sum());
        assert_eq!((l1, l2, sc), (2.0, 2.0, 1.0));
        let r = cleaner_loss_tensors(&s, &[out(&z)]).unwrap();
        assert_eq!(r.per_iteration[0].pre_postnet_total, 5.0);
        assert_eq!(r.total, 10.0);
        assert_eq!(
            cleaner_loss_tensors(&s, &[out(&s), out(&s)]).unwrap().total,
            0.0
        );
    }

    #[test]
    fn zero_target_rejected() {
        let z = Tensor::zeros(&[2, 2]);
        assert!(cleaner_loss_tensors(&z, &[out(&z)]).is_err());
    }

    #[test]
    fn graph_loss_matches_report() {
        let mut rng = seed::rng(3);
        let s = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let g = Graph::new();
        let v = loss_graph(&g, &s, &[(g.constant(a.clone()), g.constant(b.clone()))]).unwrap();
        let r = cleaner_loss_tensors(
            &s,
            &[IterationOutput {
                pre_postnet: a,
                post_postnet: b,
            }],
        )
        .unwrap();
        assert!((v.item() - r.total).abs() < 1e-9);
    }

    #[test]
    fn crop_pairs_share_offset() {
        let mut rng = seed::rng(4);
        let s = SpeechFeatures::new(Tensor::randn(&[40, 3], 1.0, &mut rng)).unwrap();
        let x = SpeechFeatures::new(Tensor::randn(&[40, 3], 1.0, &mut rng)).unwrap();
        let (cs, cx, off) = crop_training_frames(&s, &x, 11, 15).unwrap();
        assert_eq!(cs.values, s.values.slice_rows(off, 15));
        assert_eq!(cx.values, x.values.slice_rows(off, 15));
        assert_eq!(crop_training_frames(&s, &x, 11, 15).unwrap().2, off);
        let short = SpeechFeatures::new(Tensor::zeros(&[15, 3])).unwrap();
        assert_eq!(crop_training_frames(&short, &short, 9, 15).unwrap().2, 0);
        let tiny = SpeechFeatures::new(Tensor::zeros(&[14, 3])).unwrap();
        assert!(crop_training_frames(&tiny, &tiny, 9, 15).is_err());
    }
}
