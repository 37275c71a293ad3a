//! Loss functions and step-level totals.
//!
//! Adversarial terms are least-squares (real target 1, fake target 0) on
//! 2-channel patch maps: channel 0 judges reconstructed-vs-real live,
//! channel 1 synthesized-vs-real spoof. Expectations over a domain are
//! per-batch means; per-scale patch terms are means over locations summed
//! over the three scales.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Loss weighting. `alpha1..alpha5` weight the generator / supervision
/// objectives, `beta > 1` compresses live-face traces, `alpha0` weights the
/// trace-intensity term of the test-time score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            alpha1: 1.0,
            alpha2: 100.0,
            alpha3: 1e-3,
            alpha4: 50.0,
            alpha5: 1.0,
            beta: 1e4,
        }
    }
}

/// Live channel of a discriminator patch map.
fn live_channel(g: &Graph, map: Var) -> Result<Var> {
    g.slice_channels(map, 0, 1)
}

/// Spoof channel of a discriminator patch map.
fn spoof_channel(g: &Graph, map: Var) -> Result<Var> {
    g.slice_channels(map, 1, 2)
}

fn mean_sq_err_to(g: &Graph, v: Var, target: f64) -> Var {
    let shifted = g.add_scalar(v, -target);
    g.mean(g.square(shifted))
}

/// Spoofness-map loss: live maps are pushed to 0, spoof and synthesized
/// maps to 1, in mean absolute value (equivalently `(1/K^2) E[||M||_1]`).
pub fn esr_loss(g: &Graph, m_live: Option<Var>, m_attack: Option<Var>) -> Result<Var> {
    let mut total: Option<Var> = None;
    if let Some(m) = m_live {
        total = Some(g.mean(g.abs(m)));
    }
    if let Some(m) = m_attack {
        let term = g.mean(g.abs(g.add_scalar(m, -1.0)));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Domain("esr loss over an empty batch".into()))
}

/// Generator adversarial loss: reconstructed live toward the live domain,
/// synthesized spoof toward the spoof domain, at all three scales.
pub fn gen_adv_loss(g: &Graph, d_recon_live: &[Var; 3], d_synth_spoof: &[Var; 3]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&recon, &synth) in d_recon_live.iter().zip(d_synth_spoof) {
        let t1 = mean_sq_err_to(g, live_channel(g, recon)?, 1.0);
        let t2 = mean_sq_err_to(g, spoof_channel(g, synth)?, 1.0);
        let scale = g.add(t1, t2)?;
        total = Some(match total {
            Some(t) => g.add(t, scale)?,
            None => scale,
        });
    }
    Ok(total.expect("three scales"))
}

/// Discriminator adversarial loss: real live/spoof toward 1 on their
/// channels, reconstructed and synthesized samples toward 0.
pub fn disc_adv_loss(
    g: &Graph,
    d_real_live: &[Var; 3],
    d_real_spoof: &[Var; 3],
    d_recon_live: &[Var; 3],
    d_synth_spoof: &[Var; 3],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for i in 0..3 {
        let t1 = mean_sq_err_to(g, live_channel(g, d_real_live[i])?, 1.0);
        let t2 = mean_sq_err_to(g, spoof_channel(g, d_real_spoof[i])?, 1.0);
        let t3 = mean_sq_err_to(g, live_channel(g, d_recon_live[i])?, 0.0);
        let t4 = mean_sq_err_to(g, spoof_channel(g, d_synth_spoof[i])?, 0.0);
        let scale = g.add(g.add(t1, t2)?, g.add(t3, t4)?)?;
        total = Some(match total {
            Some(t) => g.add(t, scale)?,
            None => scale,
        });
    }
    Ok(total.expect("three scales"))
}

/// Squared L2 norm per sample, mean over the batch.
fn batch_mean_sq_norm(g: &Graph, traces: Var) -> Result<Var> {
    let d = g.with_value(traces, |t| t.dims4())?;
    let total = g.sum(g.square(traces));
    Ok(g.mul_scalar(total, 1.0 / d[0] as f64))
}

/// Trace-intensity regularizer: `beta * E_live[||G||_2^2] +
/// E_spoof[||G||_2^2]` on composed trace images.
pub fn regularizer_loss(
    g: &Graph,
    trace_live: Option<Var>,
    trace_spoof: Option<Var>,
    beta: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    if let Some(t) = trace_live {
        total = Some(g.mul_scalar(batch_mean_sq_norm(g, t)?, beta));
    }
    if let Some(t) = trace_spoof {
        let term = batch_mean_sq_norm(g, t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Domain("regularizer over an empty batch".into()))
}

/// Supervised pixel loss on synthesized samples: mean absolute difference
/// per pixel per channel between the recovered trace and the (detached)
/// ground-truth warped trace.
pub fn pixel_loss(g: &Graph, recovered: Var, target: Var) -> Result<Var> {
    let dr = g.with_value(recovered, |t| t.shape().to_vec());
    let dt = g.with_value(target, |t| t.shape().to_vec());
    if dr != dt {
        return Err(Error::Dimension(format!(
            "pixel loss shapes {:?} vs {:?}",
            dr, dt
        )));
    }
    Ok(g.mean(g.abs(g.sub(recovered, target)?)))
}

impl LossWeights {
    /// Generator-step total: `alpha1*L_G + alpha2*L_ESR + alpha3*L_R`.
    pub fn total_generator(&self, l_g: f64, l_esr: f64, l_r: f64) -> f64 {
        self.alpha1 * l_g + self.alpha2 * l_esr + self.alpha3 * l_r
    }

    /// Supervision-step total: `alpha4*L_ESR + alpha5*L_P`.
    pub fn total_supervision(&self, l_esr: f64, l_p: f64) -> f64 {
        self.alpha4 * l_esr + self.alpha5 * l_p
    }

    /// Graph version of [`Self::total_generator`].
    pub fn total_generator_var(&self, g: &Graph, l_g: Var, l_esr: Var, l_r: Var) -> Result<Var> {
        let a = g.mul_scalar(l_g, self.alpha1);
        let b = g.mul_scalar(l_esr, self.alpha2);
        let c = g.mul_scalar(l_r, self.alpha3);
        g.add(g.add(a, b)?, c)
    }

    /// Graph version of [`Self::total_supervision`].
    pub fn total_supervision_var(&self, g: &Graph, l_esr: Var, l_p: Var) -> Result<Var> {
        let a = g.mul_scalar(l_esr, self.alpha4);
        let b = g.mul_scalar(l_p, self.alpha5);
        g.add(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn maps(g: &Graph, v: f64, sizes: [usize; 3]) -> [Var; 3] {
        [
            g.constant(Tensor::filled(&[1, sizes[0], sizes[0], 2], v)),
            g.constant(Tensor::filled(&[1, sizes[1], sizes[1], 2], v)),
            g.constant(Tensor::filled(&[1, sizes[2], sizes[2], 2], v)),
        ]
    }

    #[test]
    fn esr_loss_examples() {
        let g = Graph::new();
        // Perfect live batch.
        let m0 = g.constant(Tensor::zeros(&[3, 4, 4, 1]));
        let l = esr_loss(&g, Some(m0), None).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.0);
        // Single spoof sample at M = 0.5, K = 4: (1/16) * 16 * 0.5.
        let mh = g.constant(Tensor::filled(&[1, 4, 4, 1], 0.5));
        let l = esr_loss(&g, None, Some(mh)).unwrap();
        assert!((g.scalar_value(l).unwrap() - 0.5).abs() < 1e-12);
        // Saturation: M = 1 on spoof is perfect, on live costs 1.
        let m1 = g.constant(Tensor::filled(&[2, 4, 4, 1], 1.0));
        let l = esr_loss(&g, None, Some(m1)).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.0);
        let m1 = g.constant(Tensor::filled(&[2, 4, 4, 1], 1.0));
        let l = esr_loss(&g, Some(m1), None).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 1.0);
        // Empty batch is a domain error.
        assert!(matches!(esr_loss(&g, None, None), Err(Error::Domain(_))));
    }

    #[test]
    fn gen_adv_loss_examples() {
        let g = Graph::new();
        // Fooled discriminator.
        let ones_r = maps(&g, 1.0, [8, 4, 2]);
        let ones_s = maps(&g, 1.0, [8, 4, 2]);
        let l = gen_adv_loss(&g, &ones_r, &ones_s).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.0);
        // All-zero outputs: 3 scales * (1 + 1).
        let zeros_r = maps(&g, 0.0, [8, 4, 2]);
        let zeros_s = maps(&g, 0.0, [8, 4, 2]);
        let l = gen_adv_loss(&g, &zeros_r, &zeros_s).unwrap();
        assert!((g.scalar_value(l).unwrap() - 6.0).abs() < 1e-12);
        // Constant maps: value independent of spatial size.
        let a = gen_adv_loss(&g, &maps(&g, 0.3, [8, 4, 2]), &maps(&g, 0.3, [8, 4, 2])).unwrap();
        let b = gen_adv_loss(&g, &maps(&g, 0.3, [16, 8, 4]), &maps(&g, 0.3, [16, 8, 4])).unwrap();
        assert!((g.scalar_value(a).unwrap() - g.scalar_value(b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn disc_adv_loss_examples() {
        let g = Graph::new();
        // Perfect discriminator: 1 on real channels, 0 on fakes.
        let l = disc_adv_loss(
            &g,
            &maps(&g, 1.0, [8, 4, 2]),
            &maps(&g, 1.0, [8, 4, 2]),
            &maps(&g, 0.0, [8, 4, 2]),
            &maps(&g, 0.0, [8, 4, 2]),
        )
        .unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.0);
        // Everything at 0.5: 3 scales * 4 * 0.25.
        let l = disc_adv_loss(
            &g,
            &maps(&g, 0.5, [8, 4, 2]),
            &maps(&g, 0.5, [8, 4, 2]),
            &maps(&g, 0.5, [8, 4, 2]),
            &maps(&g, 0.5, [8, 4, 2]),
        )
        .unwrap();
        assert!((g.scalar_value(l).unwrap() - 3.0).abs() < 1e-12);
        // Swapping real and fake maximizes the loss of a perfect scorer.
        let l = disc_adv_loss(
            &g,
            &maps(&g, 0.0, [8, 4, 2]),
            &maps(&g, 0.0, [8, 4, 2]),
            &maps(&g, 1.0, [8, 4, 2]),
            &maps(&g, 1.0, [8, 4, 2]),
        )
        .unwrap();
        assert!((g.scalar_value(l).unwrap() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn regularizer_examples() {
        let g = Graph::new();
        let n = 8;
        let zero = g.constant(Tensor::zeros(&[2, n, n, 3]));
        let l = regularizer_loss(&g, Some(zero), None, 1e4).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.0);
        // One live trace constant c: beta * 3 N^2 c^2.
        let c = 0.01;
        let live = g.constant(Tensor::filled(&[1, n, n, 3], c));
        let l = regularizer_loss(&g, Some(live), None, 1e4).unwrap();
        let want = 1e4 * 3.0 * (n * n) as f64 * c * c;
        assert!((g.scalar_value(l).unwrap() - want).abs() < 1e-9 * want);
        // Live traces weigh exactly beta times spoof traces of equal norm.
        let live = g.constant(Tensor::filled(&[1, n, n, 3], c));
        let spoof = g.constant(Tensor::filled(&[1, n, n, 3], c));
        let l_live = regularizer_loss(&g, Some(live), None, 1e4).unwrap();
        let l_spoof = regularizer_loss(&g, None, Some(spoof), 1e4).unwrap();
        let ratio = g.scalar_value(l_live).unwrap() / g.scalar_value(l_spoof).unwrap();
        assert!((ratio - 1e4).abs() < 1e-6);
    }

    #[test]
    fn pixel_loss_examples() {
        let g = Graph::new();
        let a = g.constant(Tensor::filled(&[1, 4, 4, 3], 0.2));
        let b = g.constant(Tensor::filled(&[1, 4, 4, 3], 0.2));
        let l = pixel_loss(&g, a, b).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.0);
        let zero = g.constant(Tensor::zeros(&[1, 4, 4, 3]));
        let t = g.constant(Tensor::filled(&[1, 4, 4, 3], 0.2));
        let l = pixel_loss(&g, zero, t).unwrap();
        assert!((g.scalar_value(l).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn pixel_loss_target_gets_no_gradient() {
        let g = Graph::new();
        let rec = g.leaf(Tensor::filled(&[1, 2, 2, 1], 0.3), true);
        let raw_target = g.leaf(Tensor::filled(&[1, 2, 2, 1], 0.1), true);
        let target = g.stop_gradient(raw_target);
        let l = pixel_loss(&g, rec, target).unwrap();
        g.backward(l).unwrap();
        let gt = g.grad(raw_target).unwrap();
        assert!(gt.data().iter().all(|&v| v == 0.0));
        let gr = g.grad(rec).unwrap();
        assert!(gr.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn totals_match_hand_computation() {
        let w = LossWeights::default();
        assert!((w.total_generator(6.0, 0.5, 3.0) - 56.003).abs() < 1e-12);
        assert_eq!(w.total_generator(0.0, 0.0, 0.0), 0.0);
        // Doubling alpha2 changes the total by exactly +100*0.5.
        let mut w2 = w;
        w2.alpha2 *= 2.0;
        let diff = w2.total_generator(6.0, 0.5, 3.0) - w.total_generator(6.0, 0.5, 3.0);
        assert!((diff - 50.0).abs() < 1e-12);

        assert!((w.total_supervision(0.1, 0.2) - 5.2).abs() < 1e-12);
        assert_eq!(w.total_supervision(0.0, 0.0), 0.0);
        // Linearity in each component.
        let base = w.total_supervision(0.1, 0.2);
        assert!((w.total_supervision(0.2, 0.2) - base - 50.0 * 0.1).abs() < 1e-12);
        assert!((w.total_supervision(0.1, 0.4) - base - 0.2).abs() < 1e-12);
    }

    #[test]
    fn var_totals_agree_with_plain_totals() {
        let g = Graph::new();
        let w = LossWeights::default();
        for (a, b, c) in [(6.0, 0.5, 3.0), (0.1, 0.7, 2.3)] {
            let va = g.constant(Tensor::scalar(a));
            let vb = g.constant(Tensor::scalar(b));
            let vc = g.constant(Tensor::scalar(c));
            let tv = w.total_generator_var(&g, va, vb, vc).unwrap();
            assert_eq!(g.scalar_value(tv).unwrap(), w.total_generator(a, b, c));
            let sv = w.total_supervision_var(&g, va, vb).unwrap();
            assert_eq!(g.scalar_value(sv).unwrap(), w.total_supervision(a, b));
        }
    }

    #[test]
    fn generator_and_discriminator_reductions_are_shared() {
        // On identical constant tensors the per-scale reduction used by
        // both adversarial losses is the same mean over patches.
        let g = Graph::new();
        let v = 0.25;
        let r = maps(&g, v, [8, 4, 2]);
        let s = maps(&g, v, [8, 4, 2]);
        let lg = gen_adv_loss(&g, &r, &s).unwrap();
        // L_G at constant v: 3 scales * 2 terms * (v-1)^2.
        assert!((g.scalar_value(lg).unwrap() - 6.0 * (v - 1.0) * (v - 1.0)).abs() < 1e-12);
        let ld = disc_adv_loss(
            &g,
            &maps(&g, v, [8, 4, 2]),
            &maps(&g, v, [8, 4, 2]),
            &maps(&g, v, [8, 4, 2]),
            &maps(&g, v, [8, 4, 2]),
        )
        .unwrap();
        let want = 3.0 * (2.0 * (v - 1.0) * (v - 1.0) + 2.0 * v * v);
        assert!((g.scalar_value(ld).unwrap() - want).abs() < 1e-12);
    }
}
