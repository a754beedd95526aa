//! Central-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::SplitMix64;

use super::config::ModelConfig;
use super::network::{Mode, Network};
use super::ops::softmax_cross_entropy;
use super::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Nominal central-difference step; see [`MAX_STEP_REDUCTIONS`].
    pub step: f64,
    pub tolerance: f64,
    /// At least 3: with two samples a batch-normalised 1x1 map is +-1 for any
    /// input, and the loss becomes too curved for finite differences.
    pub batch: usize,
    /// Side length of the random input images.
    pub input_size: usize,
    /// Entries probed per tensor; `None` probes every entry.
    pub samples_per_tensor: Option<usize>,
    /// Gradients whose magnitudes are both below this are compared by
    /// absolute rather than relative difference. The loss carries roundoff
    /// near 1e-14, which a 1e-5 step turns into differences near 1e-9, so
    /// exactly-zero gradients would otherwise read as large relative errors.
    pub magnitude_floor: f64,
    pub seed: u64,
    /// Negate the analytic gradient (a deliberately broken backward pass,
    /// used to confirm the check can fail).
    pub flip_analytic_sign: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            batch: 4,
            input_size: 16,
            samples_per_tensor: Some(8),
            magnitude_floor: 1e-4,
            seed: 0x6772_6164,
            flip_analytic_sign: false,
        }
    }
}

/// Times the step may be divided by ten when a probe straddles a kink.
pub const MAX_STEP_REDUCTIONS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub probed: usize,
    /// Probes that needed a smaller step to stay on one smooth piece.
    pub reduced_step: usize,
    /// Probes still straddling a kink at the smallest step; not compared.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_indices(len: usize, samples: Option<usize>, rng: &mut SplitMix64) -> Vec<usize> {
    match samples {
        Some(k) if k < len => {
            let mut idx = rng.permutation(len);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compare analytic and finite-difference gradients of the mean
/// cross-entropy (training-mode forward) for every parameter tensor and for
/// the input, in double precision.
pub fn grad_check(config: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cfg = config.clone();
    cfg.input_size = opts.input_size;
    cfg.validate()?;
    let mut net = Network::<f64>::new(&cfg, opts.seed)?;
    let mut rng = SplitMix64::new(opts.seed ^ 0x9E37);

    // Give batch-norm affine parameters and biases non-trivial values so
    // their gradients are exercised away from the initial symmetric point.
    for p in net.store_mut().params.iter_mut().filter(|p| p.trainable && p.shape.len() == 1) {
        for v in &mut p.value {
            *v += rng.uniform(-0.2, 0.2);
        }
    }

    let s = opts.input_size;
    let x = Tensor4::from_vec(
        opts.batch,
        3,
        s,
        s,
        (0..opts.batch * 3 * s * s).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )?;
    let labels: Vec<usize> = (0..opts.batch).map(|i| i % cfg.num_classes).collect();
    let loss_of = |net: &Network<f64>, x: &Tensor4<f64>| -> Result<(f64, u64)> {
        let (logits, tape) = net.forward(x, Mode::Train)?;
        Ok((softmax_cross_entropy(&logits, &labels)?.loss, tape.kink_signature()))
    };

    let (logits, tape) = net.forward(&x, Mode::Train)?;
    let base_signature = tape.kink_signature();
    let out = softmax_cross_entropy(&logits, &labels)?;
    let (dx, grads) = net.backward(&tape, out.grad)?;
    let sign = if opts.flip_analytic_sign { -1.0 } else { 1.0 };

    // Central difference of `eval` around its current point. A ReLU unit or
    // max-pool winner that flips within +-h puts the two evaluations on
    // different linear pieces and the quotient stops estimating the
    // derivative, so the step shrinks until both sides match the base
    // signature. `None` means no step was small enough.
    let central = |eval: &mut dyn FnMut(f64) -> Result<(f64, u64)>| -> Result<Option<(f64, bool)>> {
        let mut h = opts.step;
        for attempt in 0..=MAX_STEP_REDUCTIONS {
            let (plus, sp) = eval(h)?;
            let (minus, sm) = eval(-h)?;
            if sp == base_signature && sm == base_signature {
                return Ok(Some(((plus - minus) / (2.0 * h), attempt > 0)));
            }
            h /= 10.0;
        }
        Ok(None)
    };

    let mut tensors = Vec::new();
    let trainable: Vec<usize> = (0..net.store().params.len()).filter(|&i| net.store().params[i].trainable).collect();
    for pi in trainable {
        let len = net.store().params[pi].value.len();
        let probes = probe_indices(len, opts.samples_per_tensor, &mut rng);
        let mut check = TensorCheck {
            name: net.store().params[pi].name.clone(),
            probed: probes.len(),
            reduced_step: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for &j in &probes {
            let orig = net.store().params[pi].value[j];
            let numeric = central(&mut |d| {
                net.store_mut().params[pi].value[j] = orig + d;
                let r = loss_of(&net, &x);
                net.store_mut().params[pi].value[j] = orig;
                r
            })?;
            tally(&mut check, numeric, sign * grads.grads[pi][j], opts.magnitude_floor);
        }
        tensors.push(check);
    }

    let probes = probe_indices(x.len(), opts.samples_per_tensor, &mut rng);
    let mut check =
        TensorCheck { name: "input".into(), probed: probes.len(), reduced_step: 0, skipped: 0, max_rel_error: 0.0 };
    let mut xp = x.clone();
    for &j in &probes {
        let numeric = central(&mut |d| {
            xp.data[j] = x.data[j] + d;
            let r = loss_of(&net, &xp);
            xp.data[j] = x.data[j];
            r
        })?;
        tally(&mut check, numeric, sign * dx.data[j], opts.magnitude_floor);
    }
    tensors.push(check);

    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    // A tensor whose every probe was skipped has not been checked at all.
    let all_compared = tensors.iter().all(|t| t.skipped < t.probed);
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
        tolerance: opts.tolerance,
        passed: all_compared && max_rel_error < opts.tolerance,
    })
}

fn tally(check: &mut TensorCheck, numeric: Option<(f64, bool)>, analytic: f64, floor: f64) {
    match numeric {
        Some((n, reduced)) => {
            check.reduced_step += reduced as usize;
            check.max_rel_error = check.max_rel_error.max(relative_error(analytic, n, floor));
        }
        None => check.skipped += 1,
    }
}
