//! Central finite-difference oracle validating every analytic backward pass.
//!
//! All checks run in 64-bit. Instances are generated with a margin guard:
//! every argmax winner (epitomic candidates, pooling windows, ReLU
//! pre-activations) must beat its runner-up by more than `10 * epsilon`, so
//! the central difference never straddles a kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{Mode, Network, NetworkConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_resamples: usize,
    /// Negative-control hook: add `delta` to one analytic gradient element
    /// before comparing, simulating a buggy backward pass.
    pub corrupt: Option<Corruption>,
}

#[derive(Debug, Clone)]
pub struct Corruption {
    pub block: usize,
    pub index: usize,
    pub delta: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_resamples: 100,
            corrupt: None,
        }
    }
}

/// Verdict for one parameter tensor (or the input block).
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    /// Smallest argmax margin observed on the unperturbed instance.
    pub min_margin: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// Machine-readable CSV: one row per block.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("block,elements,max_rel_err,worst_index,analytic,numeric,verdict\n");
        for b in &self.blocks {
            out.push_str(&format!(
                "{},{},{:.3e},{},{:.6e},{:.6e},{}\n",
                b.name,
                b.elements,
                b.max_rel_err,
                b.worst_index,
                b.analytic_at_worst,
                b.numeric_at_worst,
                if b.pass { "pass" } else { "fail" }
            ));
        }
        out
    }

    /// Human-readable one-line-per-block summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<24} elements {:>6}  max rel err {:.3e}  {}\n",
                b.name,
                b.elements,
                b.max_rel_err,
                if b.pass { "pass" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "min argmax margin {:.3e}  overall {}\n",
            self.min_margin,
            if self.pass { "pass" } else { "FAIL" }
        ));
        out
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Loss of the net on a fixed instance with a fixed dropout stream, so every
/// evaluation in one check sees the identical realized function.
fn eval_loss(
    net: &mut Network<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    forward_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(forward_seed);
    net.forward_loss(batch, labels, Mode::Train, &mut rng)
}

/// Check every parameter block and the input block of `net` on one instance.
/// The caller must have generated the instance with adequate margins; the
/// guard is re-asserted here.
pub fn check_instance(
    net: &mut Network<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    forward_seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    // Analytic pass.
    net.zero_grads();
    eval_loss(net, batch, labels, forward_seed)?;
    let min_margin = net.min_margin();
    if min_margin <= 10.0 * cfg.epsilon {
        return Err(Error::GradCheck(format!(
            "instance margin {min_margin:.3e} below kink guard {:.3e}",
            10.0 * cfg.epsilon
        )));
    }
    let grad_input = net.backward()?;
    let mut analytic: Vec<(String, Vec<f64>)> = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.to_vec()))
        .collect();
    analytic.push(("input".to_string(), grad_input.data().to_vec()));
    if let Some(c) = &cfg.corrupt {
        analytic[c.block].1[c.index] += c.delta;
    }

    let mut blocks = Vec::with_capacity(analytic.len());
    let param_blocks = analytic.len() - 1;
    let mut batch = batch.clone();
    for (b, (name, grads)) in analytic.iter().enumerate() {
        let mut worst = BlockReport {
            name: name.clone(),
            elements: grads.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            pass: true,
        };
        for i in 0..grads.len() {
            let nudge = |net: &mut Network<f64>, batch: &mut Tensor<f64>, d: f64| {
                if b < param_blocks {
                    net.params()[b].value[i] += d;
                } else {
                    batch.data_mut()[i] += d;
                }
            };
            nudge(net, &mut batch, cfg.epsilon);
            let plus = eval_loss(net, &batch, labels, forward_seed)?;
            nudge(net, &mut batch, -2.0 * cfg.epsilon);
            let minus = eval_loss(net, &batch, labels, forward_seed)?;
            nudge(net, &mut batch, cfg.epsilon);
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            if !numeric.is_finite() {
                return Err(Error::GradCheck(format!(
                    "non-finite numeric gradient in block `{name}` at {i}"
                )));
            }
            let e = rel_err(grads[i], numeric);
            if e > worst.max_rel_err {
                worst.max_rel_err = e;
                worst.worst_index = i;
                worst.analytic_at_worst = grads[i];
                worst.numeric_at_worst = numeric;
            }
        }
        worst.pass = worst.max_rel_err < cfg.tolerance;
        blocks.push(worst);
    }
    let pass = blocks.iter().all(|b| b.pass);
    Ok(GradCheckReport {
        blocks,
        min_margin,
        pass,
    })
}

/// Build the net from `cfg` with random weights and a random batch, resample
/// until the margin guard holds, then run `check_instance`.
pub fn check_network(
    cfg: &NetworkConfig,
    batch_size: usize,
    seed: u64,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = cfg.input;
    let classes = cfg.classes();
    for attempt in 0..gc.max_resamples {
        let mut net: Network<f64> = Network::build(cfg, &mut rng)?;
        // Larger-than-init random weights give comfortable margins.
        for p in net.params() {
            for v in p.value.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let data: Vec<f64> = (0..batch_size * c * h * w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let batch = Tensor::from_vec(batch_size, c, h, w, data)?;
        let labels: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..classes)).collect();
        let forward_seed = seed.wrapping_add(attempt as u64);
        // Probe the margin before paying for the full check.
        net.zero_grads();
        eval_loss(&mut net, &batch, &labels, forward_seed)?;
        if net.min_margin() <= 10.0 * gc.epsilon {
            continue;
        }
        return check_instance(&mut net, &batch, &labels, forward_seed, gc);
    }
    Err(Error::GradCheck(format!(
        "margin guard unsatisfiable after {} resamples",
        gc.max_resamples
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::parse_config;

    fn check(cfg_text: &str, seed: u64) -> GradCheckReport {
        let cfg = parse_config(cfg_text).unwrap();
        check_network(&cfg, 2, seed, &GradCheckConfig::default()).unwrap()
    }

    #[test]
    fn linear_fc_softmax_is_exact_to_fd_truncation() {
        let report = check(
            "
[net]
input = 1x2x3

[layer out]
type = softmax
classes = 3
",
            1,
        );
        assert!(report.pass, "{}", report.to_text());
        // Smooth map: agreement far below the generic tolerance.
        for b in &report.blocks {
            assert!(b.max_rel_err < 1e-7, "{}", report.to_text());
        }
    }

    #[test]
    fn epitomic_layer_passes() {
        // K=2, V=5, W=3, C=2 on a 6x6 input.
        let report = check(
            "
[net]
input = 2x6x6

[layer ep]
type = epitomic
epitomes = 2
epitome = 5
filter = 3
stride = 1

[layer relu]
type = relu

[layer out]
type = softmax
classes = 3
",
            2,
        );
        assert!(report.pass, "{}", report.to_text());
    }

    #[test]
    fn normalized_epitomic_layer_passes() {
        let report = check(
            "
[net]
input = 2x6x6

[layer ep]
type = epitomic
epitomes = 2
epitome = 5
filter = 3
stride = 1
normalize = true
lambda = 0.01

[layer out]
type = softmax
classes = 3
",
            3,
        );
        assert!(report.pass, "{}", report.to_text());
    }

    #[test]
    fn topographic_layer_passes() {
        let report = check(
            "
[net]
input = 1x7x7

[layer top]
type = topographic
epitomes = 2
epitome = 9
filter = 3
stride = 2
pool = 2
normalize = true
lambda = 0.01

[layer out]
type = softmax
classes = 2
",
            4,
        );
        assert!(report.pass, "{}", report.to_text());
    }

    #[test]
    fn conv_maxpool_lrn_stack_passes() {
        let report = check(
            "
[net]
input = 2x8x8

[layer c]
type = conv
channels = 3
filter = 3
stride = 1

[layer r]
type = relu

[layer l]
type = lrn
lrn_n = 3
lrn_alpha = 0.5
lrn_k = 1.0

[layer p]
type = maxpool
pool = 2

[layer out]
type = softmax
classes = 3
",
            5,
        );
        assert!(report.pass, "{}", report.to_text());
    }

    #[test]
    fn dropout_stack_passes_with_fixed_mask() {
        let report = check(
            "
[net]
input = 1x5x5

[layer f]
type = fc
channels = 6

[layer d]
type = dropout
dropout = 0.4

[layer out]
type = softmax
classes = 2
",
            6,
        );
        assert!(report.pass, "{}", report.to_text());
    }

    #[test]
    fn two_epitomic_layer_net_passes_end_to_end() {
        let report = check(
            "
[net]
input = 1x8x8

[layer ep1]
type = epitomic
epitomes = 2
epitome = 4
filter = 3
stride = 2

[layer relu1]
type = relu

[layer ep2]
type = epitomic
epitomes = 3
epitome = 3
filter = 2
stride = 1
normalize = true
lambda = 0.01

[layer relu2]
type = relu

[layer fc]
type = fc
channels = 5

[layer out]
type = softmax
classes = 3
",
            7,
        );
        assert!(report.pass, "{}", report.to_text());
    }

    #[test]
    fn sign_flip_negative_control_fails_with_worst_element() {
        let cfg = parse_config(
            "
[net]
input = 1x4x4

[layer f]
type = fc
channels = 4

[layer out]
type = softmax
classes = 2
",
        )
        .unwrap();
        // First find a nonzero analytic gradient element to corrupt.
        let clean = check_network(&cfg, 2, 8, &GradCheckConfig::default()).unwrap();
        assert!(clean.pass);
        let gc = GradCheckConfig {
            corrupt: Some(Corruption {
                block: 0,
                index: clean.blocks[0].worst_index,
                delta: 10.0 * 1e-4,
            }),
            ..GradCheckConfig::default()
        };
        let bad = check_network(&cfg, 2, 8, &gc).unwrap();
        assert!(!bad.pass, "corruption went undetected: {}", bad.to_text());
        assert!(!bad.blocks[0].pass);
        assert_eq!(bad.blocks[0].worst_index, clean.blocks[0].worst_index);
    }

    #[test]
    fn csv_report_is_parseable() {
        let report = check(
            "
[net]
input = 1x3x3

[layer out]
type = softmax
classes = 2
",
            9,
        );
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "block,elements,max_rel_err,worst_index,analytic,numeric,verdict");
        assert_eq!(lines.len(), report.blocks.len() + 1);
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 7);
            assert!(line.ends_with("pass"));
        }
    }

    #[test]
    fn margin_guard_is_reported_in_the_verdict() {
        let report = check(
            "
[net]
input = 1x6x6

[layer ep]
type = epitomic
epitomes = 2
epitome = 4
filter = 3
stride = 1

[layer out]
type = softmax
classes = 2
",
            10,
        );
        assert!(report.min_margin > 10.0 * 1e-5);
    }
}
