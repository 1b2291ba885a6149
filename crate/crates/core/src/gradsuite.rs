//! Finite-difference checks of every differentiable operation and every framework loss.

use rand::Rng as _;

use crate::autodiff::{finite_difference_report, finite_difference_report_params, FdReport, ParamStore, Tape, Var};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::frameworks::losses::{info_nce, negative_cosine, nt_xent};
use crate::frameworks::train::build_state;
use crate::frameworks::{Framework, FrameworkState, SimsiamPlacement};
use crate::hallucinator::{extrapolate_rows, init_hallucinator, hallucinate};
use crate::rng::{domain, substream, Rng};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Largest fraction of coordinates a case may leave out because a probe crossed a ReLU kink.
pub const MAX_SKIPPED_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_at_kinks: usize,
}

impl GradCheck {
    fn new(name: impl Into<String>, r: FdReport) -> Self {
        GradCheck {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            skipped_at_kinks: r.skipped_at_kinks,
        }
    }

    pub fn passed(&self) -> bool {
        let total = (self.checked + self.skipped_at_kinks).max(1) as f64;
        self.max_rel_error < TOLERANCE && (self.skipped_at_kinks as f64) <= MAX_SKIPPED_FRACTION * total
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("non-empty shape")
}

/// Moves every parameter off its initial value. Zero-initialized biases can otherwise place a
/// pre-activation exactly on a ReLU kink, where central differences are meaningless.
pub fn jitter(store: &mut ParamStore, rng: &mut Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

fn unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let mut t = random(&[rows, cols], rng);
    for r in t.data_mut().chunks_mut(cols) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Reduces any tensor to a scalar through fixed pseudo-random weights, so every output
/// element contributes a distinct amount to the gradient.
fn readout(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = substream(0, domain::EVAL, &[shape.iter().product::<usize>() as u64]);
    let w = tape.constant(random(&shape, &mut rng))?;
    let p = tape.mul(y, w)?;
    tape.mean(p)
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn op_cases(rng: &mut Rng) -> Vec<(&'static str, Tensor, OpFn)> {
    let b43 = random(&[4, 3], rng);
    let a23 = random(&[2, 3], rng);
    let same = random(&[3, 4], rng);
    let bias = random(&[4], rng);
    let rows = random(&[3, 4], rng);
    let other = random(&[2, 4], rng);
    let kernel = random(&[3, 2, 3, 3], rng);
    let conv_in = random(&[2, 2, 5, 5], rng);
    let conv_bias = random(&[3], rng);
    let negs = unit_rows(5, 4, rng);
    let views = unit_rows(4, 4, rng);
    let targets = random(&[3, 4], rng);
    let coef = vec![0.5, -1.5, 2.0];
    let lambdas = vec![0.3, 0.9, 0.05];
    let k = unit_rows(3, 4, rng);

    fn op(f: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> OpFn {
        Box::new(f)
    }
    macro_rules! case {
        ($name:expr, $x:expr, $f:expr) => {
            ($name, $x, op($f))
        };
    }
    vec![
        case!("matmul_lhs", random(&[3, 4], rng), move |t, x| {
            let b = t.constant(b43.clone())?;
            let y = t.matmul(x, b)?;
            readout(t, y)
        }),
        case!("matmul_rhs", random(&[3, 4], rng), move |t, x| {
            let a = t.constant(a23.clone())?;
            let y = t.matmul(a, x)?;
            readout(t, y)
        }),
        case!("transpose", random(&[3, 4], rng), |t, x| {
            let y = t.transpose(x)?;
            readout(t, y)
        }),
        case!("add", random(&[3, 4], rng), {
            let same = same.clone();
            move |t, x| {
                let c = t.constant(same.clone())?;
                let y = t.add(x, c)?;
                readout(t, y)
            }
        }),
        case!("sub", random(&[3, 4], rng), {
            let same = same.clone();
            move |t, x| {
                let c = t.constant(same.clone())?;
                let y = t.sub(c, x)?;
                readout(t, y)
            }
        }),
        case!("mul", random(&[3, 4], rng), move |t, x| {
            let c = t.constant(same.clone())?;
            let y = t.mul(x, c)?;
            let z = t.mul(y, x)?;
            readout(t, z)
        }),
        case!("add_bias_input", random(&[3, 4], rng), move |t, x| {
            let b = t.constant(bias.clone())?;
            let y = t.add_bias(x, b)?;
            readout(t, y)
        }),
        case!("add_bias_bias", random(&[4], rng), move |t, b| {
            let x = t.constant(rows.clone())?;
            let y = t.add_bias(x, b)?;
            readout(t, y)
        }),
        case!("scale", random(&[3, 4], rng), |t, x| {
            let y = t.scale(x, -2.5)?;
            readout(t, y)
        }),
        case!("scale_rows", random(&[3, 4], rng), move |t, x| {
            let y = t.scale_rows(x, &coef)?;
            readout(t, y)
        }),
        case!("relu", random(&[3, 4], rng), |t, x| {
            let y = t.relu(x)?;
            readout(t, y)
        }),
        case!("exp", random(&[3, 4], rng), |t, x| {
            let y = t.exp(x)?;
            readout(t, y)
        }),
        case!("concat_rows", random(&[3, 4], rng), {
            let other = other.clone();
            move |t, x| {
                let o = t.constant(other.clone())?;
                let y = t.concat(o, x, 0)?;
                readout(t, y)
            }
        }),
        case!("concat_features", random(&[2, 4], rng), move |t, x| {
            let o = t.constant(other.clone())?;
            let y = t.concat_features(x, o)?;
            let z = t.concat(y, y, 1)?;
            readout(t, z)
        }),
        case!("l2_normalize", random(&[3, 4], rng), |t, x| {
            let y = t.l2_normalize(x)?;
            readout(t, y)
        }),
        case!("sum_rows", random(&[3, 4], rng), |t, x| {
            let y = t.sum_rows(x)?;
            readout(t, y)
        }),
        case!("mean", random(&[3, 4], rng), |t, x| {
            let y = t.exp(x)?;
            t.mean(y)
        }),
        case!("reshape", random(&[3, 4], rng), |t, x| {
            let y = t.reshape(x, &[2, 6])?;
            readout(t, y)
        }),
        case!("conv2d_input", conv_in.clone(), {
            let kernel = kernel.clone();
            move |t, x| {
                let w = t.constant(kernel.clone())?;
                let y = t.conv2d(x, w, None, 1, 1)?;
                readout(t, y)
            }
        }),
        case!("conv2d_weight_strided", kernel.clone(), {
            let conv_in = conv_in.clone();
            move |t, w| {
                let x = t.constant(conv_in.clone())?;
                let y = t.conv2d(x, w, None, 2, 0)?;
                readout(t, y)
            }
        }),
        case!("conv2d_bias", conv_bias, move |t, b| {
            let x = t.constant(conv_in.clone())?;
            let w = t.constant(kernel.clone())?;
            let y = t.conv2d(x, w, Some(b), 2, 1)?;
            readout(t, y)
        }),
        case!("avg_pool2d", random(&[2, 3, 4, 6], rng), |t, x| {
            let y = t.avg_pool2d(x, 2, 3)?;
            readout(t, y)
        }),
        case!("softmax_cross_entropy", random(&[3, 5], rng), |t, x| {
            let mut mask = vec![false; 15];
            mask[3] = true;
            mask[11] = true;
            t.softmax_cross_entropy(x, &[0, 2, 4], Some(mask))
        }),
        case!("info_nce", random(&[3, 4], rng), move |t, x| {
            let q = t.l2_normalize(x)?;
            let p = t.constant(targets.clone())?;
            let p = t.l2_normalize(p)?;
            let n = t.constant(negs.clone())?;
            info_nce(t, q, p, n, 0.5)
        }),
        case!("nt_xent", random(&[4, 4], rng), move |t, x| {
            let a = t.l2_normalize(x)?;
            let v = t.constant(views.clone())?;
            let swapped = t.concat(v, a, 0)?;
            let all = t.concat(a, v, 0)?;
            nt_xent(t, all, swapped, all, 0.7)
        }),
        case!("negative_cosine", random(&[3, 4], rng), |t, x| {
            let z = t.exp(x)?;
            negative_cosine(t, x, z)
        }),
        case!("extrapolate", random(&[3, 4], rng), move |t, q| {
            let kv = t.constant(k.clone())?;
            let y = extrapolate_rows(t, q, kv, &lambdas)?;
            readout(t, y)
        }),
    ]
}

fn framework_config(framework: Framework, hallucinator: bool, placement: SimsiamPlacement) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.framework = framework;
    cfg.train.queue_size = 6;
    cfg.train.simsiam_placement = placement;
    cfg.encoder.channels = vec![2, 3];
    cfg.encoder.projector_hidden = 6;
    cfg.encoder.feature_dim = 8;
    cfg.hallucinator.enabled = hallucinator;
    cfg
}

/// Every framework/hallucinator combination at batch 4 and feature width 8.
pub fn framework_cases() -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    for fw in [Framework::Moco, Framework::Simclr, Framework::Simsiam] {
        let placements: &[SimsiamPlacement] = if fw == Framework::Simsiam {
            &[SimsiamPlacement::BeforePredictor, SimsiamPlacement::AfterPredictor]
        } else {
            &[SimsiamPlacement::BeforePredictor]
        };
        for &placement in placements {
            for hall in [false, true] {
                let mut name = format!("{}_hallucinator_{}", fw.name(), if hall { "on" } else { "off" });
                if fw == Framework::Simsiam {
                    name.push_str(match placement {
                        SimsiamPlacement::BeforePredictor => "_before_predictor",
                        SimsiamPlacement::AfterPredictor => "_after_predictor",
                    });
                }
                out.push((name, framework_config(fw, hall, placement)));
            }
        }
    }
    out
}

/// Checks the full loss of one framework against finite differences over all trainable parameters.
pub fn check_framework(state: &FrameworkState, seed: u64) -> Result<FdReport> {
    let mut rng = substream(seed, domain::EVAL, &[1]);
    let image = |rng: &mut Rng| {
        let data = (0..4 * 3 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![4, 3, 8, 8], data).expect("non-empty shape")
    };
    let x1 = image(&mut rng);
    let x2 = image(&mut rng);
    let lambdas: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
    let base = &state.nets().store;
    finite_difference_report_params(
        |tape, store| {
            let parts = match state {
                // The stop-gradient target is a constant of the objective, so it stays at the
                // unperturbed parameters while the online branch is perturbed.
                FrameworkState::Simsiam(s) => s.loss_with_target(tape, store, Some(base), &x1, &x2, &lambdas)?,
                _ => state.loss(tape, store, &x1, &x2, &lambdas)?,
            };
            Ok(parts.loss)
        },
        base,
        STEP,
    )
}

/// Runs all checks and returns the per-case maximum relative error.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = substream(seed, domain::EVAL, &[0]);
    let mut out = Vec::new();
    for (name, x, f) in op_cases(&mut rng) {
        out.push(GradCheck::new(name, finite_difference_report(f, &x, STEP)?));
    }

    let mut store = ParamStore::new();
    let params = init_hallucinator(&mut store, 4, 3, &mut rng)?;
    jitter(&mut store, &mut rng);
    let q = random(&[3, 4], &mut rng);
    let qp = random(&[3, 4], &mut rng);
    let report = finite_difference_report_params(
        |tape, s| {
            let qv = tape.constant(q.clone())?;
            let pv = tape.constant(qp.clone())?;
            let h = hallucinate(tape, s, qv, pv, &params)?;
            readout(tape, h)
        },
        &store,
        STEP,
    )?;
    out.push(GradCheck::new("hallucinate", report));

    for (name, cfg) in framework_cases() {
        let mut state = build_state(&cfg, seed)?;
        jitter(&mut state.nets_mut().store, &mut rng);
        out.push(GradCheck::new(name, check_framework(&state, seed)?));
    }
    Ok(out)
}
