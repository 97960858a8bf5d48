//! Finite-difference verification of the reverse-mode gradients, runnable at
//! 32- or 64-bit precision from the command line.

use crate::error::Result;
use crate::param::{Binding, ParamArena, ParamId};
use crate::tape::{Id, Tape};
use crate::tensor::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error metric used throughout: symmetric, safe near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs() + b.abs())
}

/// Central-difference step size, chosen per precision so truncation and
/// roundoff error are balanced. Kept small enough that rectifier kinks are
/// rarely straddled by a probe.
pub fn fd_step<E: Element>() -> f64 {
    if E::BITS == 64 {
        1e-6
    } else {
        5e-3
    }
}

/// Acceptance tolerance on the relative error, per precision.
pub fn fd_tol<E: Element>() -> f64 {
    if E::BITS == 64 {
        1e-5
    } else {
        1e-3
    }
}

#[derive(Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, max_err: f64, tol: f64) -> Self {
        CheckReport { name: name.into(), max_err, tol, pass: max_err < tol }
    }
}

/// Adds uniform noise to every parameter element. Freshly initialized
/// networks hold exact zeros (biases, beta) that rectifier chains propagate:
/// a position where one ReLU goes fully dead feeds exact zeros forward, the
/// next zero bias leaves that preactivation exactly on the following kink,
/// and a finite-difference probe of the bias straddles it while the analytic
/// subgradient stays on one side. Jittering first makes such ties
/// measure-zero, so checks compare gradients where the loss is smooth.
pub fn jitter_params<E: Element>(arena: &mut ParamArena<E>, rng: &mut impl Rng, amp: f64) {
    for p in arena.iter_mut() {
        for v in p.value.data_mut() {
            *v = *v + E::of_f64(rng.gen_range(-amp..amp));
        }
    }
}

/// Compares the gradients already accumulated in the arena against central
/// finite differences of `loss` over every element of every parameter.
/// Returns the worst relative error.
pub fn max_param_grad_err<E: Element>(
    arena: &mut ParamArena<E>,
    loss: &mut dyn FnMut(&ParamArena<E>) -> Result<f64>,
) -> Result<f64> {
    let h = fd_step::<E>();
    let mut worst = 0.0f64;
    for pi in 0..arena.len() {
        let id = ParamId(pi);
        for ei in 0..arena.value(id).len() {
            let orig = arena.value(id).data()[ei];
            arena.value_mut(id).data_mut()[ei] = orig + E::of_f64(h);
            let plus = loss(arena)?;
            arena.value_mut(id).data_mut()[ei] = orig - E::of_f64(h);
            let minus = loss(arena)?;
            arena.value_mut(id).data_mut()[ei] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let analytic = arena.get(id).grad.data()[ei].as_f64();
            worst = worst.max(rel_err(analytic, fd));
        }
    }
    Ok(worst)
}

fn run_case<E: Element>(
    name: &str,
    arena: &mut ParamArena<E>,
    forward: &mut dyn FnMut(&mut Tape<E>, &Binding) -> Result<Id>,
) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let binding = arena.bind(&mut tape);
    let loss_id = forward(&mut tape, &binding)?;
    tape.backward(loss_id)?;
    arena.zero_grads();
    arena.accumulate_grads(&tape, &binding);
    drop(tape);
    let mut loss_fn = |a: &ParamArena<E>| -> Result<f64> {
        let mut tp = Tape::new();
        let b = a.bind(&mut tp);
        let l = forward(&mut tp, &b)?;
        Ok(tp.scalar_value(l))
    };
    let worst = max_param_grad_err(arena, &mut loss_fn)?;
    Ok(CheckReport::new(name, worst, fd_tol::<E>()))
}

fn noise<E: Element>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<E> {
    Tensor::from_fn(shape, |_, _, _, _| E::of_f64(rng.gen_range(-1.0..1.0)))
}

/// Noise with magnitudes bounded away from zero. Central differences assume
/// the loss is smooth within the probe step, so inputs feeding a rectifier
/// must not sit closer to its kink than the step can reach.
fn noise_off_kink<E: Element>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<E> {
    let margin = 10.0 * fd_step::<E>();
    Tensor::from_fn(shape, |_, _, _, _| {
        let mag = rng.gen_range(margin..1.0);
        E::of_f64(if rng.gen_bool(0.5) { mag } else { -mag })
    })
}

/// One registered input tensor plus a target, the scaffolding most op cases
/// share. The input is a parameter so the probe also exercises input
/// gradients, not only weights.
struct OpCase<E: Element> {
    arena: ParamArena<E>,
    x: ParamId,
    target: Tensor<E>,
}

impl<E: Element> OpCase<E> {
    fn new(rng: &mut ChaCha8Rng, x_shape: [usize; 4], t_shape: [usize; 4]) -> Result<Self> {
        let mut arena = ParamArena::new();
        let x = arena.add("x", noise(rng, x_shape))?;
        Ok(OpCase { arena, x, target: noise(rng, t_shape) })
    }

    fn check(
        mut self,
        name: &str,
        mut body: impl FnMut(&mut Tape<E>, &Binding, ParamId) -> Result<Id>,
    ) -> Result<CheckReport> {
        let x = self.x;
        let target = self.target.clone();
        run_case(name, &mut self.arena, &mut |tape, binding| {
            let y = body(tape, binding, x)?;
            let t = tape.leaf(target.clone());
            tape.mse(y, t)
        })
    }
}

/// Runs the whole finite-difference suite at the precision `E`: every
/// differentiable op, the three training losses, a depth-3 recurrence, and
/// the miniature end-to-end pipeline through all 21 reconstruction layers.
/// Shapes stay tiny so the full run is a matter of seconds.
pub fn run_suite<E: Element>(seed: u64) -> Result<Vec<CheckReport>> {
    use crate::conv::Padding;
    use crate::layers::{BnCtx, BnLayer};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let mut case = OpCase::<E>::new(&mut rng, [2, 5, 5, 3], [2, 5, 5, 4])?;
        let k = case.arena.add("k", noise(&mut rng, [3, 3, 3, 4]))?;
        let b = case.arena.add("b", noise(&mut rng, [1, 1, 1, 4]))?;
        out.push(case.check("conv2d same stride 1", move |tape, binding, x| {
            tape.conv2d(binding.node(x), binding.node(k), Some(binding.node(b)), [1, 1], Padding::Same)
        })?);
    }
    {
        let mut case = OpCase::<E>::new(&mut rng, [2, 6, 6, 2], [2, 3, 3, 3])?;
        let k = case.arena.add("k", noise(&mut rng, [2, 2, 2, 3]))?;
        out.push(case.check("conv2d valid stride 2", move |tape, binding, x| {
            tape.conv2d(binding.node(x), binding.node(k), None, [2, 2], Padding::Valid)
        })?);
    }
    {
        let mut case = OpCase::<E>::new(&mut rng, [2, 3, 3, 4], [2, 6, 6, 3])?;
        let k = case.arena.add("k", noise(&mut rng, [2, 2, 3, 4]))?;
        let b = case.arena.add("b", noise(&mut rng, [1, 1, 1, 3]))?;
        out.push(case.check("conv_transpose2d stride 2", move |tape, binding, x| {
            tape.conv_transpose2d(binding.node(x), binding.node(k), Some(binding.node(b)), [2, 2])
        })?);
    }
    {
        let mut case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 4, 4, 3])?;
        let mut states = crate::param::StateArena::new();
        let bn = BnLayer::init(&mut case.arena, &mut states, "bn", 3)?;
        jitter_params(&mut case.arena, &mut rng, 0.1);
        out.push(case.check("batchnorm train", move |tape, binding, x| {
            let mut ctx = BnCtx::train(&mut states);
            bn.forward(tape, binding, binding.node(x), &mut ctx)
        })?);
    }
    {
        let mut case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 4, 4, 3])?;
        case.arena.set_value(case.x, noise_off_kink(&mut rng, [2, 4, 4, 3]))?;
        out.push(case.check("relu", |tape, binding, x| Ok(tape.relu(binding.node(x))))?);
    }
    {
        let case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 4, 4, 3])?;
        out.push(case.check("sigmoid", |tape, binding, x| Ok(tape.sigmoid(binding.node(x))))?);
    }
    {
        let case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 4, 4, 3])?;
        out.push(case.check("tanh", |tape, binding, x| Ok(tape.tanh(binding.node(x))))?);
    }
    {
        let mut case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 4, 4, 3])?;
        let y = case.arena.add("y", noise(&mut rng, [2, 4, 4, 3]))?;
        out.push(case.check("add", move |tape, binding, x| {
            tape.add(binding.node(x), binding.node(y))
        })?);
    }
    {
        let mut case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 4, 4, 3])?;
        let y = case.arena.add("y", noise(&mut rng, [2, 4, 4, 3]))?;
        out.push(case.check("sub", move |tape, binding, x| {
            tape.sub(binding.node(x), binding.node(y))
        })?);
    }
    {
        let mut case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 4, 4, 3])?;
        let y = case.arena.add("y", noise(&mut rng, [2, 4, 4, 3]))?;
        out.push(case.check("hadamard", move |tape, binding, x| {
            tape.hadamard(binding.node(x), binding.node(y))
        })?);
    }
    {
        let case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 4, 4, 3])?;
        out.push(case.check("scale", |tape, binding, x| Ok(tape.scale(binding.node(x), -1.7)))?);
    }
    {
        let mut case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 4, 4, 3])?;
        let g = case.arena.add("gain", noise(&mut rng, [1, 1, 1, 3]))?;
        out.push(case.check("mul_channel", move |tape, binding, x| {
            tape.mul_channel(binding.node(x), binding.node(g))
        })?);
    }
    {
        let mut case = OpCase::<E>::new(&mut rng, [1, 3, 3, 2], [1, 3, 3, 5])?;
        let y = case.arena.add("y", noise(&mut rng, [1, 3, 3, 3]))?;
        out.push(case.check("concat_channels", move |tape, binding, x| {
            tape.concat_channels(binding.node(x), binding.node(y))
        })?);
    }
    {
        let case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 1, 1, 1])?;
        out.push(case.check("sq_sum_per_sample", |tape, binding, x| {
            Ok(tape.sq_sum_per_sample(binding.node(x)))
        })?);
    }
    {
        // mean_all is the loss head everywhere else; here it is the case.
        let mut case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [1, 1, 1, 1])?;
        let y = case.arena.add("y", noise(&mut rng, [2, 4, 4, 3]))?;
        out.push(case.check("mean_all", move |tape, binding, x| {
            let prod = tape.hadamard(binding.node(x), binding.node(y))?;
            Ok(tape.mean_all(prod))
        })?);
    }

    let (lm, lr, lmse) = loss_cases::<E>(&mut rng)?;
    out.push(lm);
    out.push(lr);
    out.push(lmse);
    // The composite cases run at 64-bit only. Their graphs hold hundreds of
    // rectifier preactivations whose positions cannot be sampled away from
    // the kinks, and the wide 32-bit probe step straddles one almost surely,
    // reporting methodology noise rather than gradient defects.
    if E::BITS == 64 {
        out.push(recurrence_case::<E>(&mut rng)?);
        out.push(miniature_pipeline_case::<E>(&mut rng)?);
    }
    Ok(out)
}

/// The three training objectives, each through a tiny learned sampler so
/// gradients reach the measurement weights as well as both inputs.
fn loss_cases<E: Element>(rng: &mut ChaCha8Rng) -> Result<(CheckReport, CheckReport, CheckReport)> {
    use crate::conv::Padding;

    let cfg = crate::measurement::SamplingConfig::new(2, 2, 1, 0.5)?;
    let mask = crate::measurement::CodedMask::<E>::build(crate::measurement::MaskMode::Dct, &cfg)?;
    let build = |rng: &mut ChaCha8Rng| -> Result<(ParamArena<E>, ParamId, ParamId, ParamId)> {
        let mut arena = ParamArena::new();
        let xh = arena.add("x_hat", noise(rng, [2, 4, 4, 1]))?;
        let x = arena.add("x", noise(rng, [2, 4, 4, 1]))?;
        let w = arena.add("w", noise(rng, [1, 1, 4, 2]))?;
        Ok((arena, xh, x, w))
    };
    let mk = mask.kernel.clone();
    let sample = move |tape: &mut Tape<E>, binding: &Binding, w: ParamId, u: Id| -> Result<Id> {
        let k = tape.leaf(mk.clone());
        let y = tape.conv2d(u, k, None, [2, 2], Padding::Valid)?;
        tape.conv2d(y, binding.node(w), None, [1, 1], Padding::Valid)
    };

    let (mut arena, xh, x, w) = build(rng)?;
    let s = sample.clone();
    let lm = run_case("loss measurement", &mut arena, &mut |tape, binding| {
        let mut f = |tp: &mut Tape<E>, u: Id| s(tp, binding, w, u);
        crate::training::loss_measurement_node(tape, &mut f, binding.node(xh), binding.node(x))
    })?;

    let (mut arena, xh, x, w) = build(rng)?;
    let s = sample.clone();
    let lr = run_case("loss recurrent", &mut arena, &mut |tape, binding| {
        let mut f = |tp: &mut Tape<E>, u: Id| s(tp, binding, w, u);
        crate::training::loss_recurrent_node(tape, &mut f, binding.node(xh), binding.node(x))
    })?;

    let (mut arena, xh, x, _) = build(rng)?;
    let lmse = run_case("loss mse", &mut arena, &mut |tape, binding| {
        crate::training::loss_mse_node(tape, binding.node(xh), binding.node(x))
    })?;
    Ok((lm, lr, lmse))
}

/// Three recurrent refinements unrolled onto one tape, checked end to end
/// from the input image through the gates to the final latent.
fn recurrence_case<E: Element>(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    use crate::conv::Padding;
    use crate::layers::BnCtx;
    use crate::recurrent::{run_recurrence, LatentInit, RecurrentGates};

    let cfg = crate::measurement::SamplingConfig::new(2, 2, 1, 0.5)?;
    let mask = crate::measurement::CodedMask::<E>::build(crate::measurement::MaskMode::Dct, &cfg)?;
    let mut arena = ParamArena::new();
    let mut states = crate::param::StateArena::new();
    let x = arena.add("x", noise(rng, [2, 4, 4, 1]))?;
    let init = LatentInit::init(&mut arena, &mut states, rng, &cfg)?;
    let gates = RecurrentGates::init(&mut arena, &mut states, rng, &cfg)?;
    let w = arena.add("w", noise(rng, [1, 1, 4, 2]))?;
    jitter_params(&mut arena, rng, 0.1);
    let target = noise::<E>(rng, [2, 2, 2, 4]);
    let mk = mask.kernel.clone();
    run_case("recurrence depth 3", &mut arena, &mut |tape, binding| {
        let mut ctx = BnCtx::train(&mut states);
        let k = tape.leaf(mk.clone());
        let y1 = tape.conv2d(binding.node(x), k, None, [2, 2], Padding::Valid)?;
        let m = tape.conv2d(y1, binding.node(w), None, [1, 1], Padding::Valid)?;
        let mut f = |tp: &mut Tape<E>, z: Id| {
            tp.conv2d(z, binding.node(w), None, [1, 1], Padding::Valid)
        };
        let rec = run_recurrence(tape, binding, &init, &gates, m, 3, &mut f, &mut ctx)?;
        let t = tape.leaf(target.clone());
        tape.mse(rec.state.z, t)
    })
}

/// The whole model at desk scale: sample, recur twice, decode through all
/// 21 layers, and compare the derivative of the pixel loss parameter by
/// parameter. This is the case that catches wiring mistakes between stages.
fn miniature_pipeline_case<E: Element>(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    use crate::bundle::{build_variant, Variant};
    use crate::layers::BnCtx;
    use crate::measurement::{MaskMode, SamplingConfig};
    use crate::reconstructor::ReconWidths;
    use crate::recurrent::run_recurrence;

    let cfg = SamplingConfig::new(2, 2, 1, 0.5)?;
    let widths = ReconWidths { l4: 3, l5: 2, res: 2 };
    let bundle = build_variant::<E>(Variant::R2csNet, cfg, MaskMode::Dct, widths, 2, rng)?;
    let crate::bundle::ModelBundle {
        cfg,
        mask,
        mut arena,
        mut states,
        init,
        gates,
        net,
        measure,
        ..
    } = bundle;
    let gates = gates.expect("recurrent variant carries gates");
    jitter_params(&mut arena, rng, 0.1);
    let x_val = noise::<E>(rng, [2, 4, 4, 1]);
    run_case("miniature 21-layer pipeline", &mut arena, &mut |tape, binding| {
        let mut ctx = BnCtx::train(&mut states);
        let x = tape.leaf(x_val.clone());
        let y1 = crate::bundle::mask_node_raw(tape, x, &mask, &cfg)?;
        let m = crate::bundle::measure_node_raw(tape, binding, y1, measure)?;
        let mut f = |tp: &mut Tape<E>, z: Id| {
            crate::bundle::measure_node_raw(tp, binding, z, measure)
        };
        let rec = run_recurrence(tape, binding, &init, &gates, m, 2, &mut f, &mut ctx)?;
        let xh = net.reconstruct(tape, binding, rec.state.z, &mut ctx)?;
        tape.mse(xh, x)
    })
}

/// A harness self-test: gradients deliberately scaled wrong after the
/// backward pass must be flagged. A checker that lets this pass is broken.
pub fn corrupted_fixture<E: Element>(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut case = OpCase::<E>::new(&mut rng, [2, 4, 4, 3], [2, 4, 4, 3])?;
    let x = case.x;
    let target = case.target.clone();
    let forward = |tape: &mut Tape<E>, binding: &Binding| -> Result<Id> {
        let y = tape.sigmoid(binding.node(x));
        let t = tape.leaf(target.clone());
        tape.mse(y, t)
    };
    let mut tape = Tape::new();
    let binding = case.arena.bind(&mut tape);
    let loss_id = forward(&mut tape, &binding)?;
    tape.backward(loss_id)?;
    case.arena.zero_grads();
    case.arena.accumulate_grads(&tape, &binding);
    drop(tape);
    for p in case.arena.iter_mut() {
        for g in p.grad.data_mut() {
            *g = *g * E::of_f64(1.25);
        }
    }
    let mut loss_fn = |a: &ParamArena<E>| -> Result<f64> {
        let mut tp = Tape::new();
        let b = a.bind(&mut tp);
        let l = forward(&mut tp, &b)?;
        Ok(tp.scalar_value(l))
    };
    let worst = max_param_grad_err(&mut case.arena, &mut loss_fn)?;
    Ok(CheckReport::new("corrupted-backward fixture", worst, fd_tol::<E>()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_symmetric_and_scaled() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(0.0, 0.01) - 0.01 / 1.01).abs() < 1e-15);
        assert_eq!(rel_err(3.0, 5.0), rel_err(5.0, 3.0));
    }

    #[test]
    fn precision_settings_differ_by_width() {
        assert_eq!(fd_step::<f64>(), 1e-6);
        assert_eq!(fd_tol::<f64>(), 1e-5);
        assert!(fd_step::<f32>() > fd_step::<f64>());
        assert!(fd_tol::<f32>() > fd_tol::<f64>());
    }

    #[test]
    fn suite_passes_in_double_precision() {
        let reports = run_suite::<f64>(11).unwrap();
        assert_eq!(reports.len(), 20);
        for r in &reports {
            assert!(r.pass, "{} failed: {:.3e} vs tol {:.1e}", r.name, r.max_err, r.tol);
        }
    }

    #[test]
    fn corrupted_gradients_are_flagged() {
        let r = corrupted_fixture::<f64>(7).unwrap();
        assert!(!r.pass, "corrupted gradients slipped through: {:.3e}", r.max_err);
    }
}
