//! Inference-time latent production behind one interface. Each approach
//! (direct decode of the initial latent, the gated recurrence, plain
//! gradient descent on the measurement residual) registers by name and is
//! selected at runtime from the model's variant, so evaluation and the CLI
//! drive every model through the same path.
//!
//! Training does not go through this registry: gradients need the on-tape
//! unrolled graph, which the train loop builds directly.

use crate::bundle::{ModelBundle, Variant};
use crate::error::{Error, Result};
use crate::layers::BnCtx;
use crate::measurement::add_noise;
use crate::param::Binding;
use crate::recurrent::{gd_latent_optimize, run_recurrence};
use crate::tape::{Id, Tape};
use crate::tensor::{Element, Tensor};
use rand::Rng;

/// Default step size for gradient-descent refinement at inference. The
/// optimizer halves it automatically when the objective plateaus.
pub const GD_EVAL_LR: f64 = 0.1;

pub struct LatentOutcome<E: Element> {
    /// Final latent, as a node on the caller's tape.
    pub z: Id,
    /// Measurement-residual trace when the strategy iterates.
    pub residual_trace: Option<Vec<f64>>,
    /// Latent snapshots per step, Z0 first. Always at least one entry.
    pub step_latents: Vec<Tensor<E>>,
}

pub trait LatentStrategy<E: Element> {
    fn name(&self) -> &'static str;

    /// Produces the latent for a measurement node already on the tape.
    /// `steps` of 0 means the bundle's trained depth. Runs in eval mode;
    /// normalization layers use stored statistics.
    fn infer(
        &self,
        bundle: &ModelBundle<E>,
        tape: &mut Tape<E>,
        binding: &Binding,
        m: Id,
        steps: usize,
    ) -> Result<LatentOutcome<E>>;
}

/// Decode straight from the initial latent; iteration count is ignored.
pub struct DirectLatent;

impl<E: Element> LatentStrategy<E> for DirectLatent {
    fn name(&self) -> &'static str {
        "direct"
    }

    fn infer(
        &self,
        bundle: &ModelBundle<E>,
        tape: &mut Tape<E>,
        binding: &Binding,
        m: Id,
        _steps: usize,
    ) -> Result<LatentOutcome<E>> {
        let mut ctx = BnCtx::eval(&bundle.states);
        let z = bundle.init.z0(tape, binding, m, &mut ctx)?;
        Ok(LatentOutcome {
            z,
            residual_trace: None,
            step_latents: vec![tape.value(z).clone()],
        })
    }
}

/// The gated recurrence, unrolled for the requested number of steps with
/// clean measurement evaluations.
pub struct RecurrentLatent;

impl<E: Element> LatentStrategy<E> for RecurrentLatent {
    fn name(&self) -> &'static str {
        "recurrent"
    }

    fn infer(
        &self,
        bundle: &ModelBundle<E>,
        tape: &mut Tape<E>,
        binding: &Binding,
        m: Id,
        steps: usize,
    ) -> Result<LatentOutcome<E>> {
        let gates = bundle
            .gates
            .as_ref()
            .ok_or_else(|| Error::eval("model has no recurrent gates"))?;
        let t = if steps == 0 { bundle.t_steps } else { steps };
        let mut measure = |tp: &mut Tape<E>, z: Id| bundle.measure_node(tp, binding, z);
        let mut ctx = BnCtx::eval(&bundle.states);
        let out =
            run_recurrence(tape, binding, &bundle.init, gates, m, t, &mut measure, &mut ctx)?;
        let step_latents = out.z_nodes.iter().map(|&id| tape.value(id).clone()).collect();
        Ok(LatentOutcome {
            z: out.state.z,
            residual_trace: Some(out.residual_trace),
            step_latents,
        })
    }
}

/// Gradient descent on the measurement residual through the decoder,
/// warm-started from the direct latent.
pub struct GdLatent {
    pub lr: f64,
}

impl<E: Element> LatentStrategy<E> for GdLatent {
    fn name(&self) -> &'static str {
        "gd"
    }

    fn infer(
        &self,
        bundle: &ModelBundle<E>,
        tape: &mut Tape<E>,
        binding: &Binding,
        m: Id,
        steps: usize,
    ) -> Result<LatentOutcome<E>> {
        let t = if steps == 0 { bundle.t_steps } else { steps };
        let m_val = tape.value(m).clone();
        let z0 = {
            let mut ctx = BnCtx::eval(&bundle.states);
            let node = bundle.init.z0(tape, binding, m, &mut ctx)?;
            tape.value(node).clone()
        };
        // Fresh tape per iteration: decode the candidate latent, then
        // measure the reconstruction like a new acquisition.
        let mut forward = |tp: &mut Tape<E>, z: Id| -> Result<Id> {
            let inner = bundle.arena.bind(tp);
            let mut ctx = BnCtx::eval(&bundle.states);
            let image = bundle.net.reconstruct(tp, &inner, z, &mut ctx)?;
            let masked = bundle.mask_node(tp, image)?;
            bundle.measure_node(tp, &inner, masked)
        };
        let out = gd_latent_optimize(&z0, &m_val, &mut forward, t, self.lr)?;
        let z = tape.leaf(out.z.clone());
        Ok(LatentOutcome {
            z,
            residual_trace: Some(out.objective_trace),
            step_latents: vec![z0, out.z],
        })
    }
}

/// Every registered strategy, lookup key being `name()`.
pub fn registry<E: Element>() -> Vec<Box<dyn LatentStrategy<E>>> {
    vec![Box::new(DirectLatent), Box::new(RecurrentLatent), Box::new(GdLatent { lr: GD_EVAL_LR })]
}

pub fn lookup<E: Element>(name: &str) -> Result<Box<dyn LatentStrategy<E>>> {
    registry()
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::config(format!("unknown latent strategy {name:?}")))
}

/// The strategy each variant evaluates with.
pub fn strategy_name(variant: Variant) -> &'static str {
    match variant {
        Variant::RandomRcs | Variant::Rcs => "direct",
        Variant::RcsGd => "gd",
        Variant::R2csNet => "recurrent",
    }
}

pub struct ReconOutcome<E: Element> {
    pub image: Tensor<E>,
    pub residual_trace: Option<Vec<f64>>,
    pub step_latents: Vec<Tensor<E>>,
}

/// The whole eval pipeline for one batch: sample with optional measurement
/// noise, produce the latent with the variant's strategy, decode.
pub fn reconstruct_batch<E: Element>(
    bundle: &ModelBundle<E>,
    x: &Tensor<E>,
    sigma: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<ReconOutcome<E>> {
    let mut tape = Tape::new();
    let binding = bundle.arena.bind(&mut tape);
    let x_id = tape.leaf(x.clone());
    let masked = bundle.mask_node(&mut tape, x_id)?;
    let mut m = bundle.measure_node(&mut tape, &binding, masked)?;
    if sigma != 0.0 {
        let noisy = add_noise(tape.value(m), sigma, rng)?;
        m = tape.leaf(noisy);
    }
    let strategy = lookup::<E>(strategy_name(bundle.variant))?;
    let latent = strategy.infer(bundle, &mut tape, &binding, m, steps)?;
    let mut ctx = BnCtx::eval(&bundle.states);
    let image = bundle.net.reconstruct(&mut tape, &binding, latent.z, &mut ctx)?;
    Ok(ReconOutcome {
        image: tape.value(image).clone(),
        residual_trace: latent.residual_trace,
        step_latents: latent.step_latents,
    })
}
