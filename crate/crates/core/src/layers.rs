//! Layer descriptors: small Copy-able structs holding parameter ids plus the
//! forward recipe, so network definitions stay declarative while parameters
//! live in one arena.

use crate::conv::Padding;
use crate::error::Result;
use crate::param::{uniform_fan_in, Binding, ParamArena, ParamId, StateArena, StateId};
use crate::tape::{Id, Tape};
use crate::tensor::{Element, Tensor};
use rand::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batchnorm layers consume batch statistics (updating the running
/// averages) or replay the stored ones.
pub enum BnCtx<'a> {
    Train { states: &'a mut StateArena, momentum: f64 },
    Eval { states: &'a StateArena },
}

impl<'a> BnCtx<'a> {
    pub fn train(states: &'a mut StateArena) -> Self {
        BnCtx::Train { states, momentum: BN_MOMENTUM }
    }

    pub fn eval(states: &'a StateArena) -> Self {
        BnCtx::Eval { states }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, BnCtx::Train { .. })
    }
}

#[derive(Clone, Copy)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: [usize; 2],
    pub padding: Padding,
}

impl ConvLayer {
    /// Registers a kernel `[kh,kw,cin,cout]` (fan-in scaled uniform) and an
    /// optional zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn init<E: Element>(
        arena: &mut ParamArena<E>,
        rng: &mut impl Rng,
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: [usize; 2],
        padding: Padding,
        with_bias: bool,
    ) -> Result<Self> {
        let kernel = arena.add(
            format!("{name}.kernel"),
            uniform_fan_in(rng, [kh, kw, cin, cout], kh * kw * cin),
        )?;
        let bias = if with_bias {
            Some(arena.add(format!("{name}.bias"), Tensor::zeros([1, 1, 1, cout]))?)
        } else {
            None
        };
        Ok(ConvLayer { kernel, bias, stride, padding })
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        binding: &Binding,
        x: Id,
    ) -> Result<Id> {
        tape.conv2d(
            x,
            binding.node(self.kernel),
            self.bias.map(|b| binding.node(b)),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Copy)]
pub struct ConvTransposeLayer {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: [usize; 2],
}

impl ConvTransposeLayer {
    /// Kernel layout `[kh,kw,cout,cin]`; fan-in taken as cin since each
    /// output pixel of a block upsampler sees one input pixel's channels.
    #[allow(clippy::too_many_arguments)]
    pub fn init<E: Element>(
        arena: &mut ParamArena<E>,
        rng: &mut impl Rng,
        name: &str,
        kh: usize,
        kw: usize,
        cout: usize,
        cin: usize,
        stride: [usize; 2],
        with_bias: bool,
    ) -> Result<Self> {
        let kernel = arena
            .add(format!("{name}.kernel"), uniform_fan_in(rng, [kh, kw, cout, cin], cin))?;
        let bias = if with_bias {
            Some(arena.add(format!("{name}.bias"), Tensor::zeros([1, 1, 1, cout]))?)
        } else {
            None
        };
        Ok(ConvTransposeLayer { kernel, bias, stride })
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        binding: &Binding,
        x: Id,
    ) -> Result<Id> {
        tape.conv_transpose2d(
            x,
            binding.node(self.kernel),
            self.bias.map(|b| binding.node(b)),
            self.stride,
        )
    }
}

#[derive(Clone, Copy)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: StateId,
}

impl BnLayer {
    pub fn init<E: Element>(
        arena: &mut ParamArena<E>,
        states: &mut StateArena,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let gamma = arena.add(format!("{name}.gamma"), Tensor::filled([1, 1, 1, channels], E::one()))?;
        let beta = arena.add(format!("{name}.beta"), Tensor::zeros([1, 1, 1, channels]))?;
        let state = states.add(name, channels)?;
        Ok(BnLayer { gamma, beta, state })
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        binding: &Binding,
        x: Id,
        ctx: &mut BnCtx,
    ) -> Result<Id> {
        let (g, b) = (binding.node(self.gamma), binding.node(self.beta));
        match ctx {
            BnCtx::Train { states, momentum } => {
                let (id, stats) = tape.batchnorm_train(x, g, b, BN_EPS)?;
                states.update(self.state, &stats, *momentum);
                Ok(id)
            }
            BnCtx::Eval { states } => {
                let (mean, var) = states.eval_stats(self.state)?;
                tape.batchnorm_eval(x, g, b, mean, var, BN_EPS)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_layer_registers_named_parameters() {
        let mut arena = ParamArena::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let layer = ConvLayer::init(
            &mut arena, &mut rng, "net.l1", 3, 3, 2, 4, [1, 1], Padding::Same, true,
        )
        .unwrap();
        assert_eq!(arena.get(layer.kernel).name, "net.l1.kernel");
        assert_eq!(arena.get(layer.bias.unwrap()).name, "net.l1.bias");
        assert_eq!(arena.value(layer.kernel).shape(), [3, 3, 2, 4]);
        let mut tape = Tape::new();
        let binding = arena.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros([1, 5, 5, 2]));
        let y = layer.forward(&mut tape, &binding, x).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 5, 5, 4]);
    }

    #[test]
    fn bn_layer_train_then_eval_round_trip() {
        let mut arena = ParamArena::<f64>::new();
        let mut states = StateArena::new();
        let layer = BnLayer::init(&mut arena, &mut states, "net.bn", 2).unwrap();
        let x = Tensor::from_fn([2, 2, 2, 2], |n, h, w, c| (n + h + w + c) as f64);

        // Eval before any training batch is a contract violation.
        {
            let mut tape = Tape::new();
            let binding = arena.bind(&mut tape);
            let xid = tape.leaf(x.clone());
            let mut ctx = BnCtx::eval(&states);
            assert!(layer.forward(&mut tape, &binding, xid, &mut ctx).is_err());
        }
        {
            let mut tape = Tape::new();
            let binding = arena.bind(&mut tape);
            let xid = tape.leaf(x.clone());
            let mut ctx = BnCtx::train(&mut states);
            layer.forward(&mut tape, &binding, xid, &mut ctx).unwrap();
        }
        assert_eq!(states.get(layer.state).batches_seen, 1);
        let mut tape = Tape::new();
        let binding = arena.bind(&mut tape);
        let xid = tape.leaf(x);
        let mut ctx = BnCtx::eval(&states);
        layer.forward(&mut tape, &binding, xid, &mut ctx).unwrap();
    }
}
