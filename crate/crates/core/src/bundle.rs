//! A complete model: sampling geometry, coded mask, measurement weights,
//! latent machinery, and the decoder, with every learnable tensor in one
//! arena. The four variants differ only in which pieces exist and whether
//! the measurement weights learn.

use std::collections::BTreeMap;

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::measurement::{self, CodedMask, MaskMode, SamplingConfig};
use crate::param::{Binding, ParamArena, ParamId, StateArena};
use crate::reconstructor::{ReconNet, ReconWidths};
use crate::recurrent::{LatentInit, RecurrentGates};
use crate::tape::{Id, Tape};
use crate::tensor::Element;
use rand::Rng;

/// Model families compared in the ablation: a frozen random measurement
/// matrix, a learned one decoded directly, the same refined by plain
/// gradient descent at inference, and the full gated recurrent model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    RandomRcs,
    Rcs,
    RcsGd,
    R2csNet,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::RandomRcs => "random_rcs",
            Variant::Rcs => "rcs",
            Variant::RcsGd => "rcs_gd",
            Variant::R2csNet => "r2cs_net",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random_rcs" => Ok(Variant::RandomRcs),
            "rcs" => Ok(Variant::Rcs),
            "rcs_gd" => Ok(Variant::RcsGd),
            "r2cs_net" => Ok(Variant::R2csNet),
            other => Err(Error::config(format!(
                "unknown variant {other:?}; expected random_rcs, rcs, rcs_gd, or r2cs_net"
            ))),
        }
    }

    /// Whether the measurement matrix receives gradient updates.
    pub fn learns_measurement(&self) -> bool {
        !matches!(self, Variant::RandomRcs)
    }

    /// Whether the recurrent gates exist.
    pub fn has_gates(&self) -> bool {
        matches!(self, Variant::R2csNet)
    }

    pub fn all() -> [Variant; 4] {
        [Variant::RandomRcs, Variant::Rcs, Variant::RcsGd, Variant::R2csNet]
    }
}

pub struct ModelBundle<E: Element> {
    pub variant: Variant,
    pub cfg: SamplingConfig,
    pub mask: CodedMask<E>,
    pub t_steps: usize,
    pub widths: ReconWidths,
    pub arena: ParamArena<E>,
    pub states: StateArena,
    pub init: LatentInit,
    pub gates: Option<RecurrentGates>,
    pub net: ReconNet,
    pub measure: ParamId,
    /// Run provenance carried into the model file: seed, config echo,
    /// optimizer step count.
    pub meta: BTreeMap<String, String>,
}

/// Assembles a fresh bundle. Parameter registration order is fixed
/// (latent, gates, decoder, measurement) so files and checks are
/// reproducible for a given seed.
pub fn build_variant<E: Element>(
    variant: Variant,
    cfg: SamplingConfig,
    mask_mode: MaskMode,
    widths: ReconWidths,
    t_steps: usize,
    rng: &mut impl Rng,
) -> Result<ModelBundle<E>> {
    if t_steps == 0 {
        return Err(Error::config("recurrence depth must be at least 1"));
    }
    let mask = match mask_mode {
        MaskMode::Dct => CodedMask::dct(&cfg),
        MaskMode::Identity => CodedMask::identity(&cfg),
        MaskMode::Custom => {
            return Err(Error::config("custom masks are built from an explicit kernel"))
        }
    };
    let mut arena = ParamArena::new();
    let mut states = StateArena::new();
    let init = LatentInit::init(&mut arena, &mut states, rng, &cfg)?;
    let gates = if variant.has_gates() {
        Some(RecurrentGates::init(&mut arena, &mut states, rng, &cfg)?)
    } else {
        None
    };
    let net = ReconNet::init(&mut arena, &mut states, rng, &cfg, widths)?;
    let measure = arena.add("measure.weights", measurement::init_matrix_kernel(&cfg, rng))?;
    Ok(ModelBundle {
        variant,
        cfg,
        mask,
        t_steps,
        widths,
        arena,
        states,
        init,
        gates,
        net,
        measure,
        meta: BTreeMap::new(),
    })
}

impl<E: Element> ModelBundle<E> {
    /// Latent shape for a batch of images of the given size.
    pub fn latent_shape(&self, n: usize, h: usize, w: usize) -> Result<[usize; 4]> {
        self.cfg.check_divisible(h, w)?;
        Ok([n, h / self.cfg.block_h, w / self.cfg.block_w, self.cfg.block_len()])
    }

    /// Puts the frozen mask on a tape and rearranges an image into the
    /// block-transform latent layout. Gradients flow through to the image,
    /// never into the mask.
    pub fn mask_node(&self, tape: &mut Tape<E>, x: Id) -> Result<Id> {
        mask_node_raw(tape, x, &self.mask, &self.cfg)
    }

    /// The learned sampling: latent-shaped node to m measurement channels.
    pub fn measure_node(&self, tape: &mut Tape<E>, binding: &Binding, z: Id) -> Result<Id> {
        measure_node_raw(tape, binding, z, self.measure)
    }

    /// Total learnable elements.
    pub fn param_elements(&self) -> usize {
        self.arena.total_elements()
    }

    /// Marks every normalization layer as having seen statistics, so fresh
    /// bundles can run eval-mode paths in tests and untrained inference.
    pub fn seed_stats(&mut self) {
        for i in 0..self.states.len() {
            let st = self.states.get_mut(crate::param::StateId(i));
            if st.batches_seen == 0 {
                st.batches_seen = 1;
            }
        }
    }
}

/// Free-standing form of [`ModelBundle::mask_node`] for callers holding the
/// bundle's fields under split borrows, as the training loop does.
pub fn mask_node_raw<E: Element>(
    tape: &mut Tape<E>,
    x: Id,
    mask: &CodedMask<E>,
    cfg: &SamplingConfig,
) -> Result<Id> {
    let [_, h, w, _] = tape.value(x).shape();
    cfg.check_divisible(h, w)?;
    let kernel = tape.leaf(mask.kernel.clone());
    tape.conv2d(x, kernel, None, [cfg.block_h, cfg.block_w], Padding::Valid)
}

/// Free-standing form of [`ModelBundle::measure_node`].
pub fn measure_node_raw<E: Element>(
    tape: &mut Tape<E>,
    binding: &Binding,
    z: Id,
    measure: ParamId,
) -> Result<Id> {
    tape.conv2d(z, binding.node(measure), None, [1, 1], Padding::Valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_cfg() -> SamplingConfig {
        SamplingConfig::new(8, 8, 3, 0.25).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::all() {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("r2cs").is_err());
    }

    #[test]
    fn variant_capabilities_differ() {
        assert!(!Variant::RandomRcs.learns_measurement());
        assert!(Variant::Rcs.learns_measurement());
        assert!(!Variant::Rcs.has_gates());
        assert!(Variant::R2csNet.has_gates());
    }

    #[test]
    fn gates_exist_only_for_the_recurrent_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let widths = ReconWidths { l4: 3, l5: 2, res: 2 };
        for v in Variant::all() {
            let b: ModelBundle<f32> =
                build_variant(v, desk_cfg(), MaskMode::Dct, widths, 5, &mut rng).unwrap();
            assert_eq!(b.gates.is_some(), v.has_gates(), "{}", v.as_str());
            assert_eq!(b.arena.get(b.measure).name, "measure.weights");
        }
    }

    #[test]
    fn same_seed_means_identical_parameters() {
        let widths = ReconWidths { l4: 3, l5: 2, res: 2 };
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            build_variant::<f32>(Variant::R2csNet, desk_cfg(), MaskMode::Dct, widths, 5, &mut rng)
                .unwrap()
        };
        let (a, b) = (build(), build());
        assert_eq!(a.arena.len(), b.arena.len());
        for i in 0..a.arena.len() {
            let id = crate::param::ParamId(i);
            let (pa, pb) = (a.arena.get(id), b.arena.get(id));
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data(), pb.value.data(), "{}", pa.name);
        }
    }

    #[test]
    fn latent_shape_follows_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let widths = ReconWidths { l4: 3, l5: 2, res: 2 };
        let b: ModelBundle<f32> =
            build_variant(Variant::Rcs, desk_cfg(), MaskMode::Dct, widths, 5, &mut rng).unwrap();
        assert_eq!(b.latent_shape(2, 32, 32).unwrap(), [2, 4, 4, 192]);
        assert!(b.latent_shape(1, 30, 32).is_err());
    }

    #[test]
    fn zero_depth_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let widths = ReconWidths { l4: 3, l5: 2, res: 2 };
        let r = build_variant::<f32>(Variant::Rcs, desk_cfg(), MaskMode::Dct, widths, 0, &mut rng);
        assert!(r.is_err());
    }
}
