//! The 21-layer residual decoder: latent enrichment (1x1 convs), a strided
//! transposed convolution back to image shape, three artifact-suppression
//! convolutions, then five residual blocks that add their input back three
//! layers later. Output is rectified into the non-negative pixel range.

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::layers::{BnCtx, BnLayer, ConvLayer, ConvTransposeLayer};
use crate::measurement::SamplingConfig;
use crate::param::{Binding, ParamArena, StateArena};
use crate::tape::{Id, Tape};
use crate::tensor::Element;
use rand::Rng;

/// Channel widths left open by the block structure: the wide and narrow
/// artifact-suppression layers (4 and 5) and the residual blocks' internal
/// width. Layers 1 to 3 and every block boundary are pinned by the latent
/// and image shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReconWidths {
    pub l4: usize,
    pub l5: usize,
    pub res: usize,
}

impl Default for ReconWidths {
    fn default() -> Self {
        ReconWidths { l4: 64, l5: 32, res: 32 }
    }
}

impl ReconWidths {
    pub fn validate(&self) -> Result<()> {
        if self.l4 == 0 || self.l5 == 0 || self.res == 0 {
            return Err(Error::config("reconstruction widths must be nonzero"));
        }
        Ok(())
    }
}

/// One layer of the residual stretch (7..=21). Skip-adding layers carry no
/// normalization; the rest are ReLU(BN(conv)).
#[derive(Clone, Copy)]
pub struct ResLayer {
    pub conv: ConvLayer,
    pub bn: Option<BnLayer>,
}

/// A row of the architecture table, for inspection output and tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub index: usize,
    pub kind: &'static str,
    pub kernel: [usize; 2],
    pub cin: usize,
    pub cout: usize,
    pub batch_norm: bool,
}

impl LayerRow {
    /// Learnable elements in this layer: kernel, bias, and the two
    /// normalization vectors when present.
    pub fn param_count(&self) -> usize {
        let conv = self.kernel[0] * self.kernel[1] * self.cin * self.cout + self.cout;
        conv + if self.batch_norm { 2 * self.cout } else { 0 }
    }
}

pub struct ReconNet {
    pub l1: ConvLayer,
    pub bn1: BnLayer,
    pub l2: ConvLayer,
    pub bn2: BnLayer,
    pub l3: ConvTransposeLayer,
    pub l4: ConvLayer,
    pub bn4: BnLayer,
    pub l5: ConvLayer,
    pub bn5: BnLayer,
    pub l6: ConvLayer,
    pub bn6: BnLayer,
    /// Layers 7..=21 in order.
    pub res: [ResLayer; 15],
    pub widths: ReconWidths,
    pub n_ch: usize,
    pub block: [usize; 2],
}

/// Layers whose output is the bare convolution plus the activation from
/// three layers back.
fn is_skip_layer(l: usize) -> bool {
    l >= 9 && (l - 9) % 3 == 0
}

impl ReconNet {
    pub fn init<E: Element>(
        arena: &mut ParamArena<E>,
        states: &mut StateArena,
        rng: &mut impl Rng,
        cfg: &SamplingConfig,
        widths: ReconWidths,
    ) -> Result<Self> {
        widths.validate()?;
        let l = cfg.block_len();
        let ch = cfg.channels;
        fn conv<E: Element, R: Rng>(
            arena: &mut ParamArena<E>,
            rng: &mut R,
            i: usize,
            k: usize,
            cin: usize,
            cout: usize,
        ) -> Result<ConvLayer> {
            ConvLayer::init(
                arena,
                rng,
                &format!("recon.l{i}"),
                k,
                k,
                cin,
                cout,
                [1, 1],
                Padding::Same,
                true,
            )
        }
        let bn = |arena: &mut ParamArena<E>, states: &mut StateArena, i: usize, c| {
            BnLayer::init(arena, states, &format!("recon.l{i}.bn"), c)
        };

        let l1 = conv(arena, rng, 1, 1, l, l)?;
        let bn1 = bn(arena, states, 1, l)?;
        let l2 = conv(arena, rng, 2, 1, l, l)?;
        let bn2 = bn(arena, states, 2, l)?;
        let l3 = ConvTransposeLayer::init(
            arena,
            rng,
            "recon.l3",
            cfg.block_h,
            cfg.block_w,
            ch,
            l,
            [cfg.block_h, cfg.block_w],
            true,
        )?;
        let l4 = conv(arena, rng, 4, 11, ch, widths.l4)?;
        let bn4 = bn(arena, states, 4, widths.l4)?;
        let l5 = conv(arena, rng, 5, 7, widths.l4, widths.l5)?;
        let bn5 = bn(arena, states, 5, widths.l5)?;
        let l6 = conv(arena, rng, 6, 1, widths.l5, ch)?;
        let bn6 = bn(arena, states, 6, ch)?;

        let mut res = Vec::with_capacity(15);
        for i in 7..=21usize {
            let (cin, cout) = match (i - 7) % 3 {
                0 => (ch, widths.res),
                1 => (widths.res, widths.res),
                _ => (widths.res, ch),
            };
            let c = conv(arena, rng, i, 3, cin, cout)?;
            let b = if is_skip_layer(i) { None } else { Some(bn(arena, states, i, cout)?) };
            res.push(ResLayer { conv: c, bn: b });
        }
        let res: [ResLayer; 15] = res.try_into().map_err(|_| Error::config("layer count"))?;

        Ok(ReconNet {
            l1,
            bn1,
            l2,
            bn2,
            l3,
            l4,
            bn4,
            l5,
            bn5,
            l6,
            bn6,
            res,
            widths,
            n_ch: ch,
            block: [cfg.block_h, cfg.block_w],
        })
    }

    /// Activation after layer `upto` (1..=21). The layer-6 rectifier belongs
    /// to stage 6; the final output rectifier does not belong to stage 21.
    pub fn forward_stage<E: Element>(
        &self,
        tape: &mut Tape<E>,
        binding: &Binding,
        z: Id,
        upto: usize,
        ctx: &mut BnCtx,
    ) -> Result<Id> {
        if !(1..=21).contains(&upto) {
            return Err(Error::config(format!("stage index {upto} outside 1..=21")));
        }
        let mut cur = z;
        // Skip source: stage 6 first, then each skip-add output in turn.
        let mut anchor = None;
        for l in 1..=upto {
            cur = match l {
                1 => {
                    let c = self.l1.forward(tape, binding, cur)?;
                    self.bn1.forward(tape, binding, c, ctx)?
                }
                2 => {
                    let c = self.l2.forward(tape, binding, cur)?;
                    self.bn2.forward(tape, binding, c, ctx)?
                }
                3 => self.l3.forward(tape, binding, cur)?,
                4 => {
                    let c = self.l4.forward(tape, binding, cur)?;
                    self.bn4.forward(tape, binding, c, ctx)?
                }
                5 => {
                    let c = self.l5.forward(tape, binding, cur)?;
                    self.bn5.forward(tape, binding, c, ctx)?
                }
                6 => {
                    let c = self.l6.forward(tape, binding, cur)?;
                    let n = self.bn6.forward(tape, binding, c, ctx)?;
                    let a = tape.relu(n);
                    anchor = Some(a);
                    a
                }
                _ => {
                    let layer = &self.res[l - 7];
                    let c = layer.conv.forward(tape, binding, cur)?;
                    if is_skip_layer(l) {
                        let s = tape.add(c, anchor.expect("stage 6 precedes skips"))?;
                        anchor = Some(s);
                        s
                    } else {
                        let bn = layer.bn.as_ref().expect("non-skip layers normalize");
                        let n = bn.forward(tape, binding, c, ctx)?;
                        tape.relu(n)
                    }
                }
            };
        }
        Ok(cur)
    }

    /// Full decode: all 21 layers, then rectification into pixel range.
    pub fn reconstruct<E: Element>(
        &self,
        tape: &mut Tape<E>,
        binding: &Binding,
        z: Id,
        ctx: &mut BnCtx,
    ) -> Result<Id> {
        let out = self.forward_stage(tape, binding, z, 21, ctx)?;
        Ok(tape.relu(out))
    }

    /// The architecture as 21 table rows.
    pub fn rows(&self) -> Vec<LayerRow> {
        let l = self.block[0] * self.block[1] * self.n_ch;
        let (w, ch) = (self.widths, self.n_ch);
        let mut rows = vec![
            LayerRow { index: 1, kind: "conv", kernel: [1, 1], cin: l, cout: l, batch_norm: true },
            LayerRow { index: 2, kind: "conv", kernel: [1, 1], cin: l, cout: l, batch_norm: true },
            LayerRow {
                index: 3,
                kind: "conv_transpose",
                kernel: self.block,
                cin: l,
                cout: ch,
                batch_norm: false,
            },
            LayerRow { index: 4, kind: "conv", kernel: [11, 11], cin: ch, cout: w.l4, batch_norm: true },
            LayerRow { index: 5, kind: "conv", kernel: [7, 7], cin: w.l4, cout: w.l5, batch_norm: true },
            LayerRow { index: 6, kind: "conv", kernel: [1, 1], cin: w.l5, cout: ch, batch_norm: true },
        ];
        for i in 7..=21usize {
            let (cin, cout) = match (i - 7) % 3 {
                0 => (ch, w.res),
                1 => (w.res, w.res),
                _ => (w.res, ch),
            };
            let kind = if is_skip_layer(i) { "conv+skip" } else { "conv" };
            rows.push(LayerRow {
                index: i,
                kind,
                kernel: [3, 3],
                cin,
                cout,
                batch_norm: !is_skip_layer(i),
            });
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net(
        cfg: &SamplingConfig,
        widths: ReconWidths,
        seed: u64,
    ) -> (ParamArena<f64>, StateArena, ReconNet) {
        let mut arena = ParamArena::new();
        let mut states = StateArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ReconNet::init(&mut arena, &mut states, &mut rng, cfg, widths).unwrap();
        (arena, states, net)
    }

    fn decode(
        arena: &ParamArena<f64>,
        states: &StateArena,
        net: &ReconNet,
        z: &Tensor<f64>,
        upto: Option<usize>,
    ) -> Tensor<f64> {
        let mut states = states.clone();
        let mut tape = Tape::new();
        let binding = arena.bind(&mut tape);
        let zid = tape.leaf(z.clone());
        let mut ctx = BnCtx::train(&mut states);
        let out = match upto {
            Some(l) => net.forward_stage(&mut tape, &binding, zid, l, &mut ctx).unwrap(),
            None => net.reconstruct(&mut tape, &binding, zid, &mut ctx).unwrap(),
        };
        tape.value(out).clone()
    }

    #[test]
    fn table_matches_block_structure() {
        let cfg = SamplingConfig::new(8, 8, 3, 0.1).unwrap();
        let (_, _, net) = small_net(&cfg, ReconWidths::default(), 3);
        let rows = net.rows();
        assert_eq!(rows.len(), 21);
        assert_eq!(rows[0].kernel, [1, 1]);
        assert_eq!(rows[0].cout, 192);
        let skips: Vec<usize> =
            rows.iter().filter(|r| r.kind == "conv+skip").map(|r| r.index).collect();
        assert_eq!(skips, vec![9, 12, 15, 18, 21]);
        for r in &rows {
            if r.kind == "conv+skip" {
                assert!(!r.batch_norm);
                assert_eq!(r.cout, 3);
            }
        }
        // Spot check one count: layer 4 is 11x11x3x64 + 64 bias + 2*64 norm.
        assert_eq!(rows[3].param_count(), 11 * 11 * 3 * 64 + 64 + 128);
    }

    #[test]
    fn transpose_stage_conserves_element_count() {
        let cfg = SamplingConfig::new(8, 8, 3, 0.1).unwrap();
        let (arena, states, net) = small_net(&cfg, ReconWidths { l4: 4, l5: 3, res: 2 }, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::from_fn([1, 2, 2, 192], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let s3 = decode(&arena, &states, &net, &z, Some(3));
        assert_eq!(s3.shape(), [1, 16, 16, 3]);
        assert_eq!(s3.len(), z.len());
    }

    #[test]
    fn reconstruct_output_shape_and_range() {
        let cfg = SamplingConfig::new(8, 8, 3, 0.1).unwrap();
        let (arena, states, net) = small_net(&cfg, ReconWidths { l4: 4, l5: 3, res: 2 }, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = Tensor::from_fn([1, 4, 4, 192], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let x = decode(&arena, &states, &net, &z, None);
        assert_eq!(x.shape(), [1, 32, 32, 3]);
        assert!(x.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stage_21_plus_rectifier_equals_reconstruct() {
        let cfg = SamplingConfig::new(2, 2, 1, 0.5).unwrap();
        let (arena, states, net) = small_net(&cfg, ReconWidths { l4: 3, l5: 2, res: 2 }, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = Tensor::from_fn([2, 3, 3, 4], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let s21 = decode(&arena, &states, &net, &z, Some(21));
        let full = decode(&arena, &states, &net, &z, None);
        let manual = s21.map(|v| v.max(0.0));
        assert!(manual.max_abs_diff(&full) == 0.0);
    }

    #[test]
    fn stage_6_is_rectified() {
        let cfg = SamplingConfig::new(2, 2, 1, 0.5).unwrap();
        let (arena, states, net) = small_net(&cfg, ReconWidths { l4: 3, l5: 2, res: 2 }, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = Tensor::from_fn([1, 3, 3, 4], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let s6 = decode(&arena, &states, &net, &z, Some(6));
        assert_eq!(s6.shape(), [1, 6, 6, 1]);
        assert!(s6.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zeroed_residual_stretch_passes_stage_6_through() {
        let cfg = SamplingConfig::new(2, 2, 1, 0.5).unwrap();
        let (mut arena, states, net) = small_net(&cfg, ReconWidths { l4: 3, l5: 2, res: 2 }, 8);
        // Zero every kernel and bias in layers 7..=21; batch norm of an
        // all-zero tensor stays zero, so each skip-add degenerates to its
        // skip input and stage 21 equals stage 6.
        let zeroed: Vec<crate::param::ParamId> = (0..arena.len())
            .map(crate::param::ParamId)
            .filter(|&id| {
                let name = &arena.get(id).name;
                (7..=21).any(|i| {
                    name.starts_with(&format!("recon.l{i}.")) && !name.contains(".bn.")
                })
            })
            .collect();
        for id in zeroed {
            let zero = Tensor::zeros(arena.value(id).shape());
            arena.set_value(id, zero).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let z = Tensor::from_fn([2, 2, 2, 4], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let s6 = decode(&arena, &states, &net, &z, Some(6));
        let full = decode(&arena, &states, &net, &z, None);
        assert!(s6.max_abs_diff(&full) < 1e-12);
    }

    #[test]
    fn stage_2_is_equivariant_to_block_permutation() {
        let cfg = SamplingConfig::new(2, 2, 1, 0.5).unwrap();
        let (arena, states, net) = small_net(&cfg, ReconWidths { l4: 3, l5: 2, res: 2 }, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let z = Tensor::from_fn([1, 2, 2, 4], |_, _, _, _| rng.gen_range(-1.0..1.0));
        // Swap the two block columns.
        let zp = Tensor::from_fn([1, 2, 2, 4], |n, h, w, c| z.at(n, h, 1 - w, c));
        let a = decode(&arena, &states, &net, &z, Some(2));
        let b = decode(&arena, &states, &net, &zp, Some(2));
        let bp = Tensor::from_fn([1, 2, 2, 4], |n, h, w, c| b.at(n, h, 1 - w, c));
        assert!(a.max_abs_diff(&bp) < 1e-12);
    }

    #[test]
    fn stage_index_bounds_are_enforced() {
        let cfg = SamplingConfig::new(2, 2, 1, 0.5).unwrap();
        let (arena, states, net) = small_net(&cfg, ReconWidths { l4: 3, l5: 2, res: 2 }, 10);
        let mut states = states.clone();
        let mut tape = Tape::<f64>::new();
        let binding = arena.bind(&mut tape);
        let z = tape.leaf(Tensor::filled([1, 2, 2, 4], 0.1));
        let mut ctx = BnCtx::train(&mut states);
        assert!(net.forward_stage(&mut tape, &binding, z, 0, &mut ctx).is_err());
        assert!(net.forward_stage(&mut tape, &binding, z, 22, &mut ctx).is_err());
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let cfg = SamplingConfig::new(2, 2, 1, 0.5).unwrap();
        let (mut arena, states, net) = small_net(&cfg, ReconWidths { l4: 3, l5: 2, res: 2 }, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        crate::gradcheck::jitter_params(&mut arena, &mut rng, 0.1);
        let z_val = Tensor::from_fn([2, 2, 2, 4], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let target = Tensor::from_fn([2, 4, 4, 1], |_, _, _, _| rng.gen_range(0.0..1.0));

        let loss_of = |arena: &ParamArena<f64>| -> crate::error::Result<f64> {
            let mut states = states.clone();
            let mut tape = Tape::new();
            let binding = arena.bind(&mut tape);
            let z = tape.leaf(z_val.clone());
            let mut ctx = BnCtx::train(&mut states);
            let x = net.reconstruct(&mut tape, &binding, z, &mut ctx)?;
            let t = tape.leaf(target.clone());
            let l = tape.mse(x, t)?;
            Ok(tape.scalar_value(l))
        };
        arena.zero_grads();
        {
            let mut st = states.clone();
            let mut tape = Tape::new();
            let binding = arena.bind(&mut tape);
            let z = tape.leaf(z_val.clone());
            let mut ctx = BnCtx::train(&mut st);
            let x = net.reconstruct(&mut tape, &binding, z, &mut ctx).unwrap();
            let t = tape.leaf(target.clone());
            let l = tape.mse(x, t).unwrap();
            tape.backward(l).unwrap();
            arena.accumulate_grads(&tape, &binding);
        }
        let worst = crate::gradcheck::max_param_grad_err(&mut arena, &mut |a| loss_of(a)).unwrap();
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }
}
