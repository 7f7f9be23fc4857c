//! Model assembly: backbone -> pyramid -> (interaction) -> (attention |
//! concat fusion) -> classifier, plus an auxiliary head on an intermediate
//! backbone tap. A single [`ModelConfig`] spans every ablation switch.

use crate::aspp::{self, AsppParams, ScaleStack};
use crate::config::ModelConfig;
use crate::csi::{self, AffinityField, CsiParams};
use crate::error::{Error, Result};
use crate::layers::{BnLayer, Conv1x1Layer, Conv2dLayer};
use crate::rng::Rng;
use crate::sa::{self, AttentionField, SaParams};
use crate::tape::{Mode, SharedParam, Tape, ValId};
use crate::tensor::Tensor;

/// Spatial downscale between input image and feature maps.
pub const BACKBONE_STRIDE: usize = 4;

struct BackboneBlock {
    conv: Conv2dLayer,
    bn: BnLayer,
}

impl BackboneBlock {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(BackboneBlock {
            conv: Conv2dLayer::new(&format!("{name}.conv"), cin, cout, 1, false, rng)?,
            bn: BnLayer::new(&format!("{name}.bn"), cout)?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: ValId, mode: Mode) -> Result<ValId> {
        let c = self.conv.forward(tape, x)?;
        let n = self.bn.forward(tape, c, mode)?;
        Ok(tape.relu(n))
    }
}

/// Small trainable feature extractor: four 3x3 conv blocks with two 2x
/// average-pool downsamples, output stride 4, channels 3 -> 16 -> 32 -> C.
pub struct Backbone {
    blocks: Vec<BackboneBlock>,
}

impl Backbone {
    fn new(backbone_channels: usize, rng: &mut Rng) -> Result<Backbone> {
        let widths = [3, 16, 32, backbone_channels, backbone_channels];
        let mut blocks = Vec::with_capacity(4);
        for i in 0..4 {
            blocks.push(BackboneBlock::new(
                &format!("backbone.block{}", i + 1),
                widths[i],
                widths[i + 1],
                rng,
            )?);
        }
        Ok(Backbone { blocks })
    }

    /// Returns (final features, auxiliary tap) at stride 4.
    fn forward(&self, tape: &mut Tape, image: ValId, mode: Mode) -> Result<(ValId, ValId)> {
        let b1 = self.blocks[0].forward(tape, image, mode)?;
        let p1 = tape.avg_pool2(b1)?;
        let b2 = self.blocks[1].forward(tape, p1, mode)?;
        let p2 = tape.avg_pool2(b2)?;
        let b3 = self.blocks[2].forward(tape, p2, mode)?;
        let b4 = self.blocks[3].forward(tape, b3, mode)?;
        Ok((b4, b3))
    }

    fn params(&self) -> Vec<SharedParam> {
        let mut ps = Vec::new();
        for b in &self.blocks {
            ps.extend(b.conv.params());
            ps.extend(b.bn.params());
        }
        ps
    }
}

/// The assembled segmentation model.
pub struct SegModel {
    pub cfg: ModelConfig,
    backbone: Backbone,
    pub aspp: Option<AsppParams>,
    pub csi: Option<CsiParams>,
    pub sa: Option<SaParams>,
    /// Concat + 1x1 fusion used when scale adaptation is disabled.
    pub fusion: Option<(Conv1x1Layer, BnLayer)>,
    pub classifier: Conv1x1Layer,
    pub aux_classifier: Conv1x1Layer,
}

impl SegModel {
    /// Build a model with per-component derived seeds, so that two configs
    /// built from one master seed share the initialization of every
    /// component they have in common.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<SegModel> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone_channels, &mut Rng::derive(seed, "backbone"))?;
        let aspp = if cfg.use_aspp {
            Some(AsppParams::new(
                cfg.backbone_channels,
                cfg.branch_channels,
                &cfg.dilations,
                &mut Rng::derive(seed, "aspp"),
            )?)
        } else {
            None
        };
        let csi = if cfg.use_aspp && cfg.use_csi {
            Some(CsiParams::new(
                cfg.k,
                cfg.branch_channels,
                cfg.scale_index,
                cfg.shared_embedding,
                cfg.csi_residual,
                &mut Rng::derive(seed, "csi"),
            )?)
        } else {
            None
        };
        let sa = if cfg.use_aspp && cfg.use_sa {
            Some(SaParams::new(
                cfg.k,
                cfg.branch_channels,
                cfg.reduction,
                cfg.sa_activation,
                cfg.sa_channel_shared,
                &mut Rng::derive(seed, "sa"),
            )?)
        } else {
            None
        };
        let fusion = if cfg.use_aspp && !cfg.use_sa {
            let mut rng = Rng::derive(seed, "fusion");
            Some((
                Conv1x1Layer::new(
                    "fusion.conv",
                    cfg.k * cfg.branch_channels,
                    cfg.branch_channels,
                    false,
                    &mut rng,
                )?,
                BnLayer::new("fusion.bn", cfg.branch_channels)?,
            ))
        } else {
            None
        };
        let head_in = if cfg.use_aspp { cfg.branch_channels } else { cfg.backbone_channels };
        let classifier = Conv1x1Layer::new(
            "classifier",
            head_in,
            cfg.num_classes,
            true,
            &mut Rng::derive(seed, "classifier"),
        )?;
        let aux_classifier = Conv1x1Layer::new(
            "aux_classifier",
            cfg.backbone_channels,
            cfg.num_classes,
            true,
            &mut Rng::derive(seed, "aux_classifier"),
        )?;
        Ok(SegModel { cfg: cfg.clone(), backbone, aspp, csi, sa, fusion, classifier, aux_classifier })
    }

    /// Forward pass producing full-resolution main and auxiliary logits.
    pub fn forward(&self, tape: &mut Tape, image: ValId, mode: Mode) -> Result<(ValId, ValId)> {
        let s = tape.value(image).shape();
        if s.c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {}", s.c)));
        }
        if s.h % BACKBONE_STRIDE != 0 || s.w % BACKBONE_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {}x{} not divisible by backbone stride {BACKBONE_STRIDE}",
                s.h, s.w
            )));
        }
        let (feat, aux_feat) = self.backbone.forward(tape, image, mode)?;

        let fused = if let Some(aspp) = &self.aspp {
            let mut stack = aspp::aspp_forward_on(tape, feat, aspp, mode)?;
            if let Some(csi) = &self.csi {
                stack = csi::csi_forward_on(tape, &stack, csi, mode)?;
            }
            if let Some(sa) = &self.sa {
                sa::sa_forward_on(tape, &stack, sa, mode)?
            } else {
                let (conv, bn) = self.fusion.as_ref().expect("fusion present when sa is off");
                let cat = tape.concat_channels(&stack)?;
                let f = conv.forward(tape, cat)?;
                let f = bn.forward(tape, f, mode)?;
                tape.relu(f)
            }
        } else {
            feat
        };

        let logits = self.classifier.forward(tape, fused)?;
        let logits = tape.upsample_bilinear(logits, BACKBONE_STRIDE)?;
        let aux = self.aux_classifier.forward(tape, aux_feat)?;
        let aux = tape.upsample_bilinear(aux, BACKBONE_STRIDE)?;
        Ok((logits, aux))
    }

    /// All trainable parameters in a deterministic order.
    pub fn params(&self) -> Vec<SharedParam> {
        let mut ps = self.backbone.params();
        if let Some(a) = &self.aspp {
            ps.extend(a.params());
        }
        if let Some(c) = &self.csi {
            ps.extend(c.params());
        }
        if let Some(s) = &self.sa {
            ps.extend(s.params());
        }
        if let Some((conv, bn)) = &self.fusion {
            ps.extend(conv.params());
            ps.extend(bn.params());
        }
        ps.extend(self.classifier.params());
        ps.extend(self.aux_classifier.params());
        ps
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.borrow().value.numel()).sum()
    }

    /// Batch-norm layers with their name prefixes, for checkpointing the
    /// running statistics.
    pub fn bn_layers(&self) -> Vec<(String, &BnLayer)> {
        let mut out: Vec<(String, &BnLayer)> = Vec::new();
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            out.push((format!("backbone.block{}.bn", i + 1), &b.bn));
        }
        if let Some(a) = &self.aspp {
            for (i, b) in a.branches.iter().enumerate() {
                out.push((format!("aspp.branch{i}.bn"), &b.bn));
            }
        }
        if let Some(c) = &self.csi {
            for (i, e) in c.theta.iter().enumerate() {
                let suffix = if c.shared { "shared".to_string() } else { format!("s{i}") };
                out.push((format!("csi.theta.{suffix}.bn"), &e.bn));
            }
            for (i, e) in c.phi.iter().enumerate() {
                let suffix = if c.shared { "shared".to_string() } else { format!("s{i}") };
                out.push((format!("csi.phi.{suffix}.bn"), &e.bn));
            }
        }
        if let Some(s) = &self.sa {
            out.push(("sa.bottleneck.bn".to_string(), &s.bottleneck_bn));
            for (i, (_, bn)) in s.heads.iter().enumerate() {
                out.push((format!("sa.head{i}.bn"), bn));
            }
        }
        if let Some((_, bn)) = &self.fusion {
            out.push(("fusion.bn".to_string(), bn));
        }
        out
    }

    /// Eval-mode run up to the fusion inputs, returning the intermediate
    /// artifacts used by the visualization dumps.
    pub fn inspect(&self, image: &Tensor) -> Result<Inspection> {
        let aspp = self
            .aspp
            .as_ref()
            .ok_or_else(|| Error::Config("inspection needs the pyramid enabled".into()))?;
        let mut tape = Tape::new();
        let img = tape.input(image.clone());
        let (feat, _) = self.backbone.forward(&mut tape, img, Mode::Eval)?;
        let ids = aspp::aspp_forward_on(&mut tape, feat, aspp, Mode::Eval)?;
        let scales: Vec<Tensor> = ids.iter().map(|&id| tape.value(id).clone()).collect();
        let stack = ScaleStack::new(scales, aspp.dilations.clone())?;

        let (refined, affinity) = if let Some(csi) = &self.csi {
            let aff = csi::compute_affinity(&stack, csi, Mode::Eval)?;
            let refined = csi::csi_refine(&stack, &aff)?;
            (Some(refined), Some(aff))
        } else {
            (None, None)
        };

        let attention = if let Some(sa_params) = &self.sa {
            let input = refined.as_ref().unwrap_or(&stack);
            Some(sa::sa_attention(input, sa_params, Mode::Eval)?)
        } else {
            None
        };

        Ok(Inspection { stack, refined, affinity, attention })
    }
}

/// Intermediate artifacts of an eval-mode forward pass.
pub struct Inspection {
    pub stack: ScaleStack,
    pub refined: Option<ScaleStack>,
    pub affinity: Option<AffinityField>,
    pub attention: Option<AttentionField>,
}

/// The four pyramid/interaction/attention combinations compared in the
/// component study, differing only in the two module switches.
pub fn build_baseline_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut variants = Vec::new();
    for (name, use_csi, use_sa) in [
        ("aspp_only", false, false),
        ("aspp_csi", true, false),
        ("aspp_sa", false, true),
        ("casinet", true, true),
    ] {
        let mut cfg = base.clone();
        cfg.use_aspp = true;
        cfg.use_csi = use_csi;
        cfg.use_sa = use_sa;
        variants.push((name.to_string(), cfg));
    }
    variants
}
