//! Variant wiring: backbone, the two context modules, fusion and heads
//! assembled per ablation row.

use crate::blocks::{HeadAux, ParamStore, Session, ToyBackbone};
use crate::error::{IsnetError, Result};
use crate::fusion::{attend, similarity, FusionState, DEFAULT_ATTENTION_CAP};
use crate::ilcm::IlcmState;
use crate::slcm::slcm_forward;
use crate::tape::Var;
use crate::tensor::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Ablation rows, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Ilcm,
    Slcm,
    Isnet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Ilcm, Variant::Slcm, Variant::Isnet];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ilcm => "ilcm",
            Variant::Slcm => "slcm",
            Variant::Isnet => "isnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "ilcm" => Ok(Variant::Ilcm),
            "slcm" => Ok(Variant::Slcm),
            "isnet" => Ok(Variant::Isnet),
            other => Err(IsnetError::usage(format!(
                "unknown variant '{other}' (expected baseline|ilcm|slcm|isnet)"
            ))),
        }
    }

    pub fn has_ilcm(self) -> bool {
        matches!(self, Variant::Ilcm | Variant::Isnet)
    }

    pub fn has_slcm(self) -> bool {
        matches!(self, Variant::Slcm | Variant::Isnet)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub c: usize,
    pub k: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// hidden width of the auxiliary head's first layer
    pub aux_hidden: usize,
    pub attention_cap: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            c: 64,
            k: 5,
            alpha: 0.4,
            dropout: 0.1,
            aux_hidden: 64,
            attention_cap: DEFAULT_ATTENTION_CAP,
            variant,
            seed: 0,
        }
    }
}

/// All parameterized pieces of one variant. Variants only construct the
/// modules they use, so excluded parameters never exist, let alone update.
pub struct IsNetModel {
    pub config: ModelConfig,
    pub backbone: ToyBackbone,
    pub ilcm: Option<IlcmState>,
    pub head_aux: Option<HeadAux>,
    pub fusion: FusionState,
}

impl IsNetModel {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = ToyBackbone::new(store, &mut rng, "backbone", config.c);
        let ilcm = config
            .variant
            .has_ilcm()
            .then(|| IlcmState::new(store, &mut rng, "ilcm", config.c));
        let head_aux = config.variant.has_slcm().then(|| {
            HeadAux::new(store, &mut rng, "head_aux", config.c, config.aux_hidden, config.k)
        });
        // fusion consumes one stream per active context module plus R itself;
        // the baseline classifies R directly and skips the transform
        let parts = 1
            + config.variant.has_ilcm() as usize
            + config.variant.has_slcm() as usize;
        let fusion = FusionState::new(
            store,
            &mut rng,
            "fusion",
            config.c,
            config.k,
            parts,
            config.dropout,
        );
        IsNetModel {
            config,
            backbone,
            ilcm,
            head_aux,
            fusion,
        }
    }

    /// Full forward pass for the configured variant. Returns the main logits
    /// O at `[K,H,W]` and, when the semantic module is active, the auxiliary
    /// logits D at `[K,H/8,W/8]`.
    pub fn forward<F: Scalar>(
        &self,
        sess: &mut Session<F>,
        img: Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Option<Var>)> {
        let r = self.backbone.forward(sess, img)?;
        let mut streams = Vec::new();
        if let Some(ilcm) = &self.ilcm {
            let r_il = ilcm.forward(sess, r)?;
            let s_il = similarity(sess, r, r_il, self.config.attention_cap)?;
            streams.push(attend(sess, s_il, r_il)?);
        }
        let mut d = None;
        if let Some(head_aux) = &self.head_aux {
            let (r_sl, d_var) = slcm_forward(head_aux, sess, r)?;
            let s_sl = similarity(sess, r, r_sl, self.config.attention_cap)?;
            streams.push(attend(sess, s_sl, r_sl)?);
            d = Some(d_var);
        }
        let r_aug = if streams.is_empty() {
            r
        } else {
            streams.push(r);
            self.fusion.augment(sess, &streams)?
        };
        let o = self.fusion.classify(sess, r_aug, dropout_rng.as_deref_mut())?;
        Ok((o, d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            vec![3, h, w],
            (0..3 * h * w).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn small_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            c: 8,
            k: 3,
            alpha: 0.4,
            dropout: 0.1,
            aux_hidden: 8,
            attention_cap: DEFAULT_ATTENTION_CAP,
            variant,
            seed: 7,
        }
    }

    #[test]
    fn shape_contract_per_variant() {
        let img = rand_image(0, 16, 16);
        for variant in Variant::ALL {
            let mut store: ParamStore<f64> = ParamStore::new();
            let model = IsNetModel::new(&mut store, small_config(variant));
            let mut sess = Session::new(&store);
            let iv = sess.tape.leaf(img.clone(), false);
            let (o, d) = model.forward(&mut sess, iv, None).unwrap();
            assert_eq!(sess.tape.value(o).shape(), &[3, 16, 16], "{variant:?}");
            assert_eq!(d.is_some(), variant.has_slcm(), "{variant:?}");
            if let Some(d) = d {
                assert_eq!(sess.tape.value(d).shape(), &[3, 2, 2], "{variant:?}");
            }
        }
    }

    #[test]
    fn full_shape_contract_64() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut cfg = ModelConfig::desk(Variant::Isnet);
        cfg.c = 16;
        let model = IsNetModel::new(&mut store, cfg);
        let img = rand_image(1, 64, 64);
        let mut sess = Session::new(&store);
        let iv = sess.tape.leaf(img, false);
        let (o, d) = model.forward(&mut sess, iv, None).unwrap();
        assert_eq!(sess.tape.value(o).shape(), &[5, 64, 64]);
        assert_eq!(sess.tape.value(d.unwrap()).shape(), &[5, 8, 8]);
    }

    #[test]
    fn forward_is_deterministic() {
        let img = rand_image(2, 16, 16);
        let run = || {
            let mut store: ParamStore<f64> = ParamStore::new();
            let model = IsNetModel::new(&mut store, small_config(Variant::Isnet));
            let mut sess = Session::new(&store);
            let iv = sess.tape.leaf(img.clone(), false);
            let (o, d) = model.forward(&mut sess, iv, None).unwrap();
            (sess.tape.value(o).clone(), sess.tape.value(d.unwrap()).clone())
        };
        let (o1, d1) = run();
        let (o2, d2) = run();
        assert_eq!(o1, o2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn variant_selects_param_subset() {
        let count = |variant| {
            let mut store: ParamStore<f64> = ParamStore::new();
            IsNetModel::new(&mut store, small_config(variant));
            store.scalar_count()
        };
        let base = count(Variant::Baseline);
        let ilcm = count(Variant::Ilcm);
        let slcm = count(Variant::Slcm);
        let full = count(Variant::Isnet);
        assert!(base < ilcm && base < slcm);
        assert!(ilcm < full && slcm < full);
    }

    #[test]
    fn variant_parse_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("resnet").is_err());
    }
}
