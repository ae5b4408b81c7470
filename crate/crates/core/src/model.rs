//! The full network: shared encoders, late-fusion head, cross-attention
//! block and early-fusion projection, with batch loss assembly.

use std::fmt;
use std::str::FromStr;

use crate::arm::{
    estimate_target_stats, loss_arm, loss_pi, loss_res, loss_total, perturb_var, prompt_embed,
    sample_noise, ArmTerms, Noise, TargetStats,
};
use crate::data::Image;
use crate::encoders::{AttentionPair, CrossAttentionBlock, EncoderError, ImageEncoder, Linear, TextEncoder};
use crate::esam::{fuse, loss_attention, loss_esam, loss_late, EsamTerms, FusionMlp, LossError, NegativesMode};
use crate::numerics::{Graph, Params, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub mlp_ratio: usize,
    pub share_image_encoders: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(format!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(format!("image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.vocab_size == 0 || self.max_text_len == 0 || self.mlp_ratio == 0 {
            return Err("vocab_size, max_text_len and mlp_ratio must be positive".into());
        }
        let regions = (self.image_size / self.patch_size).pow(2);
        if regions >= self.max_text_len {
            return Err(format!("max_text_len {} leaves no room after {regions} prompt vectors", self.max_text_len));
        }
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }
}

/// Which representation queries the gallery at retrieval time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    U,
    MlpFu,
    MeanUPrime,
}

impl QuerySource {
    /// Whether the losses in `flags` put gradient on this head: u through
    /// L_Res, u' through L_PI, MLP(F_u) through L_Late.
    pub fn trained_by(self, flags: LossFlags) -> bool {
        match self {
            Self::U => flags.res,
            Self::MlpFu => flags.late,
            Self::MeanUPrime => flags.res && flags.pi,
        }
    }

    /// `self` if trained under `flags`, else the first trained source in
    /// the order u, mlp_fu, mean(u,u'). Falls back to `self` when none is.
    pub fn resolve(self, flags: LossFlags) -> QuerySource {
        if self.trained_by(flags) {
            return self;
        }
        [Self::U, Self::MlpFu, Self::MeanUPrime]
            .into_iter()
            .find(|q| q.trained_by(flags))
            .unwrap_or(self)
    }
}

impl FromStr for QuerySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "u" => Ok(Self::U),
            "mlp_fu" => Ok(Self::MlpFu),
            "mean(u,u')" | "mean(u,u\u{2032})" => Ok(Self::MeanUPrime),
            other => Err(format!("invalid query source {other:?} (expected u, mlp_fu or mean(u,u'))")),
        }
    }
}

impl fmt::Display for QuerySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::U => "u",
            Self::MlpFu => "mlp_fu",
            Self::MeanUPrime => "mean(u,u')",
        })
    }
}

/// Which loss terms contribute to the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossFlags {
    pub late: bool,
    pub attention: bool,
    pub res: bool,
    pub pi: bool,
}

impl LossFlags {
    pub const ALL: LossFlags = LossFlags {
        late: true,
        attention: true,
        res: true,
        pi: true,
    };

    pub fn any(&self) -> bool {
        self.late || self.attention || self.res || self.pi
    }
}

/// Objective hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub negatives: NegativesMode,
    pub attention_negatives: NegativesMode,
    pub flags: LossFlags,
}

/// One training example handed to the network.
#[derive(Clone, Copy, Debug)]
pub struct TripletInput<'a> {
    pub reference: &'a Image,
    pub target: &'a Image,
    pub tokens: &'a [usize],
}

/// Source of the target perturbation for a step.
pub enum Perturbation<'a> {
    /// Draw fresh noise; `stats` overrides the batch statistics when set.
    Sample {
        rng: &'a mut Rng,
        stats: Option<TargetStats>,
    },
    /// Reuse noise drawn earlier.
    Fixed(&'a Noise),
}

/// Every term recorded on the tape for one batch. Disabled terms are `None`.
#[derive(Clone, Debug)]
pub struct BatchLosses {
    pub late: Option<Var>,
    pub attention: Option<Var>,
    pub res: Option<Var>,
    pub pi: Option<Var>,
    pub esam: Option<Var>,
    pub arm: Option<Var>,
    pub total: Var,
    pub batch_stats: Option<TargetStats>,
    pub noise: Option<Noise>,
}

/// Scalar values of a [`BatchLosses`], zero for disabled terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub late: f64,
    pub attention: f64,
    pub res: f64,
    pub pi: f64,
    pub total: f64,
}

impl BatchLosses {
    pub fn values(&self, g: &Graph) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossValues {
            late: get(self.late),
            attention: get(self.attention),
            res: get(self.res),
            pi: get(self.pi),
            total: g.value(self.total).item(),
        }
    }
}

/// Per-triplet intermediate results.
#[derive(Clone, Debug)]
pub struct TripletForward {
    /// `MLP(F_u)` as a `[1 × d]` row, not normalized.
    pub projected: Var,
    /// Target pooled embedding `[d]`, unit norm.
    pub v: Var,
    pub pair: AttentionPair,
    /// Early-fusion query `[d]`, unit norm.
    pub u: Var,
    /// Prompt embedding `[d]`, unit norm.
    pub u_prime: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub image: ImageEncoder,
    /// Separate target encoder when encoders are not shared.
    pub target_image: Option<ImageEncoder>,
    pub text: TextEncoder,
    pub cross: CrossAttentionBlock,
    pub fusion_mlp: FusionMlp,
    pub u_proj: Linear,
}

impl Model {
    /// Builds the network and registers its parameters in a fresh table.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<(Self, Params), String> {
        config.validate()?;
        let mut params = Params::new();
        let c = &config;
        let image = ImageEncoder::new(
            &mut params,
            rng,
            "image",
            c.image_size,
            c.patch_size,
            c.embed_dim,
            c.layers,
            c.heads,
            c.mlp_ratio,
        );
        let target_image = (!c.share_image_encoders).then(|| {
            ImageEncoder::new(
                &mut params,
                rng,
                "target_image",
                c.image_size,
                c.patch_size,
                c.embed_dim,
                c.layers,
                c.heads,
                c.mlp_ratio,
            )
        });
        let text = TextEncoder::new(
            &mut params,
            rng,
            "text",
            c.vocab_size,
            c.max_text_len,
            c.embed_dim,
            c.layers,
            c.heads,
            c.mlp_ratio,
        );
        let cross = CrossAttentionBlock::new(&mut params, rng, "cross", c.embed_dim);
        let fusion_mlp = FusionMlp::new(&mut params, rng, "fusion_mlp", c.embed_dim, 2 * c.embed_dim);
        let u_proj = Linear::new(&mut params, rng, "u_proj", c.embed_dim, c.embed_dim, false);
        let model = Self {
            config,
            image,
            target_image,
            text,
            cross,
            fusion_mlp,
            u_proj,
        };
        Ok((model, params))
    }

    /// Encoder applied to target and gallery images.
    pub fn target_encoder(&self) -> &ImageEncoder {
        self.target_image.as_ref().unwrap_or(&self.image)
    }

    pub fn forward_triplet(
        &self,
        g: &mut Graph,
        params: &Params,
        input: TripletInput<'_>,
        lambda1: f64,
    ) -> Result<TripletForward, LossError> {
        let d = self.config.embed_dim;
        let reference = self.image.encode(g, params, input.reference)?;
        let target = self.target_encoder().encode(g, params, input.target)?;
        let text = self.text.encode(g, params, input.tokens)?;

        let fused = fuse(g, reference.pooled, text.pooled, lambda1)?;
        let fused = g.reshape(fused, &[1, d])?;
        let projected = self.fusion_mlp.forward(g, params, fused)?;

        let ref_branch = self.cross.forward(g, params, reference.tokens, text.tokens)?;
        let tgt_branch = self.cross.forward(g, params, target.tokens, text.tokens)?;
        let pair = AttentionPair {
            reference: ref_branch.map,
            target: tgt_branch.map,
        };

        // U: region tokens enriched with the attended text.
        let fused_seq = g.add(reference.tokens, ref_branch.attended)?;
        let u = self.encode_u(g, params, fused_seq)?;
        let u_prime = prompt_embed(g, params, &self.text, fused_seq, input.tokens)?;

        Ok(TripletForward {
            projected,
            v: target.pooled,
            pair,
            u,
            u_prime,
        })
    }

    fn encode_u(&self, g: &mut Graph, params: &Params, seq: Var) -> Result<Var, LossError> {
        let d = self.config.embed_dim;
        let mean = g.mean_rows(seq);
        let row = g.reshape(mean, &[1, d])?;
        let proj = self.u_proj.forward(g, params, row)?;
        let unit = g.normalize_rows(proj)?;
        Ok(g.reshape(unit, &[d])?)
    }

    /// Records every enabled loss for a batch on `g`.
    pub fn batch_losses(
        &self,
        g: &mut Graph,
        params: &Params,
        batch: &[TripletInput<'_>],
        cfg: &LossConfig,
        perturbation: Perturbation<'_>,
    ) -> Result<BatchLosses, LossError> {
        if !cfg.flags.any() {
            return Err(LossError::NothingToOptimize);
        }
        let mut fw = Vec::with_capacity(batch.len());
        for input in batch {
            fw.push(self.forward_triplet(g, params, *input, cfg.lambda1)?);
        }
        let rows = |g: &mut Graph, vars: Vec<Var>| -> Result<Var, LossError> {
            let d = g.value(vars[0]).numel();
            let r: Vec<Var> = vars.into_iter().map(|v| g.reshape(v, &[1, d])).collect::<Result<_, _>>()?;
            Ok(g.concat_rows(&r)?)
        };
        if fw.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        let v = rows(g, fw.iter().map(|f| f.v).collect())?;

        let late = if cfg.flags.late {
            let p = rows(g, fw.iter().map(|f| f.projected).collect())?;
            Some(loss_late(g, p, v, cfg.tau)?)
        } else {
            None
        };
        let attention = if cfg.flags.attention {
            let pairs: Vec<AttentionPair> = fw.iter().map(|f| f.pair).collect();
            Some(loss_attention(g, &pairs, cfg.tau, cfg.attention_negatives)?)
        } else {
            None
        };

        let mut batch_stats = None;
        let mut used_noise = None;
        let res = if cfg.flags.res {
            let u = rows(g, fw.iter().map(|f| f.u).collect())?;
            let noise = match perturbation {
                Perturbation::Fixed(n) => n.clone(),
                Perturbation::Sample { rng, stats } => {
                    let measured = estimate_target_stats(g.value(v))?;
                    batch_stats = Some(measured);
                    sample_noise(g.value(v).shape(), stats.unwrap_or(measured), rng)
                }
            };
            let v_hat = perturb_var(g, v, &noise)?;
            used_noise = Some(noise);
            Some(loss_res(g, u, v, v_hat, cfg.tau, cfg.lambda2, cfg.negatives)?)
        } else {
            None
        };
        let pi = if cfg.flags.pi {
            let up = rows(g, fw.iter().map(|f| f.u_prime).collect())?;
            Some(loss_pi(g, up, v, cfg.tau, cfg.negatives)?)
        } else {
            None
        };

        let esam = loss_esam(g, EsamTerms { late, attention })?;
        let arm = loss_arm(g, ArmTerms { res, pi })?;
        let total = loss_total(g, esam, arm)?;
        Ok(BatchLosses {
            late,
            attention,
            res,
            pi,
            esam,
            arm,
            total,
            batch_stats,
            noise: used_noise,
        })
    }

    /// Gallery embedding of an image, unit norm.
    pub fn embed_gallery(&self, params: &Params, img: &Image) -> Result<Vec<f64>, EncoderError> {
        let mut g = Graph::inference();
        let enc = self.target_encoder().encode(&mut g, params, img)?;
        Ok(g.value(enc.pooled).data().to_vec())
    }

    /// Retrieval query for `(reference, tokens)`, unit norm.
    pub fn embed_query(
        &self,
        params: &Params,
        reference: &Image,
        tokens: &[usize],
        lambda1: f64,
        source: QuerySource,
    ) -> Result<Vec<f64>, LossError> {
        let mut g = Graph::inference();
        // The target branch does not influence the query; feed the reference.
        let input = TripletInput {
            reference,
            target: reference,
            tokens,
        };
        let f = self.forward_triplet(&mut g, params, input, lambda1)?;
        let q = match source {
            QuerySource::U => f.u,
            QuerySource::MlpFu => g.normalize_rows(f.projected)?,
            QuerySource::MeanUPrime => {
                let s = g.add(f.u, f.u_prime)?;
                let d = self.config.embed_dim;
                let row = g.reshape(s, &[1, d])?;
                g.normalize_rows(row)?
            }
        };
        Ok(g.value(q).data().to_vec())
    }

    /// Attention map of one branch, `[regions × tokens]`.
    pub fn attention_map(&self, params: &Params, img: &Image, tokens: &[usize], target_branch: bool) -> Result<Tensor, LossError> {
        let mut g = Graph::inference();
        let enc = if target_branch { self.target_encoder() } else { &self.image };
        let regions = enc.encode(&mut g, params, img)?;
        let text = self.text.encode(&mut g, params, tokens)?;
        let out = self.cross.forward(&mut g, params, regions.tokens, text.tokens)?;
        Ok(g.value(out.map).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, SceneSpec};

    #[test]
    fn query_source_falls_back_to_a_trained_head() {
        let esam = LossFlags { late: true, attention: true, res: false, pi: false };
        let arm = LossFlags { late: false, attention: false, res: true, pi: true };
        let no_res = LossFlags { res: false, ..LossFlags::ALL };
        assert_eq!(QuerySource::U.resolve(LossFlags::ALL), QuerySource::U);
        assert_eq!(QuerySource::MlpFu.resolve(LossFlags::ALL), QuerySource::MlpFu);
        assert_eq!(QuerySource::U.resolve(esam), QuerySource::MlpFu);
        assert_eq!(QuerySource::MlpFu.resolve(arm), QuerySource::U);
        assert_eq!(QuerySource::MeanUPrime.resolve(no_res), QuerySource::MlpFu);
        assert_eq!(QuerySource::MeanUPrime.resolve(arm), QuerySource::MeanUPrime);
    }

    fn micro() -> (Model, Params) {
        let cfg = ModelConfig {
            embed_dim: 8,
            layers: 1,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            vocab_size: 25,
            max_text_len: 12,
            mlp_ratio: 2,
            share_image_encoders: true,
        };
        Model::new(cfg, &mut Rng::new(1)).unwrap()
    }

    fn loss_cfg() -> LossConfig {
        LossConfig {
            lambda1: 0.5,
            lambda2: 0.5,
            tau: 0.07,
            negatives: NegativesMode::InBatch,
            attention_negatives: NegativesMode::AsWritten,
            flags: LossFlags::ALL,
        }
    }

    #[test]
    fn query_source_round_trip() {
        for q in [QuerySource::U, QuerySource::MlpFu, QuerySource::MeanUPrime] {
            assert_eq!(q.to_string().parse::<QuerySource>().unwrap(), q);
        }
        assert_eq!("mean(u,u\u{2032})".parse::<QuerySource>().unwrap(), QuerySource::MeanUPrime);
        assert!("v".parse::<QuerySource>().is_err());
    }

    #[test]
    fn batch_losses_sum_and_flags() {
        let (model, params) = micro();
        let imgs: Vec<Image> = (0..4).map(|i| render(&SceneSpec::from_index(i * 37), 8).unwrap()).collect();
        let tokens = [vec![0, 1, 3, 10], vec![0, 1, 4, 12]];
        let batch = [
            TripletInput {
                reference: &imgs[0],
                target: &imgs[1],
                tokens: &tokens[0],
            },
            TripletInput {
                reference: &imgs[2],
                target: &imgs[3],
                tokens: &tokens[1],
            },
        ];
        let mut g = Graph::new();
        let mut rng = Rng::new(4);
        let cfg = loss_cfg();
        let l = model
            .batch_losses(&mut g, &params, &batch, &cfg, Perturbation::Sample { rng: &mut rng, stats: None })
            .unwrap();
        let v = l.values(&g);
        assert!((v.late + v.attention + v.res + v.pi - v.total).abs() <= 1e-12);

        let mut esam_only = cfg;
        esam_only.flags.res = false;
        esam_only.flags.pi = false;
        let mut g2 = Graph::new();
        let l2 = model
            .batch_losses(&mut g2, &params, &batch, &esam_only, Perturbation::Sample { rng: &mut rng, stats: None })
            .unwrap();
        let v2 = l2.values(&g2);
        assert_eq!((v2.res, v2.pi), (0.0, 0.0));
        assert_eq!(v2.late, v.late);
        assert_eq!(v2.attention, v.attention);
        assert!(l2.noise.is_none());

        let mut none = cfg;
        none.flags = LossFlags {
            late: false,
            attention: false,
            res: false,
            pi: false,
        };
        assert!(model
            .batch_losses(&mut Graph::new(), &params, &batch, &none, Perturbation::Sample { rng: &mut rng, stats: None })
            .is_err());
    }

    #[test]
    fn queries_are_unit_norm() {
        let (model, params) = micro();
        let img = render(&SceneSpec::from_index(5), 8).unwrap();
        for q in [QuerySource::U, QuerySource::MlpFu, QuerySource::MeanUPrime] {
            let e = model.embed_query(&params, &img, &[0, 1, 2, 9], 0.5, q).unwrap();
            let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        let e = model.embed_gallery(&params, &img).unwrap();
        assert!((e.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn unshared_encoders_register_separate_parameters() {
        let (_, shared) = micro();
        let mut cfg = micro().0.config;
        cfg.share_image_encoders = false;
        let (m, unshared) = Model::new(cfg, &mut Rng::new(1)).unwrap();
        assert!(m.target_image.is_some());
        assert!(unshared.num_scalars() > shared.num_scalars());
    }
}
