//! Masked autoencoder over network-pair patches.
//!
//! Forward pass for pretraining:
//!
//! 1. tokenize every patch and prepend a learnable CLS token;
//! 2. add encoder positional embeddings (`n_patch + 1` rows);
//! 3. keep CLS and the visible tokens, run the encoder;
//! 4. project to the decoder width, put the mask token back at every masked
//!    position (original order), add decoder positional embeddings;
//! 5. run the decoder and detokenize the masked positions only;
//! 6. loss = mean over masked patches of the squared Frobenius residual.

mod checkpoint;
mod config;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_with, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{LossNorm, MaeConfig};
pub use train::{format_loss_curve, train, train_until, EpochRecord, TrainReport};

use crate::error::{shape_err, Error, Result};
use crate::fc::{build_layout, extract_patches, FcMatrix, Parcellation, Patch, PatchLayout};
use crate::nn::layers::{Linear, Transformer, INIT_STD};
use crate::nn::{AdamW, AdamWConfig, Graph, ParamId, ParameterStore, Tensor, Var};
use crate::rng::{self, Rng};
use crate::tokenizers::{check_patches, Detokenizer, Tokenizer};

/// Masked and visible patch indices, both ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    masked: Vec<usize>,
    visible: Vec<usize>,
}

impl MaskPlan {
    /// A plan from an explicit masked set over `n_patch` patches.
    pub fn new(n_patch: usize, masked: &[usize]) -> Result<Self> {
        let mut flags = vec![false; n_patch];
        for &p in masked {
            if p >= n_patch {
                return Err(Error::InvalidArgument(format!("masked index {p} >= {n_patch}")));
            }
            if flags[p] {
                return Err(Error::InvalidArgument(format!("masked index {p} repeated")));
            }
            flags[p] = true;
        }
        let masked = (0..n_patch).filter(|&p| flags[p]).collect();
        let visible = (0..n_patch).filter(|&p| !flags[p]).collect();
        Ok(Self { masked, visible })
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn n_patch(&self) -> usize {
        self.masked.len() + self.visible.len()
    }
}

/// Number of masked patches for a ratio: `floor(ratio * n_patch)`. A tiny
/// slack absorbs binary rounding of products such as `0.3 * 10`.
pub fn mask_count(n_patch: usize, ratio: f64) -> usize {
    ((ratio * n_patch as f64) + 1e-9).floor() as usize
}

/// Uniformly random mask of `floor(ratio * n_patch)` patches.
pub fn sample_mask(n_patch: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} is not in (0, 1)")));
    }
    let count = mask_count(n_patch, ratio).min(n_patch);
    let masked = sample(rng, n_patch, count).into_vec();
    MaskPlan::new(n_patch, &masked)
}

/// `1/|M| * sum ||x_hat - x||^2` over paired reconstructed/target patches.
pub fn loss_recon(reconstructed: &[Patch], targets: &[Patch], norm: LossNorm) -> Result<f64> {
    if reconstructed.is_empty() {
        return Err(Error::EmptyMask);
    }
    if reconstructed.len() != targets.len() {
        return Err(shape_err!(
            "{} reconstructions for {} targets",
            reconstructed.len(),
            targets.len()
        ));
    }
    let mut total = 0.0;
    for (r, t) in reconstructed.iter().zip(targets) {
        if r.pair() != t.pair() || r.shape() != t.shape() {
            return Err(shape_err!("reconstruction {:?} vs target {:?}", r.pair(), t.pair()));
        }
        let ss: f64 = r.vec().iter().zip(t.vec()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += match norm {
            LossNorm::Frobenius => ss,
            LossNorm::PerEntry => ss / r.vec().len() as f64,
        };
    }
    Ok(total / reconstructed.len() as f64)
}

/// Which encoder output becomes the subject embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::InvalidArgument(format!("unknown pooling '{other}' (expected cls or mean)"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
        })
    }
}

/// Reconstructions of the masked patches and the loss.
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub reconstructed: Vec<Patch>,
    pub loss: f64,
}

/// Tokenizer, encoder, decoder and detokenizer with all learnable state.
#[derive(Debug, Clone)]
pub struct MaeModel {
    config: MaeConfig,
    parcellation: Parcellation,
    layout: PatchLayout,
    pub(crate) store: ParameterStore,
    tokenizer: Tokenizer,
    cls: ParamId,
    encoder_pos: ParamId,
    encoder: Transformer,
    projection: Linear,
    mask_token: ParamId,
    decoder_pos: ParamId,
    decoder: Transformer,
    detokenizer: Detokenizer,
    pub(crate) optimizer: AdamW,
    pub(crate) epochs_done: usize,
}

impl MaeModel {
    /// A freshly initialized model; parameters are drawn from the config seed.
    pub fn new(config: MaeConfig, parcellation: Parcellation) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&parcellation);
        let n = layout.n_patch();
        let (de, dd) = (config.embed_dim, config.decoder_dim);
        let mut rng = rng::stream(config.seed, rng::domain::INIT, 0);
        let mut store = ParameterStore::new();
        let tokenizer = Tokenizer::new(config.tokenizer, &layout, de, &mut store, &mut rng, "tokenizer")?;
        let cls = store.add("cls", Tensor::randn(&[1, de], INIT_STD, &mut rng));
        let encoder_pos = store.add("encoder.pos", Tensor::randn(&[n + 1, de], INIT_STD, &mut rng));
        let encoder = Transformer::new(
            &mut store,
            "encoder",
            de,
            config.encoder_depth,
            config.encoder_heads,
            &mut rng,
        )?;
        let projection = Linear::new(&mut store, "projection", de, dd, &mut rng);
        let mask_token = store.add("mask_token", Tensor::randn(&[1, dd], INIT_STD, &mut rng));
        let decoder_pos = store.add("decoder.pos", Tensor::randn(&[n + 1, dd], INIT_STD, &mut rng));
        let decoder = Transformer::new(
            &mut store,
            "decoder",
            dd,
            config.decoder_depth,
            config.decoder_heads,
            &mut rng,
        )?;
        let detokenizer = Detokenizer::new(config.tokenizer, &layout, dd, &mut store, &mut rng, "detokenizer")?;
        let optimizer = AdamW::new(AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(Self {
            config,
            parcellation,
            layout,
            store,
            tokenizer,
            cls,
            encoder_pos,
            encoder,
            projection,
            mask_token,
            decoder_pos,
            decoder,
            detokenizer,
            optimizer,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    pub fn parcellation(&self) -> &Parcellation {
        &self.parcellation
    }

    pub fn layout(&self) -> &PatchLayout {
        &self.layout
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn detokenizer(&self) -> &Detokenizer {
        &self.detokenizer
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn region_count(&self) -> usize {
        self.parcellation.region_count()
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Parameter ids grouped by role, in forward order.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let prefixed = |p: &str| -> Vec<ParamId> {
            self.store
                .ids()
                .filter(|&id| self.store.name(id).starts_with(p))
                .collect()
        };
        vec![
            ("tokenizer", self.tokenizer.param_ids()),
            ("cls", vec![self.cls]),
            ("encoder_pos", vec![self.encoder_pos]),
            ("encoder", prefixed("encoder.blocks").into_iter().chain(prefixed("encoder.norm")).collect()),
            ("projection", self.projection.ids().to_vec()),
            ("mask_token", vec![self.mask_token]),
            ("decoder_pos", vec![self.decoder_pos]),
            ("decoder", prefixed("decoder.blocks").into_iter().chain(prefixed("decoder.norm")).collect()),
            ("detokenizer", self.detokenizer.param_ids()),
        ]
    }

    /// Cuts an FC matrix into this model's patches.
    pub fn patches(&self, fc: &FcMatrix) -> Result<Vec<Patch>> {
        extract_patches(fc, &self.parcellation, &self.layout)
    }

    /// Tokens plus CLS plus encoder positions: `(n_patch + 1) x d_E`.
    fn embed_sequence(&self, g: &mut Graph, inputs: &[Patch]) -> Result<Var> {
        let tokens = self.tokenizer.tokenize_graph(g, &self.store, inputs)?;
        let cls = g.param(&self.store, self.cls);
        let seq = g.concat_rows(&[cls, tokens])?;
        let pos = g.param(&self.store, self.encoder_pos);
        g.add(seq, pos)
    }

    /// Records the pretraining pass on `g`. `inputs` feed the encoder and
    /// `targets` enter the loss at masked positions only.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        inputs: &[Patch],
        targets: &[Patch],
        mask: &MaskPlan,
    ) -> Result<(Var, Vec<Var>)> {
        check_patches(&self.layout, inputs)?;
        check_patches(&self.layout, targets)?;
        let n = self.layout.n_patch();
        if mask.n_patch() != n {
            return Err(shape_err!("mask covers {} patches, layout has {n}", mask.n_patch()));
        }
        if mask.masked().is_empty() {
            return Err(Error::EmptyMask);
        }
        let seq = self.embed_sequence(g, inputs)?;
        let keep: Vec<usize> = std::iter::once(0).chain(mask.visible().iter().map(|&p| p + 1)).collect();
        let kept = g.gather_rows(seq, &keep)?;
        let encoded = self.encoder.forward(g, &self.store, kept)?;
        let projected = self.projection.forward(g, &self.store, encoded)?;

        // Row `keep.len()` of `pool` is the mask token.
        let mask_token = g.param(&self.store, self.mask_token);
        let pool = g.concat_rows(&[projected, mask_token])?;
        let mut order = vec![keep.len(); n + 1];
        order[0] = 0;
        for (rank, &p) in mask.visible().iter().enumerate() {
            order[p + 1] = rank + 1;
        }
        let full = g.gather_rows(pool, &order)?;
        let pos = g.param(&self.store, self.decoder_pos);
        let full = g.add(full, pos)?;
        let decoded = self.decoder.forward(g, &self.store, full)?;

        let rows: Vec<usize> = mask.masked().iter().map(|&p| p + 1).collect();
        let at_masked = g.gather_rows(decoded, &rows)?;
        let recon = self.detokenizer.detokenize_graph(g, &self.store, at_masked, mask.masked())?;

        let mut total: Option<Var> = None;
        for (&p, &r) in mask.masked().iter().zip(&recon) {
            let t = &targets[p];
            let tv = g.constant(Tensor::matrix(1, t.vec().len(), t.vec().to_vec())?);
            let diff = g.sub(r, tv)?;
            let mut ss = g.sum_squares(diff);
            if self.config.loss_norm == LossNorm::PerEntry {
                ss = g.scale(ss, 1.0 / t.vec().len() as f64);
            }
            total = Some(match total {
                None => ss,
                Some(acc) => g.add(acc, ss)?,
            });
        }
        let total = total.ok_or(Error::EmptyMask)?;
        let loss = g.scale(total, 1.0 / mask.masked().len() as f64);
        Ok((loss, recon))
    }

    fn collect_output(&self, g: &Graph, loss: Var, recon: &[Var], mask: &MaskPlan) -> Result<PretrainOutput> {
        let reconstructed = mask
            .masked()
            .iter()
            .zip(recon)
            .map(|(&p, &v)| {
                let (a, b) = self.layout.shapes()[p];
                Patch::from_vec(self.layout.pairs()[p], a, b, g.value(v).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PretrainOutput {
            reconstructed,
            loss: g.value(loss).data()[0],
        })
    }

    /// Pretraining pass where the inputs are also the targets.
    pub fn forward_pretrain(&self, patches: &[Patch], mask: &MaskPlan) -> Result<PretrainOutput> {
        self.forward_pretrain_with_targets(patches, patches, mask)
    }

    pub fn forward_pretrain_with_targets(
        &self,
        inputs: &[Patch],
        targets: &[Patch],
        mask: &MaskPlan,
    ) -> Result<PretrainOutput> {
        let mut g = Graph::new();
        let (loss, recon) = self.forward_graph(&mut g, inputs, targets, mask)?;
        self.collect_output(&g, loss, &recon, mask)
    }

    /// Encoder outputs for the full, unmasked sequence: `(n_patch + 1) x d_E`,
    /// row 0 being CLS.
    pub fn encode_all(&self, patches: &[Patch]) -> Result<Tensor> {
        let mut g = Graph::new();
        let seq = self.embed_sequence(&mut g, patches)?;
        let out = self.encoder.forward(&mut g, &self.store, seq)?;
        Ok(g.value(out).clone())
    }

    /// Subject embedding of length `d_E`.
    pub fn encode(&self, patches: &[Patch], pooling: Pooling) -> Result<Vec<f64>> {
        let out = self.encode_all(patches)?;
        Ok(match pooling {
            Pooling::Cls => out.row(0).to_vec(),
            Pooling::Mean => {
                let n = out.rows() - 1;
                let mut mean = vec![0.0; out.cols()];
                for r in 1..out.rows() {
                    for (m, v) in mean.iter_mut().zip(out.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                mean
            }
        })
    }

    pub fn encode_fc(&self, fc: &FcMatrix, pooling: Pooling) -> Result<Vec<f64>> {
        self.encode(&self.patches(fc)?, pooling)
    }
}

/// Free-function form of [`MaeModel::encode`].
pub fn encode(model: &MaeModel, patches: &[Patch], pooling: Pooling) -> Result<Vec<f64>> {
    model.encode(patches, pooling)
}

/// Free-function form of [`MaeModel::forward_pretrain`].
pub fn forward_pretrain(model: &MaeModel, patches: &[Patch], mask: &MaskPlan) -> Result<PretrainOutput> {
    model.forward_pretrain(patches, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizers::TokenizerKind;
    use rand::Rng as _;

    fn toy(kind: TokenizerKind) -> MaeModel {
        let cfg = MaeConfig {
            tokenizer: kind,
            embed_dim: 8,
            encoder_depth: 1,
            encoder_heads: 2,
            decoder_dim: 4,
            decoder_depth: 1,
            decoder_heads: 2,
            epochs: 4,
            warmup_epochs: 1,
            ..MaeConfig::desk()
        };
        MaeModel::new(cfg, Parcellation::contiguous(&[4, 4, 4]).unwrap()).unwrap()
    }

    fn random_fc(r: usize, rng: &mut Rng) -> FcMatrix {
        let mut v = vec![0.0; r * r];
        for i in 0..r {
            v[i * r + i] = 1.0;
            for j in i + 1..r {
                let x = rng.gen_range(-0.5..0.5);
                v[i * r + j] = x;
                v[j * r + i] = x;
            }
        }
        FcMatrix::new(r, v).unwrap()
    }

    #[test]
    fn mask_sizes_follow_floor() {
        let mut rng = rng::seeded(0);
        assert_eq!(sample_mask(153, 0.5, &mut rng).unwrap().masked().len(), 76);
        assert_eq!(sample_mask(10, 0.05, &mut rng).unwrap().masked().len(), 0);
        assert_eq!(sample_mask(10, 0.3, &mut rng).unwrap().masked().len(), 3);
        assert!(sample_mask(10, 1.0, &mut rng).is_err());
        assert!(sample_mask(10, 0.0, &mut rng).is_err());
        let a = sample_mask(50, 0.5, &mut rng::seeded(3)).unwrap();
        let b = sample_mask(50, 0.5, &mut rng::seeded(3)).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.masked().iter().chain(a.visible()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn loss_recon_examples() {
        let x = Patch::from_vec((0, 0), 2, 2, vec![1.0, 0.2, 0.2, 1.0]).unwrap();
        let xh = Patch::from_vec((0, 0), 2, 2, vec![2.0, 0.2, 0.2, 2.0]).unwrap();
        assert_eq!(loss_recon(&[xh.clone()], &[x.clone()], LossNorm::Frobenius).unwrap(), 2.0);
        assert_eq!(loss_recon(&[xh], &[x.clone()], LossNorm::PerEntry).unwrap(), 0.5);
        assert_eq!(loss_recon(&[x.clone()], &[x.clone()], LossNorm::Frobenius).unwrap(), 0.0);
        assert!(matches!(loss_recon(&[], &[], LossNorm::Frobenius), Err(Error::EmptyMask)));
        let xh2 = Patch::from_vec((0, 0), 2, 2, vec![3.0, 0.2, 0.2, 3.0]).unwrap();
        assert_eq!(loss_recon(&[xh2], &[x], LossNorm::Frobenius).unwrap(), 8.0);
    }

    #[test]
    fn forward_loss_matches_plain_loss_and_ignores_visible_targets() {
        let mut rng = rng::seeded(1);
        for kind in TokenizerKind::ALL {
            let model = toy(kind);
            let patches = model.patches(&random_fc(12, &mut rng)).unwrap();
            let mask = sample_mask(6, 0.5, &mut rng).unwrap();
            let out = model.forward_pretrain(&patches, &mask).unwrap();
            let targets: Vec<Patch> = mask.masked().iter().map(|&p| patches[p].clone()).collect();
            let plain = loss_recon(&out.reconstructed, &targets, LossNorm::Frobenius).unwrap();
            assert!((out.loss - plain).abs() < 1e-12 * plain.max(1.0));

            let mut perturbed = patches.clone();
            for &p in mask.visible() {
                perturbed[p].data_mut().iter_mut().for_each(|v| *v += 3.0);
            }
            let out2 = model.forward_pretrain_with_targets(&patches, &perturbed, &mask).unwrap();
            assert_eq!(out.loss, out2.loss);
        }
    }

    #[test]
    fn empty_mask_errors_and_near_full_mask_runs() {
        let model = toy(TokenizerKind::Bilinear);
        let mut rng = rng::seeded(2);
        let patches = model.patches(&random_fc(12, &mut rng)).unwrap();
        let empty = MaskPlan::new(6, &[]).unwrap();
        assert!(matches!(model.forward_pretrain(&patches, &empty), Err(Error::EmptyMask)));
        let heavy = MaskPlan::new(6, &[0, 1, 2, 4, 5]).unwrap();
        let out = model.forward_pretrain(&patches, &heavy).unwrap();
        assert_eq!(out.reconstructed.len(), 5);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn encode_shapes_and_sensitivity() {
        let model = toy(TokenizerKind::Bilinear);
        let mut rng = rng::seeded(3);
        let fc = random_fc(12, &mut rng);
        let patches = model.patches(&fc).unwrap();
        let e = model.encode(&patches, Pooling::Cls).unwrap();
        assert_eq!(e.len(), 8);
        assert_eq!(e, model.encode(&patches, Pooling::Cls).unwrap());
        assert_eq!(model.encode(&patches, Pooling::Mean).unwrap().len(), 8);
        for p in 0..patches.len() {
            let mut changed = patches.clone();
            changed[p].data_mut().iter_mut().for_each(|v| *v += 0.1);
            assert_ne!(model.encode(&changed, Pooling::Cls).unwrap(), e, "patch {p}");
        }
        assert!("max".parse::<Pooling>().is_err());
    }

    #[test]
    fn encoder_is_equivariant_to_token_order() {
        // Permuting patch rows together with their positional rows permutes
        // the encoder outputs and leaves CLS unchanged.
        let model = toy(TokenizerKind::Specific);
        let mut rng = rng::seeded(4);
        let patches = model.patches(&random_fc(12, &mut rng)).unwrap();
        let mut g = Graph::new();
        let seq = model.embed_sequence(&mut g, &patches).unwrap();
        let out = model.encoder.forward(&mut g, &model.store, seq).unwrap();
        let order = [0, 4, 2, 6, 1, 5, 3];
        let permuted = g.gather_rows(seq, &order).unwrap();
        let out_p = model.encoder.forward(&mut g, &model.store, permuted).unwrap();
        let expected = g.gather_rows(out, &order).unwrap();
        assert!(g.value(out_p).max_abs_diff(g.value(expected)) < 1e-12);
    }

    #[test]
    fn param_groups_cover_store() {
        let model = toy(TokenizerKind::Bilinear);
        let mut ids: Vec<usize> = model
            .param_groups()
            .into_iter()
            .flat_map(|(_, ids)| ids.into_iter().map(|id| id.index()))
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..model.store.len()).collect::<Vec<_>>());
        assert_eq!(model.store.value(model.encoder_pos).shape(), &[7, 8]);
    }
}
