//! Multimodal fusion model: per-modality encoders, a fusion head, a classifier,
//! and optional basis-reallocation attachments.
//!
//! Without attachments the encoding of modality `i` is `f_i(x_i)`. With them it
//! becomes `h⁻¹_i(h_i(f̄_i(x_i)))`, where `f̄_i` is the original encoder and the
//! latent `h_i(f̄_i(x_i))` is what the modality discriminator `ψ` sees.

use serde::{Deserialize, Serialize};

use crate::neurocore::{Activation, Activations, DenseLayer, Matrix, Mlp, MlpGrads, RandomStream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    /// Concatenate encodings, then run the fusion MLP.
    Concat,
    /// Average encodings (all must share one width), then run the fusion MLP.
    MeanPool,
}

/// Layer widths of every sub-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder_hidden: usize,
    pub encoding_dim: usize,
    pub fusion_hidden: usize,
    pub fused_dim: usize,
    pub head_hidden: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    pub discriminator_hidden: [usize; 2],
    pub fusion: FusionKind,
    /// Scale applied to the near-identity perturbation of the attachment heads.
    pub ebr_init_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder_hidden: 48,
            encoding_dim: 16,
            fusion_hidden: 64,
            fused_dim: 32,
            head_hidden: 64,
            latent_dim: 32,
            decoder_hidden: 64,
            discriminator_hidden: [32, 16],
            fusion: FusionKind::Concat,
            ebr_init_scale: 0.02,
        }
    }
}

impl Architecture {
    /// Multiplies every internal width by `factor` (rounded, at least 1).
    pub fn scaled(&self, factor: f64) -> Architecture {
        let s = |w: usize| ((w as f64 * factor).round() as usize).max(1);
        Architecture {
            encoder_hidden: s(self.encoder_hidden),
            encoding_dim: s(self.encoding_dim),
            fusion_hidden: s(self.fusion_hidden),
            fused_dim: s(self.fused_dim),
            head_hidden: s(self.head_hidden),
            latent_dim: s(self.latent_dim),
            decoder_hidden: s(self.decoder_hidden),
            discriminator_hidden: [
                s(self.discriminator_hidden[0]),
                s(self.discriminator_hidden[1]),
            ],
            fusion: self.fusion,
            ebr_init_scale: self.ebr_init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbrAttachment {
    /// `h_i`: encoding → shared latent.
    pub heads: Vec<Mlp>,
    /// `h⁻¹_i`: shared latent → encoding.
    pub decoders: Vec<Mlp>,
    /// `ψ`: shared latent → modality logits.
    pub discriminator: Mlp,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub encoders: Vec<Mlp>,
    pub fusion: Mlp,
    pub classifier: Mlp,
    pub fusion_kind: FusionKind,
    pub ebr: Option<EbrAttachment>,
}

/// Forward activations of one modality's encoding path.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub base: Activations,
    pub head: Option<Activations>,
    pub decoder: Option<Activations>,
}

impl EncoderTrace {
    pub fn encoding(&self) -> &Matrix {
        match &self.decoder {
            Some(d) => d.output(),
            None => self.base.output(),
        }
    }

    pub fn latent(&self) -> Option<&Matrix> {
        self.head.as_ref().map(Activations::output)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub encoders: Vec<EncoderTrace>,
    pub fusion: Activations,
    pub classifier: Activations,
}

impl ForwardTrace {
    pub fn fused(&self) -> &Matrix {
        self.fusion.output()
    }

    pub fn logits(&self) -> &Matrix {
        self.classifier.output()
    }

    pub fn encodings(&self) -> Vec<&Matrix> {
        self.encoders.iter().map(EncoderTrace::encoding).collect()
    }
}

/// Gradients for every parameter group of a [`FusionModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoders: Vec<MlpGrads>,
    pub heads: Vec<MlpGrads>,
    pub decoders: Vec<MlpGrads>,
    pub discriminator: Option<MlpGrads>,
    pub fusion: MlpGrads,
    pub classifier: MlpGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &FusionModel) -> Self {
        let (heads, decoders, discriminator) = match &model.ebr {
            Some(e) => (
                e.heads.iter().map(MlpGrads::zeros_like).collect(),
                e.decoders.iter().map(MlpGrads::zeros_like).collect(),
                Some(MlpGrads::zeros_like(&e.discriminator)),
            ),
            None => (Vec::new(), Vec::new(), None),
        };
        Self {
            encoders: model.encoders.iter().map(MlpGrads::zeros_like).collect(),
            heads,
            decoders,
            discriminator,
            fusion: MlpGrads::zeros_like(&model.fusion),
            classifier: MlpGrads::zeros_like(&model.classifier),
        }
    }

    pub fn accumulate(&mut self, alpha: f64, other: &ModelGrads) {
        for (a, b) in self.encoders.iter_mut().zip(&other.encoders) {
            a.accumulate(alpha, b);
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.accumulate(alpha, b);
        }
        for (a, b) in self.decoders.iter_mut().zip(&other.decoders) {
            a.accumulate(alpha, b);
        }
        if let (Some(a), Some(b)) = (&mut self.discriminator, &other.discriminator) {
            a.accumulate(alpha, b);
        }
        self.fusion.accumulate(alpha, &other.fusion);
        self.classifier.accumulate(alpha, &other.classifier);
    }
}

impl FusionModel {
    /// He-initialized model for modalities with the given observation widths.
    pub fn new(
        arch: &Architecture,
        obs_dims: &[usize],
        num_classes: usize,
        stream: &RandomStream,
    ) -> Result<Self> {
        if obs_dims.is_empty() {
            return Err(Error::config("need at least one modality"));
        }
        if num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        let encoders = obs_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut s = stream.fork_indexed("encoder", i as u64);
                Mlp::he(
                    &[d, arch.encoder_hidden, arch.encoding_dim],
                    Activation::Relu,
                    Activation::Relu,
                    &mut s,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion_in = match arch.fusion {
            FusionKind::Concat => arch.encoding_dim * obs_dims.len(),
            FusionKind::MeanPool => arch.encoding_dim,
        };
        let fusion = Mlp::he(
            &[fusion_in, arch.fusion_hidden, arch.fused_dim],
            Activation::Relu,
            Activation::Relu,
            &mut stream.fork("fusion"),
        )?;
        let classifier = Mlp::he(
            &[arch.fused_dim, num_classes],
            Activation::Relu,
            Activation::Logits,
            &mut stream.fork("classifier"),
        )?;
        Ok(Self {
            encoders,
            fusion,
            classifier,
            fusion_kind: arch.fusion,
            ebr: None,
        })
    }

    /// Attaches `h_i`, `h⁻¹_i` and `ψ`. The heads start near the identity so the
    /// attached encoding initially matches the plain one.
    pub fn attach_ebr(&mut self, arch: &Architecture, stream: &RandomStream) -> Result<()> {
        let m = self.num_modalities();
        let scale = arch.ebr_init_scale;
        let mut heads = Vec::with_capacity(m);
        let mut decoders = Vec::with_capacity(m);
        for (i, enc) in self.encoders.iter().enumerate() {
            let d = enc.out_dim();
            let mut s = stream.fork_indexed("ebr-head", i as u64);
            heads.push(Mlp::new(vec![
                DenseLayer::near_identity(d, arch.head_hidden, Activation::Relu, scale, &mut s),
                DenseLayer::near_identity(
                    arch.head_hidden,
                    arch.latent_dim,
                    Activation::Identity,
                    scale,
                    &mut s,
                ),
            ])?);
            let mut s = stream.fork_indexed("ebr-decoder", i as u64);
            decoders.push(Mlp::new(vec![
                DenseLayer::near_identity(
                    arch.latent_dim,
                    arch.decoder_hidden,
                    Activation::Relu,
                    scale,
                    &mut s,
                ),
                DenseLayer::near_identity(arch.decoder_hidden, d, Activation::Relu, scale, &mut s),
            ])?);
        }
        let [h1, h2] = arch.discriminator_hidden;
        let discriminator = Mlp::he(
            &[arch.latent_dim, h1, h2, m],
            Activation::Relu,
            Activation::Logits,
            &mut stream.fork("ebr-discriminator"),
        )?;
        self.ebr = Some(EbrAttachment {
            heads,
            decoders,
            discriminator,
            latent_dim: arch.latent_dim,
        });
        Ok(())
    }

    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn encoding_dims(&self) -> Vec<usize> {
        self.encoders.iter().map(Mlp::out_dim).collect()
    }

    fn ebr_ref(&self) -> Result<&EbrAttachment> {
        self.ebr
            .as_ref()
            .ok_or_else(|| Error::state("model has no EBR attachment"))
    }

    fn check_batch(&self, inputs: &[Matrix]) -> Result<usize> {
        if inputs.len() != self.num_modalities() {
            return Err(Error::config(format!(
                "batch has {} modalities, model expects {}",
                inputs.len(),
                self.num_modalities()
            )));
        }
        let n = inputs[0].rows();
        if inputs.iter().any(|x| x.rows() != n) {
            return Err(Error::config("modalities have different sample counts"));
        }
        Ok(n)
    }

    pub fn encode_one(&self, i: usize, x: &Matrix) -> Result<EncoderTrace> {
        let base = self.encoders[i].forward(x)?;
        let (head, decoder) = match &self.ebr {
            Some(e) => {
                let h = e.heads[i].forward(base.output())?;
                let d = e.decoders[i].forward(h.output())?;
                (Some(h), Some(d))
            }
            None => (None, None),
        };
        Ok(EncoderTrace {
            base,
            head,
            decoder,
        })
    }

    /// Per-modality encodings `f_i(x_i)`.
    pub fn encode(&self, inputs: &[Matrix]) -> Result<Vec<Matrix>> {
        self.check_batch(inputs)?;
        (0..inputs.len())
            .map(|i| {
                let t = self.encode_one(i, &inputs[i])?;
                Ok(t.encoding().clone())
            })
            .collect()
    }

    pub fn fusion_input(&self, encodings: &[&Matrix]) -> Result<Matrix> {
        if encodings.len() != self.num_modalities() {
            return Err(Error::config("wrong number of encodings"));
        }
        for (e, d) in encodings.iter().zip(self.encoding_dims()) {
            if e.cols() != d {
                return Err(Error::config(format!(
                    "encoding has {} columns, expected {d}",
                    e.cols()
                )));
            }
        }
        match self.fusion_kind {
            FusionKind::Concat => Matrix::hstack(encodings),
            FusionKind::MeanPool => {
                let mut acc = encodings[0].clone();
                for e in &encodings[1..] {
                    acc.axpy(1.0, e);
                }
                Ok(acc.scale(1.0 / encodings.len() as f64))
            }
        }
    }

    /// `(φ(encodings), g(φ(encodings)))` for externally supplied encodings.
    pub fn predict_from_encodings(&self, encodings: &[&Matrix]) -> Result<(Matrix, Matrix)> {
        let input = self.fusion_input(encodings)?;
        let fused = self.fusion.predict(&input)?;
        let logits = self.classifier.predict(&fused)?;
        Ok((fused, logits))
    }

    /// `(fused, logits)` with `fused = φ(encodings)` and `logits = g(fused)`.
    pub fn fuse_predict(&self, inputs: &[Matrix]) -> Result<(Matrix, Matrix)> {
        let enc = self.encode(inputs)?;
        let refs: Vec<&Matrix> = enc.iter().collect();
        self.predict_from_encodings(&refs)
    }

    pub fn forward(&self, inputs: &[Matrix]) -> Result<ForwardTrace> {
        self.check_batch(inputs)?;
        let encoders = (0..inputs.len())
            .map(|i| self.encode_one(i, &inputs[i]))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = encoders.iter().map(EncoderTrace::encoding).collect();
        let input = self.fusion_input(&refs)?;
        let fusion = self.fusion.forward(&input)?;
        let classifier = self.classifier.forward(fusion.output())?;
        Ok(ForwardTrace {
            encoders,
            fusion,
            classifier,
        })
    }

    /// Shared latent `g_i(x) = h_i(f̄_i(x_i))` of modality `i`.
    pub fn ebr_latent(&self, inputs: &[Matrix], i: usize) -> Result<Matrix> {
        let e = self.ebr_ref()?;
        self.check_batch(inputs)?;
        if i >= self.num_modalities() {
            return Err(Error::input(format!("modality {i} out of range")));
        }
        let base = self.encoders[i].predict(&inputs[i])?;
        e.heads[i].predict(&base)
    }

    /// `h⁻¹_i(latent)`: decode a shared latent into modality `i`'s encoding space.
    pub fn decode_latent(&self, latent: &Matrix, i: usize) -> Result<Matrix> {
        let e = self.ebr_ref()?;
        if i >= self.num_modalities() {
            return Err(Error::input(format!("modality {i} out of range")));
        }
        e.decoders[i].predict(latent)
    }

    /// Modality logits `ψ(latents)`.
    pub fn discriminate(&self, latents: &Matrix) -> Result<Matrix> {
        let e = self.ebr_ref()?;
        if latents.cols() != e.latent_dim {
            return Err(Error::config(format!(
                "latent has {} columns, discriminator expects {}",
                latents.cols(),
                e.latent_dim
            )));
        }
        e.discriminator.predict(latents)
    }

    /// Backpropagates a gradient on the logits through classifier, fusion and
    /// every encoding path. Discriminator gradients are left empty.
    pub fn backward(&self, trace: &ForwardTrace, logit_grad: &Matrix) -> Result<ModelGrads> {
        self.backward_with(trace, logit_grad, &[])
    }

    /// As [`FusionModel::backward`], adding `extra[i]` (when present) to the
    /// gradient arriving at modality `i`'s encoding.
    pub fn backward_with(
        &self,
        trace: &ForwardTrace,
        logit_grad: &Matrix,
        extra: &[Option<Matrix>],
    ) -> Result<ModelGrads> {
        let classifier = self.classifier.backward(&trace.classifier, logit_grad)?;
        let fusion = self.fusion.backward(&trace.fusion, &classifier.input)?;
        let mut enc_grads = self.split_fusion_grad(&fusion.input)?;
        for (g, e) in enc_grads.iter_mut().zip(extra) {
            if let Some(e) = e {
                g.axpy(1.0, e);
            }
        }
        self.backward_from_encodings(trace, &enc_grads, fusion, classifier)
    }

    /// Gradients of `f̄_i` and `h_i` given a gradient on modality `i`'s latent.
    pub fn latent_backward(
        &self,
        trace: &EncoderTrace,
        i: usize,
        latent_grad: &Matrix,
    ) -> Result<(MlpGrads, MlpGrads)> {
        let e = self.ebr_ref()?;
        let head = trace
            .head
            .as_ref()
            .ok_or_else(|| Error::state("trace has no latent activations"))?;
        let hg = e.heads[i].backward(head, latent_grad)?;
        let eg = self.encoders[i].backward(&trace.base, &hg.input)?;
        Ok((eg, hg))
    }

    /// Gradient on each modality's encoding given the gradient on the fusion input.
    pub fn split_fusion_grad(&self, fusion_input_grad: &Matrix) -> Result<Vec<Matrix>> {
        let dims = self.encoding_dims();
        Ok(match self.fusion_kind {
            FusionKind::Concat => {
                let mut offset = 0;
                dims.iter()
                    .map(|&d| {
                        let g = fusion_input_grad.columns(offset..offset + d);
                        offset += d;
                        g
                    })
                    .collect()
            }
            FusionKind::MeanPool => {
                let g = fusion_input_grad.scale(1.0 / dims.len() as f64);
                vec![g; dims.len()]
            }
        })
    }

    fn backward_from_encodings(
        &self,
        trace: &ForwardTrace,
        enc_grads: &[Matrix],
        fusion: MlpGrads,
        classifier: MlpGrads,
    ) -> Result<ModelGrads> {
        let mut grads = ModelGrads::zeros_like(self);
        grads.fusion = fusion;
        grads.classifier = classifier;
        for (i, (t, g)) in trace.encoders.iter().zip(enc_grads).enumerate() {
            match (&self.ebr, &t.head, &t.decoder) {
                (Some(e), Some(h), Some(d)) => {
                    let dg = e.decoders[i].backward(d, g)?;
                    let hg = e.heads[i].backward(h, &dg.input)?;
                    grads.encoders[i] = self.encoders[i].backward(&t.base, &hg.input)?;
                    grads.decoders[i] = dg;
                    grads.heads[i] = hg;
                }
                _ => {
                    grads.encoders[i] = self.encoders[i].backward(&t.base, g)?;
                }
            }
        }
        Ok(grads)
    }

    /// Same model with modalities reordered: new modality `k` is old `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<FusionModel> {
        let m = self.num_modalities();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..m).collect::<Vec<_>>() {
            return Err(Error::input("not a permutation of the modalities"));
        }
        let mut fusion = self.fusion.clone();
        if self.fusion_kind == FusionKind::Concat {
            let dims = self.encoding_dims();
            let offsets: Vec<usize> = dims
                .iter()
                .scan(0, |acc, d| {
                    let o = *acc;
                    *acc += d;
                    Some(o)
                })
                .collect();
            let w = &self.fusion.layers()[0].weight;
            let mut col_map = Vec::with_capacity(w.cols());
            for &old in perm {
                col_map.extend(offsets[old]..offsets[old] + dims[old]);
            }
            let new_w = Matrix::from_fn(w.rows(), w.cols(), |r, c| w.get(r, col_map[c]));
            fusion.layers_mut()[0].weight = new_w;
        }
        let ebr = self.ebr.as_ref().map(|e| {
            let mut disc = e.discriminator.clone();
            let last = disc.layers_mut().last_mut().expect("non-empty");
            let w = last.weight.clone();
            last.weight = Matrix::from_fn(w.rows(), w.cols(), |r, c| w.get(perm[r], c));
            let b = last.bias.clone();
            last.bias = perm.iter().map(|&p| b[p]).collect();
            EbrAttachment {
                heads: perm.iter().map(|&p| e.heads[p].clone()).collect(),
                decoders: perm.iter().map(|&p| e.decoders[p].clone()).collect(),
                discriminator: disc,
                latent_dim: e.latent_dim,
            }
        });
        Ok(FusionModel {
            encoders: perm.iter().map(|&p| self.encoders[p].clone()).collect(),
            fusion,
            classifier: self.classifier.clone(),
            fusion_kind: self.fusion_kind,
            ebr,
        })
    }

    /// A single-modality model reusing encoder `i`, with freshly initialized
    /// fusion and classifier of the same widths.
    pub fn unimodal(&self, i: usize, stream: &RandomStream) -> Result<FusionModel> {
        if i >= self.num_modalities() {
            return Err(Error::input(format!("modality {i} out of range")));
        }
        let enc = self.encoders[i].clone();
        let widths: Vec<usize> = self.fusion.layers().iter().map(DenseLayer::out_dim).collect();
        let mut dims = vec![enc.out_dim()];
        dims.extend(&widths);
        let fusion = Mlp::he(
            &dims,
            Activation::Relu,
            Activation::Relu,
            &mut stream.fork("unimodal-fusion"),
        )?;
        let classifier = Mlp::he(
            &[*widths.last().expect("fusion has layers"), self.num_classes()],
            Activation::Relu,
            Activation::Logits,
            &mut stream.fork("unimodal-classifier"),
        )?;
        Ok(FusionModel {
            encoders: vec![enc],
            fusion,
            classifier,
            fusion_kind: FusionKind::Concat,
            ebr: None,
        })
    }

    /// Every MLP in a fixed order: encoders, fusion, classifier, then heads,
    /// decoders and discriminator when attached.
    pub fn mlps(&self) -> Vec<&Mlp> {
        let mut out: Vec<&Mlp> = self.encoders.iter().collect();
        out.push(&self.fusion);
        out.push(&self.classifier);
        if let Some(e) = &self.ebr {
            out.extend(e.heads.iter());
            out.extend(e.decoders.iter());
            out.push(&e.discriminator);
        }
        out
    }

    pub fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut out: Vec<&mut Mlp> = self.encoders.iter_mut().collect();
        out.push(&mut self.fusion);
        out.push(&mut self.classifier);
        if let Some(e) = &mut self.ebr {
            out.extend(e.heads.iter_mut());
            out.extend(e.decoders.iter_mut());
            out.push(&mut e.discriminator);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neurocore::softmax_cross_entropy;

    fn inputs(n: usize, dims: &[usize], seed: u64) -> Vec<Matrix> {
        let mut s = RandomStream::new(seed);
        dims.iter()
            .map(|&d| Matrix::from_fn(n, d, |_, _| s.normal()))
            .collect()
    }

    #[test]
    fn zero_input_gives_zero_encodings() {
        let model =
            FusionModel::new(&Architecture::default(), &[5, 7], 4, &RandomStream::new(1)).unwrap();
        let x = vec![Matrix::zeros(3, 5), Matrix::zeros(3, 7)];
        for e in model.encode(&x).unwrap() {
            assert!(e.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn wrong_modality_count_is_config_error() {
        let model =
            FusionModel::new(&Architecture::default(), &[5, 7], 4, &RandomStream::new(1)).unwrap();
        assert!(matches!(
            model.encode(&inputs(2, &[5], 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn latent_without_attachment_is_state_error() {
        let model =
            FusionModel::new(&Architecture::default(), &[5, 7], 4, &RandomStream::new(1)).unwrap();
        let x = inputs(2, &[5, 7], 0);
        assert!(matches!(model.ebr_latent(&x, 0), Err(Error::State(_))));
        assert!(matches!(
            model.discriminate(&Matrix::zeros(1, 32)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn attached_encoding_starts_close_to_plain() {
        let arch = Architecture::default();
        let stream = RandomStream::new(3);
        let plain = FusionModel::new(&arch, &[32, 32], 4, &stream).unwrap();
        let mut attached = plain.clone();
        attached.attach_ebr(&arch, &stream).unwrap();
        let x = inputs(64, &[32, 32], 4);
        let a = plain.encode(&x).unwrap();
        let b = attached.encode(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            let rel = p.sub(q).frobenius_norm() / p.frobenius_norm();
            assert!(rel < 0.1, "relative encoding change {rel}");
        }
        let (_, la) = plain.fuse_predict(&x).unwrap();
        let (_, lb) = attached.fuse_predict(&x).unwrap();
        assert!(la.sub(&lb).frobenius_norm() / la.frobenius_norm() < 0.1);
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let model =
            FusionModel::new(&Architecture::default(), &[6, 6], 3, &RandomStream::new(2)).unwrap();
        let x = inputs(5, &[6, 6], 8);
        let (_, logits) = model.fuse_predict(&x).unwrap();
        let order = [4, 2, 0, 1, 3];
        let xp: Vec<Matrix> = x.iter().map(|m| m.select_rows(&order)).collect();
        let (_, lp) = model.fuse_predict(&xp).unwrap();
        assert_eq!(lp, logits.select_rows(&order));
    }

    #[test]
    fn modality_relabeling_is_consistent() {
        let arch = Architecture::default();
        let stream = RandomStream::new(6);
        let mut model = FusionModel::new(&arch, &[4, 5, 6], 3, &stream).unwrap();
        model.attach_ebr(&arch, &stream).unwrap();
        let x = inputs(7, &[4, 5, 6], 1);
        let labels = vec![0, 1, 2, 0, 1, 2, 0];
        let perm = [2, 0, 1];
        let pm = model.permuted(&perm).unwrap();
        let xp: Vec<Matrix> = perm.iter().map(|&p| x[p].clone()).collect();
        let (_, l1) = model.fuse_predict(&x).unwrap();
        let (_, l2) = pm.fuse_predict(&xp).unwrap();
        let (a, _) = softmax_cross_entropy(&l1, &labels).unwrap();
        let (b, _) = softmax_cross_entropy(&l2, &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
        let lat = model.ebr_latent(&x, 1).unwrap();
        let psi = model.discriminate(&lat).unwrap();
        let psi_p = pm.discriminate(&lat).unwrap();
        for r in 0..psi.rows() {
            for (k, &old) in perm.iter().enumerate() {
                assert!((psi_p.get(r, k) - psi.get(r, old)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_pool_variant_runs() {
        let arch = Architecture {
            fusion: FusionKind::MeanPool,
            ..Architecture::default()
        };
        let model = FusionModel::new(&arch, &[4, 4], 2, &RandomStream::new(1)).unwrap();
        assert_eq!(model.fusion.in_dim(), arch.encoding_dim);
        let (fused, logits) = model.fuse_predict(&inputs(3, &[4, 4], 2)).unwrap();
        assert_eq!(fused.shape(), (3, arch.fused_dim));
        assert_eq!(logits.shape(), (3, 2));
    }
}
