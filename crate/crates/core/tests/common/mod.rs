//! Independent oracles shared by the integration test targets.
#![allow(dead_code)]

use collapse_lab::fusion::{Architecture, FusionKind, FusionModel, ModelGrads};
use collapse_lab::neurocore::{
    cosine_alignment, softmax_cross_entropy, Activation, Activations, Matrix, Mlp, MlpGrads,
    RandomStream, SgdConfig,
};
use collapse_lab::trainers::{ebr_direction, ebr_gradients, ebr_step, EbrPhase};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so exact zeros compare cleanly.
pub const REL_FLOOR: f64 = 1e-7;

pub fn tiny_arch(fusion: FusionKind) -> Architecture {
    Architecture {
        encoder_hidden: 6,
        encoding_dim: 5,
        fusion_hidden: 7,
        fused_dim: 6,
        head_hidden: 6,
        latent_dim: 4,
        decoder_hidden: 6,
        discriminator_hidden: [5, 4],
        fusion,
        ebr_init_scale: 0.5,
    }
}

pub fn random_inputs(n: usize, dims: &[usize], s: &mut RandomStream) -> Vec<Matrix> {
    dims.iter()
        .map(|&d| Matrix::from_fn(n, d, |_, _| s.normal()))
        .collect()
}

pub fn random_labels(n: usize, classes: usize, s: &mut RandomStream) -> Vec<usize> {
    (0..n).map(|_| s.below(classes)).collect()
}

/// Gradients listed in the order of [`FusionModel::mlps`].
pub fn grads_in_mlp_order(g: &ModelGrads) -> Vec<&MlpGrads> {
    let mut out: Vec<&MlpGrads> = g.encoders.iter().collect();
    out.push(&g.fusion);
    out.push(&g.classifier);
    out.extend(g.heads.iter());
    out.extend(g.decoders.iter());
    out.extend(g.discriminator.iter());
    out
}

/// Sign pattern of every ReLU output, used to reject finite differences that
/// straddle a kink.
pub fn relu_pattern(mlp: &Mlp, acts: &Activations, out: &mut Vec<bool>) {
    for (layer, a) in mlp.layers().iter().zip(&acts.0[1..]) {
        if layer.activation == Activation::Relu {
            out.extend(a.data().iter().map(|v| *v > 0.0));
        }
    }
}

pub fn model_pattern(model: &FusionModel, inputs: &[Matrix]) -> Vec<bool> {
    let t = model.forward(inputs).expect("forward");
    let mut p = Vec::new();
    for (i, e) in t.encoders.iter().enumerate() {
        relu_pattern(&model.encoders[i], &e.base, &mut p);
        if let (Some(ebr), Some(h), Some(d)) = (&model.ebr, &e.head, &e.decoder) {
            relu_pattern(&ebr.heads[i], h, &mut p);
            relu_pattern(&ebr.decoders[i], d, &mut p);
            let acts = ebr.discriminator.forward(h.output()).expect("discriminator");
            relu_pattern(&ebr.discriminator, &acts, &mut p);
        }
    }
    relu_pattern(&model.fusion, &t.fusion, &mut p);
    relu_pattern(&model.classifier, &t.classifier, &mut p);
    p
}

fn layer_slice(mlp: &Mlp, layer: usize) -> std::ops::Range<usize> {
    let mut off = 0;
    for (l, dl) in mlp.layers().iter().enumerate() {
        let len = dl.weight.data().len() + dl.bias.len();
        if l == layer {
            return off..off + len;
        }
        off += len;
    }
    unreachable!("layer index in range")
}

fn flat_layer_grad(g: &MlpGrads, layer: usize) -> Vec<f64> {
    let lg = &g.layers[layer];
    let mut v = lg.weight.data().to_vec();
    v.extend_from_slice(&lg.bias);
    v
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Directional-derivative check of `grads` (in [`FusionModel::mlps`] order)
/// against central differences of `loss`, one random direction per layer.
/// Directions whose ±step changes a ReLU pattern are redrawn.
pub fn check_model_layers(
    model: &FusionModel,
    grads: &[&MlpGrads],
    loss: &dyn Fn(&FusionModel) -> f64,
    pattern: &dyn Fn(&FusionModel) -> Vec<bool>,
    s: &mut RandomStream,
) -> f64 {
    let mut worst = 0.0f64;
    let n_mlps = model.mlps().len();
    assert_eq!(n_mlps, grads.len(), "gradient list matches the model");
    for k in 0..n_mlps {
        let layers = model.mlps()[k].layers().len();
        for l in 0..layers {
            let range = layer_slice(model.mlps()[k], l);
            let g = flat_layer_grad(grads[k], l);
            let base = model.mlps()[k].parameters();
            for _attempt in 0..20 {
                let dir: Vec<f64> = (0..range.len()).map(|_| s.normal()).collect();
                let shifted = |sign: f64| {
                    let mut m = model.clone();
                    let mut p = base.clone();
                    for (v, d) in p[range.clone()].iter_mut().zip(&dir) {
                        *v += sign * FD_STEP * d;
                    }
                    m.mlps_mut()[k].set_parameters(&p).expect("same size");
                    m
                };
                let (plus, minus) = (shifted(1.0), shifted(-1.0));
                if pattern(&plus) != pattern(&minus) {
                    continue;
                }
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
                let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
                worst = worst.max(rel_err(an, fd));
                break;
            }
        }
    }
    worst
}

/// Same check for a standalone MLP.
pub fn check_mlp_layers(
    mlp: &Mlp,
    grads: &MlpGrads,
    loss: &dyn Fn(&Mlp) -> f64,
    pattern: &dyn Fn(&Mlp) -> Vec<bool>,
    s: &mut RandomStream,
) -> f64 {
    let mut worst = 0.0f64;
    let base = mlp.parameters();
    for l in 0..mlp.layers().len() {
        let range = layer_slice(mlp, l);
        let g = flat_layer_grad(grads, l);
        for _attempt in 0..20 {
            let dir: Vec<f64> = (0..range.len()).map(|_| s.normal()).collect();
            let shifted = |sign: f64| {
                let mut m = mlp.clone();
                let mut p = base.clone();
                for (v, d) in p[range.clone()].iter_mut().zip(&dir) {
                    *v += sign * FD_STEP * d;
                }
                m.set_parameters(&p).expect("same size");
                m
            };
            let (plus, minus) = (shifted(1.0), shifted(-1.0));
            if pattern(&plus) != pattern(&minus) {
                continue;
            }
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            worst = worst.max(rel_err(an, fd));
            break;
        }
    }
    worst
}

/// Worst relative error per loss over `draws` random models and batches.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientReport {
    pub sem: f64,
    pub sem_with_probe: f64,
    pub sem_ebr: f64,
    pub md: f64,
    pub kd_alignment: f64,
}

impl GradientReport {
    pub fn worst(&self) -> f64 {
        [self.sem, self.sem_with_probe, self.sem_ebr, self.md, self.kd_alignment]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn sem_loss(m: &FusionModel, x: &[Matrix], y: &[usize]) -> f64 {
    let (_, logits) = m.fuse_predict(x).expect("forward");
    softmax_cross_entropy(&logits, y).expect("loss").0
}

/// One draw of every gradient check.
pub fn gradient_draw(seed: u64) -> GradientReport {
    let mut s = RandomStream::new(seed);
    let dims = [3 + s.below(3), 2 + s.below(4), 4];
    let m = 2 + s.below(2);
    let dims = &dims[..m];
    let classes = 3;
    let n = 4;
    let fusion = if s.bernoulli(0.5) { FusionKind::Concat } else { FusionKind::MeanPool };
    let arch = tiny_arch(fusion);
    let x = random_inputs(n, dims, &mut s);
    let y = random_labels(n, classes, &mut s);
    let mut report = GradientReport::default();

    // L_sem on a plain model.
    let model = FusionModel::new(&arch, dims, classes, &s.fork("model")).expect("model");
    let t = model.forward(&x).expect("forward");
    let (_, dl) = softmax_cross_entropy(t.logits(), &y).expect("loss");
    let g = model.backward(&t, &dl).expect("backward");
    report.sem = check_model_layers(
        &model,
        &grads_in_mlp_order(&g),
        &|m| sem_loss(m, &x, &y),
        &|m| model_pattern(m, &x),
        &mut s,
    );

    // L_sem + β · probe CE on modality 0's encoding, probe held fixed.
    let beta = 0.5 + 4.0 * s.uniform();
    let probe = Mlp::he(&[arch.encoding_dim, classes], Activation::Identity, Activation::Logits, &mut s)
        .expect("probe");
    let total = |m: &FusionModel| {
        let enc = m.encode(&x).expect("encode");
        let pl = softmax_cross_entropy(&probe.predict(&enc[0]).expect("probe"), &y).expect("loss").0;
        sem_loss(m, &x, &y) + beta * pl
    };
    let pacts = probe.forward(t.encoders[0].encoding()).expect("probe");
    let (_, pg) = softmax_cross_entropy(pacts.output(), &y).expect("loss");
    let pgrads = probe.backward(&pacts, &pg).expect("probe backward");
    let mut extra = vec![None; m];
    extra[0] = Some(pgrads.input.scale(beta));
    let g = model.backward_with(&t, &dl, &extra).expect("backward");
    report.sem_with_probe = check_model_layers(
        &model,
        &grads_in_mlp_order(&g),
        &total,
        &|m| model_pattern(m, &x),
        &mut s,
    );

    // L_sem and L_md with the basis-reallocation heads attached.
    let mut ebr_model = model.clone();
    ebr_model.attach_ebr(&arch, &s.fork("ebr")).expect("attach");
    let eg = ebr_gradients(&ebr_model, &x, &y).expect("ebr gradients");
    report.sem_ebr = check_model_layers(
        &ebr_model,
        &grads_in_mlp_order(&eg.sem),
        &|m| sem_loss(m, &x, &y),
        &|m| model_pattern(m, &x),
        &mut s,
    );
    report.md = check_model_layers(
        &ebr_model,
        &grads_in_mlp_order(&eg.md),
        &|m| ebr_gradients(m, &x, &y).expect("ebr gradients").md_loss,
        &|m| model_pattern(m, &x),
        &mut s,
    );

    // KD alignment: mean (1 − cos) between a student encoder and a linear
    // projection of a frozen teacher encoding.
    let student = model.encoders[0].clone();
    let teacher_enc = Matrix::from_fn(n, 6, |_, _| s.normal());
    let proj = Mlp::he(&[6, arch.encoding_dim], Activation::Identity, Activation::Identity, &mut s)
        .expect("projection");
    let sa = student.forward(&x[0]).expect("student");
    let pa = proj.forward(&teacher_enc).expect("projection");
    let (_, gs, gp) = cosine_alignment(sa.output(), pa.output()).expect("alignment");
    let sg = student.backward(&sa, &gs).expect("student backward");
    let pgr = proj.backward(&pa, &gp).expect("projection backward");
    let student_pattern = |e: &Mlp| {
        let mut p = Vec::new();
        relu_pattern(e, &e.forward(&x[0]).expect("student"), &mut p);
        p
    };
    let ws = check_mlp_layers(
        &student,
        &sg,
        &|e| cosine_alignment(&e.predict(&x[0]).expect("student"), pa.output()).expect("alignment").0,
        &student_pattern,
        &mut s,
    );
    let wp = check_mlp_layers(
        &proj,
        &pgr,
        &|p| cosine_alignment(sa.output(), &p.predict(&teacher_enc).expect("projection")).expect("alignment").0,
        &|_| Vec::new(),
        &mut s,
    );
    report.kd_alignment = ws.max(wp);
    report
}

/// Worst per-loss relative error over `draws` independent draws.
pub fn gradient_fidelity(draws: usize, seed: u64) -> GradientReport {
    let root = RandomStream::new(seed);
    let mut worst = GradientReport::default();
    for d in 0..draws {
        let r = gradient_draw(root.fork_indexed("draw", d as u64).next_u64());
        worst.sem = worst.sem.max(r.sem);
        worst.sem_with_probe = worst.sem_with_probe.max(r.sem_with_probe);
        worst.sem_ebr = worst.sem_ebr.max(r.sem_ebr);
        worst.md = worst.md.max(r.md);
        worst.kd_alignment = worst.kd_alignment.max(r.kd_alignment);
    }
    worst
}

/// Gradient of `Σ_i CE(ψ(g_i(x_i)), i)` composed by hand from the
/// sub-network backward passes, independent of the trainer's helper.
pub struct MdOracle {
    pub encoders: Vec<MlpGrads>,
    pub heads: Vec<MlpGrads>,
    pub discriminator: MlpGrads,
}

pub fn md_oracle(model: &FusionModel, x: &[Matrix]) -> MdOracle {
    let ebr = model.ebr.as_ref().expect("attached");
    let mut encoders = Vec::new();
    let mut heads = Vec::new();
    let mut disc = MlpGrads::zeros_like(&ebr.discriminator);
    for (i, xi) in x.iter().enumerate() {
        let ea = model.encoders[i].forward(xi).expect("encoder");
        let ha = ebr.heads[i].forward(ea.output()).expect("head");
        let da = ebr.discriminator.forward(ha.output()).expect("psi");
        let (_, g) = softmax_cross_entropy(da.output(), &vec![i; xi.rows()]).expect("loss");
        let dg = ebr.discriminator.backward(&da, &g).expect("psi backward");
        let hg = ebr.heads[i].backward(&ha, &dg.input).expect("head backward");
        let eg = model.encoders[i].backward(&ea, &hg.input).expect("encoder backward");
        disc.accumulate(1.0, &dg);
        heads.push(hg);
        encoders.push(eg);
    }
    MdOracle {
        encoders,
        heads,
        discriminator: disc,
    }
}

fn expect_step(before: &Mlp, terms: &[(f64, &MlpGrads)], lr: f64) -> Vec<f64> {
    let mut p = before.parameters();
    for (sign, g) in terms {
        let mut off = 0;
        for lg in &g.layers {
            for v in lg.weight.data().iter().chain(&lg.bias) {
                p[off] -= lr * sign * v;
                off += 1;
            }
        }
    }
    p
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest absolute deviation between one EBR step in `phase` and the update
/// equations applied by hand to independently computed gradients:
/// `ψ ← ψ − μ∇ψ L_md`, `g_i ← g_i − μ∇L_sem + μ∇L_md`, `h⁻¹_i ← h⁻¹_i − μ∇L_sem`,
/// with groups outside the phase left untouched.
pub fn ebr_update_deviation(seed: u64, phase: EbrPhase) -> f64 {
    let mut s = RandomStream::new(seed);
    let dims = [4, 3, 5];
    let arch = tiny_arch(FusionKind::Concat);
    let mut model = FusionModel::new(&arch, &dims, 3, &s.fork("model")).expect("model");
    model.attach_ebr(&arch, &s.fork("ebr")).expect("attach");
    let x = random_inputs(6, &dims, &mut s);
    let y = random_labels(6, 3, &mut s);
    let lr = 0.05;
    let sgd = SgdConfig {
        learning_rate: lr,
        weight_decay: 0.0,
        decay_factor: 1.0,
        decay_every: 1,
    };

    let t = model.forward(&x).expect("forward");
    let (_, dl) = softmax_cross_entropy(t.logits(), &y).expect("loss");
    let sem = model.backward(&t, &dl).expect("sem backward");
    let md = md_oracle(&model, &x);

    let grads = ebr_gradients(&model, &x, &y).expect("ebr gradients");
    let dir = ebr_direction(&grads, phase, 1.0).expect("direction");
    let mut stepped = model.clone();
    ebr_step(&mut stepped, &dir, &sgd, 0).expect("step");

    let sem_on = phase != EbrPhase::Discriminative;
    let md_on = phase != EbrPhase::Semantic;
    let (before, after) = (model.ebr.as_ref().expect("ebr"), stepped.ebr.as_ref().expect("ebr"));
    let mut worst = 0.0f64;
    for i in 0..dims.len() {
        let mut enc_terms = Vec::new();
        let mut head_terms = Vec::new();
        if sem_on {
            enc_terms.push((1.0, &sem.encoders[i]));
            head_terms.push((1.0, &sem.heads[i]));
        }
        if md_on {
            enc_terms.push((-1.0, &md.encoders[i]));
            head_terms.push((-1.0, &md.heads[i]));
        }
        worst = worst.max(max_dev(
            &stepped.encoders[i].parameters(),
            &expect_step(&model.encoders[i], &enc_terms, lr),
        ));
        worst = worst.max(max_dev(
            &after.heads[i].parameters(),
            &expect_step(&before.heads[i], &head_terms, lr),
        ));
        let dec_terms: Vec<(f64, &MlpGrads)> = if sem_on { vec![(1.0, &sem.decoders[i])] } else { vec![] };
        worst = worst.max(max_dev(
            &after.decoders[i].parameters(),
            &expect_step(&before.decoders[i], &dec_terms, lr),
        ));
    }
    let psi_terms: Vec<(f64, &MlpGrads)> = if md_on { vec![(1.0, &md.discriminator)] } else { vec![] };
    worst = worst.max(max_dev(
        &after.discriminator.parameters(),
        &expect_step(&before.discriminator, &psi_terms, lr),
    ));
    for (a, b, g) in [
        (&stepped.fusion, &model.fusion, &sem.fusion),
        (&stepped.classifier, &model.classifier, &sem.classifier),
    ] {
        let terms: Vec<(f64, &MlpGrads)> = if sem_on { vec![(1.0, g)] } else { vec![] };
        worst = worst.max(max_dev(&a.parameters(), &expect_step(b, &terms, lr)));
    }
    worst
}
