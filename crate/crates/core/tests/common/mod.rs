//! Reference oracles shared by the integration tests.
#![allow(dead_code)]

use hidden_fold::model::{ArchConfig, Bottleneck, Model, Stage, StageBody};
use hidden_fold::ops::{
    batchnorm, batchnorm_grad, conv2d, conv2d_grad, linear, linear_grad, softmax_cross_entropy, BnLayerState, Mode,
};
use hidden_fold::rng::RngStream;
use hidden_fold::supermask::{kept_count, masked_forward, topk_mask, LayerKind, MaskedLayer, Trainable};
use hidden_fold::tensor::Tensor;

pub const H: f64 = 1e-5;

pub fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + H;
            let up = f(&p);
            p[i] = x[i] - H;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error of conv input and weight gradients over a few
/// geometries, against central differences of `Σ r ⊙ conv(x, w)`.
pub fn conv_grad_err(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 1);
    let mut worst: f64 = 0.0;
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let x = randn(&mut rng, &[2, 2, 5, 5]);
        let w = randn(&mut rng, &[3, 2, k, k]);
        let out = conv2d(&x, &w, stride, pad).unwrap();
        let r = randn(&mut rng, out.shape());
        let (gx, gw) = conv2d_grad(&r, &x, &w, stride, pad).unwrap();
        let nx = numeric_grad(x.data(), |p| {
            weighted_sum(&conv2d(&Tensor::from_vec(x.shape(), p.to_vec()).unwrap(), &w, stride, pad).unwrap(), &r)
        });
        let nw = numeric_grad(w.data(), |p| {
            weighted_sum(&conv2d(&x, &Tensor::from_vec(w.shape(), p.to_vec()).unwrap(), stride, pad).unwrap(), &r)
        });
        worst = worst.max(rel_err(gx.data(), &nx)).max(rel_err(gw.data(), &nw));
    }
    worst
}

/// Train-mode affine BN: input, gamma and beta gradients.
pub fn bn_grad_err(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 2);
    let x = randn(&mut rng, &[4, 3, 2, 2]);
    let mut state = BnLayerState::<f64>::new(3, true);
    state.gamma = (0..3).map(|_| 1.0 + 0.5 * rng.normal()).collect();
    state.beta = (0..3).map(|_| rng.normal()).collect();
    let (y, cache) = batchnorm(&x, &mut state.clone(), Mode::Train).unwrap();
    let r = randn(&mut rng, y.shape());
    let (gx, gg, gb) = batchnorm_grad(&r, &cache, &state).unwrap();
    let eval = |x: &Tensor<f64>, s: &BnLayerState<f64>| {
        weighted_sum(&batchnorm(x, &mut s.clone(), Mode::Train).unwrap().0, &r)
    };
    let nx = numeric_grad(x.data(), |p| eval(&Tensor::from_vec(x.shape(), p.to_vec()).unwrap(), &state));
    let ng = numeric_grad(&state.gamma, |p| {
        let mut s = state.clone();
        s.gamma = p.to_vec();
        eval(&x, &s)
    });
    let nb = numeric_grad(&state.beta, |p| {
        let mut s = state.clone();
        s.beta = p.to_vec();
        eval(&x, &s)
    });
    rel_err(gx.data(), &nx).max(rel_err(&gg, &ng)).max(rel_err(&gb, &nb))
}

pub fn linear_grad_err(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 3);
    let x = randn(&mut rng, &[3, 7]);
    let w = randn(&mut rng, &[4, 7]);
    let r = randn(&mut rng, &[3, 4]);
    let (gx, gw) = linear_grad(&r, &x, &w).unwrap();
    let nx = numeric_grad(x.data(), |p| {
        weighted_sum(&linear(&Tensor::from_vec(x.shape(), p.to_vec()).unwrap(), &w).unwrap(), &r)
    });
    let nw = numeric_grad(w.data(), |p| {
        weighted_sum(&linear(&x, &Tensor::from_vec(w.shape(), p.to_vec()).unwrap()).unwrap(), &r)
    });
    rel_err(gx.data(), &nx).max(rel_err(gw.data(), &nw))
}

pub fn softmax_grad_err(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 4);
    let z = randn(&mut rng, &[4, 5]);
    let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
    let (_, g) = softmax_cross_entropy(&z, &labels).unwrap();
    let n = numeric_grad(z.data(), |p| {
        softmax_cross_entropy(&Tensor::from_vec(z.shape(), p.to_vec()).unwrap(), &labels)
            .unwrap()
            .0
    });
    rel_err(g.data(), &n)
}

/// Straight-through score gradient against the derivative of the loss with
/// respect to a continuous mask `m`, evaluated at the binary top-k point.
pub fn straight_through_err(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 5);
    let mut worst: f64 = 0.0;
    let cases = [
        (LayerKind::Conv { stride: 1, pad: 1 }, vec![3, 2, 3, 3], vec![2, 2, 4, 4]),
        (LayerKind::Conv { stride: 2, pad: 0 }, vec![4, 3, 1, 1], vec![2, 3, 4, 4]),
        (LayerKind::Linear, vec![5, 6], vec![3, 6]),
    ];
    for (kind, wshape, xshape) in cases {
        let w = randn(&mut rng, &wshape);
        let s = randn(&mut rng, &wshape);
        let k = (100 + rng.below(900)) as u16;
        let mut layer = MaskedLayer::new("t", kind, Trainable::Scores, k, w.clone(), s).unwrap();
        let x = randn(&mut rng, &xshape);
        let y = layer.forward(&x).unwrap();
        let r = randn(&mut rng, y.shape());
        layer.backward(&x, &r).unwrap();
        let analytic = layer.score_grad();
        let m: Vec<f64> = layer.mask().bits().iter().map(|&b| b as u8 as f64).collect();
        let numeric = numeric_grad(&m, |mc| {
            let eff: Vec<f64> = w.data().iter().zip(mc).map(|(a, b)| a * b).collect();
            let eff = Tensor::from_vec(w.shape(), eff).unwrap();
            weighted_sum(&masked_forward(kind, &eff, &x).unwrap(), &r)
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Top-k contract over `trials` random score tensors.
pub fn topk_properties(seed: u64, trials: usize) -> Result<(), String> {
    let mut rng = RngStream::new(seed, 6);
    for t in 0..trials {
        let n = 1 + rng.below(400);
        let lo = 1000usize.div_ceil(n);
        let k = (lo + rng.below(1001 - lo)) as u16;
        let mut data: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        if t % 4 == 0 {
            // Coarse values force ties.
            data.iter_mut().for_each(|v| *v = (*v * 2.0).round());
        }
        let scores = Tensor::from_vec(&[n], data.clone()).unwrap();
        let mask = topk_mask(&scores, k).map_err(|e| e.to_string())?;
        let want = kept_count(n, k);
        if mask.popcount() != want {
            return Err(format!("trial {}: popcount {} != floor({}·{}/1000) = {}", t, mask.popcount(), k, n, want));
        }
        let sel = data.iter().zip(mask.bits()).filter(|(_, &b)| b).map(|(v, _)| *v);
        let uns = data.iter().zip(mask.bits()).filter(|(_, &b)| !b).map(|(v, _)| *v);
        let min_sel = sel.fold(f64::INFINITY, f64::min);
        let max_uns = uns.fold(f64::NEG_INFINITY, f64::max);
        if want > 0 && want < n && min_sel < max_uns {
            return Err(format!("trial {}: selected {} below unselected {}", t, min_sel, max_uns));
        }
        let c = (rng.uniform() * 12.0 - 6.0).exp();
        let scaled = Tensor::from_vec(&[n], data.iter().map(|v| v * c).collect()).unwrap();
        if topk_mask(&scaled, k).map_err(|e| e.to_string())? != mask {
            return Err(format!("trial {}: mask changed under scaling by {}", t, c));
        }
    }
    Ok(())
}

/// Outcome of running a folded stage next to its explicit unrolling.
pub struct FoldCheck {
    pub forward_bitwise: bool,
    pub input_grad_bitwise: bool,
    /// Worst relative error between folded score gradients and the sum of
    /// the unrolled copies' score gradients.
    pub score_grad_err: f64,
    pub ubn_grad_bitwise: bool,
}

/// Stage 3 of a small HFN with distinct per-iteration UBN parameters, run
/// folded and as a chain of blocks holding copies of the shared tensors.
pub fn fold_vs_unroll(seed: u64) -> FoldCheck {
    let mut arch = ArchConfig::desk(4);
    arch.base_channels = 4;
    arch.stage_blocks = [1, 1, 4, 3];
    let model = Model::<f64>::build(&arch, seed).unwrap();
    let mut folded = model.stages[2].clone();
    let mut rng = RngStream::new(seed, 7);
    for set in folded.ubn_mut().unwrap() {
        for bn in set.norms_mut() {
            bn.state.gamma.iter_mut().for_each(|g| *g = 1.0 + 0.3 * rng.normal());
            bn.state.beta.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
        }
    }
    let (convs, norms, iterations) = match &folded.body {
        StageBody::Folded {
            convs,
            norms,
            iterations,
        } => (convs.clone(), norms.clone(), *iterations),
        StageBody::Plain(_) => unreachable!("stage 3 is folded"),
    };
    let blocks = (0..iterations)
        .map(|i| Bottleneck {
            convs: convs.clone(),
            norms: norms[i].clone(),
        })
        .collect();
    let mut unrolled = Stage::new(folded.index, folded.projection.clone(), StageBody::Plain(blocks)).unwrap();

    let cin = arch.out_channels(1);
    let x = randn(&mut rng, &[3, cin, 4, 4]);
    let yf = folded.forward(&x, Mode::Train).unwrap();
    let yu = unrolled.forward(&x, Mode::Train).unwrap();
    let dy = randn(&mut rng, yf.shape());
    let dxf = folded.backward(&dy).unwrap();
    let dxu = unrolled.backward(&dy).unwrap();

    let mut worst: f64 = 0.0;
    let mut ubn_ok = true;
    if let (StageBody::Folded { convs, norms, .. }, StageBody::Plain(blocks)) = (&folded.body, &unrolled.body) {
        let shared: Vec<_> = convs.layers().collect();
        for (li, l) in shared.iter().enumerate() {
            let mut sum = vec![0.0; l.len()];
            for b in blocks {
                let copy = b.convs.layers().nth(li).unwrap();
                sum.iter_mut().zip(copy.score_grad()).for_each(|(a, g)| *a += g);
            }
            worst = worst.max(rel_err(&l.score_grad(), &sum));
        }
        for (set, b) in norms.iter().zip(blocks) {
            for (p, q) in set.norms().zip(b.norms.norms()) {
                ubn_ok &= p.grad_gamma == q.grad_gamma && p.grad_beta == q.grad_beta;
            }
        }
    }
    FoldCheck {
        forward_bitwise: yf.data() == yu.data(),
        input_grad_bitwise: dxf.data() == dxu.data(),
        score_grad_err: worst,
        ubn_grad_bitwise: ubn_ok,
    }
}

/// Every bottleneck architecture of the zoo as a supermask model of
/// `base_channels` width, CIFAR stem unless noted.
pub fn desk_zoo(base_channels: usize, classes: usize) -> Vec<ArchConfig> {
    use hidden_fold::model::{Method, Stem};
    let mut out = Vec::new();
    for method in [Method::Hnn, Method::Hfn] {
        for depth in [50, 101, 152, 200] {
            out.push(ArchConfig::resnet(depth, classes, Stem::Cifar, method).unwrap());
        }
        out.push(ArchConfig::wide_resnet50(classes, Stem::Cifar, method).unwrap());
        out.push(ArchConfig::resnet(50, classes, Stem::Imagenet, method).unwrap());
    }
    out.push(
        ArchConfig::resnet(50, classes, Stem::Cifar, Method::Hfn)
            .unwrap()
            .with_folded(&[2, 3, 4]),
    );
    let mut no_ubn = ArchConfig::resnet(50, classes, Stem::Cifar, Method::Hfn).unwrap();
    no_ubn.ubn = false;
    out.push(no_ubn);
    for a in &mut out {
        a.base_channels = base_channels;
    }
    out
}

/// Gives every score and BN tensor of `model` non-default values, as if trained.
pub fn perturb(model: &mut Model<f32>, seed: u64) {
    let mut rng = RngStream::new(seed, 8);
    for l in model.masked_layers_mut() {
        l.scores_mut().data_mut().iter_mut().for_each(|s| *s = rng.normal() as f32);
    }
    for bn in model.batch_norms_mut() {
        let s = &mut bn.state;
        s.running_mean.iter_mut().for_each(|v| *v = (0.1 * rng.normal()) as f32);
        s.running_var.iter_mut().for_each(|v| *v = (0.5 + rng.uniform()) as f32);
        if s.affine {
            s.gamma.iter_mut().for_each(|v| *v = (1.0 + 0.2 * rng.normal()) as f32);
            s.beta.iter_mut().for_each(|v| *v = (0.1 * rng.normal()) as f32);
        }
    }
    model.refresh_masks().unwrap();
}

/// One published number next to the value this crate computes for it.
pub struct Reference {
    pub what: String,
    pub measured: f64,
    pub published: f64,
}

impl Reference {
    pub fn rel_err(&self) -> f64 {
        (self.measured - self.published).abs() / self.published.abs()
    }
}

/// The published size columns of the zoo tables, each with our value.
pub fn published_sizes() -> Vec<Reference> {
    use hidden_fold::report::{zoo_table, Benchmark, Grouping};
    let cifar = zoo_table(Benchmark::Cifar100, Grouping::SameModel).unwrap();
    let cifar_acc = zoo_table(Benchmark::Cifar100, Grouping::SameAccuracy).unwrap();
    let inet = zoo_table(Benchmark::Imagenet, Grouping::SameModel).unwrap();
    let inet_acc = zoo_table(Benchmark::Imagenet, Grouping::SameAccuracy).unwrap();
    let params = |t: &hidden_fold::report::ZooTable, l: &str| t.row(l).unwrap().size.reported_params as f64 / 1e6;
    let mb = |t: &hidden_fold::report::ZooTable, l: &str| t.row(l).unwrap().bytes as f64 / 1e6;
    let red = |t: &hidden_fold::report::ZooTable, l: &str| t.row(l).unwrap().reduction;
    let r = |what: &str, measured: f64, published: f64| Reference {
        what: what.into(),
        measured,
        published,
    };
    vec![
        r("CIFAR ResNet50 params (M)", params(&cifar, "ResNet50"), 23.71),
        r("CIFAR ResNet50 size (MB)", mb(&cifar, "ResNet50"), 94.82),
        r("ImageNet ResNet50 params (M)", params(&inet, "ResNet50"), 25.55),
        r("ImageNet ResNet50 size (MB)", mb(&inet, "ResNet50"), 102.22),
        r("CIFAR folded (2,3,4) params (M)", params(&cifar, "Folded ResNet50 (2,3,4)"), 14.24),
        r("CIFAR HNN-ResNet50 size (MB)", mb(&cifar, "HNN-ResNet50"), 3.00),
        r("CIFAR HFN-ResNet50 params (M)", params(&cifar, "HFN-ResNet50 (3,4)"), 4.45),
        r("CIFAR HFN-ResNet50 size (MB)", mb(&cifar, "HFN-ResNet50 (3,4)"), 1.95),
        r("CIFAR HFN-ResNet50 reduction", red(&cifar, "HFN-ResNet50 (3,4)"), 48.71),
        r("CIFAR HFN-ResNet152 size (MB)", mb(&cifar_acc, "HFN-ResNet152 (3,4)"), 2.46),
        r("CIFAR HFN-ResNet152 reduction", red(&cifar_acc, "HFN-ResNet152 (3,4)"), 38.54),
        r("CIFAR HFN-ResNet200 params (M)", params(&cifar_acc, "HFN-ResNet200 (3,4)"), 6.21),
        r("CIFAR HFN-ResNet200 size (MB)", mb(&cifar_acc, "HFN-ResNet200 (3,4)"), 3.02),
        r("ImageNet HFN-ResNet200 size (MB)", mb(&inet_acc, "HFN-ResNet200 (3,4)"), 3.25),
        r("ImageNet HFN-ResNet200 reduction", red(&inet_acc, "HFN-ResNet200 (3,4)"), 26.83),
    ]
}

/// Weight count of a bottleneck ResNet written out by hand: stem, then per
/// stage a projection block and `repeats` identity blocks, then the classifier.
/// Folded stages store one identity block.
pub fn hand_count(arch: &ArchConfig) -> u64 {
    use hidden_fold::model::Stem;
    let k = if arch.stem == Stem::Imagenet { 7 } else { 3 };
    let mut total = (arch.in_channels * arch.base_channels * k * k) as u64;
    let mut cin = arch.base_channels;
    for s in 0..4 {
        let mid = ((arch.base_channels << s) as f64 * arch.width_mult).round() as usize;
        let out = 4 * (arch.base_channels << s);
        let projection = cin * mid + 9 * mid * mid + mid * out + cin * out;
        let identity = out * mid + 9 * mid * mid + mid * out;
        let stored = if arch.is_folded(s + 1) {
            1
        } else {
            arch.stage_blocks[s] - 1
        };
        total += (projection + stored * identity) as u64;
        cin = out;
    }
    total + (cin * arch.num_classes) as u64
}

/// Compresses a perturbed model of `arch`, decodes it, and compares eval
/// logits on `inputs` random 8×8 images. Returns the first mismatch.
pub fn round_trip(arch: &ArchConfig, seed: u64, inputs: usize) -> Result<(), String> {
    use hidden_fold::compress::{compress, decompress, file_size};
    use hidden_fold::ops::Mode;
    let mut model = Model::<f32>::build(arch, seed).map_err(|e| e.to_string())?;
    perturb(&mut model, seed);
    let bytes = compress(&model, None).map_err(|e| e.to_string())?;
    if bytes.len() as u64 != file_size(arch, false).unwrap() {
        return Err(format!("{}: file is {} bytes, formula says otherwise", arch.label(), bytes.len()));
    }
    let mut back = decompress(&bytes).map_err(|e| e.to_string())?.model;
    let mut rng = RngStream::new(seed, 9);
    for start in (0..inputs).step_by(25) {
        let n = 25.min(inputs - start);
        let x = randn(&mut rng, &[n, arch.in_channels, 8, 8]);
        let x = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v as f32).collect()).unwrap();
        let a = model.forward(&x, Mode::Eval).map_err(|e| e.to_string())?;
        let b = back.forward(&x, Mode::Eval).map_err(|e| e.to_string())?;
        let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        if !same {
            return Err(format!("{}: logits differ after round trip", arch.label()));
        }
    }
    Ok(())
}

/// What one training run from a config leaves behind.
pub struct Run {
    pub history: Vec<hidden_fold::train::EpochMetrics>,
    pub initial_loss: f64,
    pub test_top1: f64,
    pub weights_before: u64,
    pub weights_after: u64,
    pub scores_before: u64,
    pub scores_after: u64,
    pub best_epoch: usize,
}

/// Trains a model exactly as `hfn train` would and scores the best
/// snapshot on the test split.
pub fn run_config(config: &hidden_fold::cli::RunConfig) -> Run {
    use hidden_fold::train::{evaluate, train};
    let (splits, norm) = config.load_data().unwrap();
    let arch = config.arch().unwrap();
    let cfg = config.train_config(norm).unwrap();
    let mut m = Model::<f32>::build(&arch, config.seed).unwrap();
    let (weights_before, scores_before) = (m.weights_checksum(), m.scores_checksum());
    let out = train(&mut m, &splits.train, &splits.val, &cfg, |_| {}).unwrap();
    let (weights_after, scores_after) = (m.weights_checksum(), m.scores_checksum());
    out.best.restore(&mut m).unwrap();
    Run {
        test_top1: evaluate(&mut m, &splits.test, &cfg.normalization, 256).unwrap(),
        history: out.history,
        initial_loss: out.initial_loss,
        weights_before,
        weights_after,
        scores_before,
        scores_after,
        best_epoch: out.best.epoch,
    }
}

/// Test accuracy of the freshly initialized masks, with BN statistics
/// calibrated on the training split so eval mode is meaningful.
pub fn untrained_top1(config: &hidden_fold::cli::RunConfig) -> f64 {
    use hidden_fold::train::{calibrate_bn, evaluate};
    let (splits, norm) = config.load_data().unwrap();
    let cfg = config.train_config(norm).unwrap();
    let mut m = Model::<f32>::build(&config.arch().unwrap(), config.seed).unwrap();
    calibrate_bn(&mut m, &splits.train, &cfg).unwrap();
    evaluate(&mut m, &splits.test, &cfg.normalization, 256).unwrap()
}

/// Desk preset shrunk to `train` samples and `epochs` epochs.
pub fn small_desk(train: usize, epochs: usize) -> hidden_fold::cli::RunConfig {
    let mut c = hidden_fold::cli::RunConfig::preset("desk-hfn").unwrap();
    c.data.train = train;
    c.train.epochs = epochs;
    c.train.warmup_epochs = 1.min(epochs - 1);
    c
}
