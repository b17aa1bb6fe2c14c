use hsr_core::arch::{dump_features, layout, param_count, HsrConfig, HsrNet, Stage};
use hsr_core::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
use hsr_core::imaging::Image;
use hsr_core::tensor::{Shape, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn zero_param(net: &mut HsrNet, conv: &str) {
    for suffix in ["weight", "bias"] {
        let p = net.weights_mut().get_mut(&format!("{conv}.{suffix}")).unwrap();
        p.value = Tensor::zeros(p.value.shape());
    }
}

/// Run one graph method on constant-bound weights and return its value.
fn run<F>(net: &HsrNet, inputs: &[Tensor], f: F) -> hsr_core::Result<Tensor>
where
    F: FnOnce(&mut hsr_core::arch::Graph<'_>, &[hsr_core::tensor::Var]) -> hsr_core::Result<hsr_core::tensor::Var>,
{
    let mut tape = Tape::new();
    let binds = net.weights().bind_constants(&mut tape);
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = {
        let mut g = net.graph(&mut tape, &binds);
        f(&mut g, &vars)?
    };
    Ok(tape.value(out).clone())
}

#[test]
fn feature_extract_shapes_and_errors() {
    let net = HsrNet::new(HsrConfig::paper(4), 0).unwrap();
    let x = rand_tensor(Shape::new(1, 3, 48, 48), 1);
    let y = run(&net, &[x], |g, v| g.feature_extract(v[0])).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 64, 48, 48));

    let bad = rand_tensor(Shape::new(1, 4, 8, 8), 1);
    assert!(run(&net, &[bad], |g, v| g.feature_extract(v[0])).is_err());

    let mut zeroed = net.clone();
    zero_param(&mut zeroed, "entry");
    let y = run(&zeroed, &[rand_tensor(Shape::new(1, 3, 8, 8), 2)], |g, v| g.feature_extract(v[0])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let y = run(&net, &[Tensor::zeros(Shape::new(1, 3, 8, 8))], |g, v| g.feature_extract(v[0])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0), "zero image, zero bias");
}

#[test]
fn transposition_and_solver_contracts() {
    let net = HsrNet::new(HsrConfig::paper(2), 3).unwrap();
    let a = rand_tensor(Shape::new(1, 64, 8, 8), 4);
    let b = rand_tensor(Shape::new(1, 64, 8, 8), 5);
    let t = run(&net, &[a.clone()], |g, v| g.transposition(v[0])).unwrap();
    assert_eq!(t.shape(), a.shape());

    let ab = run(&net, &[a.clone(), b.clone()], |g, v| g.solver_ls(v[0], v[1], 0)).unwrap();
    let ba = run(&net, &[b.clone(), a.clone()], |g, v| g.solver_ls(v[0], v[1], 0)).unwrap();
    assert_eq!(ab.shape(), Shape::new(1, 64, 8, 8));
    assert!(ab.max_abs_diff(&ba) > 1e-6, "solver must not be symmetric in its inputs");

    let c = rand_tensor(Shape::new(1, 64, 8, 4), 6);
    assert!(run(&net, &[a, c], |g, v| g.solver_ls(v[0], v[1], 0)).is_err());

    let mut zeroed = net.clone();
    zero_param(&mut zeroed, "transposition.conv2");
    let t = run(&zeroed, &[b], |g, v| g.transposition(v[0])).unwrap();
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn heb_zero_fusion_is_identity() {
    let mut net = HsrNet::new(HsrConfig::paper(4), 7).unwrap();
    zero_param(&mut net, "denoiser.block0.heb.fuse");
    let x = rand_tensor(Shape::new(1, 64, 8, 8), 8);
    let y = run(&net, &[x.clone()], |g, v| g.heb_forward(v[0], "denoiser.block0", 0, 0)).unwrap();
    assert_eq!(y, x);

    // Without zeroing it is a proper residual block.
    let net = HsrNet::new(HsrConfig::paper(4), 7).unwrap();
    let y = run(&net, &[x.clone()], |g, v| g.heb_forward(v[0], "denoiser.block0", 0, 0)).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.max_abs_diff(&x) > 1e-6);
}

#[test]
fn heb_branch_depths() {
    let cfg = HsrConfig::default();
    let specs = layout(&cfg);
    for branch in 1..=4 {
        let prefix = format!("denoiser.block0.heb.branch{branch}.");
        let n = specs.iter().filter(|s| s.name.starts_with(&prefix)).count();
        assert_eq!(n, branch - 1, "branch {branch}");
    }
}

#[test]
fn msa_zero_fusion_halves_input() {
    let mut net = HsrNet::new(HsrConfig::paper(4), 9).unwrap();
    zero_param(&mut net, "denoiser.block0.msa.fuse");
    let x = rand_tensor(Shape::new(1, 64, 16, 16), 10);
    let y = run(&net, &[x.clone()], |g, v| g.msa_forward(v[0], "denoiser.block0", 0, 0)).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn msa_rejects_unpoolable_sizes() {
    let net = HsrNet::new(HsrConfig::tiny(2), 0).unwrap();
    let x = rand_tensor(Shape::new(1, 16, 10, 12), 0);
    assert!(run(&net, &[x], |g, v| g.msa_forward(v[0], "denoiser.block0", 0, 0)).is_err());
}

#[test]
fn msa_attention_in_unit_interval() {
    // With a unit input the gated output equals the attention map.
    let net = HsrNet::new(HsrConfig::tiny(2), 11).unwrap();
    let x = Tensor::full(Shape::new(1, 16, 8, 8), 1.0);
    let a = run(&net, &[x], |g, v| g.msa_forward(v[0], "denoiser.block1", 0, 1)).unwrap();
    assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn denoiser_without_attention() {
    let with = HsrConfig::tiny(2);
    let without = HsrConfig { msa_enabled: false, ..with.clone() };
    assert!(layout(&without).iter().all(|s| !s.name.contains(".msa.")));
    assert!(layout(&with).iter().any(|s| s.name.contains(".msa.")));

    // Attention off and every exploration block zeroed: only the tail conv remains.
    let mut net = HsrNet::new(without, 12).unwrap();
    for b in 0..2 {
        zero_param(&mut net, &format!("denoiser.block{b}.heb.fuse"));
    }
    let x = rand_tensor(Shape::new(1, 16, 8, 8), 13);
    let d = run(&net, &[x.clone()], |g, v| g.denoiser_forward(v[0], 0)).unwrap();
    let w = &net.weights().get("denoiser.tail.weight").unwrap().value;
    let b = &net.weights().get("denoiser.tail.bias").unwrap().value;
    let tail = hsr_core::tensor::kernels::conv2d(&x, w, b, 1, 1).unwrap();
    assert_eq!(d, tail);
}

#[test]
fn upscale_shapes() {
    for s in [2usize, 3, 4] {
        let net = HsrNet::new(HsrConfig::paper(s), 0).unwrap();
        let x = rand_tensor(Shape::new(1, 64, 48, 48), 1);
        let y = run(&net, &[x], |g, v| g.upscale(v[0])).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 48 * s, 48 * s));
    }
    assert!(HsrNet::new(HsrConfig::paper(5), 0).is_err());
}

#[test]
fn forward_shape_contract() {
    for s in [2usize, 3, 4] {
        let net = HsrNet::new(HsrConfig::tiny(s), s as u64).unwrap();
        for (h, w) in [(8usize, 8usize), (12, 8), (8, 48), (48, 12)] {
            let x = rand_tensor(Shape::new(1, 3, h, w), 0).clone();
            let y = net.forward_tensor(&x, None).unwrap();
            assert_eq!(y.shape(), Shape::new(1, 3, s * h, s * w));
            assert!(y.is_finite());
        }
    }
}

#[test]
fn forward_rejects_tiny_inputs() {
    let net = HsrNet::new(HsrConfig::tiny(2), 0).unwrap();
    assert!(net.forward_tensor(&rand_tensor(Shape::new(1, 3, 4, 8), 0), None).is_err());
}

#[test]
fn super_resolve_handles_any_size() {
    let net = HsrNet::new(HsrConfig::tiny(3), 1).unwrap();
    for (h, w) in [(1usize, 1usize), (5, 7), (9, 13), (8, 8)] {
        let img = Image::from_fn(h, w, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0).unwrap();
        let out = net.super_resolve(&img).unwrap();
        assert_eq!((out.height(), out.width()), (3 * h, 3 * w));
    }
}

#[test]
fn super_resolve_crop_matches_padded_forward() {
    // On an exact multiple of 4 no padding happens.
    let net = HsrNet::new(HsrConfig::tiny(2), 2).unwrap();
    let img = Image::from_fn(8, 12, |y, x, c| ((y + 2 * x + c) % 5) as f64 / 4.0).unwrap();
    let a = net.super_resolve(&img).unwrap();
    let t = net.forward_tensor(&img.to_tensor(), None).unwrap();
    let b = Image::from_tensor(&t, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_is_deterministic_and_depends_on_k() {
    let cfg3 = HsrConfig::tiny(2);
    let cfg1 = HsrConfig { iterations: 1, ..cfg3.clone() };
    let net3 = HsrNet::new(cfg3, 21).unwrap();
    // Shared weights: K does not change the layout, so the same store fits.
    let net1 = HsrNet::from_parts(cfg1, net3.weights().clone()).unwrap();
    let x = rand_tensor(Shape::new(1, 3, 8, 8), 22);
    let a = net3.forward_tensor(&x, None).unwrap();
    let b = net3.forward_tensor(&x, None).unwrap();
    assert_eq!(a.data(), b.data());
    let c = net1.forward_tensor(&x, None).unwrap();
    assert!(a.max_abs_diff(&c) > 1e-9);
}

#[test]
fn param_count_matches_reported_sizes() {
    let x4 = param_count(&HsrConfig::paper(4)).total as f64;
    let x2 = param_count(&HsrConfig::paper(2)).total as f64;
    assert!((x4 / 1.285e6 - 1.0).abs() <= 0.2, "x4 count {x4}");
    assert!((x2 / 1.26e6 - 1.0).abs() <= 0.2, "x2 count {x2}");
    // Only the upscale conv depends on the scale (3x3 kernel).
    assert_eq!(x4 - x2, (64 * 3 * (16 - 4) * 9 + 3 * (16 - 4)) as f64);
}

#[test]
fn param_count_structure() {
    let base = HsrConfig::default();
    let mut prev = 0;
    for n in 1..=4 {
        let c = param_count(&HsrConfig { n_blocks: n, ..base.clone() }).total;
        assert!(c > prev);
        prev = c;
    }
    let k1 = param_count(&HsrConfig { iterations: 1, ..base.clone() }).total;
    let k5 = param_count(&HsrConfig { iterations: 5, ..base.clone() }).total;
    assert_eq!(k1, k5);
    let net = HsrNet::new(HsrConfig::tiny(4), 0).unwrap();
    assert_eq!(net.param_count(), param_count(&HsrConfig::tiny(4)).total);
}

#[test]
fn gradients_reach_nearly_every_parameter() {
    let mut net = HsrNet::new(HsrConfig::tiny(2), 31).unwrap();
    let lr = Tensor::uniform(Shape::new(2, 3, 8, 8), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(32));
    let hr = Tensor::uniform(Shape::new(2, 3, 16, 16), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(33));
    let mut tape = Tape::new();
    let binds = net.weights().bind(&mut tape);
    let x = tape.constant(lr);
    let target = tape.constant(hr);
    let out = net.graph(&mut tape, &binds).forward(x).unwrap();
    let loss = tape.l1_loss(out, target).unwrap();
    tape.backward(loss).unwrap();
    net.weights_mut().collect_grads(&tape, &binds);

    let (mut nonzero, mut total) = (0usize, 0usize);
    for p in net.weights().iter() {
        let g = p.grad.as_ref().unwrap_or_else(|| panic!("{} has no gradient", p.name));
        total += g.len();
        nonzero += g.data().iter().filter(|v| **v != 0.0).count();
    }
    assert!(nonzero as f64 >= 0.99 * total as f64, "{nonzero}/{total}");
    let first_heb = net.weights().get("denoiser.block0.heb.explore.weight").unwrap();
    assert!(first_heb.grad.as_ref().unwrap().data().iter().any(|v| *v != 0.0));
}

/// Finite-difference oracle for a handful of weight entries of the full net.
#[test]
fn weight_gradients_match_finite_differences() {
    let cfg = HsrConfig { n_blocks: 1, ..HsrConfig::tiny(2) };
    let net = HsrNet::new(cfg, 41).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let lr = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
    let proj = Tensor::uniform(Shape::new(1, 3, 16, 16), -1.0, 1.0, &mut rng);
    let objective = |n: &HsrNet| -> f64 {
        let y = n.forward_tensor(&lr, None).unwrap();
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let binds = net.weights().bind(&mut tape);
    let x = tape.constant(lr.clone());
    let r = tape.constant(proj.clone());
    let out = net.graph(&mut tape, &binds).forward(x).unwrap();
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let mut grads = net.clone();
    grads.weights_mut().collect_grads(&tape, &binds);

    let names = [
        "entry.weight",
        "transposition.conv1.weight",
        "solver.conv1.weight",
        "denoiser.block0.msa.level3.weight",
        "denoiser.block0.heb.branch4.stage3.weight",
        "denoiser.block0.heb.fuse.bias",
        "upscale.conv.weight",
    ];
    let h = 1e-6;
    for name in names {
        let p = grads.weights().get(name).unwrap();
        for _ in 0..3 {
            let i = rng.gen_range(0..p.value.len());
            let analytic = p.grad.as_ref().unwrap().data()[i];
            let mut plus = net.clone();
            plus.weights_mut().get_mut(name).unwrap().value.data_mut()[i] += h;
            let mut minus = net.clone();
            minus.weights_mut().get_mut(name).unwrap().value.data_mut()[i] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(err < 1e-4, "{name}[{i}]: analytic {analytic} numeric {numeric}");
        }
    }
}

#[test]
fn module_input_gradients() {
    let net = HsrNet::new(HsrConfig::tiny(3), 51).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let feat = rand_tensor(Shape::new(1, 16, 4, 4), 53);
    let img = rand_tensor(Shape::new(1, 3, 4, 4), 54);
    type Build = fn(&HsrNet, &mut Tape, &[hsr_core::tensor::Var]) -> hsr_core::Result<hsr_core::tensor::Var>;
    let cases: [(&str, Vec<Tensor>, Build); 4] = [
        ("feature_extract", vec![img], |n, t, v| {
            let b = n.weights().bind_constants(t);
            n.graph(t, &b).feature_extract(v[0])
        }),
        ("transposition", vec![feat.clone()], |n, t, v| {
            let b = n.weights().bind_constants(t);
            n.graph(t, &b).transposition(v[0])
        }),
        ("solver_ls", vec![feat.clone(), rand_tensor(Shape::new(1, 16, 4, 4), 55)], |n, t, v| {
            let b = n.weights().bind_constants(t);
            n.graph(t, &b).solver_ls(v[0], v[1], 0)
        }),
        ("upscale", vec![feat], |n, t, v| {
            let b = n.weights().bind_constants(t);
            n.graph(t, &b).upscale(v[0])
        }),
    ];
    for (name, inputs, build) in cases {
        let err = check_gradients(|t, v| build(&net, t, v), &inputs, DEFAULT_STEP, &mut rng).unwrap();
        assert!(err < DEFAULT_TOLERANCE, "{name}: {err}");
    }
}

#[test]
fn feature_dump_counts_and_ranges() {
    let cfg = HsrConfig::tiny(2);
    let net = HsrNet::new(cfg.clone(), 61).unwrap();
    let img = Image::from_fn(8, 8, |y, x, c| ((3 * y + x + c) % 7) as f64 / 6.0).unwrap();
    let (_, trace) = net.super_resolve_traced(&img).unwrap();
    let k = cfg.iterations;
    let n = cfg.n_blocks;
    let expect = [
        ("lr_feature", 1),
        ("transposed", 1),
        ("solver_input", k),
        ("denoiser_input", k),
        ("denoiser_output", k),
        ("heb_branch", 4 * n * k),
        ("msa_level", 3 * n * k),
    ];
    for (tag, count) in expect {
        let maps = dump_features(&trace, tag).unwrap();
        assert_eq!(maps.len(), count, "{tag}");
        for m in &maps {
            assert!(m.name.starts_with(tag));
            assert_eq!((m.plane.height, m.plane.width), (8, 8));
            assert!(m.plane.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    assert_eq!(Stage::ALL.len(), expect.len());
    let names: Vec<_> = dump_features(&trace, "msa_level").unwrap().into_iter().map(|m| m.name).collect();
    assert_eq!(&names[..3], ["msa_level_0_0", "msa_level_0_1", "msa_level_0_2"]);
    assert!(dump_features(&trace, "attention").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn specific_space_preserves_lr_size(hq in 2usize..5, wq in 2usize..5, seed in 0u64..1000) {
        let (h, w) = (4 * hq, 4 * wq);
        let net = HsrNet::new(HsrConfig::tiny(2), seed).unwrap();
        let img = rand_tensor(Shape::new(1, 3, h, w), seed);
        let mut trace = hsr_core::arch::FeatureTrace::default();
        net.forward_tensor(&img, Some(&mut trace)).unwrap();
        for stage in Stage::ALL {
            for (_, _, t) in trace.get(stage) {
                prop_assert_eq!((t.shape().height, t.shape().width), (h, w));
            }
        }
    }
}
