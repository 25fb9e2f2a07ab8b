//! Acceptance suite: one line per criterion, `PASS` or `FAIL` with the
//! measured quantities. Runs without the test harness so the report is
//! always printed; exits non-zero if any criterion fails.

mod common;

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use common::{backend, corpus, session, source, spearman_oracle, Fixture, OFF_OBJECT_DILATE, OFF_OBJECT_THRESHOLD};
use dac_core::abduction::{abduct_all, regression_loss, AbductionConfig, NoiseBatch, Objective, TrainableAdapter, UWeight};
use dac_core::editor::{prompt_swap, reconstruct, reconstruct_source, EditContext, EditRequest};
use dac_core::eval::{fidelity_curve, off_object_mse, target_color_score, Metrics};
use dac_core::generator::corpus::{agreement, parse_caption, probe};
use dac_core::generator::{GammaMode, GeneratorBackend, ToyBackend};
use dac_core::lora::{
    adapted_linear, conv_adapted, gamma_schedule, AdapterStack, AdapterTarget, ConvGeometry, LoraAdapter, LoraFactorPair,
    Placement,
};
use dac_core::schedule::{ddim_step, forward_noise, NoiseSchedule};
use dac_core::tensor_util::{seeded_gaussian, tensor_bytes, to_vec_f64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    let (a, b) = (to_vec_f64(a).unwrap(), to_vec_f64(b).unwrap());
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    let (a, b) = (to_vec_f64(a).unwrap(), to_vec_f64(b).unwrap());
    a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn schedule_identities() -> Outcome {
    let t_max = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let eta: f64 = rng.random_range(1e-3..=1.0);
        if gamma_schedule(t_max, t_max, eta).unwrap() != eta || gamma_schedule(0, t_max, eta).unwrap() != 1.0 {
            return Err(format!("endpoint identity broken at eta = {eta}"));
        }
        let t = rng.random_range(0..=t_max);
        let g = gamma_schedule(t, t_max, eta).unwrap();
        let oracle = (1.0 - eta) * ((t_max - t) as f64 / t_max as f64).powi(2) + eta;
        worst = worst.max((g - oracle).abs());
        if !(eta..=1.0).contains(&g) {
            return Err(format!("gamma({t}) = {g} outside [{eta}, 1]"));
        }
        if t < t_max && gamma_schedule(t + 1, t_max, eta).unwrap() > g {
            return Err(format!("gamma increases at t = {t}, eta = {eta}"));
        }
    }
    check(worst < 1e-12, format!("100 samples in range and non-increasing; max closed-form deviation {worst:.1e}"))
}

fn random_prompts(n: usize, seed: u64) -> Vec<String> {
    let c = corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| c.sample_scene(&mut rng).caption(&c)).collect()
}

fn lora_transparency() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (backend, dtype) in [(backend().to_dtype(DType::F64).unwrap(), DType::F64), (backend().clone(), DType::F32)] {
        let dev = Device::Cpu;
        let (c, h, w) = backend.latent_shape();
        for placement in [Placement::AttentionOnly, Placement::AttentionConvFfn] {
            for target in [AdapterTarget::Generator, AdapterTarget::TextEncoder] {
                let layers = backend.host_layers(target);
                let adapter = LoraAdapter::init(&layers, target, placement, 4, 5, dtype, &dev).unwrap();
                for (i, prompt) in random_prompts(3, cases as u64).iter().enumerate() {
                    let x = seeded_gaussian((2, c, h, w), dtype, &dev, 100 + i as u64).unwrap();
                    let ts = [17 + 300 * i, 999 - 200 * i];
                    let with = AdapterStack::single(&adapter, 1.0);
                    let (text_base, text_ad) = match target {
                        AdapterTarget::TextEncoder => (
                            backend.encode_text_with(prompt, &AdapterStack::empty()).unwrap(),
                            backend.encode_text_with(prompt, &with).unwrap(),
                        ),
                        AdapterTarget::Generator => {
                            let t = backend.encode_text_with(prompt, &AdapterStack::empty()).unwrap();
                            (t.clone(), t)
                        }
                    };
                    worst = worst.max(max_rel(&text_ad, &text_base));
                    let gen = if target == AdapterTarget::Generator { with } else { AdapterStack::empty() };
                    let base = backend.predict_noise_with(&x, &ts, &text_base, &AdapterStack::empty()).unwrap();
                    let ad = backend.predict_noise_with(&x, &ts, &text_ad, &gen).unwrap();
                    worst = worst.max(max_rel(&ad, &base));
                    cases += 1;
                }
            }
        }
    }
    // Layer primitives on random inputs.
    let dev = Device::Cpu;
    let w = seeded_gaussian((6, 5), DType::F64, &dev, 1).unwrap();
    let z = seeded_gaussian((3, 5), DType::F64, &dev, 2).unwrap();
    let pair = LoraFactorPair::new("l", seeded_gaussian((6, 2), DType::F64, &dev, 3).unwrap(), Tensor::zeros((2, 5), DType::F64, &dev).unwrap()).unwrap();
    worst = worst.max(max_rel(&adapted_linear(&z, &w, &pair, 1.0).unwrap(), &z.matmul(&w.t().unwrap()).unwrap()));
    let wc = seeded_gaussian((4, 3, 3, 3), DType::F64, &dev, 4).unwrap();
    let xc = seeded_gaussian((2, 3, 6, 6), DType::F64, &dev, 5).unwrap();
    let pc = LoraFactorPair::new("c", seeded_gaussian((4, 2), DType::F64, &dev, 6).unwrap(), Tensor::zeros((2, 27), DType::F64, &dev).unwrap()).unwrap();
    let geom = ConvGeometry { stride: 1, padding: 1 };
    worst = worst.max(max_rel(&conv_adapted(&xc, &wc, &pc, 1.0, geom).unwrap(), &xc.conv2d(&wc, 1, 1, 1, 1).unwrap()));
    check(worst <= 1e-7, format!("{cases} backend cases over both placements and targets (f32, f64) + layer primitives; max relative deviation {worst:.1e}"))
}

fn conv_lora_equivalence() -> Outcome {
    let dev = Device::Cpu;
    let mut worst = 0.0f64;
    let mut n = 0;
    for seed in 0..8u64 {
        for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
            let (co, ci, k, r) = (4, 4, 3, 1 + (seed as usize % 4));
            let x = seeded_gaussian((2, ci, 7, 7), DType::F64, &dev, 10 * seed + 1).unwrap();
            let w = seeded_gaussian((co, ci, k, k), DType::F64, &dev, 10 * seed + 2).unwrap();
            let a = seeded_gaussian((co, r), DType::F64, &dev, 10 * seed + 3).unwrap();
            let b = seeded_gaussian((r, ci * k * k), DType::F64, &dev, 10 * seed + 4).unwrap();
            let scale = 0.75;
            let pair = LoraFactorPair::new("conv", a.clone(), b.clone()).unwrap();
            let ours = conv_adapted(&x, &w, &pair, scale, ConvGeometry { stride, padding }).unwrap();
            // Dense oracle: fold the correction into the kernel, use the built-in convolution.
            let dense = (&w + (a.matmul(&b).unwrap() * scale).unwrap().reshape((co, ci, k, k)).unwrap()).unwrap();
            let oracle = x.conv2d(&dense, padding, stride, 1, 1).unwrap();
            worst = worst.max(max_abs(&ours, &oracle));
            n += 1;
        }
    }
    check(worst <= 1e-5, format!("{n} random 3x3 / 4-channel cases; max abs deviation from dense kernel {worst:.1e}"))
}

fn ddim_closed_forms() -> Outcome {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    // Independent product of the linear betas.
    let mut ab = vec![1.0f64];
    for i in 0..1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
        ab.push(ab[i] * (1.0 - beta));
    }
    let dev = Device::Cpu;
    let x0 = seeded_gaussian((1, 3, 8, 8), DType::F64, &dev, 1).unwrap();
    let eps = seeded_gaussian((1, 3, 8, 8), DType::F64, &dev, 2).unwrap();
    let (mut zero_worst, mut perfect_worst, mut sched_worst) = (0.0f64, 0.0f64, 0.0f64);
    let ts: Vec<usize> = sched.sampling_timesteps(50).unwrap().into_iter().filter(|&t| t > 0).collect();
    for &t in &ts {
        sched_worst = sched_worst.max((sched.alpha_bar(t).unwrap() - ab[t]).abs());
        let x_t = forward_noise(&x0, t, &eps, &sched).unwrap();
        let zero = ddim_step(&x_t, t, &x_t.zeros_like().unwrap(), &sched).unwrap();
        let expect = (&x_t * (ab[t - 1] / ab[t]).sqrt()).unwrap();
        zero_worst = zero_worst.max(max_abs(&zero, &expect));
        let stepped = ddim_step(&x_t, t, &eps, &sched).unwrap();
        let target = ((&x0 * ab[t - 1].sqrt()).unwrap() + (&eps * (1.0 - ab[t - 1]).sqrt()).unwrap()).unwrap();
        perfect_worst = perfect_worst.max(max_abs(&stepped, &target));
    }
    check(
        zero_worst <= 1e-6 && perfect_worst <= 1e-5 && sched_worst <= 1e-12,
        format!(
            "{} timesteps; eps=0 step deviation {zero_worst:.1e}, perfect-predictor deviation {perfect_worst:.1e}, schedule deviation {sched_worst:.1e}",
            ts.len()
        ),
    )
}

fn perturbed(adapter: &LoraAdapter, path: &str, factor: char, idx: usize, h: f64) -> LoraAdapter {
    adapter
        .map_factors(|p, f, t| {
            if p != path || f != factor {
                return Ok(t.clone());
            }
            let mut v = to_vec_f64(t)?;
            v[idx] += h;
            Ok(Tensor::from_vec(v, t.dims(), t.device())?)
        })
        .unwrap()
}

fn gradient_check() -> Outcome {
    let b = backend().to_dtype(DType::F64).unwrap();
    let dev = Device::Cpu;
    let x0 = b.encode_image(&source()).unwrap();
    let batch = NoiseBatch::evaluation(&b, 2, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let with_b = |a: LoraAdapter, seed: u64| {
        a.map_factors(|_, f, t| if f == 'B' { Ok((seeded_gaussian(t.dims(), DType::F64, &dev, seed)? * 0.02)?) } else { Ok(t.clone()) })
            .unwrap()
    };
    let u = with_b(
        LoraAdapter::init(&b.host_layers(AdapterTarget::Generator), AdapterTarget::Generator, Placement::AttentionConvFfn, 4, 1, DType::F64, &dev).unwrap(),
        2,
    );
    let delta = with_b(
        LoraAdapter::init(&b.host_layers(AdapterTarget::TextEncoder), AdapterTarget::TextEncoder, Placement::AttentionOnly, 4, 3, DType::F64, &dev).unwrap(),
        4,
    );
    let stage_u = Objective {
        prompt: common::PROMPT.into(),
        u: None,
        u_weight: UWeight::Constant(1.0),
        text_frozen: vec![],
    };
    let stage_delta = Objective {
        prompt: common::PROMPT_PRIME.into(),
        u: Some(&u),
        u_weight: UWeight::Annealed(0.6),
        text_frozen: vec![],
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (objective, adapter) in [(&stage_u, &u), (&stage_delta, &delta)] {
        let tr = TrainableAdapter::new(adapter, 0.0).unwrap();
        let loss = regression_loss(&b, objective, Some(tr.adapter()), &x0, &batch).unwrap();
        let grads = tr.gradients(&loss).unwrap();
        let pairs: Vec<_> = tr.adapter().pairs().collect();
        for _ in 0..10 {
            let pair = pairs[rng.random_range(0..pairs.len())];
            let factor = if rng.random_bool(0.5) { 'A' } else { 'B' };
            let t = if factor == 'A' { pair.a() } else { pair.b() };
            let idx = rng.random_range(0..t.elem_count());
            let analytic = to_vec_f64(grads.get(t).expect("gradient present")).unwrap()[idx];
            let h = 1e-5;
            let f = |d: f64| {
                let a = perturbed(adapter, pair.layer_path(), factor, idx, d);
                dac_core::abduction::scalar(&regression_loss(&b, objective, Some(&a), &x0, &batch).unwrap()).unwrap()
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    check(worst <= 1e-3, format!("{checked} coordinates (10 for U, 10 for Δ), f64, central differences h=1e-5; max relative error {worst:.1e}"))
}

fn param_digest(b: &ToyBackend) -> Vec<Vec<u8>> {
    b.params().values().map(|t| tensor_bytes(t).unwrap()).collect()
}

fn freeze_discipline() -> Outcome {
    let b = backend();
    let before = (b.host_checksum().unwrap(), param_digest(b));
    let x0 = b.encode_image(&source()).unwrap();
    let cfg = AbductionConfig {
        iterations: 60,
        with_t_aux: true,
        t_aux_rounds: 2,
        checkpoint_iters: [30].into_iter().collect(),
        ..AbductionConfig::toy()
    };
    let out = abduct_all(b, &x0, common::PROMPT, common::PROMPT_PRIME, &cfg, &mut ()).map_err(|e| e.to_string())?;
    let after = (b.host_checksum().unwrap(), param_digest(b));
    let host_ok = before == after;
    // Δ saw U and T_aux frozen: their checksums before/after that stage equal the final adapters.
    let frozen = &out.delta.frozen_checksums;
    let t_aux = out.t_aux.as_ref().unwrap();
    let frozen_ok = frozen[0] == before.0
        && frozen.contains(&out.u.adapter.checksum().unwrap())
        && frozen.contains(&t_aux.adapter.checksum().unwrap())
        && t_aux.frozen_checksums.contains(&out.u.adapter.checksum().unwrap());
    // Fixture session: the recorded host checksum still matches the backend.
    let s = session(Fixture::Standard);
    let fixture_ok = s.check_backend(b).is_ok();
    check(
        host_ok && frozen_ok && fixture_ok,
        format!("host params byte-identical: {host_ok}; frozen U/T_aux checksums preserved: {frozen_ok}; fixture host checksum matches: {fixture_ok}"),
    )
}

fn beta_endpoints() -> Outcome {
    let b = backend();
    let mut s = session(Fixture::Standard);
    let ctx = EditContext::load(&mut s, b, None).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut mses = Vec::new();
    for seed in [0u64, 3] {
        let minus = dac_core::editor::predict_edit(b, &ctx, &EditRequest { beta: -1.0, seed, ..Default::default() }).unwrap();
        let rec = reconstruct(b, &ctx, seed, 30, true).unwrap();
        ok &= minus.image.to_png().unwrap() == rec.to_png().unwrap() && minus.image == rec;
        mses.push(minus.image.mse(&rec).unwrap());
        let zero = dac_core::editor::predict_edit(b, &ctx, &EditRequest { beta: 0.0, seed, ..Default::default() }).unwrap();
        let no_delta = prompt_swap(b, common::PROMPT_PRIME, Some(&ctx.u), GammaMode::Annealed(ctx.eta), seed, 30).unwrap();
        ok &= zero.image == no_delta;
    }
    check(ok, format!("beta=-1 byte-equal to reconstruction and beta=0 equal to the no-Δ path for seeds 0,3; pixel MSE {mses:?}"))
}

fn abduction2_dominance() -> Outcome {
    let b = backend();
    let s = session(Fixture::Standard);
    let u = s.load_u(b.device()).unwrap();
    let delta = s.load_delta(b.device()).unwrap();
    let x0 = b.encode_image(s.source()).unwrap();
    let batch = NoiseBatch::evaluation(b, 64, 0xE7A1).unwrap();
    let objective = Objective {
        prompt: common::PROMPT_PRIME.into(),
        u: Some(&u),
        u_weight: UWeight::Annealed(s.manifest().config.eta),
        text_frozen: vec![],
    };
    let loss = |d: Option<&LoraAdapter>| dac_core::abduction::scalar(&regression_loss(b, &objective, d, &x0, &batch).unwrap()).unwrap();
    let (with, without) = (loss(Some(&delta)), loss(None));
    let margin = without - with;
    check(margin > 0.0, format!("64-draw evaluation batch: loss with Δ {with:.6}, with Δ=0 {without:.6}, margin {margin:.6}"))
}

fn checkpoint_trend() -> Outcome {
    let b = backend();
    let s = session(Fixture::Standard);
    let metrics = Metrics::toy(b, corpus());
    let (mut rho_img, mut rho_txt) = (0.0, 0.0);
    let mut means = [(0.0, 0.0); 3];
    for seed in 0..3u64 {
        let rows = fidelity_curve(b, &s, &metrics, seed, 30).map_err(|e| e.to_string())?;
        let its: Vec<f64> = rows.iter().map(|r| r.iterations as f64).collect();
        if its != [250.0, 500.0, 1000.0] {
            return Err(format!("checkpoints {its:?}"));
        }
        let img: Vec<f64> = rows.iter().map(|r| r.image_alignment).collect();
        let txt: Vec<f64> = rows.iter().map(|r| r.text_alignment).collect();
        for (i, m) in means.iter_mut().enumerate() {
            m.0 += img[i] / 3.0;
            m.1 += txt[i] / 3.0;
        }
        rho_img += spearman_oracle(&its, &img) / 3.0;
        rho_txt += spearman_oracle(&its, &txt) / 3.0;
    }
    let fmt: Vec<String> = means.iter().map(|(i, t)| format!("({i:.3}, {t:.2})")).collect();
    check(
        rho_img >= 0.0 && rho_txt <= 0.0,
        format!("mean over 3 seeds: image ρ {rho_img:.3}, text ρ {rho_txt:.3}; (image, text) at 250/500/1000: {}", fmt.join(" ")),
    )
}

fn beta_trend() -> Outcome {
    let b = backend();
    let mut s = session(Fixture::Standard);
    let ctx = EditContext::load(&mut s, b, None).map_err(|e| e.to_string())?;
    let c = corpus();
    let betas = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut scores = vec![0.0; betas.len()];
    for seed in 0..3u64 {
        let base = EditRequest { seed, ..Default::default() };
        let sweep = dac_core::editor::sweep_beta(b, &ctx, &betas, &base).unwrap();
        for (i, r) in sweep.iter().enumerate() {
            scores[i] += target_color_score(s.source(), &r.image, &c, "blue").unwrap() / 3.0;
        }
    }
    let rho = spearman_oracle(&betas, &scores);
    let inv = common::decreases(&scores);
    let fmt: Vec<String> = scores.iter().map(|v| format!("{v:.3}")).collect();
    check(rho > 0.0 && inv <= 1, format!("target-color score over β {betas:?} (3-seed mean): [{}]; ρ {rho:.3}, inversions {inv}", fmt.join(", ")))
}

fn eta_trend() -> Outcome {
    let b = backend();
    let mut s = session(Fixture::Standard);
    let c = corpus();
    let etas = [0.2, 0.4, 0.6, 0.8];
    let mut dist = Vec::new();
    for &eta in &etas {
        let ctx = EditContext::load(&mut s, b, Some(eta)).map_err(|e| e.to_string())?;
        let mut m = 0.0;
        for seed in 0..3u64 {
            let r = dac_core::editor::predict_edit(b, &ctx, &EditRequest { seed, ..Default::default() }).unwrap();
            m += off_object_mse(s.source(), &r.image, &c, OFF_OBJECT_DILATE).unwrap() / 3.0;
        }
        dist.push(m);
    }
    let rho = spearman_oracle(&etas, &dist);
    let fmt: Vec<String> = dist.iter().map(|v| format!("{v:.5}")).collect();
    check(rho <= 0.0, format!("off-object MSE over η {etas:?} (3-seed mean): [{}]; ρ {rho:.3}", fmt.join(", ")))
}

fn t_aux_inequality() -> Outcome {
    let b = backend();
    let plain = session(Fixture::Standard);
    let aux = session(Fixture::WithTAux);
    let dev = b.device();
    let (u0, u1) = (plain.load_u(dev).unwrap(), aux.load_u(dev).unwrap());
    let t = aux.load_t_aux(dev).unwrap().ok_or("T_aux missing")?;
    let src = source();
    let mut without = Vec::new();
    let mut with = Vec::new();
    for seed in 0..3u64 {
        without.push(reconstruct_source(b, common::PROMPT, &u0, None, seed, 30).unwrap().mse(&src).unwrap());
        with.push(reconstruct_source(b, common::PROMPT, &u1, Some(&t), seed, 30).unwrap().mse(&src).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    check(
        with[0] <= without[0],
        format!(
            "seed 0 reconstruction MSE with T_aux {:.5} vs without {:.5}; seeds 0-2 mean {:.5} vs {:.5}",
            with[0],
            without[0],
            mean(&with),
            mean(&without)
        ),
    )
}

fn end_to_end() -> Outcome {
    let b = backend();
    let mut s = session(Fixture::Standard);
    let ctx = EditContext::load(&mut s, b, None).map_err(|e| e.to_string())?;
    let c = corpus();
    let slots = parse_caption(common::PROMPT_PRIME, &c).unwrap();
    let results = dac_core::editor::multi_seed(b, &ctx, 1.0, 0, 8, 30, true, true).unwrap();
    let mut ok = 0;
    let mut worst = 0.0f64;
    for r in &results {
        let blue_circle = agreement(&probe(r.image.data(), &c).unwrap(), &slots).all();
        let off = off_object_mse(s.source(), &r.image, &c, OFF_OBJECT_DILATE).unwrap();
        worst = worst.max(off);
        if blue_circle && off < OFF_OBJECT_THRESHOLD {
            ok += 1;
        }
    }
    check(ok >= 6, format!("{ok}/8 seeds read as a blue circle with off-object MSE < {OFF_OBJECT_THRESHOLD} (worst {worst:.5})"))
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("schedule identities", schedule_identities),
        ("LoRA transparency", lora_transparency),
        ("conv-LoRA equivalence", conv_lora_equivalence),
        ("DDIM closed forms", ddim_closed_forms),
        ("gradient check", gradient_check),
        ("freeze discipline", freeze_discipline),
        ("beta endpoint contract", beta_endpoints),
        ("Abduction-2 dominance", abduction2_dominance),
        ("checkpoint trend (fidelity up, editability down)", checkpoint_trend),
        ("beta trend on attribute edit", beta_trend),
        ("eta trend on fidelity", eta_trend),
        ("T_aux reconstruction inequality", t_aux_inequality),
        ("end-to-end red→blue circle edit", end_to_end),
    ];
    let started = Instant::now();
    // Build fixtures first so per-criterion timings exclude them.
    backend();
    session(Fixture::Standard);
    session(Fixture::WithTAux);
    println!("fixtures ready in {:.1} s", started.elapsed().as_secs_f64());
    let mut failed = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name} [{secs:.1} s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.1} s]: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed in {:.1} s", 13 - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
