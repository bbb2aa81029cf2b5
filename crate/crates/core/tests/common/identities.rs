//! Closed-form examples for every module, each reduced to a pass/fail line.

#![allow(dead_code)]

use umq_core::corruption::{
    self, add_noise_augment, apply_missing, mix_noise, missing_rate, AugmentConfig, NoiseKind,
};
use umq_core::dataio::{generate_synthetic, SyntheticGenerator, SyntheticSpec, Task};
use umq_core::decouple::{self, DecoupleParams, DecoupleTerms, ModalityState};
use umq_core::enhancer::{enhancer_training_loss, Enhancer};
use umq_core::estimator::{self, quality_level, Estimator};
use umq_core::moe::{self, top_k_select, Moe, SameConfigOptions};
use umq_core::nn::Mlp;
use umq_core::pipeline::{
    ablate, regression_metrics, ForwardOptions, LossReport, Router, UmqConfig, UmqModel,
};
use umq_core::rng;
use umq_core::tensor::{grad_check, AdamW, AdamWConfig, GradCheckOptions, Graph, ParamStore, Tensor, Var};

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

fn close(got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= 1e-6 * want.abs().max(1.0) {
        Ok(())
    } else {
        Err(format!("got {got}, want {want}"))
    }
}

fn holds(ok: bool, detail: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(detail())
    }
}

fn eval(f: impl FnOnce(&mut Graph<'_>) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.scalar(v)
}

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

fn col(v: &[f64]) -> Tensor {
    Tensor::column(v)
}

fn small_config() -> UmqConfig {
    UmqConfig {
        d: 8,
        h: 4,
        k: 2,
        batch_size: 16,
        ..UmqConfig::default()
    }
}

fn tensor_checks(out: &mut Vec<Check>) {
    let mut push = |name, outcome| out.push(Check { name, outcome });
    push("sigmoid(0) = 0.5", close(eval(|g| {
        let x = g.constant(Tensor::scalar(0.0));
        g.sigmoid(x)
    }), 0.5));
    push("layer norm of a constant row is near zero", {
        let mut g = Graph::new();
        let x = g.constant(rows(&[&[3.0, 3.0, 3.0]]));
        let one = g.constant(Tensor::full(1, 3, 1.0));
        let zero = g.constant(Tensor::zeros(1, 3));
        let y = g.layer_norm(x, one, zero).unwrap();
        let m = g.value(y).data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        holds(m < 1e-2, || format!("max |out| = {m}"))
    });
    push("softmax of equal logits is uniform", {
        let mut g = Graph::new();
        let x = g.constant(rows(&[&[1.0, 1.0, 1.0]]));
        let y = g.softmax(x);
        g.value(y).data().iter().try_for_each(|&v| close(v, 1.0 / 3.0))
    });
    push("d(x²)/dx at 3 is 6", {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.square(x);
        let gr = g.backward(y).unwrap();
        close(gr.wrt(x).unwrap().item(), 6.0)
    });
    push("d sum(A∘B)/dA = B", {
        let mut g = Graph::new();
        let b = rows(&[&[1.0, -2.0], &[0.5, 4.0]]);
        let a = g.variable(rows(&[&[0.3, 0.1], &[-1.0, 2.0]]));
        let bv = g.constant(b.clone());
        let p = g.mul(a, bv).unwrap();
        let s = g.sum(p);
        let gr = g.backward(s).unwrap();
        holds(gr.wrt(a).unwrap() == &b, || "gradient differs from B".into())
    });
    push("‖softmax(v)‖ gradient matches central differences", {
        let v0 = [0.3, -1.2, 2.0];
        let f = |v: &[f64]| {
            let mut g = Graph::new();
            let x = g.variable(Tensor::row_vector(v));
            let s = g.softmax(x);
            let n = g.row_norm(s);
            let l = g.sum(n);
            (g.scalar(l), g.backward(l).unwrap().wrt(x).unwrap().clone())
        };
        let (_, analytic) = f(&v0);
        let h = 1e-6;
        (0..3).try_for_each(|i| {
            let mut p = v0;
            let mut m = v0;
            p[i] += h;
            m[i] -= h;
            let num = (f(&p).0 - f(&m).0) / (2.0 * h);
            let a = analytic.data()[i];
            holds((a - num).abs() / a.abs().max(1.0) < 1e-5, || format!("coord {i}: {a} vs {num}"))
        })
    });
    push("grad check of x³ at 2 with h = 1e-5", {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(2.0));
        let r = grad_check(
            &mut store,
            None,
            |g| {
                let x = g.param(id);
                let sq = g.square(x);
                g.mul(sq, x)
            },
            GradCheckOptions { step: 1e-5 },
        )
        .unwrap();
        holds(r.max_rel_error < 1e-7, || format!("error {}", r.max_rel_error))
    });
    push("grad check skips a hinge at its kink", {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.0));
        let r = grad_check(
            &mut store,
            None,
            |g| {
                let x = g.param(id);
                Ok(g.hinge(x))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        holds(r.skipped.len() == 1 && r.checked == 0, || format!("{r:?}"))
    });
    push("AdamW: zero gradient and decay leave parameters unchanged", {
        let mut store = ParamStore::new();
        store.add("w", rows(&[&[1.5, -2.0]]));
        let before = store.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &store,
        );
        opt.step(&mut store).unwrap();
        holds(store.value(store.by_name("w").unwrap()) == before.value(before.by_name("w").unwrap()), || {
            "parameters moved".into()
        })
    });
    push("AdamW first step from θ = 1, g = 1, lr = 0.1", {
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::scalar(1.0));
        let grads = {
            let mut g = Graph::with_params(&store);
            let t = g.param(id);
            let l = g.sum(t);
            g.backward(l).unwrap()
        };
        store.accumulate(&grads);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &store,
        );
        opt.step(&mut store).unwrap();
        close(store.value(id).item(), 1.0 - 0.1 / (1.0 + 1e-8))
    });
    push("AdamW steps are deterministic", {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("t", rows(&[&[0.2, -0.7]]));
            let mut opt = AdamW::new(AdamWConfig::default(), &store);
            for _ in 0..2 {
                let grads = {
                    let mut g = Graph::with_params(&store);
                    let t = g.param(id);
                    let s = g.square(t);
                    let l = g.sum(s);
                    g.backward(l).unwrap()
                };
                store.zero_grad();
                store.accumulate(&grads);
                opt.step(&mut store).unwrap();
            }
            store
        };
        holds(run() == run(), || "runs differ".into())
    });
}

fn dataio_checks(out: &mut Vec<Check>) {
    let mut push = |name, outcome| out.push(Check { name, outcome });
    let spec = SyntheticSpec {
        noise_floor: 0.0,
        ..SyntheticSpec::default()
    };
    let gen = SyntheticGenerator::new(spec.clone(), 3).unwrap();
    push("equal latents give equal noise-free features", {
        let z = [0.4, -1.0, 0.3, 0.0, 2.0, -0.5];
        holds(gen.features_for(&z) == gen.features_for(&z), || "features differ".into())
    });
    push("label of the zero latent is 0", close(gen.label_for(&[0.0; 6]), 0.0));
    push("synthetic generation is seed-deterministic", {
        let a = generate_synthetic(&SyntheticSpec::default(), 9).unwrap();
        let b = generate_synthetic(&SyntheticSpec::default(), 9).unwrap();
        let c = generate_synthetic(&SyntheticSpec::default(), 10).unwrap();
        holds(a == b && a.features != c.features, || "determinism or seed sensitivity broken".into())
    });
    push("noise-free offset equals feature mean minus mapped latent mean", {
        let (ds, z) = gen.generate(4).unwrap();
        let n = ds.len();
        let zbar: Vec<f64> = (0..6).map(|k| (0..n).map(|i| z.get(i, k)).sum::<f64>() / n as f64).collect();
        (0..ds.num_modalities()).try_for_each(|m| {
            let d = ds.modalities[m].dim;
            (0..d).try_for_each(|j| {
                let mean = (0..n).map(|i| ds.features[m][i * d + j] as f64).sum::<f64>() / n as f64;
                let mapped: f64 = (0..6).map(|k| zbar[k] * gen.maps[m].get(k, j)).sum();
                let off = gen.offsets[m][j];
                holds((mean - mapped - off).abs() < 1e-5, || format!("modality {m} col {j}"))
            })
        })
    });
}

fn corruption_checks(out: &mut Vec<Check>) {
    let mut push = |name, outcome| out.push(Check { name, outcome });
    let x = rng::gaussian_tensor(&mut rng::rng(5), 100, 100);
    push("NR = 0 mixing is the identity", {
        let k = [NoiseKind::Gaussian, NoiseKind::Laplace, NoiseKind::RandomErase];
        holds(k.iter().all(|&k| mix_noise(&x, 0.0, k, 1).unwrap() == x), || "changed".into())
    });
    push("NR = 1 Gaussian mixing is standard noise", {
        let big = Tensor::full(400, 250, 7.0);
        let y = mix_noise(&big, 1.0, NoiseKind::Gaussian, 2).unwrap();
        let n = y.data().len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let other = mix_noise(&Tensor::zeros(400, 250), 1.0, NoiseKind::Gaussian, 2).unwrap();
        holds(mean.abs() < 0.02 && (var - 1.0).abs() < 0.05 && other == y, || format!("mean {mean}, var {var}"))
    });
    push("NR = 0.5 erase zeroes half and keeps the rest", {
        let y = mix_noise(&x, 0.5, NoiseKind::RandomErase, 3).unwrap();
        let zeroed = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e4;
        let kept = y.data().iter().zip(x.data()).all(|(a, b)| *a == 0.0 || a == b);
        holds((0.49..=0.51).contains(&zeroed) && kept, || format!("zeroed fraction {zeroed}"))
    });
    push("AddNoise with replace probability 1 is pure noise", {
        let cfg = AugmentConfig {
            replace_prob: 1.0,
            ..AugmentConfig::default()
        };
        let (y, rates) = add_noise_augment(&x, &cfg, 8);
        let pure = mix_noise(&x, 1.0, NoiseKind::Gaussian, corruption::augment_noise_seed(8)).unwrap();
        holds(y.max_abs_diff(&pure) < 1e-12 && rates.iter().all(|&r| r == 1.0), || "not pure noise".into())
    });
    push("AddNoise with a degenerate zero range is the identity", {
        let cfg = AugmentConfig {
            replace_prob: 0.0,
            nr_low: 0.0,
            nr_high: 0.0,
        };
        holds(add_noise_augment(&x, &cfg, 8).0 == x, || "changed".into())
    });
    push("AddNoise replacement frequency matches ρ", {
        let t = Tensor::zeros(10_000, 1);
        let (_, rates) = add_noise_augment(&t, &AugmentConfig::default(), 9);
        let f = rates.iter().filter(|&&r| r == 1.0).count() as f64 / 1e4;
        holds((f - 0.1).abs() <= 0.02, || format!("fraction {f}"))
    });
    let ds = generate_synthetic(&SyntheticSpec { n_samples: 64, ..SyntheticSpec::default() }, 1).unwrap();
    let ids: Vec<usize> = (0..64).collect();
    let batch = ds.batch(&ids);
    push("MR = 0 leaves the batch unchanged", {
        holds(apply_missing(&batch, 0.0, 3).unwrap() == batch, || "changed".into())
    });
    push("missing rate of a mask with M = [1, 2]", {
        close(missing_rate(&[vec![true, false, false], vec![true, true, false]]).unwrap(), 0.5)
    });
    push("all-true mask has missing rate 0", close(missing_rate(&vec![vec![true; 3]; 4]).unwrap(), 0.0));
    push("one modality per row gives missing rate 2/3", {
        close(missing_rate(&[vec![true, false, false], vec![false, false, true]]).unwrap(), 2.0 / 3.0)
    });
    push("mask [[T,T,F],[T,F,F]] has missing rate 0.5", {
        close(missing_rate(&[vec![true, true, false], vec![true, false, false]]).unwrap(), 0.5)
    });
    push("MR = 0.7 over three modalities is rejected above the cap", {
        holds(apply_missing(&batch, 0.7, 1).is_err(), || "accepted".into())
    });
    push("MR = 0.6 realized over 10⁴ samples within 0.03, none empty", {
        let big = generate_synthetic(&SyntheticSpec { n_samples: 10_000, ..SyntheticSpec::default() }, 2).unwrap();
        let ids: Vec<usize> = (0..10_000).collect();
        let b = apply_missing(&big.batch(&ids), 0.6, 4).unwrap();
        let r = missing_rate(&b.mask).unwrap();
        holds((r - 0.6).abs() <= 0.03 && b.mask.iter().all(|row| row.contains(&true)), || format!("realized {r}"))
    });
}

fn decouple_checks(out: &mut Vec<Check>) {
    let mut push = |name, outcome| out.push(Check { name, outcome });
    let ortho = |a: &[f64], b: &[f64]| {
        eval(|g| {
            let a = g.constant(Tensor::row_vector(a));
            let b = g.constant(Tensor::row_vector(b));
            decouple::loss_orthogonality(g, a, b).unwrap()
        })
    };
    push("zero decoupler weights give zero parts", {
        let mut store = ParamStore::new();
        let dp = DecoupleParams::new(&mut store, "a", 4, &mut rng::rng(1));
        dp.zero(&mut store);
        let mut g = Graph::with_params(&store);
        let x = g.constant(rng::gaussian_tensor(&mut rng::rng(2), 3, 4));
        let (s, c) = dp.decouple(&mut g, x).unwrap();
        holds(g.value(s).data().iter().chain(g.value(c).data()).all(|&v| v == 0.0), || "nonzero".into())
    });
    push("decoupling commutes with batch permutation", {
        let mut store = ParamStore::new();
        let dp = DecoupleParams::new(&mut store, "a", 4, &mut rng::rng(1));
        let x = rng::gaussian_tensor(&mut rng::rng(2), 3, 4);
        let perm = [2, 0, 1];
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let xp = g.constant(x.select_rows(&perm));
        let (s, _) = dp.decouple(&mut g, xv).unwrap();
        let (sp, _) = dp.decouple(&mut g, xp).unwrap();
        holds(g.value(s).select_rows(&perm) == *g.value(sp), || "not equivariant".into())
    });
    push("orthogonal parts give 0", close(ortho(&[1.0, 0.0], &[0.0, 1.0]), 0.0));
    push("parallel unit parts give 1", close(ortho(&[1.0, 0.0], &[1.0, 0.0]), 1.0));
    push("[1,1] against [1,0] gives 1/√2", close(ortho(&[1.0, 1.0], &[1.0, 0.0]), 0.5f64.sqrt()));
    let mi = |x: &Tensor, s: &Tensor, c: &Tensor, eps: f64| {
        eval(|g| {
            let (x, s, c) = (g.constant(x.clone()), g.constant(s.clone()), g.constant(c.clone()));
            decouple::loss_mutual_info(g, x, s, c, eps).unwrap()
        })
    };
    let x = rows(&[&[1.0, 2.0]]);
    push("x_s = x_c = x gives 0", close(mi(&x, &x, &x, 0.2), 0.0));
    push("distances 0.3 and 0.1 with ε = 0.2 give 0.1", {
        let c = rows(&[&[1.0 + 0.3f64.sqrt(), 2.0]]);
        let s = rows(&[&[1.0, 2.0 + 0.1f64.sqrt()]]);
        close(mi(&x, &s, &c, 0.2), 0.1)
    });
    push("ε = 0 mutual-info term is the sum of squared distances", {
        let s = rows(&[&[0.0, 0.0]]);
        let c = rows(&[&[1.0, 0.0]]);
        close(mi(&x, &s, &c, 0.0), 5.0 + 4.0)
    });
    let center = |t: Tensor| {
        eval(|g| {
            let v = g.constant(t);
            decouple::loss_center(g, v).unwrap()
        })
    };
    push("identical rows have zero center loss", close(center(rows(&[&[1.0, 2.0], &[1.0, 2.0]])), 0.0));
    push("rows {0, 2} have center loss 1", close(center(rows(&[&[0.0], &[2.0]])), 1.0));
    push("a single row has zero center loss", close(center(rows(&[&[3.0, -1.0]])), 0.0));
    let recon = |a: &[f64], b: &[f64]| {
        eval(|g| {
            let a = g.constant(Tensor::row_vector(a));
            let b = g.constant(Tensor::row_vector(b));
            decouple::loss_reconstruction(g, a, b, false).unwrap()
        })
    };
    push("perfect reconstruction gives 0", close(recon(&[1.0, 2.0], &[1.0, 2.0]), 0.0));
    push("[3,4] against zeros gives 5", close(recon(&[3.0, 4.0], &[0.0, 0.0]), 5.0));
    push("reconstruction of a random pair matches the direct norm", {
        let a = rng::gaussian_tensor(&mut rng::rng(3), 1, 6);
        let b = rng::gaussian_tensor(&mut rng::rng(4), 1, 6);
        let want = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        close(recon(a.data(), b.data()), want)
    });
    let total = |vals: &[[f64; 4]]| {
        eval(|g| {
            let terms: Vec<DecoupleTerms> = vals
                .iter()
                .map(|v| DecoupleTerms {
                    center: g.constant(Tensor::scalar(v[0])),
                    mutual_info: g.constant(Tensor::scalar(v[1])),
                    reconstruction: g.constant(Tensor::scalar(v[2])),
                    orthogonality: g.constant(Tensor::scalar(v[3])),
                })
                .collect();
            decouple::decouple_total(g, &terms).unwrap()
        })
    };
    push("zero decoupling components sum to 0", close(total(&[[0.0; 4]]), 0.0));
    push("components 0.1..0.4 sum to 1", close(total(&[[0.1, 0.2, 0.3, 0.4]]), 1.0));
    push("three modalities at 0.5 sum to 1.5", close(total(&[[0.5, 0.0, 0.0, 0.0]; 3]), 1.5));
    let state = |lambda: f64, xb: f64| {
        let mut store = ParamStore::new();
        let mut st = ModalityState::new(&mut store, "b", 1, lambda, &mut rng::rng(1));
        st.x_b = Tensor::scalar(xb);
        st
    };
    push("λ = 1 keeps half the old baseline plus half x_tri", {
        let st = state(1.0, 0.8);
        close(st.update_baseline(&col(&[5.0, -3.0]), &Tensor::scalar(0.4)).item(), 0.4 + 0.2)
    });
    push("λ = 0 and x_tri = 0 give half the batch mean", {
        let st = state(0.0, 0.8);
        close(st.update_baseline(&col(&[1.0, 2.0]), &Tensor::scalar(0.0)).item(), 0.75)
    });
    push("λ = 0.9, x_b = 1, mean 0, x_tri = 0.2 give 0.55", {
        let st = state(0.9, 1.0);
        close(st.update_baseline(&col(&[1.0, -1.0]), &Tensor::scalar(0.2)).item(), 0.55)
    });
}

fn estimator_checks(out: &mut Vec<Check>) {
    let mut push = |name, outcome| out.push(Check { name, outcome });
    push("zero final layer gives α = 0.5", {
        let mut store = ParamStore::new();
        let est = Estimator::new(&mut store, "e", 6, &mut rng::rng(1));
        est.mlp.out.zero(&mut store);
        let mut g = Graph::with_params(&store);
        let x = g.constant(rng::gaussian_tensor(&mut rng::rng(2), 4, 6));
        let a = est.estimate(&mut g, x).unwrap();
        g.value(a).data().iter().try_for_each(|&v| close(v, 0.5))
    });
    push("estimation commutes with batch permutation", {
        let mut store = ParamStore::new();
        let est = Estimator::new(&mut store, "e", 6, &mut rng::rng(1));
        let x = rng::gaussian_tensor(&mut rng::rng(2), 4, 6);
        let perm = [3, 1, 0, 2];
        let mut g = Graph::with_params(&store);
        let a = g.constant(x.clone());
        let b = g.constant(x.select_rows(&perm));
        let ea = est.estimate(&mut g, a).unwrap();
        let eb = est.estimate(&mut g, b).unwrap();
        holds(g.value(ea).select_rows(&perm) == *g.value(eb), || "not equivariant".into())
    });
    push("quality levels at the threshold", {
        holds(!quality_level(0.49, 0.5) && quality_level(0.5, 0.5) && quality_level(0.51, 0.5), || "wrong level".into())
    });
    push("noise anchor at α = 0 is 0", close(eval(|g| {
        let a = g.constant(col(&[0.0, 0.0]));
        estimator::noise_anchor(g, a)
    }), 0.0));
    push("noise anchor at α = 0.5 is 0.25", close(eval(|g| {
        let a = g.constant(col(&[0.5, 0.5, 0.5]));
        estimator::noise_anchor(g, a)
    }), 0.25));
    push("noise anchor gradient is 2α/n", {
        let mut g = Graph::new();
        let a = g.variable(col(&[0.3]));
        let l = estimator::noise_anchor(&mut g, a);
        let gr = g.backward(l).unwrap();
        close(gr.wrt(a).unwrap().item(), 0.6)
    });
    let high = |alpha: &[f64], losses: &[f64]| {
        eval(|g| {
            let a = g.constant(col(alpha));
            estimator::loss_high_anchor(g, a, losses, 0.95, 0.01).unwrap()
        })
    };
    push("no qualifying sample gives 0 high anchor", close(high(&[0.2, 0.3], &[1.0, 2.0]), 0.0));
    push("α = 0.99 on a qualifying sample gives 0", close(high(&[0.99], &[0.001]), 0.0));
    push("α = 0.5 on a qualifying sample gives 0.45", close(high(&[0.5], &[0.001]), 0.45));
    let rank = |alpha: &[f64], losses: &[f64], gamma1: f64| {
        eval(|g| {
            let a = g.constant(col(alpha));
            estimator::loss_rank(g, a, losses, gamma1, None, 0).unwrap()
        })
    };
    push("correctly ordered rank pair gives 0", close(rank(&[0.3, 0.8], &[2.0, 1.0], 0.1), 0.0));
    push("violated rank pair gives 0.6", close(rank(&[0.8, 0.3], &[2.0, 1.0], 0.1), 0.6));
    push("equal α makes every active pair cost γ1", close(rank(&[0.4; 4], &[1.0, 2.0, 3.0, 3.0], 0.05), 0.05));
    let crank = |a: f64, ah: f64| {
        eval(|g| {
            let a = g.constant(col(&[a]));
            let ah = g.constant(col(&[ah]));
            estimator::loss_corruption_rank(g, a, ah, 0.05).unwrap()
        })
    };
    push("α = α̂ gives γ1 corruption-rank loss", close(crank(0.4, 0.4), 0.05));
    push("α = 0.9, α̂ = 0.1 gives 0", close(crank(0.9, 0.1), 0.0));
    push("active corruption-rank gradient raises α and lowers α̂", {
        let mut g = Graph::new();
        let a = g.variable(col(&[0.4]));
        let ah = g.variable(col(&[0.4]));
        let l = estimator::loss_corruption_rank(&mut g, a, ah, 0.05).unwrap();
        let gr = g.backward(l).unwrap();
        holds(gr.wrt(a).unwrap().item() < 0.0 && gr.wrt(ah).unwrap().item() > 0.0, || "wrong signs".into())
    });
    let tl = |p: f64, y: f64, task: Task| {
        eval(|g| {
            let p = g.constant(col(&[p]));
            estimator::task_loss(g, p, &[y], task).unwrap()
        })
    };
    push("exact regression prediction has zero loss", close(tl(1.3, 1.3, Task::Regression), 0.0));
    push("prediction 1 for label 2 has MSE 1", close(tl(1.0, 2.0, Task::Regression), 1.0));
    push("logit 0 for label 1 has BCE ln 2", close(tl(0.0, 1.0, Task::Binary), 2f64.ln()));
    let est_total = |vals: &[[f64; 5]]| {
        eval(|g| {
            let terms: Vec<estimator::EstimatorTerms> = vals
                .iter()
                .map(|v| estimator::EstimatorTerms {
                    noise_anchor: g.constant(Tensor::scalar(v[0])),
                    high_anchor: g.constant(Tensor::scalar(v[1])),
                    corruption_rank: Some(g.constant(Tensor::scalar(v[2]))),
                    rank: Some(g.constant(Tensor::scalar(v[3]))),
                    unimodal: g.constant(Tensor::scalar(v[4])),
                })
                .collect();
            estimator::estimator_total(g, &terms).unwrap()
        })
    };
    push("zero estimator components sum to 0", close(est_total(&[[0.0; 5]]), 0.0));
    push("estimator components 0.1..0.4 sum to 1", close(est_total(&[[0.1, 0.0, 0.2, 0.3, 0.4]]), 1.0));
    push("three estimator totals of 0.5 sum to 1.5", close(est_total(&[[0.5, 0.0, 0.0, 0.0, 0.0]; 3]), 1.5));
}

fn enhancer_checks(out: &mut Vec<Check>) {
    let mut push = |name, outcome| out.push(Check { name, outcome });
    push("identical tokens attend to their value projection", {
        let mut store = ParamStore::new();
        let eh = Enhancer::new(&mut store, "e", 4, 3, &mut rng::rng(1));
        let t = rng::gaussian_tensor(&mut rng::rng(2), 1, 4);
        let x = rng::gaussian_tensor(&mut rng::rng(3), 1, 4);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let tv = g.constant(t.clone());
        let out = eh.enhance(&mut g, xv, Some(&[tv, tv]), Some(tv)).unwrap();
        let v = t.matmul(store.value(eh.value)).unwrap();
        let joined = vec![v.data().iter().chain(x.data()).copied().collect::<Vec<f64>>()];
        let want = super::oracle::mlp(&store, "e.mlp", &joined);
        holds(super::oracle::max_diff(&vec![g.value(out.out).data().to_vec()], &want) < 1e-12, || "output differs".into())
    });
    push("zero final enhancer layer gives zero output", {
        let mut store = ParamStore::new();
        let eh = Enhancer::new(&mut store, "e", 4, 2, &mut rng::rng(1));
        eh.mlp.out.zero(&mut store);
        let mut g = Graph::with_params(&store);
        let x = g.constant(rng::gaussian_tensor(&mut rng::rng(3), 3, 4));
        let c = g.constant(rng::gaussian_tensor(&mut rng::rng(4), 3, 4));
        let out = eh.enhance(&mut g, x, Some(&[c]), None).unwrap();
        holds(g.value(out.out).data().iter().all(|&v| v == 0.0), || "nonzero".into())
    });
    let eh_loss = |e: Tensor, c: Tensor, alpha: &[f64]| {
        eval(|g| {
            let e = g.constant(e);
            let c = g.constant(c);
            enhancer_training_loss(g, e, c, alpha, 0.5).unwrap()
        })
    };
    push("no row above τ gives zero enhancer loss", {
        close(eh_loss(rows(&[&[1.0]]), rows(&[&[0.0]]), &[0.5]), 0.0)
    });
    push("exact enhancement of qualifying rows gives 0", {
        let t = rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        close(eh_loss(t.clone(), t, &[0.9, 0.8]), 0.0)
    });
    push("one qualifying row at distance 1 gives 1", {
        close(eh_loss(rows(&[&[0.0, 0.0], &[5.0, 5.0]]), rows(&[&[1.0, 0.0], &[0.0, 0.0]]), &[0.9, 0.1]), 1.0)
    });
}

fn moe_checks(out: &mut Vec<Check>) {
    let mut push = |name, outcome| out.push(Check { name, outcome });
    let gate_logits = |w: Tensor, x: Tensor| {
        let mut store = ParamStore::new();
        let moe = Moe::new(&mut store, "moe", x.cols(), w.rows(), 1, &mut rng::rng(1)).unwrap();
        store.set_value(moe.gate, w).unwrap();
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x);
        let l = moe.gate(&mut g, xv).unwrap();
        g.value(l).clone()
    };
    push("zero gate weights give zero logits", {
        let l = gate_logits(Tensor::zeros(3, 4), rng::gaussian_tensor(&mut rng::rng(2), 2, 4));
        holds(l.data().iter().all(|&v| v == 0.0), || "nonzero".into())
    });
    push("X = [2,0,0,0] with gate row e₁ gives logit 1", {
        let mut w = vec![0.0; 8];
        w[0] = 1.0;
        let l = gate_logits(Tensor::new(2, 4, w).unwrap(), rows(&[&[2.0, 0.0, 0.0, 0.0]]));
        close(l.get(0, 0), 1.0)
    });
    push("scaling X scales logits", {
        let w = rng::gaussian_tensor(&mut rng::rng(3), 3, 4);
        let x = rng::gaussian_tensor(&mut rng::rng(4), 2, 4);
        let a = gate_logits(w.clone(), x.map(|v| 2.5 * v));
        let b = gate_logits(w, x).map(|v| 2.5 * v);
        holds(a.max_abs_diff(&b) < 1e-12, || "not linear".into())
    });
    push("top-2 of [0.3, 0.9, 0.1]", holds(top_k_select(&[0.3, 0.9, 0.1], 2) == (vec![0.9, 0.3], vec![1, 0]), || "wrong selection".into()));
    push("k = h selects every index in descending order", holds(top_k_select(&[0.2, 0.7, 0.5], 3).1 == vec![1, 2, 0], || "wrong order".into()));
    push("tied top-1 picks the lower index", holds(top_k_select(&[0.5, 0.5, 0.1], 1).1 == vec![0], || "wrong tie".into()));
    let mix = |k: usize, gate: Tensor| {
        let mut store = ParamStore::new();
        let moe = Moe::new(&mut store, "moe", 4, gate.rows(), k, &mut rng::rng(5)).unwrap();
        store.set_value(moe.gate, gate).unwrap();
        let x = rows(&[&[2.0, 0.0, 0.0, 0.0]]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x);
        let r = moe.forward(&mut g, xv).unwrap();
        let experts: Vec<Tensor> = moe.experts.iter().map(|e: &Mlp| {
            let y = e.forward(&mut g, xv).unwrap();
            g.value(y).clone()
        }).collect();
        (g.value(r.out).clone(), experts, r.records[0].clone())
    };
    // logits are (W·x)/√4 = W[:,0].
    let gate = |l: &[f64]| {
        let mut w = vec![0.0; l.len() * 4];
        for (j, v) in l.iter().enumerate() {
            w[j * 4] = *v;
        }
        Tensor::new(l.len(), 4, w).unwrap()
    };
    push("k = 1 returns the selected expert exactly", {
        let (out, e, rec) = mix(1, gate(&[0.1, 0.7, 0.3]));
        holds(out == e[1] && rec.weights == vec![1.0], || format!("{rec:?}"))
    });
    push("equal selected logits average the two experts", {
        let (out, e, _) = mix(2, gate(&[0.4, 0.4, 0.1]));
        let want: Vec<f64> = e[0].data().iter().zip(e[1].data()).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        holds(out.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12), || "not the average".into())
    });
    push("selected logits [1, 0] weight e/(e+1) and 1/(e+1)", {
        let (out, e, rec) = mix(2, gate(&[1.0, 0.0, -1.0]));
        let w0 = std::f64::consts::E / (std::f64::consts::E + 1.0);
        let want: Vec<f64> = e[0].data().iter().zip(e[1].data()).map(|(a, b)| w0 * a + (1.0 - w0) * b).collect();
        close(rec.weights[0], w0)
            .and(holds((rec.weights[0] - 0.7311).abs() < 1e-4, || "not ≈ 0.7311".into()))
            .and(holds(out.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-6), || "mixture off".into()))
    });
    let bal = |t: Tensor| {
        eval(|g| {
            let v = g.constant(t);
            moe::loss_balance(g, v)
        })
    };
    push("equal logits have zero balance loss", close(bal(Tensor::full(3, 4, 0.7)), 0.0));
    push("mean logits [1, −1] have variance 1", close(bal(rows(&[&[1.0, -1.0], &[1.0, -1.0]])), 1.0));
    push("balance loss is shift invariant", {
        let t = rng::gaussian_tensor(&mut rng::rng(6), 5, 4);
        close(bal(t.map(|v| v + 3.0)), bal(t))
    });
    let sv = |t: Tensor| {
        eval(|g| {
            let v = g.constant(t);
            moe::loss_sample_variance(g, v, 0.1)
        })
    };
    push("constant gate row costs β", close(sv(Tensor::full(1, 3, 2.0)), 0.1));
    push("gate variance 0.5 costs 0", close(sv(rows(&[&[0.5f64.sqrt(), -(0.5f64.sqrt())]])), 0.0));
    push("row [1, −1] has variance 1 and costs 0", close(sv(rows(&[&[1.0, -1.0]])), 0.0));
    let same = |t: Tensor, levels: &[Vec<bool>]| {
        eval(|g| {
            let v = g.constant(t);
            moe::loss_same_config(g, v, levels, SameConfigOptions::default()).unwrap()
        })
    };
    push("equal gate rows within groups cost 0", {
        close(same(rows(&[&[1.0, 2.0], &[1.0, 2.0], &[0.0, 5.0]]), &[vec![true], vec![true], vec![false]]), 0.0)
    });
    push("pair [1,0] and [0,1] in one group costs 2", {
        close(same(rows(&[&[1.0, 0.0], &[0.0, 1.0]]), &[vec![true, false], vec![true, false]]), 2.0)
    });
    push("distinct configurations cost 0", {
        close(same(rows(&[&[1.0, 0.0], &[0.0, 1.0]]), &[vec![true, false], vec![false, true]]), 0.0)
    });
}

fn pipeline_checks(out: &mut Vec<Check>) {
    let mut push = |name, outcome| out.push(Check { name, outcome });
    let ds = generate_synthetic(&SyntheticSpec::default(), 7).unwrap();
    let batch = ds.batch(&[0, 1, 2, 3]);
    let cfg = small_config();
    let run = |cfg: &UmqConfig| {
        let model = UmqModel::new(cfg, &ds.modalities, ds.task).unwrap();
        let mut g = Graph::with_params(&model.store);
        let fwd = model.forward(&mut g, &batch, &ForwardOptions::train()).unwrap();
        let vars = model.composite_loss(&mut g, &fwd, &batch, 11).unwrap();
        let report = model.report(&g, &vars);
        let (mixed, fused) = (g.value(fwd.mixed).clone(), g.value(fwd.fused).clone());
        drop(g);
        (report, fwd.quality.levels.clone(), mixed, model, fused)
    };
    push("quality levels are deterministic", holds(run(&cfg).1 == run(&cfg).1, || "levels differ".into()));
    push("a batch of one runs", {
        let model = UmqModel::new(&cfg, &ds.modalities, ds.task).unwrap();
        let one = ds.batch(&[5]);
        let mut g = Graph::with_params(&model.store);
        let r = model
            .forward(&mut g, &one, &ForwardOptions::train())
            .and_then(|f| model.composite_loss(&mut g, &f, &one, 3));
        holds(r.map(|v| g.scalar(v.total).is_finite()).unwrap_or(false), || "failed".into())
    });
    push("all β = 0 gives total = L_p", {
        let zero = UmqConfig { beta_de: 0.0, beta_est: 0.0, beta_eh: 0.0, beta_moe: 0.0, ..cfg.clone() };
        let r = run(&zero).0;
        close(r.total, r.predictive)
    });
    push("β_moe = 1 with routing losses 0.1, 0.2, 0.3 and L_p = 1 gives 1.6", {
        let r = LossReport {
            modalities: vec![],
            predictive: 1.0,
            decouple: None,
            decouple_total: Some(7.0),
            estimator: None,
            estimator_total: Some(5.0),
            enhancer: Some(3.0),
            balance: Some(0.1),
            sample: Some(0.2),
            same: Some(0.3),
            total: 0.0,
            weights: [0.0, 0.0, 0.0, 1.0],
        };
        close(r.recomputed_total(), 1.6)
    });
    push("reported total equals the weighted sum of its parts", {
        let r = run(&cfg).0;
        close(r.total, r.recomputed_total())
    });
    push("total gradient equals the weighted sum of component gradients", {
        let model = UmqModel::new(&cfg, &ds.modalities, ds.task).unwrap();
        let grads = |name: &str| {
            let mut g = Graph::with_params(&model.store);
            let fwd = model.forward(&mut g, &batch, &ForwardOptions::train()).unwrap();
            let vars = model.composite_loss(&mut g, &fwd, &batch, 11).unwrap();
            let v = match name {
                "total" => Some(vars.total),
                "p" => Some(vars.predictive),
                "de" => vars.decouple_total,
                "est" => vars.estimator_total,
                "eh" => vars.enhancer,
                "bal" => vars.balance,
                "sam" => vars.sample,
                _ => vars.same,
            };
            let gr = g.backward(v.unwrap()).unwrap();
            model.store.ids().map(|id| gr.param(id).cloned().unwrap_or_else(|| {
                let t = model.store.value(id);
                Tensor::zeros(t.rows(), t.cols())
            })).collect::<Vec<_>>()
        };
        let w = [1.0, cfg.beta_de, cfg.beta_est, cfg.beta_eh, cfg.beta_moe, cfg.beta_moe, cfg.beta_moe];
        let parts: Vec<_> = ["p", "de", "est", "eh", "bal", "sam", "same"].iter().map(|n| grads(n)).collect();
        let total = grads("total");
        let mut worst = 0.0f64;
        for (pi, t) in total.iter().enumerate() {
            for (k, &v) in t.data().iter().enumerate() {
                let s: f64 = parts.iter().zip(&w).map(|(p, wi)| wi * p[pi].data()[k]).sum();
                worst = worst.max((s - v).abs() / v.abs().max(1.0));
            }
        }
        holds(worst < 1e-6, || format!("relative gap {worst}"))
    });
    push("without MQ-MoE the shared expert is used and routing terms vanish", {
        let c = ablate(&cfg, &["wo_mqmoe"]).unwrap();
        let (r, _, mixed, model, fused) = run(&c);
        let shared = match &model.router {
            Router::Shared(e) => {
                let mut g = Graph::with_params(&model.store);
                let x = g.constant(fused);
                let y = e.forward(&mut g, x).unwrap();
                g.value(y).clone()
            }
            Router::Moe(_) => Tensor::zeros(0, 0),
        };
        holds(
            shared == mixed && r.balance.is_none() && r.sample.is_none() && r.same.is_none(),
            || "routing still present".into(),
        )
    });
    push("without L_same the same-config term vanishes from the total", {
        let c = ablate(&cfg, &["wo_l_same"]).unwrap();
        let r = run(&c).0;
        holds(r.same.is_none() && r.balance.is_some(), || "L_same present".into())
            .and(close(r.total, r.recomputed_total()))
    });
    push("without rank-guided training only anchors and L_m remain", {
        let c = ablate(&cfg, &["wo_rank_guided_training"]).unwrap();
        let r = run(&c).0;
        let est = r.estimator.clone().unwrap_or_default();
        holds(
            !est.is_empty() && est.iter().all(|t| t.rank.is_none() && t.corruption_rank.is_none()),
            || "rank terms present".into(),
        )
    });
    push("metrics of a perfect predictor", {
        let y = [1.5, -2.0, 0.3, 2.9];
        let m = regression_metrics(&y, &y);
        holds(
            m.acc7 == Some(1.0) && m.acc2 == Some(1.0) && m.f1 == Some(1.0) && m.mae == Some(0.0),
            || format!("{m:?}"),
        )
        .and(close(m.corr.unwrap_or(0.0), 1.0))
    });
    push("metrics of predictions [1.2, −0.5] for labels [1, −1]", {
        let m = regression_metrics(&[1.2, -0.5], &[1.0, -1.0]);
        close(m.mae.unwrap(), 0.35)
            .and(holds(m.acc2 == Some(1.0) && m.acc7 == Some(1.0), || format!("{m:?}")))
    });
}

/// Every closed-form check, in module order.
pub fn all() -> Vec<Check> {
    let mut out = Vec::new();
    tensor_checks(&mut out);
    dataio_checks(&mut out);
    corruption_checks(&mut out);
    decouple_checks(&mut out);
    estimator_checks(&mut out);
    enhancer_checks(&mut out);
    moe_checks(&mut out);
    pipeline_checks(&mut out);
    out
}
