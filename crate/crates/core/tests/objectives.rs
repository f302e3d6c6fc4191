use candle_core::{Device, Tensor};
use mcle_core::contrastive::ProjectionHead;
use mcle_core::data::{generate_synthetic, SyntheticConfig};
use mcle_core::gradcheck::{check_gradients, sample_coordinates};
use mcle_core::mining::FactualSplit;
use mcle_core::model::HEAD_LEVELS;
use mcle_core::objectives::{image_cl, instance_cl, semantic_cl};
use mcle_core::train::{batch_loss, Ablations};
use mcle_core::{Backbone, ClLevel, ModelConfig, Precision, RunConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn tensor(m: &Mat) -> Tensor {
    let (r, c) = (m.len(), m[0].len());
    Tensor::from_vec(m.concat(), (r, c), &Device::Cpu).unwrap()
}

fn oracle_project(seq: &Mat, w: &Mat, b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let mut out = vec![0.0; d];
    for row in seq {
        for j in 0..d {
            let z: f64 = row.iter().zip(w).map(|(x, wr)| x * wr[j]).sum::<f64>() + b[j];
            out[j] += z.max(0.0) / seq.len() as f64;
        }
    }
    out
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn oracle_infonce(anchor: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let sp = oracle_cos(anchor, pos) / tau;
    let denom: f64 = std::iter::once(sp)
        .chain(negs.iter().map(|n| oracle_cos(anchor, n) / tau))
        .map(f64::exp)
        .sum();
    denom.ln() - sp
}

struct Fixture {
    w: Mat,
    b: Vec<f64>,
    head: ProjectionHead,
    tau: f64,
}

fn fixture(rng: &mut ChaCha8Rng, d: usize) -> Fixture {
    let w = random(rng, d, d);
    let b: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..0.5)).collect();
    Fixture {
        head: ProjectionHead {
            weight: tensor(&w),
            bias: Tensor::new(b.as_slice(), &Device::Cpu).unwrap(),
        },
        w,
        b,
        tau: 0.2,
    }
}

fn tau_t(f: &Fixture) -> Tensor {
    Tensor::new(f.tau, &Device::Cpu).unwrap()
}

#[test]
fn level_losses_match_manual_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 6;
    for _ in 0..20 {
        let f = fixture(&mut rng, d);
        let anchor = random(&mut rng, 7, d);
        let pos = random(&mut rng, 3, d);
        let negs: Vec<Mat> = (0..3).map(|_| random(&mut rng, 3, d)).collect();
        let p = |m: &Mat| oracle_project(m, &f.w, &f.b);
        let expected = oracle_infonce(&p(&anchor), &p(&pos), &negs.iter().map(p).collect::<Vec<_>>(), f.tau);

        let negs_t: Vec<Tensor> = negs.iter().map(tensor).collect();
        let sem = semantic_cl(&tensor(&anchor), &tensor(&pos), &negs_t, &f.head, &tau_t(&f)).unwrap();
        let img = image_cl(&tensor(&anchor), &tensor(&pos), &negs_t, &f.head, &tau_t(&f)).unwrap();
        for got in [sem, img] {
            let got = got.to_scalar::<f64>().unwrap();
            assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        }
    }
}

#[test]
fn instance_loss_matches_manual_masking() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 5;
    for _ in 0..20 {
        let f = fixture(&mut rng, d);
        let z_v = random(&mut rng, 3, d);
        let z_q = random(&mut rng, 4, d);
        let mask = random(&mut rng, 1, d).remove(0);
        let anchor = random(&mut rng, 6, d);
        let (objs, words) = (vec![0, 2], vec![1, 3]);

        let mut fact = Vec::new();
        let mut cf = Vec::new();
        for (rows, kept) in [(&z_v, &objs), (&z_q, &words)] {
            for (i, r) in rows.iter().enumerate() {
                let keep = kept.contains(&i);
                fact.push(if keep { r.clone() } else { mask.clone() });
                cf.push(if keep { mask.clone() } else { r.clone() });
            }
        }
        let p = |m: &Mat| oracle_project(m, &f.w, &f.b);
        let expected = oracle_infonce(&p(&anchor), &p(&fact), &[p(&cf)], f.tau);

        let mask_t = Tensor::new(mask.as_slice(), &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let split = FactualSplit::from_kept(&tensor(&z_v), &tensor(&z_q), objs, words, &mask_t).unwrap();
        let got = instance_cl(&tensor(&anchor), &split, &f.head, &tau_t(&f))
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }
}

#[test]
fn identical_candidates_cost_log_k_plus_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let f = fixture(&mut rng, 4);
    let anchor = tensor(&random(&mut rng, 5, 4));
    let pos = tensor(&random(&mut rng, 2, 4));
    for k in [1usize, 3] {
        let negs = vec![pos.clone(); k];
        let got = semantic_cl(&anchor, &pos, &negs, &f.head, &tau_t(&f))
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((got - ((k + 1) as f64).ln()).abs() < 1e-9, "K={k}: {got}");
    }
}

fn tiny_trainer(ablations: Ablations, seed: u64) -> Trainer {
    let train = generate_synthetic(seed, 24, &SyntheticConfig::default());
    let cfg = RunConfig {
        model: ModelConfig {
            d: 8,
            n_layers: 2,
            n_heads: 2,
            ..ModelConfig::default()
        },
        batch_size: 6,
        ablations,
        precision: Precision::F64,
        seed,
        ..RunConfig::default()
    };
    Trainer::new(cfg, train, &[]).unwrap()
}

#[test]
fn disabled_levels_leave_their_heads_untouched() {
    for (flags, off) in [
        (Ablations { no_semantic: true, ..Ablations::default() }, ClLevel::Semantic),
        (Ablations { no_image: true, ..Ablations::default() }, ClLevel::Image),
        (Ablations { no_instance: true, ..Ablations::default() }, ClLevel::Instance),
    ] {
        let mut t = tiny_trainer(flags, 4);
        let members: Vec<usize> = (0..6).collect();
        let mat = t.batch_material(&members).unwrap();
        let loss = batch_loss(&t.model, t.samples(), &mat, &t.config.loss_config()).unwrap();
        let grads = loss.total.backward().unwrap();
        for level in HEAD_LEVELS {
            for name in ProjectionHead::param_names(level_of(level)) {
                let g = grads.get(t.model.params().var(&name).unwrap().as_tensor());
                let norm = g.map(|g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap());
                if level_of(level) == off {
                    assert!(norm.unwrap_or(0.0) == 0.0, "{name} moved with {off:?} disabled");
                } else {
                    assert!(norm.unwrap_or(0.0) > 0.0, "{name} has no gradient");
                }
            }
        }
    }
}

fn level_of(name: &str) -> ClLevel {
    [ClLevel::Semantic, ClLevel::Image, ClLevel::Instance]
        .into_iter()
        .find(|l| l.name() == name)
        .unwrap()
}

#[test]
fn every_component_gradient_matches_finite_differences() {
    let mut t = tiny_trainer(Ablations::default(), 5);
    let members: Vec<usize> = (0..6).collect();
    let mat = t.batch_material(&members).unwrap();
    let cfg = t.config.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for c in 0..5 {
        let coords = sample_coordinates(t.model.params(), 12, &mut rng, |_| true);
        let report = check_gradients(t.model.params(), &coords, 1e-5, 1e-6, || {
            let l = batch_loss(&t.model, t.samples(), &mat, &cfg)?;
            Ok(match c {
                4 => l.total,
                k => l.components[k].clone().expect("all levels contribute"),
            })
        })
        .unwrap();
        assert!(report.max_rel_err() <= 1e-4, "component {c}: {:?}", report.worst());
    }
}
