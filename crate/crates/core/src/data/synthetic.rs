use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, FeatureMatrix, RawSample, SplitKind};

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const COUNT_WORDS: [&str; 5] = ["zero", "one", "two", "three", "four"];

/// Parameters of the synthetic shapes world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Object slots per scene.
    pub m: usize,
    /// Half-width of the uniform noise added to every feature.
    pub noise: f32,
    pub split: SplitKind,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            m: 3,
            noise: 0.05,
            split: SplitKind::Train,
            id_prefix: "syn".into(),
        }
    }
}

impl SyntheticConfig {
    /// Feature width: shape one-hot, color one-hot, slot one-hot.
    pub fn d_raw(&self) -> usize {
        SHAPES.len() + COLORS.len() + self.m
    }
}

type Object = (usize, usize);
type Scene = Vec<Option<Object>>;

fn random_scene(rng: &mut ChaCha8Rng, m: usize, allowed: impl Fn(Object) -> bool) -> Scene {
    let n_objects = rng.random_range(1..=m);
    let mut slots: Vec<usize> = (0..m).collect();
    slots.shuffle(rng);
    let mut scene = vec![None; m];
    for &slot in &slots[..n_objects] {
        // rejection sampling terminates: every template leaves >= 2 admissible objects
        loop {
            let obj = (rng.random_range(0..SHAPES.len()), rng.random_range(0..COLORS.len()));
            if allowed(obj) {
                scene[slot] = Some(obj);
                break;
            }
        }
    }
    scene
}

fn free_slots(scene: &Scene) -> Vec<usize> {
    (0..scene.len()).filter(|&i| scene[i].is_none()).collect()
}

struct Rendered {
    scene: Scene,
    question: String,
    answer: String,
    explanation: String,
}

fn exists_sample(rng: &mut ChaCha8Rng, m: usize, variant: usize) -> Rendered {
    let (s, c) = (rng.random_range(0..SHAPES.len()), rng.random_range(0..COLORS.len()));
    let present = variant % 2 == 0;
    let mut scene = random_scene(rng, m, |o| o != (s, c));
    if present {
        let slot = rng.random_range(0..m);
        scene[slot] = Some((s, c));
    }
    let (answer, explanation) = if present {
        ("yes", format!("there is a {} {}", COLORS[c], SHAPES[s]))
    } else {
        ("no", format!("there is no {} {}", COLORS[c], SHAPES[s]))
    };
    Rendered {
        scene,
        question: format!("is there a {} {}", COLORS[c], SHAPES[s]),
        answer: answer.into(),
        explanation,
    }
}

fn color_sample(rng: &mut ChaCha8Rng, m: usize, variant: usize) -> Rendered {
    let s = rng.random_range(0..SHAPES.len());
    let c = variant % COLORS.len();
    let mut scene = random_scene(rng, m, |o| o.0 != s);
    let slot = rng.random_range(0..m);
    scene[slot] = Some((s, c));
    Rendered {
        scene,
        question: format!("what color is the {}", SHAPES[s]),
        answer: COLORS[c].into(),
        explanation: format!("the {} is {}", SHAPES[s], COLORS[c]),
    }
}

fn count_sample(rng: &mut ChaCha8Rng, m: usize, variant: usize) -> Rendered {
    let s = rng.random_range(0..SHAPES.len());
    let n = variant % (m.min(3) + 1);
    let mut scene: Scene = vec![None; m];
    let mut slots: Vec<usize> = (0..m).collect();
    slots.shuffle(rng);
    for &slot in &slots[..n] {
        scene[slot] = Some((s, rng.random_range(0..COLORS.len())));
    }
    let free = free_slots(&scene);
    if !free.is_empty() {
        let extra = rng.random_range(0..=free.len());
        for &slot in &free[..extra] {
            let other = (s + rng.random_range(1..SHAPES.len())) % SHAPES.len();
            scene[slot] = Some((other, rng.random_range(0..COLORS.len())));
        }
    }
    let explanation = if n == 1 {
        format!("there is one {} object", SHAPES[s])
    } else {
        format!("there are {} {} objects", COUNT_WORDS[n], SHAPES[s])
    };
    Rendered {
        scene,
        question: format!("how many {} objects are there", SHAPES[s]),
        answer: COUNT_WORDS[n].into(),
        explanation,
    }
}

fn shape_sample(rng: &mut ChaCha8Rng, m: usize, variant: usize) -> Rendered {
    let c = rng.random_range(0..COLORS.len());
    let s = variant % SHAPES.len();
    let mut scene = random_scene(rng, m, |o| o.1 != c);
    let slot = rng.random_range(0..m);
    scene[slot] = Some((s, c));
    Rendered {
        scene,
        question: format!("what shape is the {} object", COLORS[c]),
        answer: SHAPES[s].into(),
        explanation: format!("the {} object is a {}", COLORS[c], SHAPES[s]),
    }
}

fn render_features(scene: &Scene, noise: f32, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let m = scene.len();
    let d_raw = SHAPES.len() + COLORS.len() + m;
    let mut data = vec![0f32; m * d_raw];
    for (slot, obj) in scene.iter().enumerate() {
        let row = &mut data[slot * d_raw..(slot + 1) * d_raw];
        if let Some((s, c)) = obj {
            row[*s] = 1.0;
            row[SHAPES.len() + c] = 1.0;
        }
        row[SHAPES.len() + COLORS.len() + slot] = 1.0;
        if noise > 0.0 {
            for v in row.iter_mut() {
                *v += rng.random_range(-noise..=noise);
            }
        }
    }
    FeatureMatrix {
        rows: m,
        cols: d_raw,
        data,
    }
}

/// Deterministic shapes-world split. Sample `i` uses template `i % 4` and
/// cycles its target answer with `i / 4`, so every template shows at least
/// two distinct answers once `n >= 8`.
pub fn generate_synthetic(seed: u64, n: usize, cfg: &SyntheticConfig) -> DatasetSplit {
    assert!(n >= 1, "synthetic split needs at least one sample");
    assert!(cfg.m >= 2, "synthetic scenes need at least two slots");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut features = BTreeMap::new();
    for i in 0..n {
        let variant = i / 4;
        let r = match i % 4 {
            0 => exists_sample(&mut rng, cfg.m, variant),
            1 => color_sample(&mut rng, cfg.m, variant),
            2 => count_sample(&mut rng, cfg.m, variant),
            _ => shape_sample(&mut rng, cfg.m, variant),
        };
        let image_ref = format!("{}-img-{i:05}", cfg.id_prefix);
        features.insert(image_ref.clone(), render_features(&r.scene, cfg.noise, &mut rng));
        samples.push(RawSample {
            sample_id: format!("{}-{i:05}", cfg.id_prefix),
            image_ref,
            question: r.question,
            answer: r.answer,
            explanations: vec![r.explanation],
            split: cfg.split,
        });
    }
    DatasetSplit { samples, features }
        .finalize()
        .expect("synthetic split is well-formed")
}

fn index_of(table: &[&str], word: &str) -> Option<usize> {
    table.iter().position(|t| *t == word)
}

/// Checks that `explanation` is the template explanation that entails
/// `answer` for `question`. Unknown templates are rejected.
pub fn check_entailment(question: &str, explanation: &str, answer: &str) -> bool {
    let q: Vec<&str> = question.split_whitespace().collect();
    let expected = match q.as_slice() {
        ["is", "there", "a", color, shape] => {
            if index_of(&COLORS, color).is_none() || index_of(&SHAPES, shape).is_none() {
                return false;
            }
            match answer {
                "yes" => format!("there is a {color} {shape}"),
                "no" => format!("there is no {color} {shape}"),
                _ => return false,
            }
        }
        ["what", "color", "is", "the", shape] => {
            if index_of(&COLORS, answer).is_none() || index_of(&SHAPES, shape).is_none() {
                return false;
            }
            format!("the {shape} is {answer}")
        }
        ["how", "many", shape, "objects", "are", "there"] => {
            if index_of(&SHAPES, shape).is_none() {
                return false;
            }
            match index_of(&COUNT_WORDS, answer) {
                Some(1) => format!("there is one {shape} object"),
                Some(_) => format!("there are {answer} {shape} objects"),
                None => return false,
            }
        }
        ["what", "shape", "is", "the", color, "object"] => {
            if index_of(&SHAPES, answer).is_none() || index_of(&COLORS, color).is_none() {
                return false;
            }
            format!("the {color} object is a {answer}")
        }
        _ => return false,
    };
    expected == explanation
}

/// Recovers the scene from rendered features (noise below 0.5 assumed).
#[cfg(test)]
fn decode_scene(f: &FeatureMatrix) -> Scene {
    (0..f.rows)
        .map(|r| {
            let row = f.row(r);
            let s = (0..SHAPES.len()).find(|&k| row[k] > 0.5)?;
            let c = (0..COLORS.len()).find(|&k| row[SHAPES.len() + k] > 0.5)?;
            Some((s, c))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    #[test]
    fn deterministic_given_seed() {
        let cfg = SyntheticConfig::default();
        assert_eq!(generate_synthetic(7, 500, &cfg), generate_synthetic(7, 500, &cfg));
        assert_ne!(generate_synthetic(7, 50, &cfg), generate_synthetic(8, 50, &cfg));
    }

    #[test]
    fn every_template_has_two_answers() {
        let split = generate_synthetic(7, 500, &SyntheticConfig::default());
        let mut answers: HashMap<String, BTreeSet<String>> = HashMap::new();
        for s in &split.samples {
            let template: String = s.question.split_whitespace().take(2).collect();
            answers.entry(template).or_default().insert(s.answer.clone());
        }
        assert_eq!(answers.len(), 4);
        for (t, a) in answers {
            assert!(a.len() >= 2, "template {t} has answers {a:?}");
        }
    }

    #[test]
    fn explanations_entail_answers() {
        let split = generate_synthetic(3, 500, &SyntheticConfig::default());
        for s in &split.samples {
            assert!(
                check_entailment(&s.question, &s.explanations[0], &s.answer),
                "{s:?}"
            );
        }
        assert!(!check_entailment("is there a red circle", "there is a red circle", "no"));
        assert!(!check_entailment("why", "because", "yes"));
    }

    #[test]
    fn answers_agree_with_scene() {
        let split = generate_synthetic(11, 400, &SyntheticConfig::default());
        for s in &split.samples {
            let scene = decode_scene(split.features_of(s));
            let objs: Vec<Object> = scene.iter().flatten().copied().collect();
            let q: Vec<&str> = s.question.split_whitespace().collect();
            let truth = match q.as_slice() {
                ["is", "there", "a", c, sh] => {
                    let o = (index_of(&SHAPES, sh).unwrap(), index_of(&COLORS, c).unwrap());
                    if objs.contains(&o) { "yes" } else { "no" }.to_string()
                }
                ["what", "color", "is", "the", sh] => {
                    let sh = index_of(&SHAPES, sh).unwrap();
                    let hits: Vec<_> = objs.iter().filter(|o| o.0 == sh).collect();
                    assert_eq!(hits.len(), 1);
                    COLORS[hits[0].1].to_string()
                }
                ["how", "many", sh, "objects", "are", "there"] => {
                    let sh = index_of(&SHAPES, sh).unwrap();
                    COUNT_WORDS[objs.iter().filter(|o| o.0 == sh).count()].to_string()
                }
                ["what", "shape", "is", "the", c, "object"] => {
                    let c = index_of(&COLORS, c).unwrap();
                    let hits: Vec<_> = objs.iter().filter(|o| o.1 == c).collect();
                    assert_eq!(hits.len(), 1);
                    SHAPES[hits[0].0].to_string()
                }
                _ => unreachable!(),
            };
            assert_eq!(truth, s.answer, "{s:?}");
        }
    }

    #[test]
    fn red_circle_template() {
        let split = generate_synthetic(5, 400, &SyntheticConfig::default());
        let s = split
            .samples
            .iter()
            .find(|s| s.question == "is there a red circle" && s.answer == "yes")
            .expect("template instance present");
        assert_eq!(s.explanations[0], "there is a red circle");
    }
}
