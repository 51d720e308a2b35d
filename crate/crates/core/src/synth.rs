//! Deterministic stand-in for pre-trained encoders.
//!
//! Every image shows two objects (size, colour, material, shape) in a spatial
//! relation. Images come in twins: `2i` and `2i + 1` share both objects and
//! differ only in the relation (`left` ↔ `right`, `front` ↔ `behind`).
//!
//! Each vocabulary term owns a latent vector, and each relation family owns a
//! position code `c`. In "A left of B" the region showing A carries `+c` and
//! the region showing B carries `−c`; the flipped twin swaps the signs. Words
//! naming A or B carry the same signed code, as a contextual text encoder
//! would. Summed over regions the codes cancel, so telling twins apart needs
//! each word matched to its own region. Global vectors are noisy views of the
//! scene latent with only a weak relation component.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::{Corpus, DescriptionFeatures, ImageFeatures};
use crate::tensor::Tensor;

const SIZES: [&str; 3] = ["large", "small", "tiny"];
const COLORS: [&str; 10] = [
    "red", "blue", "green", "yellow", "purple", "cyan", "brown", "gray", "orange", "white",
];
const MATERIALS: [&str; 3] = ["metal", "rubber", "glass"];
const SHAPES: [&str; 10] = [
    "cube", "sphere", "cylinder", "cone", "torus", "pyramid", "disk", "ring", "prism", "block",
];
const RELATIONS: [[&str; 2]; 2] = [["left", "right"], ["front", "behind"]];
const FILLERS: [&str; 4] = ["the", "a", "is", "of"];

const LATENT: usize = 16;
const GLOBAL_RELATION_WEIGHT: f64 = 0.3;
const GLOBAL_NOISE: f64 = 0.35;
const REGION_NOISE: f64 = 0.25;
const WORD_NOISE: f64 = 0.25;
const POSITION_WEIGHT: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub descriptions_per_image: usize,
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
    /// Words per description.
    pub n: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 200,
            descriptions_per_image: 2,
            d1: 32,
            d2: 64,
            k: 9,
            n: 5,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    size: usize,
    color: usize,
    material: usize,
    shape: usize,
}

struct Vocabulary {
    terms: Vec<&'static str>,
    latents: Vec<Vec<f64>>,
    /// One position code per relation family.
    positions: Vec<Vec<f64>>,
}

impl Vocabulary {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut terms: Vec<&'static str> = Vec::new();
        terms.extend(SIZES);
        terms.extend(COLORS);
        terms.extend(MATERIALS);
        terms.extend(SHAPES);
        terms.extend(RELATIONS.iter().flatten());
        terms.extend(FILLERS);
        let latents = terms.iter().map(|_| unit_gaussian(rng, LATENT)).collect();
        let positions = RELATIONS.iter().map(|_| unit_gaussian(rng, LATENT)).collect();
        Vocabulary {
            terms,
            latents,
            positions,
        }
    }

    fn latent(&self, term: &str) -> &[f64] {
        let i = self.terms.iter().position(|t| *t == term).expect("term in vocabulary");
        &self.latents[i]
    }

    fn object(&self, o: &Object) -> Vec<f64> {
        let mut v = vec![0.0; LATENT];
        for term in [SIZES[o.size], COLORS[o.color], MATERIALS[o.material], SHAPES[o.shape]] {
            add_into(&mut v, self.latent(term), 0.5);
        }
        v
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
    let n = crate::tensor::norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn add_into(acc: &mut [f64], x: &[f64], w: f64) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += w * b);
}

/// Random `[rows × LATENT]` map scaled to roughly preserve norms.
fn random_map(rng: &mut ChaCha8Rng, rows: usize) -> Vec<Vec<f64>> {
    let s = 1.0 / (LATENT as f64).sqrt();
    (0..rows)
        .map(|_| (0..LATENT).map(|_| s * gauss(rng)).collect())
        .collect()
}

fn apply(map: &[Vec<f64>], latent: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    map.iter()
        .map(|row| crate::tensor::dot(row, latent) + noise * gauss(rng))
        .collect()
}

/// Generates a planted corpus; identical configs give identical corpora.
pub fn synth_corpus(config: &SynthConfig) -> Result<Corpus> {
    let (images, descriptions) = generate(config)?;
    Corpus::from_pairs(images, descriptions)
}

/// A training corpus of `config.num_images` images and a held-out corpus of
/// `test_images` further images drawn from the same vocabulary and feature
/// maps. The training corpus equals [`synth_corpus`] for the same config.
/// Keep `config.num_images` even so no twin pair is split.
pub fn synth_split(config: &SynthConfig, test_images: usize) -> Result<(Corpus, Corpus)> {
    if test_images == 0 {
        return Err(Error::Param("test_images must be ≥ 1".into()));
    }
    let total = SynthConfig {
        num_images: config.num_images + test_images,
        ..*config
    };
    let (images, descriptions) = generate(&total)?;
    let cut = config.num_images as u64;
    let (train_i, test_i): (Vec<_>, Vec<_>) = images.into_iter().partition(|i| i.id < cut);
    let (train_d, test_d): (Vec<_>, Vec<_>) = descriptions.into_iter().partition(|d| d.image_id < cut);
    Ok((Corpus::from_pairs(train_i, train_d)?, Corpus::from_pairs(test_i, test_d)?))
}

fn generate(config: &SynthConfig) -> Result<(Vec<ImageFeatures>, Vec<DescriptionFeatures>)> {
    let SynthConfig {
        num_images,
        descriptions_per_image,
        d1,
        d2,
        k,
        n,
        seed,
    } = *config;
    for (name, v) in [
        ("num_images", num_images),
        ("descriptions_per_image", descriptions_per_image),
        ("d1", d1),
        ("d2", d2),
        ("k", k),
        ("n", n),
    ] {
        if v == 0 {
            return Err(Error::Param(format!("{name} must be ≥ 1")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::new(&mut rng);
    let global_map = random_map(&mut rng, d1);
    let region_map = random_map(&mut rng, d2);
    let word_map = random_map(&mut rng, d1);

    let mut images = Vec::with_capacity(num_images);
    let mut descriptions = Vec::with_capacity(num_images * descriptions_per_image);
    let mut scene = None;

    for img in 0..num_images {
        // even images draw a fresh scene, odd images reuse it with the relation flipped
        let (a, b, family, flip) = match scene {
            Some((a, b, family, flip)) if img % 2 == 1 => (a, b, family, 1 - flip),
            _ => {
                let a = random_object(&mut rng);
                let b = random_object(&mut rng);
                let family = rng.random_range(0..RELATIONS.len());
                let flip = rng.random_range(0..2);
                scene = Some((a, b, family, flip));
                (a, b, family, flip)
            }
        };
        let relation = RELATIONS[family][flip];
        let (lat_a, lat_b) = (vocab.object(&a), vocab.object(&b));
        let lat_rel = vocab.latent(relation);
        // signed position code of object A; object B carries the opposite sign
        let sign_a = if flip == 0 { 1.0 } else { -1.0 };
        let code = &vocab.positions[family];

        let mut scene_latent = vec![0.0; LATENT];
        add_into(&mut scene_latent, &lat_a, 1.0);
        add_into(&mut scene_latent, &lat_b, 1.0);
        add_into(&mut scene_latent, lat_rel, GLOBAL_RELATION_WEIGHT);

        let global = apply(&global_map, &scene_latent, GLOBAL_NOISE, &mut rng);

        let mut slots: Vec<usize> = (0..k).collect();
        slots.shuffle(&mut rng);
        let mut region_latents: Vec<Vec<f64>> = (0..k).map(|_| {
            let mut v = unit_gaussian(&mut rng, LATENT);
            v.iter_mut().for_each(|x| *x *= 0.3);
            v
        }).collect();
        for ((content, sign), slot) in [(&lat_a, sign_a), (&lat_b, -sign_a)].into_iter().zip(slots.iter().cycle()) {
            add_into(&mut region_latents[*slot], content, 1.0);
            add_into(&mut region_latents[*slot], code, sign * POSITION_WEIGHT);
        }
        let regions: Vec<Vec<f64>> = region_latents
            .iter()
            .map(|l| apply(&region_map, l, REGION_NOISE, &mut rng))
            .collect();

        let id = img as u64;
        images.push(ImageFeatures {
            id,
            global,
            regions: Tensor::from_rows(&regions)?,
        });

        for variant in 0..descriptions_per_image {
            let tokens = description_tokens(&a, &b, relation, variant, n);
            let words: Vec<Vec<f64>> = tokens
                .iter()
                .map(|(t, role)| {
                    let mut latent = vocab.latent(t).to_vec();
                    match role {
                        Role::A => add_into(&mut latent, code, sign_a * POSITION_WEIGHT),
                        Role::B => add_into(&mut latent, code, -sign_a * POSITION_WEIGHT),
                        Role::None => {}
                    }
                    apply(&word_map, &latent, WORD_NOISE, &mut rng)
                })
                .collect();
            let text: Vec<&str> = tokens.iter().map(|(t, _)| *t).collect();
            descriptions.push(DescriptionFeatures {
                id: (img * descriptions_per_image + variant) as u64,
                image_id: id,
                global: apply(&global_map, &scene_latent, GLOBAL_NOISE, &mut rng),
                words: Tensor::from_rows(&words)?,
                text: text.join(" "),
            });
        }
    }
    Ok((images, descriptions))
}

fn random_object(rng: &mut ChaCha8Rng) -> Object {
    Object {
        size: rng.random_range(0..SIZES.len()),
        color: rng.random_range(0..COLORS.len()),
        material: rng.random_range(0..MATERIALS.len()),
        shape: rng.random_range(0..SHAPES.len()),
    }
}

/// Which object a token describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    A,
    B,
    None,
}

/// Exactly `n` tokens: the most informative ones first, emitted in sentence order.
fn description_tokens(a: &Object, b: &Object, relation: &'static str, variant: usize, n: usize) -> Vec<(&'static str, Role)> {
    // sentence slots: 0 "the" 1 sizeA 2 colorA 3 materialA 4 shapeA 5 "is" 6 rel 7 "of"
    //                 8 "a" 9 sizeB 10 colorB 11 materialB 12 shapeB
    let sentence: [&'static str; 13] = [
        "the",
        SIZES[a.size],
        COLORS[a.color],
        MATERIALS[a.material],
        SHAPES[a.shape],
        "is",
        relation,
        "of",
        "a",
        SIZES[b.size],
        COLORS[b.color],
        MATERIALS[b.material],
        SHAPES[b.shape],
    ];
    let attribute_pairs = [[2, 10], [1, 9], [3, 11]];
    let mut priority = vec![4, 6, 12];
    for i in 0..attribute_pairs.len() {
        priority.extend(attribute_pairs[(i + variant) % attribute_pairs.len()]);
    }
    priority.extend([0, 5, 7, 8]);

    let mut chosen: Vec<usize> = priority.into_iter().take(n).collect();
    chosen.sort_unstable();
    let role = |i: usize| match i {
        1..=4 => Role::A,
        9..=12 => Role::B,
        _ => Role::None,
    };
    let mut tokens: Vec<(&'static str, Role)> = chosen.into_iter().map(|i| (sentence[i], role(i))).collect();
    while tokens.len() < n {
        tokens.push((FILLERS[tokens.len() % FILLERS.len()], Role::None));
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_images: 6,
            descriptions_per_image: 2,
            d1: 8,
            d2: 12,
            k: 4,
            n: 5,
            seed: 3,
        }
    }

    #[test]
    fn deterministic() {
        let a = synth_corpus(&small()).unwrap();
        let b = synth_corpus(&small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = synth_corpus(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn single_pair() {
        let c = synth_corpus(&SynthConfig {
            num_images: 1,
            descriptions_per_image: 1,
            ..small()
        })
        .unwrap();
        assert_eq!(c.images().len(), 1);
        assert_eq!(c.pair_count(), 1);
    }

    #[test]
    fn shapes_and_word_counts() {
        let c = synth_corpus(&small()).unwrap();
        assert_eq!(c.dims().k, 4);
        for d in c.descriptions() {
            assert_eq!(d.word_count(), 5);
            assert_eq!(d.text.split(' ').count(), 5);
        }
        let long = synth_corpus(&SynthConfig { n: 16, ..small() }).unwrap();
        assert!(long.descriptions().iter().all(|d| d.word_count() == 16));
    }

    #[test]
    fn twins_differ_only_in_relation_word() {
        let c = synth_corpus(&small()).unwrap();
        let t0 = &c.descriptions()[0].text;
        let t1 = &c.descriptions()[2].text;
        let diff: Vec<_> = t0.split(' ').zip(t1.split(' ')).filter(|(x, y)| x != y).collect();
        assert_eq!(diff.len(), 1, "{t0} / {t1}");
    }

    #[test]
    fn split_extends_the_training_corpus() {
        let train = synth_corpus(&small()).unwrap();
        let (a, b) = synth_split(&small(), 4).unwrap();
        assert_eq!(a.to_bytes(), train.to_bytes());
        assert_eq!(b.images().len(), 4);
        assert_eq!(b.images()[0].id, 6);
        assert_eq!(b.pair_count(), 8);
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(synth_corpus(&SynthConfig { k: 0, ..small() }).is_err());
        assert!(synth_corpus(&SynthConfig { num_images: 0, ..small() }).is_err());
    }
}
