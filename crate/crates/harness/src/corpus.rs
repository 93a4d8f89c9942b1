//! Synthetic product-description corpus: attribute lists mapped to short
//! templated descriptions, split across clients.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use fedllm_core::model::encode;
use fedllm_core::trainers::{derive_seed, Sequence};

use crate::error::{HarnessError, Result};

struct Topic {
    items: &'static [&'static str],
    materials: &'static [&'static str],
    styles: &'static [&'static str],
}

const COLORS: &[&str] = &["red", "blue", "green", "black", "white", "gray", "tan", "pink"];

/// Topics 0..4 are client domains; 4 and 5 are public and only used for pretraining.
const TOPICS: [Topic; 6] = [
    Topic {
        items: &["shirt", "dress", "scarf", "jacket", "skirt", "coat"],
        materials: &["cotton", "silk", "wool", "linen", "denim"],
        styles: &["casual", "classic", "slim", "loose"],
    },
    Topic {
        items: &["lamp", "chair", "table", "shelf", "sofa", "rug"],
        materials: &["oak", "pine", "steel", "glass", "rattan"],
        styles: &["modern", "rustic", "minimal", "retro"],
    },
    Topic {
        items: &["kettle", "pan", "knife", "bowl", "mug", "pot"],
        materials: &["iron", "copper", "clay", "bamboo", "enamel"],
        styles: &["handy", "sturdy", "compact", "pro"],
    },
    Topic {
        items: &["tent", "pack", "boot", "lantern", "hammock", "tarp"],
        materials: &["nylon", "canvas", "leather", "mesh", "fleece"],
        styles: &["rugged", "light", "dry", "trail"],
    },
    Topic {
        items: &["puzzle", "kite", "robot", "doll", "ball", "train"],
        materials: &["wood", "felt", "rubber", "tin", "foam"],
        styles: &["playful", "tiny", "bright", "quiet"],
    },
    Topic {
        items: &["pot", "hose", "rake", "bench", "planter", "spade"],
        materials: &["terra", "zinc", "cedar", "resin", "stone"],
        styles: &["sunny", "hardy", "tidy", "rustic"],
    },
];

/// Client-domain topics.
pub const CLIENT_TOPICS: usize = 4;
const PUBLIC_TOPICS: [usize; 2] = [4, 5];
pub const TEMPLATES_PER_TOPIC: usize = 3;

/// One attribute-list → description pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub topic: usize,
    /// Globally unique: `topic * TEMPLATES_PER_TOPIC + k`.
    pub template: usize,
    pub prompt: String,
    pub completion: String,
}

impl Sample {
    pub fn tokens(&self) -> Sequence {
        encode(format!("{}{}", self.prompt, self.completion).as_bytes())
    }
}

fn sample(topic: usize, rng: &mut ChaCha8Rng) -> Sample {
    let t = &TOPICS[topic];
    let item = t.items.choose(rng).expect("non-empty");
    let color = COLORS.choose(rng).expect("non-empty");
    let material = t.materials.choose(rng).expect("non-empty");
    let style = t.styles.choose(rng).expect("non-empty");
    let k = rng.random_range(0..TEMPLATES_PER_TOPIC);
    let completion = match k {
        0 => format!("a {color} {material} {item}, {style}."),
        1 => format!("this {style} {item} is {material}."),
        _ => format!("{style} {item} in {color} {material}."),
    };
    Sample {
        topic,
        template: topic * TEMPLATES_PER_TOPIC + k,
        prompt: format!("{item},{color},{material},{style}="),
        completion,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    /// All client topics mixed, shuffled and cut by the split fractions.
    #[default]
    Random,
    /// Client `i` only sees topics `t` with `t % num_clients == i`.
    DisjointTopic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_clients: usize,
    /// Training samples across all clients.
    pub samples: usize,
    pub split: Split,
    /// Share of `samples` per client; equal shares when absent.
    pub fractions: Option<Vec<f64>>,
    /// Held-out samples drawn from each client's distribution.
    pub test_per_client: usize,
    /// Public-topic samples for pretraining the base models.
    pub public_samples: usize,
    /// Client-domain samples the server may use as a public proxy set.
    pub proxy_samples: usize,
    /// Tab-separated `prompt<TAB>completion` lines replacing the synthetic
    /// client data. Public and proxy sets stay synthetic.
    pub pairs_file: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_clients: 2,
            samples: 4000,
            split: Split::Random,
            fractions: None,
            test_per_client: 100,
            public_samples: 512,
            proxy_samples: 128,
            pairs_file: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(HarnessError::Config("num_clients must be at least 1".into()));
        }
        if self.split == Split::DisjointTopic && self.num_clients > CLIENT_TOPICS {
            return Err(HarnessError::Config(format!(
                "a disjoint-topic split supports at most {CLIENT_TOPICS} clients, got {}",
                self.num_clients
            )));
        }
        if let Some(f) = &self.fractions {
            if f.len() != self.num_clients {
                return Err(HarnessError::Config(format!("{} fractions for {} clients", f.len(), self.num_clients)));
            }
            if f.iter().any(|&x| !(x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(HarnessError::Config(format!("split fractions must be non-negative and sum to 1, got {f:?}")));
            }
        }
        Ok(())
    }

    /// Samples per client; the last client takes the rounding remainder.
    pub fn client_sizes(&self) -> Vec<usize> {
        self.sizes_for(self.samples)
    }

    fn sizes_for(&self, total: usize) -> Vec<usize> {
        let n = self.num_clients;
        let fracs = self.fractions.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
        let mut sizes: Vec<usize> = fracs[..n - 1].iter().map(|f| (f * total as f64).round() as usize).collect();
        let used: usize = sizes.iter().sum();
        sizes.push(total.saturating_sub(used));
        sizes
    }

    /// Topics client `i` draws from.
    pub fn client_topics(&self, i: usize) -> Vec<usize> {
        match self.split {
            Split::Random => (0..CLIENT_TOPICS).collect(),
            Split::DisjointTopic => (0..CLIENT_TOPICS).filter(|t| t % self.num_clients == i).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub clients: Vec<Vec<Sample>>,
    /// Held-out samples of every client, concatenated in client order.
    pub test: Vec<Sample>,
    pub public: Vec<Sample>,
    pub proxy: Vec<Sample>,
}

fn draw(topics: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..n).map(|_| sample(*topics.choose(rng).expect("non-empty"), rng)).collect()
}

/// Reads `prompt<TAB>completion` lines; blank lines are skipped.
pub fn load_pairs(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.split_once('\t') {
            Some((p, c)) => Ok(Sample { topic: 0, template: 0, prompt: p.into(), completion: c.into() }),
            None => Err(HarnessError::Config(format!("{}:{}: expected prompt<TAB>completion", path.display(), i + 1))),
        })
        .collect()
}

fn split_into(all: &[Sample], sizes: &[usize]) -> Vec<Vec<Sample>> {
    let mut rest = all;
    sizes
        .iter()
        .map(|&n| {
            let (head, tail) = rest.split_at(n.min(rest.len()));
            rest = tail;
            head.to_vec()
        })
        .collect()
}

pub fn generate_corpus(spec: &DatasetSpec) -> Result<Corpus> {
    spec.validate()?;
    let rng = |part: u64| ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[part]));
    let all_client: Vec<usize> = (0..spec.num_clients).flat_map(|i| spec.client_topics(i)).collect();
    if let Some(path) = &spec.pairs_file {
        let mut all = load_pairs(path)?;
        all.shuffle(&mut rng(0));
        let n_test = (spec.test_per_client * spec.num_clients).min(all.len() / 2);
        let test = all.split_off(all.len() - n_test);
        let clients = split_into(&all, &spec.sizes_for(all.len()));
        return Ok(Corpus {
            clients,
            test,
            public: draw(&PUBLIC_TOPICS, spec.public_samples, &mut rng(1)),
            proxy: draw(&all_client, spec.proxy_samples, &mut rng(2)),
        });
    }
    let sizes = spec.client_sizes();
    let clients = match spec.split {
        Split::Random => {
            let mut r = rng(0);
            let mut all = draw(&spec.client_topics(0), spec.samples, &mut r);
            all.shuffle(&mut r);
            split_into(&all, &sizes)
        }
        Split::DisjointTopic => sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| draw(&spec.client_topics(i), n, &mut rng(10 + i as u64)))
            .collect(),
    };
    let mut test = Vec::new();
    for i in 0..spec.num_clients {
        test.extend(draw(&spec.client_topics(i), spec.test_per_client, &mut rng(100 + i as u64)));
    }
    Ok(Corpus {
        clients,
        test,
        public: draw(&PUBLIC_TOPICS, spec.public_samples, &mut rng(1)),
        proxy: draw(&all_client, spec.proxy_samples, &mut rng(2)),
    })
}

pub fn tokenize(samples: &[Sample]) -> Vec<Sequence> {
    samples.iter().map(Sample::tokens).collect()
}

/// Writes each part of `corpus` as JSON lines into `dir` and returns the
/// file names written.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut parts: Vec<(String, &[Sample])> =
        corpus.clients.iter().enumerate().map(|(i, c)| (format!("client-{}.jsonl", i + 1), c.as_slice())).collect();
    parts.push(("test.jsonl".into(), &corpus.test));
    parts.push(("public.jsonl".into(), &corpus.public));
    parts.push(("proxy.jsonl".into(), &corpus.proxy));
    for (name, samples) in &parts {
        let text: String = samples.iter().map(|s| serde_json::to_string(s).expect("plain data") + "\n").collect();
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(parts.into_iter().map(|(n, _)| n).collect())
}

/// Longest possible sample in bytes, over every vocabulary combination.
pub fn max_sample_len() -> usize {
    let longest = |xs: &[&str]| xs.iter().map(|s| s.len()).max().unwrap_or(0);
    let color = longest(COLORS);
    TOPICS
        .iter()
        .map(|t| {
            let (i, m, s) = (longest(t.items), longest(t.materials), longest(t.styles));
            let prompt = i + color + m + s + 4;
            let completions = [color + m + i + s + 7, s + i + m + 11, s + i + color + m + 7];
            prompt + completions.into_iter().max().expect("three templates")
        })
        .max()
        .expect("topics")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_fit_the_desk_context() {
        assert!(max_sample_len() <= 64, "{}", max_sample_len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for topic in 0..TOPICS.len() {
            for _ in 0..200 {
                assert!(sample(topic, &mut rng).tokens().len() <= max_sample_len());
            }
        }
    }

    #[test]
    fn random_split_is_exact() {
        let c = generate_corpus(&DatasetSpec::default()).unwrap();
        assert_eq!(c.clients.iter().map(Vec::len).collect::<Vec<_>>(), vec![2000, 2000]);
        let spec = DatasetSpec { samples: 10, num_clients: 3, fractions: Some(vec![0.5, 0.25, 0.25]), ..DatasetSpec::default() };
        assert_eq!(spec.client_sizes(), vec![5, 3, 2]);
    }

    #[test]
    fn disjoint_topics_share_no_templates() {
        let spec = DatasetSpec { split: Split::DisjointTopic, samples: 400, ..DatasetSpec::default() };
        let c = generate_corpus(&spec).unwrap();
        let t0: std::collections::BTreeSet<usize> = c.clients[0].iter().map(|s| s.template).collect();
        let t1: std::collections::BTreeSet<usize> = c.clients[1].iter().map(|s| s.template).collect();
        assert!(t0.is_disjoint(&t1));
        assert!(c.public.iter().all(|s| s.topic >= CLIENT_TOPICS));
    }

    #[test]
    fn same_seed_same_shards() {
        let spec = DatasetSpec { samples: 50, ..DatasetSpec::default() };
        assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
        let other = DatasetSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_corpus(&spec).unwrap().clients, generate_corpus(&other).unwrap().clients);
    }

    #[test]
    fn pairs_file_replaces_client_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        let lines: String = (0..20).map(|i| format!("p{i}=\tc{i}.\n")).collect();
        std::fs::write(&path, lines).unwrap();
        let spec = DatasetSpec { pairs_file: Some(path.clone()), test_per_client: 2, ..DatasetSpec::default() };
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(c.test.len(), 4);
        assert_eq!(c.clients.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8]);
        std::fs::write(&path, "no tab here\n").unwrap();
        assert!(matches!(generate_corpus(&spec), Err(HarnessError::Config(_))));
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let spec = DatasetSpec { fractions: Some(vec![0.5, 0.6]), ..DatasetSpec::default() };
        assert!(matches!(spec.validate(), Err(HarnessError::Config(_))));
        let spec = DatasetSpec { num_clients: 0, ..DatasetSpec::default() };
        assert!(spec.validate().is_err());
    }
}
