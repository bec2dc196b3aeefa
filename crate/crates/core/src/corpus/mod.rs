//! Deterministic synthetic corpus of captioned motions, plus held-out styled
//! exemplars for token inversion.

mod kinematics;
mod spec;
mod store;

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use kinematics::{pose_deviation, stepping_speed, synthesize, Jitter, Synthesized};
pub use spec::{
    phrase, render_caption, render_template, template_count, Action, ActionSpec, SpeedLevel,
    Style, PLACEHOLDER, SUBJECTS,
};
pub use store::{load_corpus, save_corpus};

use crate::error::{Error, Result};
use crate::motion::RawMotion;
use crate::rng;

pub const MIN_TRAIN: usize = 256;
pub const MIN_TEST: usize = 64;
/// Distinct test captions needed by the retrieval metric.
pub const MIN_TEST_CAPTIONS: usize = 32;

const STREAM_ITEM: u64 = 0xC0;
const STREAM_SPLIT: u64 = 0xC1;
const STREAM_EXEMPLAR: u64 = 0xC2;
const STREAM_ORDER: u64 = 0xC3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train_items: usize,
    pub test_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub fps: f64,
    /// Half-width of the uniform jitter: relative for amplitudes, radians for
    /// oscillation phase.
    pub jitter: f64,
    /// Upper bound on distinct caption words.
    pub vocab_bound: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_items: MIN_TRAIN,
            test_items: MIN_TEST,
            min_len: 40,
            max_len: 120,
            fps: 20.0,
            jitter: 0.05,
            vocab_bound: 64,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_items < MIN_TRAIN || self.test_items < MIN_TEST {
            return Err(Error::InvalidArgument(format!(
                "corpus needs at least {MIN_TRAIN} train and {MIN_TEST} test items, got {} and {}",
                self.train_items, self.test_items
            )));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "bad length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if !(self.fps > 0.0) || !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::InvalidArgument(format!(
                "fps {} must be > 0 and jitter {} in [0, 1)",
                self.fps, self.jitter
            )));
        }
        Ok(())
    }

    pub fn total_items(&self) -> usize {
        self.train_items + self.test_items
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub id: usize,
    pub spec: ActionSpec,
    pub template_id: usize,
    pub caption: String,
    pub motion: RawMotion,
    /// Generator stance labels; not persisted.
    pub stance: Option<Vec<[bool; 2]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub items: Vec<CorpusItem>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Styled walks, one per style; never part of either split.
    pub exemplars: Vec<CorpusItem>,
}

impl Corpus {
    pub fn item(&self, id: usize) -> &CorpusItem {
        &self.items[id]
    }

    pub fn train_items(&self) -> impl Iterator<Item = &CorpusItem> {
        self.train.iter().map(|&i| &self.items[i])
    }

    pub fn test_items(&self) -> impl Iterator<Item = &CorpusItem> {
        self.test.iter().map(|&i| &self.items[i])
    }

    /// Every word appearing in captions or inversion templates.
    pub fn words(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for item in self.items.iter().chain(&self.exemplars) {
            for w in crate::textenc::tokenize_words(&item.caption) {
                out.insert(w);
            }
        }
        for t in 0..template_count() {
            for w in crate::textenc::tokenize_words(&render_template(t)) {
                if w != PLACEHOLDER {
                    out.insert(w);
                }
            }
        }
        out
    }
}

fn draw_jitter(r: &mut rng::StreamRng, half_width: f64) -> Jitter {
    Jitter {
        amplitude: rng::uniform(r, 1.0 - half_width, 1.0 + half_width),
        phase: rng::uniform(r, -half_width, half_width) / (2.0 * PI),
    }
}

fn make_item(
    id: usize,
    spec: ActionSpec,
    template_id: usize,
    r: &mut rng::StreamRng,
    config: &CorpusConfig,
) -> CorpusItem {
    let jitter = draw_jitter(r, config.jitter);
    let theta0 = rng::uniform(r, -PI, PI);
    let synth = synthesize(&spec, jitter, config.fps, theta0);
    CorpusItem {
        id,
        spec,
        template_id,
        caption: render_caption(&spec, template_id),
        motion: synth.motion,
        stance: synth.stance,
    }
}

/// Unstyled twin of a styled exemplar: same spec, template, jitter and heading.
pub fn unstyled_reference(corpus: &Corpus, exemplar: usize) -> CorpusItem {
    let ex = &corpus.exemplars[exemplar];
    let mut r = rng::stream(corpus.seed, &[STREAM_EXEMPLAR, exemplar as u64]);
    let spec = ActionSpec { style: None, ..ex.spec };
    make_item(ex.id, spec, ex.template_id, &mut r, &corpus.config)
}

/// Builds the corpus for `(config, seed)`. Item `i` uses the `i mod 30`-th
/// entry of a seeded ordering of all (action, speed) pairs, so every pair is
/// represented evenly.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut pairs: Vec<(Action, SpeedLevel)> = Action::ALL
        .iter()
        .flat_map(|&a| SpeedLevel::ALL.iter().map(move |&s| (a, s)))
        .collect();
    rng::shuffle(&mut rng::stream(seed, &[STREAM_ORDER]), &mut pairs);
    let items: Vec<CorpusItem> = (0..config.total_items())
        .map(|i| {
            let mut r = rng::stream(seed, &[STREAM_ITEM, i as u64]);
            let (action, speed) = pairs[i % pairs.len()];
            let spec = ActionSpec {
                action,
                speed,
                duration_frames: rng::uniform_int(&mut r, config.min_len, config.max_len),
                style: None,
            };
            let template_id = rng::uniform_int(&mut r, 0, template_count() - 1);
            make_item(i, spec, template_id, &mut r, config)
        })
        .collect();
    let exemplars = Style::ALL
        .iter()
        .enumerate()
        .map(|(k, &style)| {
            let mut r = rng::stream(seed, &[STREAM_EXEMPLAR, k as u64]);
            let spec = ActionSpec {
                action: Action::Walk,
                speed: SpeedLevel::Normal,
                duration_frames: config.max_len,
                style: Some(style),
            };
            make_item(k, spec, 0, &mut r, config)
        })
        .collect();
    let mut corpus = Corpus {
        config: config.clone(),
        seed,
        items,
        train: Vec::new(),
        test: Vec::new(),
        exemplars,
    };
    let ratio = config.train_items as f64 / config.total_items() as f64;
    let (train, test) = split(&corpus, ratio, seed)?;
    corpus.train = train;
    corpus.test = test;
    let words = corpus.words().len();
    if words > config.vocab_bound {
        return Err(Error::InvalidArgument(format!(
            "captions use {words} words, above the bound {}",
            config.vocab_bound
        )));
    }
    Ok(corpus)
}

/// Seeded disjoint split; the test side must hold enough distinct captions.
pub fn split(corpus: &Corpus, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} must be in (0, 1)")));
    }
    let mut ids: Vec<usize> = corpus.items.iter().map(|it| it.id).collect();
    rng::shuffle(&mut rng::stream(seed, &[STREAM_SPLIT]), &mut ids);
    let n_train = (ratio * ids.len() as f64).round() as usize;
    let test = ids.split_off(n_train);
    let distinct: BTreeSet<&str> = test.iter().map(|&i| corpus.items[i].caption.as_str()).collect();
    if distinct.len() < MIN_TEST_CAPTIONS {
        return Err(Error::InvalidArgument(format!(
            "test split has {} distinct captions, need {MIN_TEST_CAPTIONS}; enlarge the corpus",
            distinct.len()
        )));
    }
    Ok((ids, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{detect_foot_contacts, encode_features, Skeleton};

    fn small() -> Corpus {
        generate_corpus(&CorpusConfig::default(), 7).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(), small());
    }

    #[test]
    fn below_minimum_is_rejected() {
        let cfg = CorpusConfig {
            train_items: 10,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&cfg, 0).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_covering() {
        let c = small();
        assert_eq!(c.train.len(), 256);
        assert_eq!(c.test.len(), 64);
        let mut all: Vec<usize> = c.train.iter().chain(&c.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..320).collect::<Vec<_>>());
    }

    #[test]
    fn split_ratio_and_replay() {
        let c = small();
        let (a, b) = split(&c, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (256, 64));
        assert_eq!(split(&c, 0.8, 3).unwrap(), (a, b));
        assert!(split(&c, 1.0, 3).is_err());
    }

    #[test]
    fn idle_root_is_static() {
        let c = small();
        let sk = Skeleton::default_seven();
        let idle = c.items.iter().find(|it| it.spec.action == Action::Idle).unwrap();
        let f = encode_features(&idle.motion, &sk, 0.02).unwrap();
        for t in 0..f.frames() {
            for k in 0..3 {
                assert!(f.data.get(t, k).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn walk_speed_ratio_matches_configuration() {
        let spec = |s| ActionSpec {
            action: Action::Walk,
            speed: s,
            duration_frames: 100,
            style: None,
        };
        let j = Jitter {
            amplitude: 1.04,
            phase: -0.03,
        };
        let fast = synthesize(&spec(SpeedLevel::Fast), j, 20.0, 0.4).motion.mean_root_speed();
        let slow = synthesize(&spec(SpeedLevel::Slow), j, 20.0, -1.0).motion.mean_root_speed();
        let want = stepping_speed(Action::Walk, SpeedLevel::Fast)
            / stepping_speed(Action::Walk, SpeedLevel::Slow);
        assert!(((fast / slow) / want - 1.0).abs() < 0.01);
    }

    #[test]
    fn walk_contacts_match_generator_stance() {
        let sk = Skeleton::default_seven();
        for speed in SpeedLevel::ALL {
            let spec = ActionSpec {
                action: Action::Walk,
                speed,
                duration_frames: 120,
                style: None,
            };
            let s = synthesize(&spec, Jitter::NONE, 20.0, 0.3);
            let stance = s.stance.unwrap();
            let c = detect_foot_contacts(&s.motion, &sk, 0.02).unwrap();
            let mut agree = 0;
            let mut duty = 0.0;
            for t in 0..stance.len() {
                for f in 0..2 {
                    agree += usize::from((c[t][f] == 1.0) == stance[t][f]);
                    duty += c[t][f];
                }
            }
            let frac = agree as f64 / (2 * stance.len()) as f64;
            assert!(frac >= 0.9, "{speed:?}: agreement {frac}");
            let duty = duty / (2 * stance.len()) as f64;
            assert!((duty - 0.6).abs() <= 0.1, "{speed:?}: duty {duty}");
        }
    }

    #[test]
    fn styled_walks_deviate_from_plain_walks() {
        let mk = |style, j: Jitter| {
            let spec = ActionSpec {
                action: Action::Walk,
                speed: SpeedLevel::Normal,
                duration_frames: 100,
                style,
            };
            synthesize(&spec, j, 20.0, 0.0).motion
        };
        let j1 = Jitter {
            amplitude: 0.96,
            phase: 0.04 / (2.0 * PI),
        };
        let j2 = Jitter {
            amplitude: 1.04,
            phase: -0.04 / (2.0 * PI),
        };
        let base = pose_deviation(&mk(None, j1), &mk(None, j2));
        for style in Style::ALL {
            let d = pose_deviation(&mk(Some(style), j1), &mk(None, j1));
            assert!(d > 5.0 * base, "{style:?}: {d} vs {base}");
        }
    }

    #[test]
    fn exemplars_are_styled_and_outside_splits() {
        let c = small();
        assert_eq!(c.exemplars.len(), 4);
        assert!(c.exemplars.iter().all(|e| e.spec.style.is_some()));
        assert!(c.items.iter().all(|e| e.spec.style.is_none()));
        let r = unstyled_reference(&c, 0);
        assert_eq!(r.spec.style, None);
        assert_eq!(r.caption, c.exemplars[0].caption);
    }

    #[test]
    fn vocabulary_is_bounded() {
        let c = small();
        assert!(c.words().len() <= c.config.vocab_bound);
    }
}
