//! Seeded synthetic data: planted factor models, drifting cohorts and a
//! small forum corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::corpus::{Cohort, Post, UserTimeline};
use crate::efa::FactorScoreMatrix;
use crate::forecast::MONTH_SECS;
use crate::itembank::ItemBank;
use crate::linalg::Matrix;

/// `factors` disjoint blocks of `per_factor` items, each loading `loading`
/// on its own factor only.
pub fn block_loadings(factors: usize, per_factor: usize, loading: f64) -> Matrix<f64> {
    Matrix::from_fn(factors * per_factor, factors, |i, j| if i / per_factor == j { loading } else { 0.0 })
}

/// `n` rows of `x = Λf + e` with standard normal factors and noise scaled
/// to unit item variance.
pub fn sample_factor_model(loadings: &Matrix<f64>, n: usize, seed: u64) -> Matrix<f64> {
    let (p, k) = (loadings.rows(), loadings.cols());
    let uniq: Vec<f64> =
        (0..p).map(|i| (1.0 - loadings.row(i).iter().map(|v| v * v).sum::<f64>()).max(0.0).sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, p);
    let mut f = vec![0.0; k];
    for r in 0..n {
        for v in f.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for i in 0..p {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[(r, i)] = loadings.row(i).iter().zip(&f).map(|(l, v)| l * v).sum::<f64>() + uniq[i] * e;
        }
    }
    x
}

/// Joiners whose first `drift_factors` factor means ramp linearly from 0 to
/// `amplitude` over the `ramp_months` before t0 and stay there afterwards;
/// controls are stationary.
#[derive(Clone, Debug)]
pub struct DriftSpec {
    pub joiners: usize,
    pub controls: usize,
    pub k: usize,
    pub drift_factors: usize,
    pub amplitude: f64,
    pub ramp_months: f64,
    pub months_before: u32,
    pub months_after: u32,
    pub posts_per_month: (usize, usize),
    pub user_sd: f64,
    pub post_sd: f64,
    pub seed: u64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        DriftSpec {
            joiners: 82,
            controls: 100,
            k: 3,
            drift_factors: 2,
            amplitude: 2.5,
            ramp_months: 18.0,
            months_before: 24,
            months_after: 12,
            posts_per_month: (2, 6),
            user_sd: 0.5,
            post_sd: 1.0,
            seed: 0,
        }
    }
}

pub struct DriftData {
    pub timelines: Vec<UserTimeline>,
    pub scores: FactorScoreMatrix<f64>,
}

impl DriftSpec {
    /// Planted joiner mean of a drifting factor at `offset` months from t0.
    pub fn drift_at(&self, offset: f64) -> f64 {
        if offset >= 0.0 {
            self.amplitude
        } else {
            self.amplitude * ((offset + self.ramp_months) / self.ramp_months).clamp(0.0, 1.0)
        }
    }

    pub fn generate(&self) -> DriftData {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let user_noise = Normal::new(0.0, self.user_sd).expect("sd >= 0");
        let post_noise = Normal::new(0.0, self.post_sd).expect("sd >= 0");
        let mut timelines = Vec::new();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let total = self.joiners + self.controls;
        for u in 0..total {
            let cohort = if u < self.joiners { Cohort::Joiner } else { Cohort::Control };
            let user = format!("{}{u:04}", if cohort == Cohort::Joiner { "j" } else { "c" });
            let t0 = 1_500_000_000 + rng.random_range(0..(24 * MONTH_SECS));
            let base: Vec<f64> = (0..self.k).map(|_| user_noise.sample(&mut rng)).collect();
            let mut posts = Vec::new();
            for m in -(self.months_before as i64)..(self.months_after as i64) {
                let count = rng.random_range(self.posts_per_month.0..=self.posts_per_month.1);
                for _ in 0..count {
                    let ts = t0 + m * MONTH_SECS + rng.random_range(0..MONTH_SECS);
                    let offset = (ts - t0) as f64 / MONTH_SECS as f64;
                    let id = format!("{user}-{}", posts.len());
                    let row: Vec<f64> = (0..self.k)
                        .map(|j| {
                            let drift =
                                if cohort == Cohort::Joiner && j < self.drift_factors { self.drift_at(offset) } else { 0.0 };
                            base[j] + drift + post_noise.sample(&mut rng)
                        })
                        .collect();
                    ids.push(id.clone());
                    rows.push(row);
                    posts.push(Post {
                        id,
                        user: user.clone(),
                        forum: "synthetic".into(),
                        created_utc: ts,
                        text: String::new(),
                        lang: Some("en".into()),
                    });
                }
            }
            posts.sort_by(|a, b| (a.created_utc, &a.id).cmp(&(b.created_utc, &b.id)));
            timelines.push(UserTimeline { user, posts, t0: Some(t0), cohort });
        }
        let scores = FactorScoreMatrix {
            post_ids: ids,
            factor_names: (1..=self.k).map(|j| format!("F{j}")).collect(),
            scores: Matrix::from_rows(&rows).expect("rectangular"),
            model_fingerprint: "synthetic".into(),
        };
        DriftData { timelines, scores }
    }
}

/// Controls only, with `joiners` of them picked at random and labelled as
/// joiners: a cohort with no signal.
pub fn relabel_controls(timelines: &[UserTimeline], joiners: usize, seed: u64) -> Vec<UserTimeline> {
    use rand::seq::SliceRandom;
    let mut controls: Vec<UserTimeline> = timelines.iter().filter(|t| t.cohort == Cohort::Control).cloned().collect();
    let mut order: Vec<usize> = (0..controls.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for &i in order.iter().take(joiners) {
        controls[i].cohort = Cohort::Joiner;
    }
    controls
}

/// Forum corpus with users who later move into `target_forum`.
#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub posts: usize,
    pub users: usize,
    /// Share of users who eventually post in the target forum.
    pub joiner_share: f64,
    pub forums: Vec<String>,
    pub target_forum: String,
    pub start_utc: i64,
    pub span_months: i64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            posts: 10_000,
            users: 120,
            joiner_share: 0.5,
            forums: ["general", "politics", "news", "gaming"].iter().map(|s| s.to_string()).collect(),
            target_forum: "target".into(),
            start_utc: 1_420_070_400,
            span_months: 36,
            seed: 0,
        }
    }
}

const FILLER: &[&str] = &[
    "the", "a", "and", "to", "of", "in", "is", "that", "it", "was", "for", "on", "with", "as", "this", "but",
    "they", "have", "from", "or", "one", "had", "by", "word", "what", "all", "were", "when", "we", "there", "can",
    "an", "your", "which", "their", "said", "if", "do", "will", "each", "about", "how", "up", "out", "then",
    "them", "she", "many", "some", "so", "these", "would", "other", "into", "has", "more", "her", "two", "like",
    "him", "see", "time", "could", "no", "make", "than", "first", "been", "its", "who", "now", "people", "my",
    "made", "over", "did", "down", "only", "way", "find", "use", "may", "water", "long", "little", "very",
    "after", "called", "just", "where", "most", "know", "game", "team", "season", "thread", "post", "today",
];

/// Posts whose text mixes filler with words from one scale's items; each
/// forum leans toward a few scales, and joiners drift toward the target
/// forum's scales as their t0 approaches. Controls keep to one forum until a
/// mid-span switch time, then split between it and a second one.
pub fn synthetic_corpus(spec: &CorpusSpec, bank: &ItemBank) -> Vec<Post> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scales: Vec<String> = bank.items().iter().map(|i| i.scale.clone()).collect();
    scales.dedup();
    let scale_words: Vec<Vec<String>> = scales
        .iter()
        .map(|s| {
            bank.items()
                .iter()
                .filter(|i| &i.scale == s)
                .flat_map(|i| i.text.split_whitespace().map(|w| w.to_lowercase()))
                .collect()
        })
        .collect();
    let n_forums = spec.forums.len();
    let forum_scales: Vec<Vec<usize>> =
        (0..=n_forums).map(|f| (0..3).map(|j| (f * 3 + j) % scales.len()).collect()).collect();
    let span = spec.span_months * MONTH_SECS;
    let joiners = (spec.users as f64 * spec.joiner_share).round() as usize;
    // (name, joining time, home forum, control's switch time and new forum)
    type SynthUser = (String, Option<i64>, usize, (i64, usize));
    let users: Vec<SynthUser> = (0..spec.users)
        .map(|u| {
            let when = spec.start_utc + span / 2 + rng.random_range(0..span / 3);
            let home = rng.random_range(0..n_forums);
            let other = (home + 1 + rng.random_range(0..n_forums.max(2) - 1)) % n_forums;
            (format!("user{u:04}"), (u < joiners).then_some(when), home, (when, other))
        })
        .collect();

    let mut posts = Vec::with_capacity(spec.posts);
    for i in 0..spec.posts {
        let (user, t0, home, (switch, other)) = &users[i % spec.users];
        let ts = spec.start_utc + rng.random_range(0..span);
        let forum_idx = match t0 {
            Some(t0) if ts >= *t0 && rng.random_bool(0.6) => n_forums,
            Some(_) if rng.random_bool(0.7) => *home,
            Some(_) => rng.random_range(0..n_forums),
            None if ts >= *switch && rng.random_bool(0.5) => *other,
            None => *home,
        };
        // pull toward target scales as t0 approaches
        let lean = match t0 {
            Some(t0) => (1.0 - ((t0 - ts) as f64 / (12 * MONTH_SECS) as f64)).clamp(0.0, 1.0),
            None => 0.0,
        };
        let len = rng.random_range(12..=180);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.random_bool(0.55) {
                words.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
            } else {
                let pool = if rng.random_bool(0.6 * lean) { &forum_scales[n_forums] } else { &forum_scales[forum_idx] };
                let s = pool[rng.random_range(0..pool.len())];
                let ws = &scale_words[s];
                words.push(ws[rng.random_range(0..ws.len())].clone());
            }
        }
        let forum = if forum_idx == n_forums { spec.target_forum.clone() } else { spec.forums[forum_idx].clone() };
        posts.push(Post {
            id: format!("t3_{i:06}"),
            user: user.clone(),
            forum,
            created_utc: ts,
            text: words.join(" "),
            lang: Some("en".into()),
        });
    }
    posts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::efa::correlation_matrix;

    #[test]
    fn factor_model_reproduces_correlation() {
        let l = block_loadings(2, 3, 0.7);
        let x = sample_factor_model(&l, 20_000, 1);
        let r = correlation_matrix(&x).unwrap();
        assert!((r.r[(0, 1)] - 0.49).abs() < 0.03);
        assert!(r.r[(0, 3)].abs() < 0.03);
        assert_eq!(sample_factor_model(&l, 10, 5), sample_factor_model(&l, 10, 5));
    }

    #[test]
    fn drift_shape() {
        let spec = DriftSpec::default();
        assert_eq!(spec.drift_at(-30.0), 0.0);
        assert_eq!(spec.drift_at(-9.0), spec.amplitude / 2.0);
        assert_eq!(spec.drift_at(3.0), spec.amplitude);
        let d = DriftSpec { joiners: 3, controls: 4, ..Default::default() }.generate();
        assert_eq!(d.timelines.len(), 7);
        let posts: usize = d.timelines.iter().map(|t| t.posts.len()).sum();
        assert_eq!(posts, d.scores.rows());
    }

    #[test]
    fn corpus_is_deterministic() {
        let bank = ItemBank::canonical();
        let spec = CorpusSpec { posts: 300, users: 20, ..Default::default() };
        let a = synthetic_corpus(&spec, &bank);
        assert_eq!(a, synthetic_corpus(&spec, &bank));
        assert_eq!(a.len(), 300);
        assert!(a.iter().all(|p| p.word_count() >= 12));
        assert!(a.iter().any(|p| p.forum == "target"));
    }
}
