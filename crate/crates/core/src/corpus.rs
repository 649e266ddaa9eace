//! Post ingestion, filtering and per-user timelines.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use chrono::{DateTime, Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::word_count;

/// 2010-01-01T00:00:00Z
pub const DEFAULT_MIN_DATE: i64 = 1_262_304_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub user: String,
    pub forum: String,
    pub created_utc: i64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
}

impl Post {
    pub fn word_count(&self) -> usize {
        word_count(&self.text)
    }
}

const REQUIRED: [&str; 5] = ["id", "user", "forum", "created_utc", "text"];

/// Parses one JSONL record. `line` is 1-based and only used for error context.
pub fn parse_post_record(json: &str, line: usize) -> Result<Post> {
    let value: Value = serde_json::from_str(json)
        .map_err(|e| Error::Record { line, message: format!("malformed JSON: {e}") })?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Record { line, message: "expected a JSON object".into() })?;
    for field in REQUIRED {
        if obj.get(field).is_none_or(Value::is_null) {
            return Err(Error::MissingField { field, line: Some(line) });
        }
    }
    let post: Post = serde_json::from_value(value)
        .map_err(|e| Error::Record { line, message: e.to_string() })?;
    if post.id.is_empty() {
        return Err(Error::Record { line, message: "empty id".into() });
    }
    if post.created_utc <= 0 {
        return Err(Error::Record { line, message: "created_utc must be positive".into() });
    }
    if post.text.trim().is_empty() {
        return Err(Error::Record { line, message: "empty text".into() });
    }
    Ok(post)
}

/// Result of reading a JSONL corpus.
#[derive(Debug, Default)]
pub struct ReadOutcome {
    pub posts: Vec<Post>,
    /// Skipped records (lenient mode only).
    pub errors: Vec<Error>,
}

/// Reads a JSONL corpus. Blank lines are skipped. In strict mode the first bad
/// record aborts; in lenient mode bad records are collected and skipped.
/// Duplicate ids are record errors.
pub fn read_posts<R: BufRead>(reader: R, lenient: bool) -> Result<ReadOutcome> {
    let mut out = ReadOutcome::default();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_post_record(&line, line_no).and_then(|p| {
            if seen.insert(p.id.clone()) {
                Ok(p)
            } else {
                Err(Error::Record { line: line_no, message: format!("duplicate id `{}`", p.id) })
            }
        });
        match parsed {
            Ok(p) => out.posts.push(p),
            Err(e) if lenient => out.errors.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn write_posts<'a, W: Write>(mut w: W, posts: impl IntoIterator<Item = &'a Post>) -> Result<()> {
    for p in posts {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_words: usize,
    pub min_date: i64,
    pub require_lang: Option<String>,
    pub forum_allowlist: Option<BTreeSet<String>>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_words: 10,
            min_date: DEFAULT_MIN_DATE,
            require_lang: Some("en".into()),
            forum_allowlist: None,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_words < 1 {
            return Err(Error::Config("min_words must be >= 1".into()));
        }
        if self.min_date < 0 {
            return Err(Error::Config("min_date must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    WordCount,
    Date,
    Lang,
    Forum,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::WordCount => "word_count",
            DropReason::Date => "date",
            DropReason::Lang => "lang",
            DropReason::Forum => "forum",
        }
    }
}

/// Streaming post filter. Counts drops per reason; each dropped post is
/// attributed to the first failing rule in the order word count, date,
/// language, forum.
#[derive(Debug)]
pub struct PostFilter<'a> {
    cfg: &'a FilterConfig,
    drops: BTreeMap<DropReason, u64>,
    kept: u64,
}

impl<'a> PostFilter<'a> {
    pub fn new(cfg: &'a FilterConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PostFilter { cfg, drops: BTreeMap::new(), kept: 0 })
    }

    pub fn check(&self, post: &Post) -> Option<DropReason> {
        let cfg = self.cfg;
        if post.word_count() < cfg.min_words {
            return Some(DropReason::WordCount);
        }
        if post.created_utc < cfg.min_date {
            return Some(DropReason::Date);
        }
        if let Some(lang) = &cfg.require_lang {
            if post.lang.as_deref() != Some(lang.as_str()) {
                return Some(DropReason::Lang);
            }
        }
        if let Some(allow) = &cfg.forum_allowlist {
            if !allow.contains(&post.forum) {
                return Some(DropReason::Forum);
            }
        }
        None
    }

    pub fn admit(&mut self, post: &Post) -> bool {
        match self.check(post) {
            Some(reason) => {
                *self.drops.entry(reason).or_default() += 1;
                false
            }
            None => {
                self.kept += 1;
                true
            }
        }
    }

    pub fn summary(&self) -> DropSummary {
        DropSummary {
            kept: self.kept,
            dropped: self.drops.iter().map(|(r, &c)| (r.as_str().to_string(), c)).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropSummary {
    pub kept: u64,
    pub dropped: BTreeMap<String, u64>,
}

impl DropSummary {
    pub fn count(&self, reason: DropReason) -> u64 {
        self.dropped.get(reason.as_str()).copied().unwrap_or(0)
    }
}

/// Keeps posts passing every rule in `cfg`, preserving order.
pub fn apply_filters(
    posts: impl IntoIterator<Item = Post>,
    cfg: &FilterConfig,
) -> Result<(Vec<Post>, DropSummary)> {
    let mut filter = PostFilter::new(cfg)?;
    let kept = posts.into_iter().filter(|p| filter.admit(p)).collect();
    Ok((kept, filter.summary()))
}

/// Months since year 0 for the UTC calendar month containing `ts`.
pub fn month_index(ts: i64) -> i64 {
    let dt = DateTime::from_timestamp(ts, 0).unwrap_or_default();
    dt.year() as i64 * 12 + dt.month0() as i64
}

pub fn month_index_of(date: NaiveDate) -> i64 {
    date.year() as i64 * 12 + date.month0() as i64
}

/// Engagement rule for selecting consistently active users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityRule {
    pub min_posts: usize,
    pub min_active_months: usize,
    pub window_months: usize,
    /// Fixed window start (month index). `None` slides the window over the
    /// user's history and accepts any position.
    #[serde(default)]
    pub window_start: Option<i64>,
}

impl ActivityRule {
    pub fn post_count_only(min_posts: usize) -> Self {
        ActivityRule { min_posts, min_active_months: 0, window_months: 0, window_start: None }
    }

    fn validate(&self) -> Result<()> {
        if self.window_months < self.min_active_months {
            return Err(Error::Config("window_months must be >= min_active_months".into()));
        }
        Ok(())
    }

    pub fn accepts(&self, posts: &[Post]) -> bool {
        if posts.len() < self.min_posts {
            return false;
        }
        if self.min_active_months == 0 {
            return true;
        }
        let months: BTreeSet<i64> = posts.iter().map(|p| month_index(p.created_utc)).collect();
        let w = self.window_months as i64;
        let active_in = |start: i64| months.range(start..start + w).count();
        match self.window_start {
            Some(start) => active_in(start) >= self.min_active_months,
            // only windows starting at an active month can be maximal
            None => months.iter().any(|&m| active_in(m) >= self.min_active_months),
        }
    }
}

pub fn group_by_user(posts: impl IntoIterator<Item = Post>) -> BTreeMap<String, Vec<Post>> {
    let mut by_user: BTreeMap<String, Vec<Post>> = BTreeMap::new();
    for p in posts {
        by_user.entry(p.user.clone()).or_default().push(p);
    }
    by_user
}

/// Users satisfying `rule`.
pub fn activity_filter(
    posts_by_user: &BTreeMap<String, Vec<Post>>,
    rule: &ActivityRule,
) -> Result<BTreeSet<String>> {
    rule.validate()?;
    Ok(posts_by_user
        .iter()
        .filter(|(_, posts)| rule.accepts(posts))
        .map(|(u, _)| u.clone())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Joiner,
    Control,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoiningRule {
    pub target_forums: BTreeSet<String>,
    pub cohort: Cohort,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserTimeline {
    pub user: String,
    pub posts: Vec<Post>,
    pub t0: Option<i64>,
    pub cohort: Cohort,
}

/// Export form of a timeline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineRecord {
    pub user: String,
    pub cohort: Cohort,
    pub t0: Option<i64>,
    pub post_ids: Vec<String>,
}

impl UserTimeline {
    pub fn record(&self) -> TimelineRecord {
        TimelineRecord {
            user: self.user.clone(),
            cohort: self.cohort,
            t0: self.t0,
            post_ids: self.posts.iter().map(|p| p.id.clone()).collect(),
        }
    }
}

/// Orders a user's posts and locates the joining event.
///
/// Joiners: first post in any target forum. Controls: first post in a forum
/// the user had not used before, ignoring target forums and requiring at
/// least one earlier post; falls back to the first non-target post.
pub fn build_timeline(mut posts: Vec<Post>, rule: &JoiningRule) -> Result<UserTimeline> {
    let user = match posts.first() {
        Some(p) => p.user.clone(),
        None => return Err(Error::InvalidInput("empty post list".into())),
    };
    if let Some(other) = posts.iter().find(|p| p.user != user) {
        return Err(Error::InvalidInput(format!("mixed users `{user}` and `{}`", other.user)));
    }
    posts.sort_by(|a, b| a.created_utc.cmp(&b.created_utc).then_with(|| a.id.cmp(&b.id)));

    let t0 = match rule.cohort {
        Cohort::Joiner => posts
            .iter()
            .find(|p| rule.target_forums.contains(&p.forum))
            .map(|p| p.created_utc),
        Cohort::Control => {
            let mut seen = BTreeSet::new();
            let mut first = None;
            let mut new_forum = None;
            for p in posts.iter().filter(|p| !rule.target_forums.contains(&p.forum)) {
                if first.is_none() {
                    first = Some(p.created_utc);
                } else if !seen.contains(p.forum.as_str()) {
                    new_forum = Some(p.created_utc);
                    break;
                }
                seen.insert(p.forum.as_str());
            }
            new_forum.or(first)
        }
    };
    Ok(UserTimeline { user, posts, t0, cohort: rule.cohort })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    pub(crate) fn post(id: &str, user: &str, forum: &str, ts: i64, words: usize) -> Post {
        Post {
            id: id.into(),
            user: user.into(),
            forum: forum.into(),
            created_utc: ts,
            text: vec!["w"; words].join(" "),
            lang: Some("en".into()),
        }
    }

    fn ts(y: i32, m: u32, d: u32) -> i64 {
        chrono::Utc.with_ymd_and_hms(y, m, d, 0, 0, 0).unwrap().timestamp()
    }

    #[test]
    fn parses_record() {
        let p = parse_post_record(
            r#"{"id":"a","user":"u1","forum":"f","created_utc":1467331200,"text":"hello world","extra":1}"#,
            1,
        )
        .unwrap();
        assert_eq!(p.id, "a");
        assert_eq!(p.created_utc, 1467331200);
        assert_eq!(p.text, "hello world");
        assert_eq!(p.lang, None);
    }

    #[test]
    fn text_is_byte_exact() {
        let p = parse_post_record(
            r#"{"id":"a","user":"u","forum":"f","created_utc":5,"text":"  café\n\tok  "}"#,
            1,
        )
        .unwrap();
        assert_eq!(p.text, "  café\n\tok  ");
    }

    #[test]
    fn missing_field_is_reported() {
        let e = parse_post_record(r#"{"id":"a","user":"u1"}"#, 3).unwrap_err();
        assert!(matches!(e, Error::MissingField { field: "forum", line: Some(3) }), "{e}");
    }

    #[test]
    fn malformed_json_has_line() {
        let e = parse_post_record("not json", 7).unwrap_err();
        assert!(matches!(e, Error::Record { line: 7, .. }));
    }

    #[test]
    fn lenient_reader_skips_bad_lines() {
        let input = concat!(
            r#"{"id":"a","user":"u","forum":"f","created_utc":5,"text":"x"}"#, "\n",
            "garbage\n",
            "\n",
            r#"{"id":"a","user":"u","forum":"f","created_utc":5,"text":"dup"}"#, "\n",
            r#"{"id":"b","user":"u","forum":"f","created_utc":6,"text":"y"}"#, "\n",
        );
        let out = read_posts(input.as_bytes(), true).unwrap();
        assert_eq!(out.posts.len(), 2);
        assert_eq!(out.errors.len(), 2);
        assert!(read_posts(input.as_bytes(), false).is_err());
    }

    #[test]
    fn word_and_date_boundaries() {
        let cfg = FilterConfig::default();
        let posts = vec![
            post("nine", "u", "f", ts(2016, 3, 1), 9),
            post("old", "u", "f", ts(2009, 12, 31), 20),
            post("ten", "u", "f", ts(2016, 3, 1), 10),
            post("edge", "u", "f", DEFAULT_MIN_DATE, 10),
        ];
        let (kept, summary) = apply_filters(posts, &cfg).unwrap();
        let ids: Vec<_> = kept.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["ten", "edge"]);
        assert_eq!(summary.count(DropReason::WordCount), 1);
        assert_eq!(summary.count(DropReason::Date), 1);
        assert_eq!(summary.kept, 2);
    }

    #[test]
    fn language_is_a_tag_check() {
        let mut p = post("a", "u", "f", ts(2016, 1, 1), 12);
        p.lang = None;
        let strict = FilterConfig::default();
        assert_eq!(PostFilter::new(&strict).unwrap().check(&p), Some(DropReason::Lang));
        let open = FilterConfig { require_lang: None, ..FilterConfig::default() };
        assert_eq!(PostFilter::new(&open).unwrap().check(&p), None);
    }

    #[test]
    fn forum_allowlist() {
        let cfg = FilterConfig {
            forum_allowlist: Some(["Lounge".to_string()].into()),
            ..FilterConfig::default()
        };
        let (kept, s) =
            apply_filters(vec![post("a", "u", "Talk", ts(2012, 1, 1), 12)], &cfg).unwrap();
        assert!(kept.is_empty());
        assert_eq!(s.count(DropReason::Forum), 1);
    }

    #[test]
    fn invalid_filter_config() {
        let cfg = FilterConfig { min_words: 0, ..FilterConfig::default() };
        assert!(apply_filters(Vec::new(), &cfg).is_err());
    }

    #[test]
    fn activity_rules() {
        let mut by_user = BTreeMap::new();
        // 12 posts in one month
        by_user.insert(
            "burst".to_string(),
            (0..12).map(|i| post(&format!("b{i}"), "burst", "f", ts(2015, 10, 1) + i, 12)).collect::<Vec<_>>(),
        );
        // one post per month for 20 of 24 months (skip months 5, 9, 13, 17)
        let monthly: Vec<Post> = (0..24)
            .filter(|m| ![5, 9, 13, 17].contains(m))
            .map(|m| post(&format!("m{m}"), "monthly", "f", ts(2014 + m / 12, (m % 12 + 1) as u32, 15), 12))
            .collect();
        by_user.insert("monthly".to_string(), monthly);
        by_user.insert(
            "sparse".to_string(),
            (0..9).map(|i| post(&format!("s{i}"), "sparse", "f", ts(2015, 1, 1) + i, 12)).collect(),
        );

        let ten = activity_filter(&by_user, &ActivityRule::post_count_only(10)).unwrap();
        assert!(ten.contains("burst") && ten.contains("monthly") && !ten.contains("sparse"));

        let rule = ActivityRule {
            min_posts: 10,
            min_active_months: 20,
            window_months: 24,
            window_start: Some(month_index(ts(2014, 1, 1))),
        };
        let got = activity_filter(&by_user, &rule).unwrap();
        assert_eq!(got.into_iter().collect::<Vec<_>>(), ["monthly"]);

        let strict = ActivityRule { min_active_months: 21, ..rule.clone() };
        assert!(activity_filter(&by_user, &strict).unwrap().is_empty());

        // sliding 10-of-12 window
        let sliding =
            ActivityRule { min_posts: 10, min_active_months: 10, window_months: 12, window_start: None };
        assert!(activity_filter(&by_user, &sliding).unwrap().contains("monthly"));

        let bad = ActivityRule { min_posts: 1, min_active_months: 5, window_months: 4, window_start: None };
        assert!(activity_filter(&by_user, &bad).is_err());
        assert!(activity_filter(&BTreeMap::new(), &rule).unwrap().is_empty());
    }

    #[test]
    fn joiner_t0_is_first_target_post() {
        let rule = JoiningRule { target_forums: ["incel".to_string()].into(), cohort: Cohort::Joiner };
        let posts = vec![post("c", "u", "incel", 5, 12), post("a", "u", "f1", 1, 12), post("b", "u", "f1", 2, 12)];
        let tl = build_timeline(posts, &rule).unwrap();
        assert_eq!(tl.t0, Some(5));
        assert_eq!(tl.cohort, Cohort::Joiner);
        assert_eq!(tl.record().post_ids, ["a", "b", "c"]);

        let none = build_timeline(vec![post("a", "u", "f1", 1, 12)], &rule).unwrap();
        assert_eq!(none.t0, None);
    }

    /// Brute-force reference: enumerate each forum's first appearance among
    /// non-target posts and take the earliest one that has an older post
    /// before it, else the first post.
    fn control_t0_oracle(posts: &[Post], targets: &BTreeSet<String>) -> Option<i64> {
        let mut cand: Vec<&Post> = posts.iter().filter(|p| !targets.contains(&p.forum)).collect();
        cand.sort_by(|a, b| (a.created_utc, &a.id).cmp(&(b.created_utc, &b.id)));
        let first = cand.first()?;
        let mut firsts: BTreeMap<&str, (i64, &str)> = BTreeMap::new();
        for p in &cand {
            firsts.entry(p.forum.as_str()).or_insert((p.created_utc, p.id.as_str()));
        }
        firsts
            .values()
            .filter(|&&(t, id)| (t, id) > (first.created_utc, first.id.as_str()))
            .min()
            .map(|&(t, _)| t)
            .or(Some(first.created_utc))
    }

    #[test]
    fn control_t0_examples() {
        let rule = JoiningRule { target_forums: ["incel".to_string()].into(), cohort: Cohort::Control };
        let single = vec![post("a", "u", "f1", 10, 12), post("b", "u", "f1", 20, 12)];
        assert_eq!(build_timeline(single.clone(), &rule).unwrap().t0, Some(10));
        assert_eq!(control_t0_oracle(&single, &rule.target_forums), Some(10));

        let two = vec![post("a", "u", "f1", 1, 12), post("b", "u", "f2", 3, 12)];
        assert_eq!(build_timeline(two.clone(), &rule).unwrap().t0, Some(3));
        assert_eq!(control_t0_oracle(&two, &rule.target_forums), Some(3));

        let only_target = vec![post("a", "u", "incel", 1, 12)];
        assert_eq!(build_timeline(only_target, &rule).unwrap().t0, None);
    }

    #[test]
    fn timeline_errors() {
        let rule = JoiningRule { target_forums: BTreeSet::new(), cohort: Cohort::Control };
        assert!(build_timeline(Vec::new(), &rule).is_err());
        let mixed = vec![post("a", "u", "f", 1, 12), post("b", "v", "f", 2, 12)];
        assert!(build_timeline(mixed, &rule).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_posts() -> impl Strategy<Value = Vec<Post>> {
            prop::collection::vec((0usize..4, 1i64..50, 1usize..15, any::<bool>()), 1..25).prop_map(|v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (f, t, w, en))| {
                        let forum = ["f1", "f2", "f3", "incel"][f];
                        let mut p = post(&format!("p{i}"), "u", forum, DEFAULT_MIN_DATE - 25 + t, w);
                        if !en {
                            p.lang = Some("de".into());
                        }
                        p
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn filtering_is_idempotent(posts in arb_posts()) {
                let cfg = FilterConfig::default();
                let (once, _) = apply_filters(posts, &cfg).unwrap();
                let (twice, s) = apply_filters(once.clone(), &cfg).unwrap();
                prop_assert_eq!(&once, &twice);
                prop_assert!(s.dropped.is_empty());
            }

            #[test]
            fn timeline_is_permutation_invariant(posts in arb_posts(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let targets: BTreeSet<String> = ["incel".to_string()].into();
                for cohort in [Cohort::Joiner, Cohort::Control] {
                    let rule = JoiningRule { target_forums: targets.clone(), cohort };
                    let a = build_timeline(posts.clone(), &rule).unwrap();
                    let mut shuffled = posts.clone();
                    shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                    let b = build_timeline(shuffled, &rule).unwrap();
                    prop_assert_eq!(&a, &b);
                    if let Some(t0) = a.t0 {
                        prop_assert!(a.posts.iter().any(|p| p.created_utc == t0));
                    }
                    if cohort == Cohort::Control {
                        prop_assert_eq!(a.t0, control_t0_oracle(&posts, &targets));
                    }
                }
            }

            #[test]
            fn raising_min_posts_never_adds_users(posts in arb_posts(), k in 1usize..10) {
                let mut by_user = BTreeMap::new();
                for (i, mut p) in posts.into_iter().enumerate() {
                    p.user = format!("u{}", i % 3);
                    by_user.entry(p.user.clone()).or_insert_with(Vec::new).push(p);
                }
                let lo = activity_filter(&by_user, &ActivityRule::post_count_only(k)).unwrap();
                let hi = activity_filter(&by_user, &ActivityRule::post_count_only(k + 1)).unwrap();
                prop_assert!(hi.is_subset(&lo));
            }
        }
    }
}
