//! Workload generators. All are deterministic per seed.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{answer_text, frames, pseudo_words, render, AnswerFlavor, Frame};
use super::{BenchError, TraceEvent, Workload};
use crate::clock::Timestamp;
use crate::remote::ToolEndpointConfig;

/// Content words per topic.
const TOPIC_WORDS: usize = 5;
/// Size of the shared pool answers draw filler words from.
const FILLER_POOL: usize = 400;

/// Tool serving expensive, fact-like lookups in the mixed-cost workload.
pub const STATIC_TOOL: &str = "encyclopedia";
/// Tool serving cheap, ephemeral lookups in the mixed-cost workload.
pub const EPHEMERAL_TOOL: &str = "news";

/// Normalized weights `rank^-s` for ranks `1..=n`.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

struct Topic {
    cluster_id: u64,
    key: String,
    words: Vec<String>,
    frames: Vec<Frame>,
    tool: String,
}

impl Topic {
    fn query(&self, rng: &mut ChaCha8Rng) -> String {
        let frame = self.frames[rng.random_range(0..self.frames.len())];
        render(frame, &self.words, rng)
    }

    fn event(&self, arrival: Timestamp, rng: &mut ChaCha8Rng) -> TraceEvent {
        TraceEvent {
            arrival,
            tool: self.tool.clone(),
            cluster_id: self.cluster_id,
            ground_truth_key: self.key.clone(),
            query_text: self.query(rng),
        }
    }
}

/// Draws topic words, per-topic frames and answers.
struct TopicFactory {
    rng: ChaCha8Rng,
    words: Vec<String>,
    filler: Vec<String>,
    all_frames: Vec<Frame>,
    paraphrases: usize,
    answer_filler: usize,
}

impl TopicFactory {
    fn new(seed: u64, topics: usize, paraphrases: usize, answer_filler: usize) -> Result<Self, BenchError> {
        let all_frames = frames();
        if paraphrases == 0 || paraphrases > all_frames.len() {
            return Err(BenchError::Param(format!(
                "paraphrases per cluster must be in 1..={}",
                all_frames.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = pseudo_words(topics * TOPIC_WORDS + FILLER_POOL, &mut rng);
        let filler = words.split_off(topics * TOPIC_WORDS);
        words.reverse();
        Ok(TopicFactory {
            rng,
            words,
            filler,
            all_frames,
            paraphrases,
            answer_filler,
        })
    }

    fn fresh_words(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.words.pop().expect("word pool sized for every topic")).collect()
    }

    fn topic(
        &mut self,
        cluster_id: u64,
        key: String,
        words: Vec<String>,
        tool: &str,
        flavor: AnswerFlavor,
        table: &mut HashMap<String, String>,
    ) -> Topic {
        let mut frames = self.all_frames.clone();
        frames.shuffle(&mut self.rng);
        frames.truncate(self.paraphrases);
        let filler: Vec<String> = (0..self.answer_filler)
            .map(|_| self.filler[self.rng.random_range(0..self.filler.len())].clone())
            .collect();
        table.insert(key.clone(), answer_text(&key, &words, flavor, &filler));
        Topic {
            cluster_id,
            key,
            words,
            frames,
            tool: tool.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZipfParams {
    pub clusters: usize,
    /// Distinct phrasing frames per cluster. Each event also reshuffles the
    /// topic words, so literal repeats are rare.
    pub paraphrases_per_cluster: usize,
    pub n_events: usize,
    pub zipf_s: f64,
    pub seed: u64,
    /// Near-miss clusters: distractor `j` shares all but one topic word with
    /// cluster `j` and ranks right after it in popularity.
    pub distractors: usize,
    pub tool: String,
    /// Filler words per answer.
    pub answer_filler: usize,
    /// Spacing of arrivals; 0 releases the whole trace at once.
    pub interarrival_ms: f64,
}

impl Default for ZipfParams {
    fn default() -> Self {
        ZipfParams {
            clusters: 10,
            paraphrases_per_cluster: 20,
            n_events: 1000,
            zipf_s: 0.99,
            seed: 1,
            distractors: 0,
            tool: "search".into(),
            answer_filler: 40,
            interarrival_ms: 0.0,
        }
    }
}

pub fn gen_zipf_trace(
    clusters: usize,
    paraphrases_per_cluster: usize,
    n_events: usize,
    zipf_s: f64,
    seed: u64,
) -> Result<Workload, BenchError> {
    gen_zipf(&ZipfParams {
        clusters,
        paraphrases_per_cluster,
        n_events,
        zipf_s,
        seed,
        ..ZipfParams::default()
    })
}

pub fn gen_zipf(p: &ZipfParams) -> Result<Workload, BenchError> {
    if p.clusters == 0 {
        return Err(BenchError::Param("clusters must be at least 1".into()));
    }
    if !(p.zipf_s > 0.0 && p.zipf_s.is_finite()) {
        return Err(BenchError::Param("zipf_s must be positive".into()));
    }
    if p.distractors > p.clusters {
        return Err(BenchError::Param("more distractors than clusters".into()));
    }
    let mut f = TopicFactory::new(p.seed, p.clusters + p.distractors, p.paraphrases_per_cluster, p.answer_filler)?;
    let mut table = HashMap::new();
    let mut ranked = Vec::new();
    for j in 0..p.clusters {
        let words = f.fresh_words(TOPIC_WORDS);
        let base = f.topic(j as u64, format!("zipf-{j}"), words.clone(), &p.tool, AnswerFlavor::Neutral, &mut table);
        ranked.push(base);
        if j < p.distractors {
            let mut near = words[..TOPIC_WORDS - 1].to_vec();
            near.extend(f.fresh_words(1));
            let id = (p.clusters + j) as u64;
            ranked.push(f.topic(id, format!("zipf-d{j}"), near, &p.tool, AnswerFlavor::Neutral, &mut table));
        }
    }
    let dist = WeightedIndex::new(zipf_weights(ranked.len(), p.zipf_s)).expect("positive weights");
    let events = (0..p.n_events)
        .map(|i| {
            let topic = &ranked[dist.sample(&mut f.rng)];
            topic.event(Timestamp::from_millis_f64(i as f64 * p.interarrival_ms), &mut f.rng)
        })
        .collect();
    Ok(Workload { events, table })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendTopic {
    pub peak_s: f64,
    /// Expected number of events.
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendParams {
    pub topics: Vec<TrendTopic>,
    pub duration_s: f64,
    /// Half-width of each triangular envelope.
    pub half_width_s: f64,
    /// Each topic spawns a follower topic peaking this much later.
    pub follower_lag_s: f64,
    /// Follower intensity relative to its leader; 0 disables followers.
    pub follower_ratio: f64,
    pub paraphrases_per_topic: usize,
    pub seed: u64,
    pub tool: String,
    pub answer_filler: usize,
}

impl Default for TrendParams {
    fn default() -> Self {
        TrendParams {
            topics: Vec::new(),
            duration_s: 600.0,
            half_width_s: 60.0,
            follower_lag_s: 30.0,
            follower_ratio: 0.5,
            paraphrases_per_topic: 20,
            seed: 1,
            tool: "search".into(),
            answer_filler: 40,
        }
    }
}

fn triangular_cdf(peak: f64, hw: f64, x: f64) -> f64 {
    if hw <= 0.0 {
        return if x >= peak { 1.0 } else { 0.0 };
    }
    let (lo, hi) = (peak - hw, peak + hw);
    if x <= lo {
        0.0
    } else if x <= peak {
        (x - lo).powi(2) / (2.0 * hw * hw)
    } else if x < hi {
        1.0 - (hi - x).powi(2) / (2.0 * hw * hw)
    } else {
        1.0
    }
}

fn triangular_quantile(peak: f64, hw: f64, u: f64) -> f64 {
    if u < 0.5 {
        peak - hw + hw * (2.0 * u).sqrt()
    } else {
        peak + hw - hw * (2.0 * (1.0 - u)).sqrt()
    }
}

/// Fraction of a triangular envelope's mass inside `[a, b)`.
pub fn envelope_mass(peak_s: f64, half_width_s: f64, a: f64, b: f64) -> f64 {
    triangular_cdf(peak_s, half_width_s, b) - triangular_cdf(peak_s, half_width_s, a)
}

pub fn gen_trend_trace(topics: &[(f64, f64)], duration_s: f64, seed: u64) -> Result<Workload, BenchError> {
    gen_trend(&TrendParams {
        topics: topics
            .iter()
            .map(|&(peak_s, intensity)| TrendTopic { peak_s, intensity })
            .collect(),
        duration_s,
        seed,
        ..TrendParams::default()
    })
}

/// Each topic's events follow a triangular envelope around its peak. Times
/// are stratified inverse-CDF samples, so per-interval counts track the
/// envelope's mass closely.
pub fn gen_trend(p: &TrendParams) -> Result<Workload, BenchError> {
    if !(p.duration_s > 0.0) {
        return Err(BenchError::Param("duration must be positive".into()));
    }
    if p.half_width_s < 0.0 || p.follower_ratio < 0.0 {
        return Err(BenchError::Param("width and follower ratio must be non-negative".into()));
    }
    let n = p.topics.len();
    let mut f = TopicFactory::new(p.seed, 2 * n, p.paraphrases_per_topic, p.answer_filler)?;
    let mut table = HashMap::new();
    let mut envelopes = Vec::new();
    for (i, t) in p.topics.iter().enumerate() {
        let words = f.fresh_words(TOPIC_WORDS);
        let topic = f.topic(i as u64, format!("trend-{i}"), words, &p.tool, AnswerFlavor::Neutral, &mut table);
        envelopes.push((topic, t.peak_s, t.intensity));
    }
    if p.follower_ratio > 0.0 {
        for (i, t) in p.topics.iter().enumerate() {
            let words = f.fresh_words(TOPIC_WORDS);
            let id = (n + i) as u64;
            let topic = f.topic(id, format!("trend-{i}-follow"), words, &p.tool, AnswerFlavor::Neutral, &mut table);
            envelopes.push((topic, t.peak_s + p.follower_lag_s, t.intensity * p.follower_ratio));
        }
    }
    let mut events = Vec::new();
    for (topic, peak, intensity) in &envelopes {
        let count = intensity.round().max(0.0) as usize;
        for k in 0..count {
            let u = (k as f64 + f.rng.random::<f64>()) / count as f64;
            let t = triangular_quantile(*peak, p.half_width_s, u).clamp(0.0, p.duration_s);
            events.push(topic.event(Timestamp::from_secs_f64(t), &mut f.rng));
        }
    }
    events.sort_by_key(|e| e.arrival);
    Ok(Workload { events, table })
}

/// Per-file access frequencies of the code-agent trace.
pub fn repo_file_frequencies() -> Vec<(String, f64)> {
    [
        ("src/core/parser.py", 1.0),
        ("src/core/lexer.py", 0.28),
        ("src/core/linter.py", 0.22),
        ("src/rules/layout.py", 0.14),
        ("src/core/config.py", 0.1),
        ("src/core/templater.py", 0.08),
        ("src/core/errors.py", 0.04),
        ("src/utils/helpers.py", 0.04),
        ("src/cli/commands.py", 0.04),
    ]
    .into_iter()
    .map(|(p, f)| (p.to_string(), f))
    .collect()
}

const FILE_FRAMES: &[&str] = &[
    "{}",
    "show me {}",
    "get {}",
    "give me {}",
    "pull up {}",
    "look at {}",
    "i need {}",
    "please show {}",
    "can you get {}",
    "let me look at {}",
    "what is in {}",
    "show {} to me",
];

/// Each task reads file `i` with probability `freq_i`. Queries are varied
/// requests naming the path, which is also the ground-truth key.
pub fn gen_repo_trace(file_freqs: &[(String, f64)], n_tasks: usize, seed: u64) -> Result<Workload, BenchError> {
    for (path, f) in file_freqs {
        if !(*f > 0.0 && *f <= 1.0) {
            return Err(BenchError::Param(format!("frequency of {path} must be in (0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler = pseudo_words(FILLER_POOL, &mut rng);
    let mut table = HashMap::new();
    for (path, _) in file_freqs {
        let body: Vec<String> = (0..80).map(|_| filler[rng.random_range(0..filler.len())].clone()).collect();
        table.insert(path.clone(), format!("# {path}\n{}", body.join(" ")));
    }
    let mut events = Vec::new();
    for _ in 0..n_tasks {
        for (i, (path, freq)) in file_freqs.iter().enumerate() {
            if rng.random::<f64>() < *freq {
                let frame = FILE_FRAMES[rng.random_range(0..FILE_FRAMES.len())];
                events.push(TraceEvent {
                    arrival: Timestamp::ZERO,
                    tool: "file_read".into(),
                    cluster_id: i as u64,
                    ground_truth_key: path.clone(),
                    query_text: frame.replace("{}", path),
                });
            }
        }
    }
    Ok(Workload { events, table })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedCostParams {
    /// Expensive clusters with fact-like answers, served by [`STATIC_TOOL`].
    pub static_clusters: usize,
    /// Cheap clusters with time-sensitive answers, served by
    /// [`EPHEMERAL_TOOL`].
    pub ephemeral_clusters: usize,
    /// Popularity of one ephemeral cluster relative to one static cluster.
    pub ephemeral_weight: f64,
    pub n_events: usize,
    pub paraphrases_per_cluster: usize,
    pub seed: u64,
    pub answer_filler: usize,
}

impl Default for MixedCostParams {
    fn default() -> Self {
        MixedCostParams {
            static_clusters: 10,
            ephemeral_clusters: 10,
            ephemeral_weight: 2.0,
            n_events: 1000,
            paraphrases_per_cluster: 20,
            seed: 1,
            answer_filler: 40,
        }
    }
}

/// Endpoints for [`gen_mixed_cost`]: a slow, costly reference source and a
/// fast, cheap feed.
pub fn mixed_cost_endpoints() -> Vec<ToolEndpointConfig> {
    vec![
        ToolEndpointConfig {
            name: STATIC_TOOL.into(),
            base_latency_ms: 1500.0,
            cost_per_call_usd: 0.02,
            rate_limit_per_min: 1000,
            ..ToolEndpointConfig::default()
        },
        ToolEndpointConfig {
            name: EPHEMERAL_TOOL.into(),
            base_latency_ms: 150.0,
            cost_per_call_usd: 0.001,
            rate_limit_per_min: 1000,
            ..ToolEndpointConfig::default()
        },
    ]
}

/// Two cluster classes with uniform popularity inside each class.
pub fn gen_mixed_cost(p: &MixedCostParams) -> Result<Workload, BenchError> {
    let total = p.static_clusters + p.ephemeral_clusters;
    if total == 0 || !(p.ephemeral_weight > 0.0) {
        return Err(BenchError::Param("need at least one cluster and a positive weight".into()));
    }
    let mut f = TopicFactory::new(p.seed, total, p.paraphrases_per_cluster, p.answer_filler)?;
    let mut table = HashMap::new();
    let mut topics = Vec::new();
    let mut weights = Vec::new();
    for i in 0..total {
        let words = f.fresh_words(TOPIC_WORDS);
        let (tool, flavor, w, key) = if i < p.static_clusters {
            (STATIC_TOOL, AnswerFlavor::Static, 1.0, format!("static-{i}"))
        } else {
            (EPHEMERAL_TOOL, AnswerFlavor::Ephemeral, p.ephemeral_weight, format!("ephemeral-{i}"))
        };
        topics.push(f.topic(i as u64, key, words, tool, flavor, &mut table));
        weights.push(w);
    }
    let dist = WeightedIndex::new(weights).expect("positive weights");
    let events = (0..p.n_events)
        .map(|_| topics[dist.sample(&mut f.rng)].event(Timestamp::ZERO, &mut f.rng))
        .collect();
    Ok(Workload { events, table })
}

/// Cycles through `queries` in order: `warmup_cycles` cycles with events
/// `warmup_gap_s` apart, then `cycles` cycles with events `period_s` apart.
/// Query `i` is cluster `i`.
pub fn gen_periodic_trace(
    queries: &[&str],
    warmup_cycles: usize,
    warmup_gap_s: f64,
    cycles: usize,
    period_s: f64,
) -> Result<Workload, BenchError> {
    if queries.is_empty() || period_s <= 0.0 || warmup_gap_s < 0.0 {
        return Err(BenchError::Param("need queries and a positive period".into()));
    }
    let mut table = HashMap::new();
    for (i, q) in queries.iter().enumerate() {
        table.insert(format!("periodic-{i}"), format!("answer for {q}: periodic result number {i}"));
    }
    let mut events = Vec::new();
    let mut t = 0.0;
    for step in 0..(warmup_cycles + cycles) * queries.len() {
        if step > 0 {
            t += if step < warmup_cycles * queries.len() {
                warmup_gap_s
            } else {
                period_s
            };
        }
        let i = step % queries.len();
        events.push(TraceEvent {
            arrival: Timestamp::from_secs_f64(t),
            tool: "search".into(),
            cluster_id: i as u64,
            ground_truth_key: format!("periodic-{i}"),
            query_text: queries[i].to_string(),
        });
    }
    Ok(Workload { events, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::format_trace;

    #[test]
    fn zipf_weights_follow_the_power_law() {
        let w = zipf_weights(10, 0.99);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[0] / w[9] - 10f64.powf(0.99)).abs() < 1e-9);
    }

    #[test]
    fn zipf_head_to_tail_ratio_matches_weights() {
        // Pooled over seeds; a single 1000-event trace has roughly ±17%
        // noise on the rank-10 count.
        let (mut head, mut tail) = (0usize, 0usize);
        for seed in 0..10 {
            let w = gen_zipf_trace(10, 20, 1000, 0.99, seed).unwrap();
            let c = w.cluster_counts();
            head += c[&0];
            tail += c[&9];
        }
        let ratio = head as f64 / tail as f64;
        let expected = 10f64.powf(0.99);
        assert!((ratio / expected - 1.0).abs() <= 0.15, "ratio {ratio} vs {expected}");
    }

    #[test]
    fn single_cluster_shares_one_key() {
        let w = gen_zipf_trace(1, 5, 50, 0.99, 3).unwrap();
        assert!(w.events.iter().all(|e| e.ground_truth_key == "zipf-0"));
        w.validate().unwrap();
    }

    #[test]
    fn same_seed_same_trace() {
        let a = gen_zipf_trace(10, 20, 300, 0.99, 9).unwrap();
        let b = gen_zipf_trace(10, 20, 300, 0.99, 9).unwrap();
        assert_eq!(format_trace(&a.events), format_trace(&b.events));
        let c = gen_zipf_trace(10, 20, 300, 0.99, 10).unwrap();
        assert_ne!(format_trace(&a.events), format_trace(&c.events));
    }

    #[test]
    fn literal_repeats_are_rare() {
        let w = gen_zipf_trace(10, 20, 1000, 0.99, 1).unwrap();
        let distinct: std::collections::HashSet<&str> = w.events.iter().map(|e| e.query_text.as_str()).collect();
        assert!(distinct.len() > 850, "{} distinct texts", distinct.len());
    }

    #[test]
    fn distractors_share_all_but_one_word() {
        let w = gen_zipf(&ZipfParams {
            distractors: 3,
            n_events: 2000,
            ..ZipfParams::default()
        })
        .unwrap();
        w.validate().unwrap();
        let words = |cluster: u64| {
            let e = w.events.iter().find(|e| e.cluster_id == cluster).unwrap();
            crate::text::content_words(&e.query_text)
        };
        for j in 0..3u64 {
            let (base, near) = (words(j), words(10 + j));
            assert_eq!(base.intersection(&near).count(), TOPIC_WORDS - 1);
        }
        assert_eq!(w.cluster_counts().len(), 13);
    }

    #[test]
    fn zero_width_envelope_puts_every_event_at_the_peak() {
        let w = gen_trend(&TrendParams {
            topics: vec![TrendTopic {
                peak_s: 120.0,
                intensity: 40.0,
            }],
            half_width_s: 0.0,
            follower_ratio: 0.0,
            ..TrendParams::default()
        })
        .unwrap();
        assert_eq!(w.events.len(), 40);
        assert!(w.events.iter().all(|e| e.arrival == Timestamp::from_secs_f64(120.0)));
    }

    #[test]
    fn disjoint_envelopes_do_not_interleave() {
        let w = gen_trend(&TrendParams {
            topics: vec![
                TrendTopic {
                    peak_s: 100.0,
                    intensity: 50.0,
                },
                TrendTopic {
                    peak_s: 400.0,
                    intensity: 50.0,
                },
            ],
            follower_ratio: 0.0,
            ..TrendParams::default()
        })
        .unwrap();
        let first_b = w.events.iter().position(|e| e.cluster_id == 1).unwrap();
        assert!(w.events[..first_b].iter().all(|e| e.cluster_id == 0));
        assert!(w.events[first_b..].iter().all(|e| e.cluster_id == 1));
        for e in &w.events {
            let peak = if e.cluster_id == 0 { 100.0 } else { 400.0 };
            assert!((e.arrival.as_secs_f64() - peak).abs() <= 60.0);
        }
    }

    #[test]
    fn per_minute_histogram_matches_envelope_integrals() {
        let topics = [(90.0, 300.0), (240.0, 500.0), (360.0, 200.0), (480.0, 400.0)];
        let p = TrendParams {
            topics: topics
                .iter()
                .map(|&(peak_s, intensity)| TrendTopic { peak_s, intensity })
                .collect(),
            seed: 5,
            ..TrendParams::default()
        };
        let w = gen_trend(&p).unwrap();
        let mut envelopes: Vec<(f64, f64)> = topics.to_vec();
        envelopes.extend(topics.iter().map(|&(pk, i)| (pk + p.follower_lag_s, i * p.follower_ratio)));
        for minute in 0..10 {
            let (a, b) = (minute as f64 * 60.0, (minute + 1) as f64 * 60.0);
            // Midpoint-rule integral of the summed rate over the minute.
            let steps = 6000;
            let dt = (b - a) / steps as f64;
            let expected: f64 = (0..steps)
                .map(|k| {
                    let x = a + (k as f64 + 0.5) * dt;
                    envelopes
                        .iter()
                        .map(|&(pk, i)| i * envelope_mass(pk, p.half_width_s, x - dt / 2.0, x + dt / 2.0))
                        .sum::<f64>()
                })
                .sum();
            let got = w
                .events
                .iter()
                .filter(|e| (a..b).contains(&e.arrival.as_secs_f64()))
                .count() as f64;
            if expected >= 20.0 {
                assert!((got - expected).abs() <= 0.1 * expected, "minute {minute}: {got} vs {expected}");
            } else {
                assert!((got - expected).abs() <= 4.0, "minute {minute}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn repo_trace_honours_frequencies() {
        let freqs = repo_file_frequencies();
        let n = 1000;
        let w = gen_repo_trace(&freqs, n, 2).unwrap();
        w.validate().unwrap();
        let counts = w.cluster_counts();
        assert_eq!(counts[&0], n, "frequency 1.0 file is read by every task");
        // Binomial(1000, 0.28): mean 280, sigma ~14.2.
        let sigma = (n as f64 * 0.28 * 0.72).sqrt();
        assert!((counts[&1] as f64 - 280.0).abs() <= 3.0 * sigma, "{}", counts[&1]);
        assert!(gen_repo_trace(&[("a.py".into(), 0.0)], 10, 1).is_err());
        assert!(w.events.iter().all(|e| e.query_text.contains(&e.ground_truth_key)));
    }

    #[test]
    fn mixed_cost_classes_get_their_tools() {
        let w = gen_mixed_cost(&MixedCostParams::default()).unwrap();
        w.validate().unwrap();
        for e in &w.events {
            let expected = if e.cluster_id < 10 { STATIC_TOOL } else { EPHEMERAL_TOOL };
            assert_eq!(e.tool, expected);
        }
        let static_share = w.events.iter().filter(|e| e.tool == STATIC_TOOL).count() as f64 / 1000.0;
        assert!((static_share - 1.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn periodic_trace_alternates() {
        let w = gen_periodic_trace(&["alpha query", "beta query"], 2, 2.0, 2, 10.0).unwrap();
        let times: Vec<f64> = w.events.iter().map(|e| e.arrival.as_secs_f64()).collect();
        assert_eq!(times, vec![0.0, 2.0, 4.0, 6.0, 16.0, 26.0, 36.0, 46.0]);
        let ids: Vec<u64> = w.events.iter().map(|e| e.cluster_id).collect();
        assert_eq!(ids, vec![0, 1, 0, 1, 0, 1, 0, 1]);
    }
}
