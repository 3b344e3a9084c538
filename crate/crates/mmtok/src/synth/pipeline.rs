//! The two-stage pipeline: topics -> scenarios -> dialogs, then
//! text-to-media conversion and filtering.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clients::{fnv1a, ChatClient, MediaClient, MediaStore};
use super::placeholder::parse_placeholders;
use super::prompts;
use super::{Dialogue, FilterRules, MediaKind, Part, Provenance, Speaker, SynthError, Turn};
use crate::exec;

const TOPICS_PER_SCENARIO_CALL: usize = 10;
const SCENARIO_DEMOS_PER_CALL: usize = 5;
const DIALOG_DEMOS_PER_CALL: usize = 3;

/// Result of the topic-expansion step. `raw_count` is the number of parsed
/// topics before case-insensitive deduplication.
#[derive(Debug, Clone)]
pub struct TopicExpansion {
    pub topics: Vec<String>,
    pub raw_count: usize,
}

/// Expand every meta-topic `rounds` times through the topic prompt and parse
/// the numbered responses.
pub fn expand_topics(
    metatopics: &[String],
    chat: &dyn ChatClient,
    rounds: usize,
) -> Result<TopicExpansion, SynthError> {
    if metatopics.is_empty() {
        return Err(SynthError::EmptyInput("metatopics".into()));
    }
    let mut topics = Vec::new();
    let mut raw_count = 0usize;
    for metatopic in metatopics {
        let prompt = prompts::topic_prompt(metatopic);
        for _ in 0..rounds.max(1) {
            let response = chat.complete(&prompt)?;
            let parsed = parse_numbered_list(&response);
            if parsed.is_empty() {
                return Err(SynthError::UnparseableResponse(format!(
                    "no numbered topics in response for {metatopic:?}"
                )));
            }
            raw_count += parsed.len();
            topics.extend(parsed);
        }
    }
    let mut seen = std::collections::HashSet::new();
    let deduped: Vec<String> =
        topics.into_iter().filter(|t| seen.insert(t.to_lowercase())).collect();
    Ok(TopicExpansion { topics: deduped, raw_count })
}

fn parse_numbered_list(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits == 0 {
            continue;
        }
        let rest = &line[digits..];
        let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'));
        if let Some(rest) = rest {
            let item = rest.trim();
            if !item.is_empty() {
                out.push(item.to_string());
            }
        }
    }
    out
}

/// Weighted draw from a requirements pool.
pub fn sample_requirement(
    pool: &[(String, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<String, SynthError> {
    let total: f64 = pool.iter().map(|&(_, w)| w.max(0.0)).sum();
    if pool.is_empty() || total <= 0.0 {
        return Err(SynthError::EmptyInput("requirements pool".into()));
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (name, w) in pool {
        acc += w.max(0.0);
        if u < acc && *w > 0.0 {
            return Ok(name.clone());
        }
    }
    Ok(pool.last().unwrap().0.clone())
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(k.min(n));
    for _ in 0..k.min(n) {
        let i = rng.gen_range(0..pool.len());
        out.push(pool.swap_remove(i));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub topic: String,
    pub description: String,
    pub requirement: String,
}

/// Generate one scenario per topic, ten topics per call, each call seeded
/// with five demonstrations and one weighted requirement. Malformed lines
/// are skipped; the second element counts them.
pub fn gen_scenarios(
    topics: &[String],
    demo_pool: &[String],
    requirements: &[(String, f64)],
    chat: &dyn ChatClient,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Scenario>, usize), SynthError> {
    if topics.is_empty() {
        return Err(SynthError::EmptyInput("topics".into()));
    }
    if demo_pool.is_empty() {
        return Err(SynthError::EmptyInput("scenario demo pool".into()));
    }
    let mut scenarios = Vec::new();
    let mut skipped = 0usize;
    for batch in topics.chunks(TOPICS_PER_SCENARIO_CALL) {
        let demo_idx = sample_distinct(rng, demo_pool.len(), SCENARIO_DEMOS_PER_CALL);
        let demos: Vec<String> = demo_idx.iter().map(|&i| demo_pool[i].clone()).collect();
        let requirement = sample_requirement(requirements, rng)?;
        let topic_block: String = batch
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}. {t}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = prompts::scenario_prompt(&demos.join("\n"), &topic_block, &requirement);
        let response = chat.complete(&prompt)?;
        let lines = parse_numbered_list(&response);
        if lines.is_empty() {
            return Err(SynthError::UnparseableResponse("no scenarios in response".into()));
        }
        for (i, topic) in batch.iter().enumerate() {
            match lines.get(i) {
                Some(description) if !description.is_empty() => scenarios.push(Scenario {
                    topic: topic.clone(),
                    description: description.clone(),
                    requirement: requirement.clone(),
                }),
                _ => {
                    log::warn!("scenario batch line {i} missing or malformed; skipping {topic:?}");
                    skipped += 1;
                }
            }
        }
    }
    Ok((scenarios, skipped))
}

const IMPERATIVE_STARTERS: &[&str] = &[
    "please", "show", "make", "generate", "create", "play", "give", "tell", "find", "write",
    "describe", "compose", "convert", "turn", "add", "help", "list", "share", "recommend",
    "suggest", "can", "could", "would", "what", "how", "why", "where", "when", "who", "which",
    "do", "does", "is", "are", "i",
];

fn user_turn_ok(text: &str) -> bool {
    let trimmed = text.trim();
    if trimmed.ends_with('?') {
        return true;
    }
    match trimmed.split_whitespace().next() {
        Some(first) => {
            let w: String = first.to_lowercase().chars().filter(|c| c.is_alphanumeric()).collect();
            IMPERATIVE_STARTERS.contains(&w.as_str())
        }
        None => false,
    }
}

fn parse_transcript(text: &str) -> Result<Vec<Turn>, SynthError> {
    let mut turns = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (speaker, content) = if let Some(rest) = line.strip_prefix("User:") {
            (Speaker::User, rest)
        } else if let Some(rest) = line.strip_prefix("AnyGPT:") {
            (Speaker::Agent, rest)
        } else {
            return Err(SynthError::UnparseableResponse(format!("unexpected line {line:?}")));
        };
        turns.push(Turn {
            speaker,
            parts: parse_placeholders(content.trim_start()),
            speech: None,
        });
    }
    if turns.is_empty() {
        return Err(SynthError::UnparseableResponse("empty transcript".into()));
    }
    for (i, turn) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Agent };
        if turn.speaker != expected {
            return Err(SynthError::UnparseableResponse(format!(
                "speakers must alternate starting with the user (turn {i})"
            )));
        }
    }
    Ok(turns)
}

/// Generate one text-only dialogue (with placeholders) for a scenario.
pub fn gen_dialogs(
    scenario: &Scenario,
    demo_pool: &[String],
    chat: &dyn ChatClient,
    rng: &mut ChaCha8Rng,
) -> Result<Dialogue, SynthError> {
    if demo_pool.is_empty() {
        return Err(SynthError::EmptyInput("dialog demo pool".into()));
    }
    let demo_idx = sample_distinct(rng, demo_pool.len(), DIALOG_DEMOS_PER_CALL);
    let demos: Vec<String> = demo_idx.iter().map(|&i| demo_pool[i].clone()).collect();
    let prompt = prompts::chat_prompt(&demos.join("\n---\n"), &scenario.description);
    let response = chat.complete(&prompt)?;
    let turns = parse_transcript(&response)?;

    let mut flags = Vec::new();
    for (i, turn) in turns.iter().enumerate() {
        let text = turn.text_content();
        if turn.speaker == Speaker::User && !user_turn_ok(&text) {
            flags.push(format!("turn {i}: user utterance is not a question or instruction"));
        }
        let words = text.split_whitespace().count();
        if words > 0 && !(5..=15).contains(&words) {
            flags.push(format!("turn {i}: {words} words outside the 5-15 target"));
        }
    }
    Ok(Dialogue {
        id: format!("dlg-{:016x}", fnv1a(scenario.description.as_bytes())),
        topic: scenario.topic.clone(),
        scenario: scenario.description.clone(),
        turns,
        flags,
        provenance: Provenance {
            seed: 0,
            requirement: Some(scenario.requirement.clone()),
            demo_indices: demo_idx,
        },
    })
}

/// The stage-two client set.
pub struct Clients<'a> {
    pub image: &'a dyn MediaClient,
    pub music: &'a dyn MediaClient,
    pub tts: &'a dyn MediaClient,
}

/// Resolve every placeholder to a stored media payload and synthesize speech
/// for each text utterance. Fails with `ClientFailure` if any client gives
/// up; callers treat that as a `media_failure` rejection.
pub fn convert_to_multimodal(
    dialog: &Dialogue,
    clients: &Clients<'_>,
    store: &MediaStore,
) -> Result<Dialogue, SynthError> {
    let mut out = dialog.clone();
    for turn in out.turns.iter_mut() {
        for part in turn.parts.iter_mut() {
            if let Part::Placeholder { kind, raw, media } = part {
                let client = match kind {
                    MediaKind::Image => clients.image,
                    MediaKind::Music => clients.music,
                };
                let payload = client.synthesize(raw.trim())?;
                *media = Some(store.put(&payload)?);
            }
        }
        let text = turn.text_content();
        if !text.is_empty() {
            let payload = clients.tts.synthesize(&text)?;
            turn.speech = Some(store.put(&payload)?);
        }
    }
    Ok(out)
}

/// Partition dialogs by the filter rules. Every rejection carries a
/// machine-readable reason; accepted dialogs pass through unchanged.
pub fn filter_dialogs(
    dialogs: Vec<Dialogue>,
    rules: &FilterRules,
) -> (Vec<Dialogue>, Vec<(Dialogue, String)>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for dialog in dialogs {
        match rejection_reason(&dialog, rules) {
            Some(reason) => rejected.push((dialog, reason)),
            None => accepted.push(dialog),
        }
    }
    (accepted, rejected)
}

fn rejection_reason(dialog: &Dialogue, rules: &FilterRules) -> Option<String> {
    if dialog.placeholder_count(MediaKind::Music) > rules.max_music_per_dialog {
        return Some(format!("music_count>{}", rules.max_music_per_dialog));
    }
    if dialog.placeholder_count(MediaKind::Image) > rules.max_images_per_dialog {
        return Some(format!("image_count>{}", rules.max_images_per_dialog));
    }
    if dialog.rounds() > rules.max_rounds {
        return Some(format!("rounds>{}", rules.max_rounds));
    }
    for pattern in &rules.banned_patterns {
        let pat = pattern.to_lowercase();
        for turn in &dialog.turns {
            let text = super::placeholder::render_parts(&turn.parts).to_lowercase();
            if text.contains(&pat) {
                return Some("banned_content".to_string());
            }
        }
    }
    None
}

/// Knobs for a full pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub rounds_per_metatopic: usize,
    /// Cap on topics carried into scenario generation (None: all).
    pub max_topics: Option<usize>,
    /// Cap on dialogs generated (None: one per scenario).
    pub max_dialogs: Option<usize>,
    pub rules: FilterRules,
    /// Stage-two dialogs converted concurrently per wave.
    pub in_flight_cap: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            rounds_per_metatopic: 4,
            max_topics: Some(40),
            max_dialogs: Some(40),
            rules: FilterRules::default(),
            in_flight_cap: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthStats {
    pub metatopics: usize,
    pub topics_raw: usize,
    pub topics: usize,
    pub scenarios: usize,
    pub scenarios_skipped: usize,
    pub dialogs: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub images: usize,
    pub music: usize,
    pub speech: usize,
    pub rejection_reasons: BTreeMap<String, usize>,
}

pub struct PipelineOutput {
    pub accepted: Vec<Dialogue>,
    pub rejected: Vec<(Dialogue, String)>,
    pub stats: SynthStats,
}

/// Run both stages end to end. Deterministic given the config seed and
/// deterministic clients; stage-two conversion runs in waves of
/// `in_flight_cap` dialogs, each wave data-parallel.
pub fn run_pipeline(
    metatopics: &[String],
    scenario_demos: &[String],
    dialog_demos: &[String],
    chat: &dyn ChatClient,
    clients: &Clients<'_>,
    store: &MediaStore,
    config: &SynthConfig,
) -> Result<PipelineOutput, SynthError> {
    let mut stats = SynthStats { metatopics: metatopics.len(), ..Default::default() };
    let expansion = expand_topics(metatopics, chat, config.rounds_per_metatopic)?;
    stats.topics_raw = expansion.raw_count;
    stats.topics = expansion.topics.len();

    let mut topics = expansion.topics;
    if let Some(cap) = config.max_topics {
        topics.truncate(cap);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (scenarios, skipped) = gen_scenarios(
        &topics,
        scenario_demos,
        &prompts::default_requirements(),
        chat,
        &mut rng,
    )?;
    stats.scenarios = scenarios.len();
    stats.scenarios_skipped = skipped;

    let mut stage1 = Vec::new();
    for (i, scenario) in scenarios.iter().enumerate() {
        if let Some(cap) = config.max_dialogs {
            if stage1.len() >= cap {
                break;
            }
        }
        match gen_dialogs(scenario, dialog_demos, chat, &mut rng) {
            Ok(mut d) => {
                d.id = format!("dlg-{i:05}");
                d.provenance.seed = config.seed;
                stage1.push(d);
            }
            Err(SynthError::UnparseableResponse(msg)) => {
                log::warn!("dialog for scenario {i} unparseable ({msg}); skipping");
            }
            Err(e) => return Err(e),
        }
    }
    stats.dialogs = stage1.len();

    // Stage two, in capped waves.
    let mut converted: Vec<Result<Dialogue, SynthError>> = Vec::with_capacity(stage1.len());
    for wave in stage1.chunks(config.in_flight_cap.max(1)) {
        let results = exec::map_range(wave.len(), |i| convert_to_multimodal(&wave[i], clients, store));
        converted.extend(results);
    }

    let mut ok = Vec::new();
    let mut rejected: Vec<(Dialogue, String)> = Vec::new();
    for (dialog, result) in stage1.into_iter().zip(converted) {
        match result {
            Ok(d) => ok.push(d),
            Err(SynthError::ClientFailure { .. }) => {
                rejected.push((dialog, "media_failure".to_string()))
            }
            Err(e) => return Err(e),
        }
    }

    let (accepted, rule_rejected) = filter_dialogs(ok, &config.rules);
    rejected.extend(rule_rejected);

    for d in &accepted {
        stats.images += d
            .turns
            .iter()
            .flat_map(|t| &t.parts)
            .filter(|p| matches!(p, Part::Placeholder { kind: MediaKind::Image, media: Some(_), .. }))
            .count();
        stats.music += d
            .turns
            .iter()
            .flat_map(|t| &t.parts)
            .filter(|p| matches!(p, Part::Placeholder { kind: MediaKind::Music, media: Some(_), .. }))
            .count();
        stats.speech += d.turns.iter().filter(|t| t.speech.is_some()).count();
    }
    stats.accepted = accepted.len();
    stats.rejected = rejected.len();
    for (_, reason) in &rejected {
        *stats.rejection_reasons.entry(reason.clone()).or_insert(0) += 1;
    }
    Ok(PipelineOutput { accepted, rejected, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::pools;
    use crate::synth::{MockChatClient, MockMediaClient};

    fn meta(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("metatopic {i}")).collect()
    }

    #[test]
    fn topic_arithmetic() {
        let chat = MockChatClient::new(1);
        let expansion = expand_topics(&meta(4), &chat, 4).unwrap();
        assert_eq!(expansion.raw_count, 4 * 4 * 50);
        assert!(expansion.topics.len() <= expansion.raw_count);
    }

    #[test]
    fn duplicate_topics_removed() {
        let scripted = |_: &str| Ok("1. Cats\n2. cats\n3. Dogs".to_string());
        let expansion = expand_topics(&meta(1), &scripted, 1).unwrap();
        assert_eq!(expansion.raw_count, 3);
        assert_eq!(expansion.topics, vec!["Cats", "Dogs"]);
    }

    #[test]
    fn empty_response_unparseable() {
        let scripted = |_: &str| Ok(String::new());
        assert!(matches!(
            expand_topics(&meta(1), &scripted, 1),
            Err(SynthError::UnparseableResponse(_))
        ));
    }

    #[test]
    fn requirement_weighting() {
        let pool = prompts::default_requirements();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut share = 0usize;
        for _ in 0..n {
            if sample_requirement(&pool, &mut rng).unwrap() == "the user share music" {
                share += 1;
            }
        }
        let freq = share as f64 / n as f64;
        assert!((freq - 0.4).abs() < 0.02, "share-music frequency {freq}");
    }

    #[test]
    fn scenarios_link_topics() {
        let chat = MockChatClient::new(2);
        let topics: Vec<String> = (0..10).map(|i| format!("topic number {i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (scenarios, skipped) = gen_scenarios(
            &topics,
            &pools::default_scenario_demos(),
            &prompts::default_requirements(),
            &chat,
            &mut rng,
        )
        .unwrap();
        assert_eq!(scenarios.len(), 10);
        assert_eq!(skipped, 0);
        for (s, t) in scenarios.iter().zip(&topics) {
            assert_eq!(&s.topic, t);
            assert!(s.description.contains(t));
        }
    }

    #[test]
    fn malformed_scenario_lines_skipped() {
        let scripted = |_: &str| Ok("1. good scenario\nnot numbered\n2. another one".to_string());
        let topics: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (scenarios, skipped) = gen_scenarios(
            &topics,
            &pools::default_scenario_demos(),
            &prompts::default_requirements(),
            &scripted,
            &mut rng,
        )
        .unwrap();
        assert_eq!(scenarios.len(), 2);
        assert_eq!(skipped, 1);
    }

    fn scenario() -> Scenario {
        Scenario {
            topic: "cats".into(),
            description: "the user wants cat pictures".into(),
            requirement: "the user asks for images".into(),
        }
    }

    #[test]
    fn dialog_placeholders_extracted() {
        let scripted = |_: &str| {
            Ok("User: Show me a red cat please.\nAnyGPT: Sure! [image: a red cat]".to_string())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = gen_dialogs(&scenario(), &pools::default_dialog_demos(), &scripted, &mut rng).unwrap();
        assert_eq!(d.turns.len(), 2);
        assert_eq!(d.placeholder_count(MediaKind::Image), 1);
        let desc: Vec<_> = d.turns[1].parts.iter().filter_map(|p| p.description()).collect();
        assert_eq!(desc, vec!["a red cat"]);
    }

    #[test]
    fn non_alternating_rejected() {
        let scripted = |_: &str| Ok("User: hi?\nUser: hello?".to_string());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            gen_dialogs(&scenario(), &pools::default_dialog_demos(), &scripted, &mut rng),
            Err(SynthError::UnparseableResponse(_))
        ));
    }

    #[test]
    fn two_music_parsed_then_filtered() {
        let scripted = |_: &str| {
            Ok("User: Play me two songs please.\nAnyGPT: Here. [music: jazz] [music: rock]".to_string())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = gen_dialogs(&scenario(), &pools::default_dialog_demos(), &scripted, &mut rng).unwrap();
        assert_eq!(d.placeholder_count(MediaKind::Music), 2);
        let (accepted, rejected) = filter_dialogs(vec![d], &FilterRules::default());
        assert!(accepted.is_empty());
        assert_eq!(rejected[0].1, "music_count>1");
    }

    fn dialog_with_rounds(rounds: usize) -> Dialogue {
        let mut turns = Vec::new();
        for _ in 0..rounds {
            turns.push(Turn { speaker: Speaker::User, parts: vec![Part::text("show me this?")], speech: None });
            turns.push(Turn { speaker: Speaker::Agent, parts: vec![Part::text("here it is")], speech: None });
        }
        Dialogue {
            id: "d".into(),
            topic: "t".into(),
            scenario: "s".into(),
            turns,
            flags: vec![],
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn four_rounds_rejected_conforming_accepted() {
        let rules = FilterRules::default();
        let (accepted, rejected) = filter_dialogs(vec![dialog_with_rounds(4)], &rules);
        assert!(accepted.is_empty());
        assert_eq!(rejected[0].1, "rounds>3");

        let ok = dialog_with_rounds(2);
        let (accepted, rejected) = filter_dialogs(vec![ok.clone()], &rules);
        assert_eq!(rejected.len(), 0);
        assert_eq!(accepted[0], ok, "conforming dialog must pass unchanged");
    }

    #[test]
    fn filter_partitions_input() {
        let dialogs: Vec<Dialogue> = (1..=5).map(dialog_with_rounds).collect();
        let (accepted, rejected) = filter_dialogs(dialogs.clone(), &FilterRules::default());
        assert_eq!(accepted.len() + rejected.len(), dialogs.len());
        for d in &dialogs {
            let in_a = accepted.iter().any(|x| x.id == d.id && x.rounds() == d.rounds());
            let in_r = rejected.iter().any(|(x, _)| x.rounds() == d.rounds());
            assert!(in_a || in_r);
        }
    }

    #[test]
    fn conversion_attaches_media_and_speech() {
        let dir = tempfile::tempdir().unwrap();
        let store = MediaStore::new(dir.path().join("media")).unwrap();
        let image = MockMediaClient { kind: "image", seed: 1 };
        let music = MockMediaClient { kind: "music", seed: 2 };
        let tts = MockMediaClient { kind: "speech", seed: 3 };
        let clients = Clients { image: &image, music: &music, tts: &tts };

        let scripted = |_: &str| {
            Ok("User: Show me a cat and play jazz please.\nAnyGPT: Done. [image: a cat] [music: jazz trio]"
                .to_string())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = gen_dialogs(&scenario(), &pools::default_dialog_demos(), &scripted, &mut rng).unwrap();
        let converted = convert_to_multimodal(&d, &clients, &store).unwrap();
        for turn in &converted.turns {
            for p in &turn.parts {
                if let Part::Placeholder { media, .. } = p {
                    assert!(media.is_some());
                }
            }
            assert!(turn.speech.is_some());
        }
    }

    #[test]
    fn failing_media_client_rejects_dialog() {
        use crate::synth::{Retrying, RetryPolicy};
        struct Down;
        impl MediaClient for Down {
            fn synthesize(&self, _: &str) -> Result<Vec<u8>, SynthError> {
                Err(SynthError::ClientFailure { attempts: 1, message: "503".into() })
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let store = MediaStore::new(dir.path().join("media")).unwrap();
        let image = Retrying {
            inner: Down,
            policy: RetryPolicy { attempts: 3, backoff: std::time::Duration::from_millis(1) },
            sleep: false,
        };
        let music = MockMediaClient { kind: "music", seed: 2 };
        let tts = MockMediaClient { kind: "speech", seed: 3 };
        let clients = Clients { image: &image, music: &music, tts: &tts };
        let chat = MockChatClient::new(11);
        let config = SynthConfig {
            rounds_per_metatopic: 1,
            max_topics: Some(6),
            max_dialogs: Some(6),
            ..Default::default()
        };
        let out = run_pipeline(
            &meta(1),
            &pools::default_scenario_demos(),
            &pools::default_dialog_demos(),
            &chat,
            &clients,
            &store,
            &config,
        )
        .unwrap();
        // Every dialog with an image placeholder must be rejected as media_failure.
        assert!(out
            .rejected
            .iter()
            .any(|(d, r)| r == "media_failure" && d.placeholder_count(MediaKind::Image) > 0));
        for d in &out.accepted {
            assert_eq!(d.placeholder_count(MediaKind::Image), 0);
        }
    }

    #[test]
    fn pipeline_deterministic_with_mocks() {
        let run = |dir: &std::path::Path| {
            let store = MediaStore::new(dir.join("media")).unwrap();
            let chat = MockChatClient::new(42);
            let image = MockMediaClient { kind: "image", seed: 1 };
            let music = MockMediaClient { kind: "music", seed: 2 };
            let tts = MockMediaClient { kind: "speech", seed: 3 };
            let clients = Clients { image: &image, music: &music, tts: &tts };
            let config = SynthConfig {
                seed: 9,
                rounds_per_metatopic: 2,
                max_topics: Some(12),
                max_dialogs: Some(12),
                ..Default::default()
            };
            let out = run_pipeline(
                &meta(2),
                &pools::default_scenario_demos(),
                &pools::default_dialog_demos(),
                &chat,
                &clients,
                &store,
                &config,
            )
            .unwrap();
            let mut blob = String::new();
            for d in &out.accepted {
                blob.push_str(&serde_json::to_string(d).unwrap());
                blob.push('\n');
            }
            (blob, out.stats)
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (a, sa) = run(d1.path());
        let (b, sb) = run(d2.path());
        assert_eq!(a, b, "pipeline output must be byte-identical");
        assert_eq!(sa, sb);
        assert!(sa.accepted > 0);
    }
}
