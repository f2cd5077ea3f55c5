use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Corpus, Interaction, Session, SplitTag, TrainingExample, Vocabulary};
use crate::error::{MgcotError, Result};

/// Groups interactions into time-ordered sessions and filters rare items and
/// short sessions until both conditions hold at once.
///
/// Sessions come back ordered by their latest timestamp (ties by first
/// appearance in the input); dense item indices follow first appearance in
/// that order.
pub fn sessionize_and_filter(
    interactions: &[Interaction],
    min_session_len: usize,
    min_item_freq: usize,
) -> Result<(Vec<Session>, Vocabulary)> {
    if interactions.is_empty() {
        return Err(MgcotError::EmptyCorpus("no interactions".into()));
    }

    let mut session_slot: HashMap<&str, usize> = HashMap::new();
    let mut raw_items: Vec<&str> = Vec::new();
    let mut item_slot: HashMap<&str, u32> = HashMap::new();
    // (session id, events as (timestamp, file order, item slot))
    let mut grouped: Vec<(&str, Vec<(i64, usize, u32)>)> = Vec::new();
    for (order, it) in interactions.iter().enumerate() {
        let s = *session_slot.entry(&it.session_id).or_insert_with(|| {
            grouped.push((&it.session_id, Vec::new()));
            grouped.len() - 1
        });
        let item = *item_slot.entry(&it.item_id).or_insert_with(|| {
            raw_items.push(&it.item_id);
            raw_items.len() as u32 - 1
        });
        grouped[s].1.push((it.timestamp, order, item));
    }

    let mut sessions: Vec<(usize, &str, i64, Vec<u32>)> = grouped
        .into_iter()
        .enumerate()
        .map(|(order, (id, mut events))| {
            events.sort_by_key(|&(t, o, _)| (t, o));
            let time = events.iter().map(|e| e.0).max().unwrap_or(0);
            (order, id, time, events.into_iter().map(|e| e.2).collect())
        })
        .collect();

    loop {
        let mut freq = vec![0usize; raw_items.len()];
        for (_, _, _, items) in &sessions {
            for &i in items {
                freq[i as usize] += 1;
            }
        }
        let before: usize = sessions.iter().map(|s| s.3.len()).sum::<usize>() + sessions.len();
        for s in &mut sessions {
            s.3.retain(|&i| freq[i as usize] >= min_item_freq);
        }
        sessions.retain(|s| s.3.len() >= min_session_len);
        let after: usize = sessions.iter().map(|s| s.3.len()).sum::<usize>() + sessions.len();
        if after == before {
            break;
        }
    }
    if sessions.is_empty() {
        return Err(MgcotError::EmptyCorpus(
            "every session was removed by filtering".into(),
        ));
    }

    sessions.sort_by_key(|s| (s.2, s.0));
    let mut vocab = Vocabulary::new();
    let out = sessions
        .into_iter()
        .map(|(_, id, time, items)| Session {
            id: id.to_string(),
            items: items
                .into_iter()
                .map(|i| vocab.intern(raw_items[i as usize]))
                .collect(),
            time,
            split: SplitTag::Train,
        })
        .collect();
    Ok((out, vocab))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRule {
    /// The most recent fraction of sessions (rounded) becomes the test set.
    TestFraction(f64),
    /// Sessions whose time key is strictly after this timestamp are test.
    Boundary(i64),
}

/// Temporal train/test split with cold-start removal.
///
/// Test items never seen in training are dropped from test sessions, test
/// sessions that fall below two items are discarded, and the vocabulary is
/// re-indexed to the training items.
pub fn temporal_split(
    mut sessions: Vec<Session>,
    vocab: &Vocabulary,
    rule: SplitRule,
) -> Result<Corpus> {
    sessions.sort_by_key(|s| s.time);
    let n_test = match rule {
        SplitRule::TestFraction(f) => {
            if !(0.0..1.0).contains(&f) {
                return Err(MgcotError::Split(format!(
                    "test fraction {f} outside [0, 1)"
                )));
            }
            ((sessions.len() as f64) * f).round() as usize
        }
        SplitRule::Boundary(t) => sessions.iter().filter(|s| s.time > t).count(),
    };
    let split_at = sessions.len() - n_test;
    let test_raw = sessions.split_off(split_at);
    let train_raw = sessions;
    if train_raw.is_empty() {
        return Err(MgcotError::Split("empty train partition".into()));
    }

    let decode = |i: u32| vocab.decode(i).expect("index from this vocabulary");
    let mut train_vocab = Vocabulary::new();
    let train_sessions: Vec<Session> = train_raw
        .into_iter()
        .map(|s| Session {
            items: s.items.iter().map(|&i| train_vocab.intern(decode(i))).collect(),
            split: SplitTag::Train,
            ..s
        })
        .collect();

    let known: HashSet<u32> = (1..=train_vocab.item_count() as u32).collect();
    let test_sessions: Vec<Session> = test_raw
        .into_iter()
        .filter_map(|s| {
            let items: Vec<u32> = s
                .items
                .iter()
                .filter_map(|&i| train_vocab.encode(decode(i)))
                .filter(|i| known.contains(i))
                .collect();
            (items.len() >= 2).then_some(Session {
                items,
                split: SplitTag::Test,
                ..s
            })
        })
        .collect();
    if test_sessions.is_empty() {
        return Err(MgcotError::Split("empty test partition".into()));
    }
    Ok(Corpus::from_sessions(train_vocab, train_sessions, test_sessions))
}

/// Prefix augmentation: a session `[v1..vL]` yields `([v1..vk], v(k+1))` for
/// `k = 1..L-1`.
pub fn augment(sessions: &[Session]) -> Vec<TrainingExample> {
    sessions
        .iter()
        .flat_map(|s| {
            (1..s.items.len()).map(move |k| TrainingExample {
                prefix: s.items[..k].to_vec(),
                label: s.items[k],
            })
        })
        .collect()
}
