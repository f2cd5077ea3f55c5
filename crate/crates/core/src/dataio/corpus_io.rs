//! Versioned on-disk corpus directory.
//!
//! ```text
//! VERSION             format version
//! vocab.txt           index<TAB>raw id, one per line
//! train.txt test.txt  space-separated prefix<TAB>label
//! sessions.txt        split<TAB>id<TAB>time<TAB>items
//! stats.txt           key = value
//! ```

use std::fs;
use std::path::Path;

use super::{Corpus, Session, SplitTag, Vocabulary};
use crate::error::{MgcotError, Result};

pub const CORPUS_VERSION: u32 = 1;

const FILES: [&str; 6] = [
    "VERSION",
    "vocab.txt",
    "train.txt",
    "test.txt",
    "sessions.txt",
    "stats.txt",
];

fn join(items: &[u32]) -> String {
    items
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_items(s: &str, context: &str) -> Result<Vec<u32>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| MgcotError::parse(context, format!("bad item index {t:?}"))))
        .collect()
}

impl Corpus {
    /// Serialized file contents, in a fixed order.
    pub fn to_text_files(&self) -> Vec<(&'static str, String)> {
        let mut vocab = String::new();
        for (i, raw) in self.vocab.iter() {
            vocab.push_str(&format!("{i}\t{raw}\n"));
        }
        let examples = |ex: &[super::TrainingExample]| {
            let mut s = String::new();
            for e in ex {
                s.push_str(&format!("{}\t{}\n", join(&e.prefix), e.label));
            }
            s
        };
        let mut sessions = String::new();
        for s in self.train_sessions.iter().chain(&self.test_sessions) {
            let tag = match s.split {
                SplitTag::Train => "train",
                SplitTag::Test => "test",
            };
            sessions.push_str(&format!("{tag}\t{}\t{}\t{}\n", s.id, s.time, join(&s.items)));
        }
        let st = &self.stats;
        let stats = format!(
            "sessions = {}\ntrain_sessions = {}\ntest_sessions = {}\ntrain_examples = {}\n\
             test_examples = {}\nitems = {}\navg_len = {:.2}\n",
            st.sessions,
            st.train_sessions,
            st.test_sessions,
            st.train_examples,
            st.test_examples,
            st.items,
            st.avg_len
        );
        let contents = [
            format!("{CORPUS_VERSION}\n"),
            vocab,
            examples(&self.train),
            examples(&self.test),
            sessions,
            stats,
        ];
        FILES.into_iter().zip(contents).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MgcotError::io(dir, e))?;
        for (name, body) in self.to_text_files() {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| MgcotError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| MgcotError::io(&path, e))
        };
        let version: u32 = read("VERSION")?
            .trim()
            .parse()
            .map_err(|_| MgcotError::parse("VERSION", "not an integer"))?;
        if version != CORPUS_VERSION {
            return Err(MgcotError::parse(
                "VERSION",
                format!("corpus version {version}, expected {CORPUS_VERSION}"),
            ));
        }

        let mut vocab = Vocabulary::new();
        for (n, line) in read("vocab.txt")?.lines().enumerate() {
            let (idx, raw) = line
                .split_once('\t')
                .ok_or_else(|| MgcotError::parse("vocab.txt", format!("line {}", n + 1)))?;
            let expected = n as u32 + 1;
            if idx.parse::<u32>().ok() != Some(expected) || vocab.intern(raw) != expected {
                return Err(MgcotError::parse(
                    "vocab.txt",
                    format!("line {} is out of order or duplicated", n + 1),
                ));
            }
        }

        let n_items = vocab.item_count() as u32;
        let mut train_sessions = Vec::new();
        let mut test_sessions = Vec::new();
        for (n, line) in read("sessions.txt")?.lines().enumerate() {
            let ctx = format!("sessions.txt line {}", n + 1);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(MgcotError::parse(&ctx, "expected 4 fields"));
            }
            let items = parse_items(f[3], &ctx)?;
            if items.iter().any(|&i| i == 0 || i > n_items) {
                return Err(MgcotError::parse(&ctx, "item index outside vocabulary"));
            }
            let time = f[2]
                .parse()
                .map_err(|_| MgcotError::parse(&ctx, "bad timestamp"))?;
            let (split, target) = match f[0] {
                "train" => (SplitTag::Train, &mut train_sessions),
                "test" => (SplitTag::Test, &mut test_sessions),
                other => return Err(MgcotError::parse(&ctx, format!("unknown split {other:?}"))),
            };
            target.push(Session {
                id: f[1].to_string(),
                items,
                time,
                split,
            });
        }
        let corpus = Corpus::from_sessions(vocab, train_sessions, test_sessions);
        let files = corpus.to_text_files();
        for name in ["train.txt", "test.txt"] {
            let stored = read(name)?;
            let expected = &files.iter().find(|f| f.0 == name).expect("known file").1;
            if &stored != expected {
                return Err(MgcotError::parse(
                    name,
                    "examples disagree with sessions.txt",
                ));
            }
        }
        Ok(corpus)
    }
}
