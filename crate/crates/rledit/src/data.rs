//! Synthetic fact corpus over the toy vocabulary.
//!
//! A fact is (subject, relation) -> object, rendered as token sequences
//! `[s, r, SEP] -> [o]`; the paraphrase renders the same fact with the
//! swapped ordering `[r, s, SEP]`. The generator splits the (subject,
//! relation) universe into pretrain-only facts, an edit-training stream, a
//! held-out edit-evaluation stream and a locality pool. Edit records carry
//! counterfactual objects and are excluded from pretraining, so every edit is
//! genuinely new knowledge; locality facts are pretrained and never edited.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenSequence};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const SEP_TOKEN: u32 = 0;

/// One edit unit: the edit pair, its paraphrase pair and an unrelated
/// locality pair. Field names and order define the JSONL record schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub record_id: u64,
    pub x: Vec<u32>,
    pub y: Vec<u32>,
    pub x_e: Vec<u32>,
    pub y_e: Vec<u32>,
    pub x_loc: Vec<u32>,
    pub y_loc: Vec<u32>,
}

impl KnowledgeRecord {
    pub fn edit_seq(&self) -> TokenSequence {
        let mut tokens = self.x.clone();
        tokens.extend_from_slice(&self.y);
        TokenSequence::new(tokens, self.x.len())
    }

    pub fn para_seq(&self) -> TokenSequence {
        let mut tokens = self.x_e.clone();
        tokens.extend_from_slice(&self.y_e);
        TokenSequence::new(tokens, self.x_e.len())
    }

    pub fn loc_seq(&self) -> TokenSequence {
        let mut tokens = self.x_loc.clone();
        tokens.extend_from_slice(&self.y_loc);
        TokenSequence::new(tokens, self.x_loc.len())
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.x_e.is_empty() || self.y_e.is_empty() || self.x_loc.is_empty() {
            return Err(Error::Degenerate(format!(
                "record {} is missing its paraphrase or locality fields",
                self.record_id
            )));
        }
        self.edit_seq().validate(cfg)?;
        self.para_seq().validate(cfg)?;
        self.loc_seq().validate(cfg)?;
        Ok(())
    }
}

/// A ground-truth association plus its two surface patterns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactTemplate {
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
}

impl FactTemplate {
    /// Primary pattern: [s, r, SEP].
    pub fn prompt(&self) -> Vec<u32> {
        vec![self.subject, self.relation, SEP_TOKEN]
    }

    /// Paraphrase pattern: the swapped ordering [r, s, SEP].
    pub fn paraphrase_prompt(&self) -> Vec<u32> {
        vec![self.relation, self.subject, SEP_TOKEN]
    }

    pub fn sequence(&self) -> TokenSequence {
        let mut tokens = self.prompt();
        tokens.push(self.object);
        TokenSequence::new(tokens, 3)
    }

    pub fn paraphrase_sequence(&self) -> TokenSequence {
        let mut tokens = self.paraphrase_prompt();
        tokens.push(self.object);
        TokenSequence::new(tokens, 3)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VocabMap {
    pub sep: u32,
    pub subjects: (u32, u32),
    pub relations: (u32, u32),
    pub objects: (u32, u32),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_pretrain_facts: usize,
    pub n_pretrain_sequences: usize,
    pub n_train_records: usize,
    pub n_eval_records: usize,
    pub n_locality: usize,
    pub vocab: VocabMap,
}
#[derive(Debug)]
pub struct DatasetBundle {
    /// Pretraining corpus: every pretrained fact in both orderings.
    pub pretrain: Vec<TokenSequence>,
    pub train_stream: Vec<KnowledgeRecord>,
    pub eval_stream: Vec<KnowledgeRecord>,
    /// Held-out locality probes (pretrained facts never edited).
    pub locality: Vec<TokenSequence>,
    pub manifest: DatasetManifest,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_train_records: usize,
    pub n_eval_records: usize,
    pub n_locality: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_subjects: 20,
            n_relations: 10,
            n_train_records: 80,
            n_eval_records: 80,
            n_locality: 24,
            vocab_size: 64,
            max_seq_len: 24,
            seed: 0,
        }
    }
}

pub fn generate_corpus(spec: &GenSpec) -> Result<DatasetBundle> {
    let n_tokens_needed = 1 + spec.n_subjects + spec.n_relations;
    if n_tokens_needed + 2 > spec.vocab_size {
        return Err(Error::Config {
            field: "data.n_subjects".into(),
            msg: format!(
                "vocabulary overflow: {} subject/relation/separator tokens leave fewer than 2 \
                 object tokens in a vocabulary of {}",
                n_tokens_needed, spec.vocab_size
            ),
        });
    }
    let n_pairs = spec.n_subjects * spec.n_relations;
    let needed = spec.n_train_records + spec.n_eval_records + spec.n_locality;
    if n_pairs < needed {
        return Err(Error::Config {
            field: "data.n_subjects".into(),
            msg: format!(
                "{} (subject, relation) pairs cannot cover {} requested records",
                n_pairs, needed
            ),
        });
    }
    if spec.max_seq_len < 4 {
        return Err(Error::Config {
            field: "data.max_seq_len".into(),
            msg: "fact sequences need at least 4 token positions".into(),
        });
    }

    let subj_lo = 1u32;
    let rel_lo = subj_lo + spec.n_subjects as u32;
    let obj_lo = rel_lo + spec.n_relations as u32;
    let n_objects = spec.vocab_size as u32 - obj_lo;
    let vocab = VocabMap {
        sep: SEP_TOKEN,
        subjects: (subj_lo, rel_lo - 1),
        relations: (rel_lo, obj_lo - 1),
        objects: (obj_lo, spec.vocab_size as u32 - 1),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(n_pairs);
    for s in 0..spec.n_subjects as u32 {
        for r in 0..spec.n_relations as u32 {
            pairs.push((subj_lo + s, rel_lo + r));
        }
    }
    pairs.shuffle(&mut rng);

    let facts: Vec<FactTemplate> = pairs
        .iter()
        .map(|&(subject, relation)| FactTemplate {
            subject,
            relation,
            object: obj_lo + rng.random_range(0..n_objects),
        })
        .collect();

    let (train_facts, rest) = facts.split_at(spec.n_train_records);
    let (eval_facts, rest) = rest.split_at(spec.n_eval_records);
    let (loc_facts, pretrain_only) = rest.split_at(spec.n_locality);

    let mut pretrain = Vec::new();
    for fact in loc_facts.iter().chain(pretrain_only) {
        pretrain.push(fact.sequence());
        pretrain.push(fact.paraphrase_sequence());
    }
    pretrain.shuffle(&mut rng);

    let locality: Vec<TokenSequence> = loc_facts.iter().map(|f| f.sequence()).collect();

    let mut next_id = 0u64;
    let mut build_stream = |stream_facts: &[FactTemplate], rng: &mut ChaCha8Rng| -> Vec<KnowledgeRecord> {
        let mut records = Vec::with_capacity(stream_facts.len());
        for (i, fact) in stream_facts.iter().enumerate() {
            // counterfactual object: uniform over objects other than the original
            let mut counterfactual = obj_lo + rng.random_range(0..n_objects);
            while counterfactual == fact.object {
                counterfactual = obj_lo + rng.random_range(0..n_objects);
            }
            // locality probe with a different subject, cycled through the pool
            let loc = (0..loc_facts.len())
                .map(|d| &loc_facts[(i + d) % loc_facts.len()])
                .find(|lf| lf.subject != fact.subject)
                .expect("locality pool spans several subjects");
            records.push(KnowledgeRecord {
                record_id: next_id,
                x: fact.prompt(),
                y: vec![counterfactual],
                x_e: fact.paraphrase_prompt(),
                y_e: vec![counterfactual],
                x_loc: loc.prompt(),
                y_loc: vec![loc.object],
            });
            next_id += 1;
        }
        records
    };

    let train_stream = build_stream(train_facts, &mut rng);
    let eval_stream = build_stream(eval_facts, &mut rng);

    let manifest = DatasetManifest {
        seed: spec.seed,
        n_subjects: spec.n_subjects,
        n_relations: spec.n_relations,
        n_pretrain_facts: loc_facts.len() + pretrain_only.len(),
        n_pretrain_sequences: pretrain.len(),
        n_train_records: train_stream.len(),
        n_eval_records: eval_stream.len(),
        n_locality: locality.len(),
        vocab,
    };

    Ok(DatasetBundle {
        pretrain,
        train_stream,
        eval_stream,
        locality,
        manifest,
    })
}

/// Partition records into batches; every record lands in exactly one batch.
pub fn batch_stream(records: &[KnowledgeRecord], batch_size: usize) -> Vec<Vec<KnowledgeRecord>> {
    assert!(batch_size > 0, "batch_size must be positive");
    records
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

pub fn save_records(records: &[KnowledgeRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Contract(format!("record serialization failed: {e}")))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<KnowledgeRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: KnowledgeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn save_sequences(seqs: &[TokenSequence], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in seqs {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::Contract(format!("sequence serialization failed: {e}")))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_sequences(path: &Path) -> Result<Vec<TokenSequence>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: TokenSequence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(seq);
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GenSpec {
        GenSpec {
            n_subjects: 8,
            n_relations: 6,
            n_train_records: 12,
            n_eval_records: 12,
            n_locality: 8,
            vocab_size: 48,
            max_seq_len: 8,
            seed: 42,
        }
    }

    fn pair_of(prompt: &[u32]) -> (u32, u32) {
        (prompt[0], prompt[1])
    }

    #[test]
    fn splits_are_pairwise_disjoint_on_subject_relation() {
        let b = generate_corpus(&spec()).unwrap();
        let train: Vec<(u32, u32)> = b.train_stream.iter().map(|r| pair_of(&r.x)).collect();
        let eval: Vec<(u32, u32)> = b.eval_stream.iter().map(|r| pair_of(&r.x)).collect();
        let loc: Vec<(u32, u32)> = b.locality.iter().map(|s| pair_of(&s.tokens)).collect();
        // pretrain sequences cover locality + pretrain-only facts; compare via
        // the canonical [s, r, ...] ordering only
        for t in &train {
            assert!(!eval.contains(t) && !loc.contains(t));
        }
        for e in &eval {
            assert!(!loc.contains(e));
        }
    }

    #[test]
    fn edit_pairs_are_not_in_the_pretraining_corpus() {
        let b = generate_corpus(&spec()).unwrap();
        let pretrained: Vec<(u32, u32)> = b
            .pretrain
            .iter()
            .map(|s| {
                // both orderings appear; normalize by subject range
                let (a, c) = (s.tokens[0], s.tokens[1]);
                if a <= b.manifest.vocab.subjects.1 {
                    (a, c)
                } else {
                    (c, a)
                }
            })
            .collect();
        for r in b.train_stream.iter().chain(&b.eval_stream) {
            assert!(!pretrained.contains(&pair_of(&r.x)));
        }
    }

    #[test]
    fn counterfactual_differs_from_pretrain_object_and_paraphrase_shares_target() {
        let b = generate_corpus(&spec()).unwrap();
        // reconstruct true objects by regenerating with the same seed
        let again = generate_corpus(&spec()).unwrap();
        for (r, r2) in b.train_stream.iter().zip(&again.train_stream) {
            assert_eq!(r, r2);
            assert_eq!(r.y, r.y_e, "paraphrase target must match edit target");
            assert_ne!(r.x, r.x_e, "paraphrase must change the surface form");
        }
        // counterfactual contract: the edit target is an object token and the
        // record's own locality answer stays the locality fact's true object
        for r in &b.train_stream {
            let (lo, hi) = b.manifest.vocab.objects;
            assert!(r.y[0] >= lo && r.y[0] <= hi);
            assert!(r.y_loc[0] >= lo && r.y_loc[0] <= hi);
            assert_ne!(pair_of(&r.x_loc), pair_of(&r.x));
            assert_ne!(r.x_loc[0], r.x[0], "locality subject must differ");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a_path = dir.path().join("a.jsonl");
        let b_path = dir.path().join("b.jsonl");
        let a = generate_corpus(&spec()).unwrap();
        let b = generate_corpus(&spec()).unwrap();
        save_records(&a.train_stream, &a_path).unwrap();
        save_records(&b.train_stream, &b_path).unwrap();
        assert_eq!(fs::read(&a_path).unwrap(), fs::read(&b_path).unwrap());
    }

    #[test]
    fn records_roundtrip_and_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let b = generate_corpus(&spec()).unwrap();
        save_records(&b.train_stream, &path).unwrap();
        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded, b.train_stream);

        // truncated line
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"record_id\": 99, \"x\": [1\n");
        fs::write(&path, text).unwrap();
        let err = load_records(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, b.train_stream.len() + 1),
            other => panic!("expected parse error, got {other}"),
        }

        // empty file loads as empty
        fs::write(&path, "").unwrap();
        assert!(load_records(&path).unwrap().is_empty());
    }

    #[test]
    fn vocabulary_overflow_is_config_error() {
        let mut s = spec();
        s.vocab_size = 16;
        let err = generate_corpus(&s).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn batching_partitions_exactly() {
        let b = generate_corpus(&spec()).unwrap();
        let batches = batch_stream(&b.train_stream, 5);
        let total: usize = batches.iter().map(|x| x.len()).sum();
        assert_eq!(total, b.train_stream.len());
        assert!(batches.iter().rev().skip(1).all(|x| x.len() == 5));
    }

    #[test]
    fn records_validate_against_default_model() {
        let b = generate_corpus(&GenSpec::default()).unwrap();
        let cfg = ModelConfig::default();
        for r in b.train_stream.iter().chain(&b.eval_stream) {
            r.validate(&cfg).unwrap();
        }
    }
}
