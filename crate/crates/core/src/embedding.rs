//! Symbol vocabulary and input embeddings.
//!
//! Atom rows get a learned positional row indexed by atom ordinal; bond
//! rows get the sum of their two endpoint rows; the virtual token at row 0
//! gets none.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::smiles::UnifiedSequence;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub const VIRTUAL_TOKEN: &str = "[V]";
pub const UNKNOWN_TOKEN: &str = "[UNK]";
pub const DEFAULT_N_MAX: usize = 256;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("molecule has {n} atoms but the positional table holds {n_max}")]
    MoleculeTooLarge { n: usize, n_max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("vocabulary file: {0}")]
    Io(#[from] io::Error),
}

/// Sorted symbol list with dense ids. `[V]` and `[UNK]` are always present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_symbols<I, S>(symbols: I) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: BTreeSet<String> = symbols.into_iter().map(Into::into).collect();
        set.insert(VIRTUAL_TOKEN.to_string());
        set.insert(UNKNOWN_TOKEN.to_string());
        let symbols: Vec<String> = set.into_iter().collect();
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocabulary { symbols, index }
    }

    pub fn build<'a, I>(corpus: I) -> Result<Vocabulary, EmbeddingError>
    where
        I: IntoIterator<Item = &'a UnifiedSequence>,
    {
        let mut seen = BTreeSet::new();
        let mut any = false;
        for seq in corpus {
            any = true;
            seen.extend(seq.tokens().map(str::to_string));
        }
        if !any {
            return Err(EmbeddingError::EmptyCorpus);
        }
        Ok(Vocabulary::from_symbols(seen))
    }

    /// Vocabulary over raw lexical tokens, for the sinusoidal baseline.
    pub fn build_raw<'a, I>(corpus: I) -> Result<Vocabulary, EmbeddingError>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut seen = BTreeSet::new();
        let mut any = false;
        for toks in corpus {
            any = true;
            seen.extend(toks.iter().cloned());
        }
        if !any {
            return Err(EmbeddingError::EmptyCorpus);
        }
        Ok(Vocabulary::from_symbols(seen))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    /// Id of `symbol`, or of `[UNK]` when unseen.
    pub fn id(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or_else(|| self.unknown_id())
    }

    pub fn virtual_id(&self) -> usize {
        self.index[VIRTUAL_TOKEN]
    }

    pub fn unknown_id(&self) -> usize {
        self.index[UNKNOWN_TOKEN]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sym in &self.symbols {
            s.push_str(sym);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Vocabulary {
        Vocabulary::from_symbols(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_text())
    }

    pub fn load(path: &Path) -> io::Result<Vocabulary> {
        Ok(Vocabulary::from_text(&fs::read_to_string(path)?))
    }
}

/// How positions enter the input embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Learned per-atom rows; bonds use the sum of their endpoint rows.
    Structural,
    /// Fixed sinusoids over raw token position, no pre-transformation.
    Sinusoidal,
}

/// Handles to the embedding tables inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub position: Option<ParamId>,
    pub d: usize,
    pub n_max: usize,
}

impl EmbeddingTables {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        vocab_len: usize,
        d: usize,
        n_max: usize,
        mode: PositionMode,
        rng: &mut R,
    ) -> EmbeddingTables {
        let token = store.add_normal("embed.token", &[vocab_len, d], INIT_STD, rng);
        let position = match mode {
            PositionMode::Structural => Some(store.add_normal("embed.position", &[n_max, d], INIT_STD, rng)),
            PositionMode::Sinusoidal => None,
        };
        EmbeddingTables { token, position, d, n_max }
    }

    pub fn from_store(store: &ParamStore, n_max: usize) -> Result<EmbeddingTables, TensorError> {
        let token = store.id("embed.token")?;
        let d = store.get(token).dims2().1;
        let position = store.id("embed.position").ok();
        Ok(EmbeddingTables { token, position, d, n_max })
    }
}

/// `H_0` for a pre-transformed molecule, shape `(n+m+1) x d`.
pub fn embed(
    tape: &mut Tape,
    tables: &EmbeddingTables,
    vocab: &Vocabulary,
    seq: &UnifiedSequence,
) -> Result<Var, EmbeddingError> {
    let n = seq.n();
    if n > tables.n_max {
        return Err(EmbeddingError::MoleculeTooLarge { n, n_max: tables.n_max });
    }
    let mut tok = Vec::with_capacity(seq.len() + 1);
    tok.push(vec![vocab.virtual_id()]);
    tok.extend(seq.tokens().map(|t| vec![vocab.id(t)]));
    let table = tape.param(tables.token);
    let te = tape.gather_sum(table, tok)?;
    let Some(pos_id) = tables.position else {
        return Ok(te);
    };
    let mut pos = Vec::with_capacity(seq.len() + 1);
    pos.push(Vec::new());
    pos.extend((0..n).map(|i| vec![i]));
    pos.extend(seq.bond_endpoints.iter().map(|&(u, v)| vec![u, v]));
    let pos_table = tape.param(pos_id);
    let pe = tape.gather_sum(pos_table, pos)?;
    Ok(tape.add(te, pe)?)
}

/// `H_0` for raw lexical tokens with fixed sinusoidal positions.
pub fn embed_raw(
    tape: &mut Tape,
    tables: &EmbeddingTables,
    vocab: &Vocabulary,
    tokens: &[String],
) -> Result<Var, EmbeddingError> {
    let mut tok = Vec::with_capacity(tokens.len() + 1);
    tok.push(vec![vocab.virtual_id()]);
    tok.extend(tokens.iter().map(|t| vec![vocab.id(t)]));
    let table = tape.param(tables.token);
    let te = tape.gather_sum(table, tok)?;
    let d = tables.d;
    let pe = Tensor::from_fn(tokens.len() + 1, d, |r, c| if r == 0 { 0.0 } else { sinusoid(r - 1, c, d) });
    let pe = tape.constant(pe);
    Ok(tape.add(te, pe)?)
}

pub fn sinusoid(pos: usize, col: usize, d: usize) -> f64 {
    let pair = (col / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
    if col % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}
