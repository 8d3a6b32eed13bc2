//! Token representation and contextualization.
//!
//! Word embeddings come either trained from scratch or loaded from a
//! pretrained vector file; an optional character-level CNN appends a
//! per-token feature vector; a word-level CNN, LSTM or BiLSTM contextualizes
//! the sequence; an affine projection maps hidden states to per-tag emission
//! scores. Exactly six encoder stacks are expressible: {CNN, LSTM, BiLSTM}
//! with and without the char CNN.

use std::collections::HashMap;
use std::io::BufRead;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("DimMismatch: line {0}: expected {1} values, got {2}")]
    DimMismatch(usize, usize, usize),
    #[error("BadConfig: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// First word-level layer choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordEncoderKind {
    Cnn,
    Lstm,
    Bilstm,
}

impl WordEncoderKind {
    pub fn parse(s: &str) -> Result<Self, EncoderError> {
        match s {
            "cnn" => Ok(Self::Cnn),
            "lstm" => Ok(Self::Lstm),
            "bilstm" => Ok(Self::Bilstm),
            other => Err(EncoderError::BadConfig(format!(
                "word_encoder {:?} (expected cnn|lstm|bilstm)",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Cnn => "cnn",
            Self::Lstm => "lstm",
            Self::Bilstm => "bilstm",
        }
    }
}

/// Where word vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Embedding rows trained with the rest of the model.
    Trained,
    /// Rows seeded from a pretrained vector file; lookups case-fold.
    PretrainedFile,
}

impl EmbeddingSource {
    pub fn parse(s: &str) -> Result<Self, EncoderError> {
        match s {
            "trained" => Ok(Self::Trained),
            "pretrained" => Ok(Self::PretrainedFile),
            other => Err(EncoderError::BadConfig(format!(
                "embedding_source {:?} (expected trained|pretrained)",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Trained => "trained",
            Self::PretrainedFile => "pretrained",
        }
    }
}

/// Full architecture descriptor. `hidden_dim` is the encoder output width;
/// the BiLSTM splits it across the two directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    pub word_encoder: WordEncoderKind,
    pub use_char_cnn: bool,
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub char_window: usize,
    pub word_window: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub embedding_source: EmbeddingSource,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            word_encoder: WordEncoderKind::Bilstm,
            use_char_cnn: true,
            word_dim: 50,
            char_dim: 16,
            char_filters: 30,
            char_window: 3,
            word_window: 3,
            hidden_dim: 200,
            dropout: 0.5,
            embedding_source: EmbeddingSource::Trained,
        }
    }
}

impl ArchitectureConfig {
    /// The six expressible encoder stacks, in their conventional order.
    pub fn six_variants() -> Vec<ArchitectureConfig> {
        let mut out = Vec::with_capacity(6);
        for &use_char_cnn in &[false, true] {
            for &word_encoder in &[
                WordEncoderKind::Cnn,
                WordEncoderKind::Lstm,
                WordEncoderKind::Bilstm,
            ] {
                out.push(ArchitectureConfig {
                    word_encoder,
                    use_char_cnn,
                    ..Default::default()
                });
            }
        }
        out
    }

    /// Human-readable stack name, e.g. "word BiLSTM + char CNN + CRF".
    pub fn describe(&self) -> String {
        let word = match self.word_encoder {
            WordEncoderKind::Cnn => "word CNN",
            WordEncoderKind::Lstm => "word LSTM",
            WordEncoderKind::Bilstm => "word BiLSTM",
        };
        if self.use_char_cnn {
            format!("{} + char CNN + CRF", word)
        } else {
            format!("{} + CRF", word)
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.word_encoder == WordEncoderKind::Bilstm && self.hidden_dim % 2 != 0 {
            return Err(EncoderError::BadConfig(
                "bilstm needs an even hidden_dim".into(),
            ));
        }
        if self.word_window % 2 == 0 {
            return Err(EncoderError::BadConfig("word_window must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::BadConfig("dropout outside [0,1)".into()));
        }
        if self.word_dim == 0 || self.hidden_dim == 0 || self.char_window == 0 {
            return Err(EncoderError::BadConfig("zero dimension".into()));
        }
        Ok(())
    }

    /// Serializes as a flat `key=value` file body.
    pub fn to_kv(&self) -> String {
        format!(
            "word_encoder={}\nuse_char_cnn={}\nword_dim={}\nchar_dim={}\nchar_filters={}\nchar_window={}\nword_window={}\nhidden_dim={}\ndropout={}\nembedding_source={}\n",
            self.word_encoder.as_str(),
            self.use_char_cnn,
            self.word_dim,
            self.char_dim,
            self.char_filters,
            self.char_window,
            self.word_window,
            self.hidden_dim,
            self.dropout,
            self.embedding_source.as_str()
        )
    }

    /// Parses a `key=value` file body; unset keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self, EncoderError> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                EncoderError::BadConfig(format!("line {}: expected key=value", lineno + 1))
            })?;
            let bad = |what: &str| EncoderError::BadConfig(format!("{}={:?}: {}", key, value, what));
            match key.trim() {
                "word_encoder" => cfg.word_encoder = WordEncoderKind::parse(value.trim())?,
                "use_char_cnn" => {
                    cfg.use_char_cnn = value.trim().parse().map_err(|_| bad("not a bool"))?
                }
                "word_dim" => cfg.word_dim = value.trim().parse().map_err(|_| bad("not a count"))?,
                "char_dim" => cfg.char_dim = value.trim().parse().map_err(|_| bad("not a count"))?,
                "char_filters" => {
                    cfg.char_filters = value.trim().parse().map_err(|_| bad("not a count"))?
                }
                "char_window" => {
                    cfg.char_window = value.trim().parse().map_err(|_| bad("not a count"))?
                }
                "word_window" => {
                    cfg.word_window = value.trim().parse().map_err(|_| bad("not a count"))?
                }
                "hidden_dim" => {
                    cfg.hidden_dim = value.trim().parse().map_err(|_| bad("not a count"))?
                }
                "dropout" => cfg.dropout = value.trim().parse().map_err(|_| bad("not a rate"))?,
                "embedding_source" => {
                    cfg.embedding_source = EmbeddingSource::parse(value.trim())?
                }
                other => return Err(EncoderError::BadConfig(format!("unknown key {:?}", other))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn glorot<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan: usize = shape.iter().sum();
    Tensor::uniform(shape, (6.0 / fan as f64).sqrt(), rng)
}

/// Token-to-row vocabulary backed by a `V x D` parameter. Row 0 is padding,
/// row 1 the unknown-token fallback.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    index: HashMap<String, usize>,
    rows: Vec<String>,
    pub vectors: ParamId,
    pub dim: usize,
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

impl EmbeddingTable {
    pub fn pad_index(&self) -> usize {
        0
    }

    pub fn unk_index(&self) -> usize {
        1
    }

    fn with_rows(rows: Vec<String>, vectors: ParamId, dim: usize) -> Self {
        let index = rows
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            index,
            rows,
            vectors,
            dim,
        }
    }

    /// Trains embeddings from scratch over the given vocabulary (pad/unk are
    /// prepended). Rows start uniform in the conventional ±sqrt(3/D) range.
    pub fn trained<R: Rng>(
        vocab: &[String],
        dim: usize,
        name: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        let mut rows = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for t in vocab {
            if !rows.contains(t) {
                rows.push(t.clone());
            }
        }
        let bound = (3.0 / dim as f64).sqrt();
        let mut value = Tensor::uniform(&[rows.len(), dim], bound, rng);
        value.data_mut()[..dim].iter_mut().for_each(|v| *v = 0.0); // pad row
        let vectors = store.add(name, value)?;
        Ok(Self::with_rows(rows, vectors, dim))
    }

    /// Loads a pretrained vector file (`token v1 .. vD` per line). Corpus
    /// tokens absent from the file get small random rows, uniform in
    /// ±0.25/sqrt(D), deterministic for a fixed rng seed.
    pub fn pretrained<R: Rng, B: BufRead>(
        reader: B,
        dim: usize,
        corpus_tokens: &[String],
        name: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        let mut rows = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut data: Vec<Vec<f64>> = Vec::new();
        let missing_bound = 0.25 / (dim as f64).sqrt();
        let rand_row = |rng: &mut R| -> Vec<f64> {
            (0..dim).map(|_| rng.gen_range(-missing_bound..=missing_bound)).collect()
        };
        data.push(vec![0.0; dim]); // pad
        data.push(rand_row(rng)); // unk

        let mut seen: HashMap<String, ()> = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields
                .next()
                .ok_or_else(|| EncoderError::DimMismatch(lineno + 1, dim + 1, 0))?;
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| EncoderError::DimMismatch(lineno + 1, dim, 0))?;
            if values.len() != dim {
                return Err(EncoderError::DimMismatch(lineno + 1, dim, values.len()));
            }
            if seen.insert(token.to_string(), ()).is_none() {
                rows.push(token.to_string());
                data.push(values);
            }
        }
        for t in corpus_tokens {
            let folded = t.to_lowercase();
            if !seen.contains_key(&folded) && folded != PAD_TOKEN && folded != UNK_TOKEN {
                seen.insert(folded.clone(), ());
                rows.push(folded);
                data.push(rand_row(rng));
            }
        }

        let flat: Vec<f64> = data.into_iter().flatten().collect();
        let value = Tensor::new(vec![rows.len(), dim], flat)?;
        let vectors = store.add(name, value)?;
        Ok(Self::with_rows(rows, vectors, dim))
    }

    /// Rebuilds a table around an already-registered parameter (model load).
    pub fn from_saved(rows: Vec<String>, vectors: ParamId, dim: usize) -> Self {
        Self::with_rows(rows, vectors, dim)
    }

    pub fn lookup(&self, token: &str, lowercase: bool) -> usize {
        let key = if lowercase {
            token.to_lowercase()
        } else {
            token.to_string()
        };
        self.index.get(&key).copied().unwrap_or(self.unk_index())
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    /// Vocabulary in row order (including pad/unk), for serialization.
    pub fn row_tokens(&self) -> &[String] {
        &self.rows
    }
}

/// Looks up one row per token: a `T x D` matrix on the tape.
pub fn embed_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    table: &EmbeddingTable,
    tokens: &[String],
    lowercase: bool,
) -> Result<Var, EncoderError> {
    let rows: Vec<usize> = tokens
        .iter()
        .map(|t| table.lookup(t, lowercase))
        .collect();
    Ok(tape.gather_rows(store, table.vectors, &rows)?)
}

/// Character-level CNN: a 1-D convolution over char embeddings followed by
/// max-over-time pooling, yielding one fixed-length vector per token.
#[derive(Debug, Clone)]
pub struct CharCnn {
    index: HashMap<char, usize>,
    chars: Vec<char>,
    pub table: ParamId,  // A x d
    pub conv_w: ParamId, // (window*d, F)
    pub conv_b: ParamId, // F
    pub window: usize,
    pub filters: usize,
    pub dim: usize,
}

impl CharCnn {
    pub fn new<R: Rng>(
        alphabet: &[char],
        dim: usize,
        filters: usize,
        window: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        let mut chars = vec!['\u{0}', '\u{1}']; // pad, unk
        for &c in alphabet {
            if !chars.contains(&c) {
                chars.push(c);
            }
        }
        let bound = (3.0 / dim as f64).sqrt();
        let mut emb = Tensor::uniform(&[chars.len(), dim], bound, rng);
        emb.data_mut()[..dim].iter_mut().for_each(|v| *v = 0.0);
        let table = store.add(&format!("{}.table", prefix), emb)?;
        let conv_w = store.add(&format!("{}.conv_w", prefix), glorot(&[window * dim, filters], rng))?;
        let conv_b = store.add(&format!("{}.conv_b", prefix), Tensor::zeros(&[filters]))?;
        Ok(Self {
            index: chars.iter().enumerate().map(|(i, c)| (*c, i)).collect(),
            chars,
            table,
            conv_w,
            conv_b,
            window,
            filters,
            dim,
        })
    }

    pub fn from_saved(
        chars: Vec<char>,
        table: ParamId,
        conv_w: ParamId,
        conv_b: ParamId,
        window: usize,
        filters: usize,
        dim: usize,
    ) -> Self {
        Self {
            index: chars.iter().enumerate().map(|(i, c)| (*c, i)).collect(),
            chars,
            table,
            conv_w,
            conv_b,
            window,
            filters,
            dim,
        }
    }

    pub fn alphabet(&self) -> &[char] {
        &self.chars
    }

    /// Encodes one token surface to a length-F vector.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        surface: &str,
    ) -> Result<Var, EncoderError> {
        let mut idx: Vec<usize> = surface
            .chars()
            .map(|c| self.index.get(&c).copied().unwrap_or(1))
            .collect();
        while idx.len() < self.window {
            idx.push(0); // pad short tokens up to one full window
        }
        let rows = tape.gather_rows(store, self.table, &idx)?;
        let positions = idx.len() - self.window + 1;
        let mut windows = Vec::with_capacity(positions);
        for p in 0..positions {
            let win = tape.slice(rows, 0, p, self.window)?;
            windows.push(tape.flatten(win)?);
        }
        let stacked = tape.stack_rows(&windows)?;
        let w = tape.param(store, self.conv_w);
        let b = tape.param(store, self.conv_b);
        let conv = tape.matmul(stacked, w)?;
        let biased = tape.add_row(conv, b)?;
        let activated = tape.relu(biased);
        Ok(tape.max_over_axis(activated, 0)?)
    }
}

/// One LSTM direction with the standard gate equations; gate order in the
/// packed 4H vectors is input, forget, cell, output. Forget bias starts at 1.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: ParamId, // (Din, 4H)
    pub u: ParamId, // (H, 4H)
    pub b: ParamId, // 4H
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        input_dim: usize,
        hidden: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        let w = store.add(&format!("{}.w", prefix), glorot(&[input_dim, 4 * hidden], rng))?;
        let u = store.add(&format!("{}.u", prefix), glorot(&[hidden, 4 * hidden], rng))?;
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(&format!("{}.b", prefix), bias)?;
        Ok(Self { w, u, b, hidden })
    }

    pub fn from_saved(w: ParamId, u: ParamId, b: ParamId, hidden: usize) -> Self {
        Self { w, u, b, hidden }
    }

    /// Hidden states per position, returned in original sequence order even
    /// when running right to left.
    pub fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        reverse: bool,
    ) -> Result<Vec<Var>, EncoderError> {
        let steps = tape.value(x).shape()[0];
        let w = tape.param(store, self.w);
        let u = tape.param(store, self.u);
        let b = tape.param(store, self.b);
        let z_all = tape.matmul(x, w)?; // (T, 4H)

        let h0 = tape.leaf(Tensor::zeros(&[self.hidden]));
        let c0 = tape.leaf(Tensor::zeros(&[self.hidden]));
        let (mut h, mut c) = (h0, c0);
        let mut out = vec![h0; steps];

        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let zx = tape.row(z_all, t)?;
            let zh = tape.matmul(h, u)?;
            let pre0 = tape.add(zx, zh)?;
            let pre = tape.add(pre0, b)?;
            let i_gate = {
                let s = tape.slice(pre, 0, 0, self.hidden)?;
                tape.sigmoid(s)
            };
            let f_gate = {
                let s = tape.slice(pre, 0, self.hidden, self.hidden)?;
                tape.sigmoid(s)
            };
            let g_cell = {
                let s = tape.slice(pre, 0, 2 * self.hidden, self.hidden)?;
                tape.tanh(s)
            };
            let o_gate = {
                let s = tape.slice(pre, 0, 3 * self.hidden, self.hidden)?;
                tape.sigmoid(s)
            };
            let fc = tape.hadamard(f_gate, c)?;
            let ig = tape.hadamard(i_gate, g_cell)?;
            c = tape.add(fc, ig)?;
            let ct = tape.tanh(c);
            h = tape.hadamard(o_gate, ct)?;
            out[t] = h;
        }
        Ok(out)
    }
}

/// Same-padded word-level convolution.
#[derive(Debug, Clone)]
pub struct WordCnn {
    pub conv_w: ParamId, // (window*Din, H)
    pub conv_b: ParamId, // H
    pub window: usize,
    pub input_dim: usize,
}

impl WordCnn {
    pub fn new<R: Rng>(
        input_dim: usize,
        hidden: usize,
        window: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        let conv_w = store.add(
            &format!("{}.conv_w", prefix),
            glorot(&[window * input_dim, hidden], rng),
        )?;
        let conv_b = store.add(&format!("{}.conv_b", prefix), Tensor::zeros(&[hidden]))?;
        Ok(Self {
            conv_w,
            conv_b,
            window,
            input_dim,
        })
    }

    pub fn from_saved(conv_w: ParamId, conv_b: ParamId, window: usize, input_dim: usize) -> Self {
        Self {
            conv_w,
            conv_b,
            window,
            input_dim,
        }
    }

    pub fn run(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, EncoderError> {
        let steps = tape.value(x).shape()[0];
        let half = self.window / 2;
        let pad = tape.leaf(Tensor::zeros(&[self.input_dim]));
        let mut rows = Vec::with_capacity(steps + 2 * half);
        rows.extend(std::iter::repeat(pad).take(half));
        for t in 0..steps {
            rows.push(tape.row(x, t)?);
        }
        rows.extend(std::iter::repeat(pad).take(half));

        let mut windows = Vec::with_capacity(steps);
        for t in 0..steps {
            windows.push(tape.concat(&rows[t..t + self.window], 0)?);
        }
        let stacked = tape.stack_rows(&windows)?;
        let w = tape.param(store, self.conv_w);
        let b = tape.param(store, self.conv_b);
        let conv = tape.matmul(stacked, w)?;
        let biased = tape.add_row(conv, b)?;
        Ok(tape.relu(biased))
    }
}

/// The word-level contextualizer: one of the three first-layer choices.
#[derive(Debug, Clone)]
pub enum WordEncoder {
    Cnn(WordCnn),
    Lstm(LstmCell),
    Bilstm { fwd: LstmCell, bwd: LstmCell },
}

impl WordEncoder {
    pub fn new<R: Rng>(
        kind: WordEncoderKind,
        input_dim: usize,
        hidden: usize,
        window: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        match kind {
            WordEncoderKind::Cnn => Ok(Self::Cnn(WordCnn::new(
                input_dim, hidden, window, "word_cnn", store, rng,
            )?)),
            WordEncoderKind::Lstm => Ok(Self::Lstm(LstmCell::new(
                input_dim, hidden, "lstm", store, rng,
            )?)),
            WordEncoderKind::Bilstm => Ok(Self::Bilstm {
                fwd: LstmCell::new(input_dim, hidden / 2, "bilstm.fwd", store, rng)?,
                bwd: LstmCell::new(input_dim, hidden / 2, "bilstm.bwd", store, rng)?,
            }),
        }
    }

    pub fn kind(&self) -> WordEncoderKind {
        match self {
            Self::Cnn(_) => WordEncoderKind::Cnn,
            Self::Lstm(_) => WordEncoderKind::Lstm,
            Self::Bilstm { .. } => WordEncoderKind::Bilstm,
        }
    }

    /// `T x Din` in, `T x H` out.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, EncoderError> {
        match self {
            Self::Cnn(cnn) => cnn.run(tape, store, x),
            Self::Lstm(cell) => {
                let hs = cell.run(tape, store, x, false)?;
                Ok(tape.stack_rows(&hs)?)
            }
            Self::Bilstm { fwd, bwd } => {
                let hf = fwd.run(tape, store, x, false)?;
                let hb = bwd.run(tape, store, x, true)?;
                let mut rows = Vec::with_capacity(hf.len());
                for (f, b) in hf.iter().zip(&hb) {
                    rows.push(tape.concat(&[*f, *b], 0)?);
                }
                Ok(tape.stack_rows(&rows)?)
            }
        }
    }
}

/// Affine map from hidden states to per-tag emission scores.
#[derive(Debug, Clone)]
pub struct EmissionProjection {
    pub w: ParamId, // (H, L)
    pub b: ParamId, // L
}

impl EmissionProjection {
    pub fn new<R: Rng>(
        hidden: usize,
        labels: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        Ok(Self {
            w: store.add("proj.w", glorot(&[hidden, labels], rng))?,
            b: store.add("proj.b", Tensor::zeros(&[labels]))?,
        })
    }

    pub fn from_saved(w: ParamId, b: ParamId) -> Self {
        Self { w, b }
    }

    pub fn project(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var, EncoderError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let scores = tape.matmul(hidden, w)?;
        Ok(tape.add_row(scores, b)?)
    }
}

/// The full encoder stack: embeddings (+ optional char CNN), contextualizer,
/// projection. Produces `T x L` emissions for any of the six variants.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub config: ArchitectureConfig,
    pub word_table: EmbeddingTable,
    pub char_cnn: Option<CharCnn>,
    pub word_encoder: WordEncoder,
    pub projection: EmissionProjection,
}

impl SequenceEncoder {
    /// Initializes all parameters for a vocabulary extracted from training
    /// data. `pretrained` supplies the vector file when the config asks for
    /// pretrained embeddings.
    pub fn init<R: Rng, B: BufRead>(
        config: ArchitectureConfig,
        word_vocab: &[String],
        char_vocab: &[char],
        num_labels: usize,
        store: &mut ParamStore,
        rng: &mut R,
        pretrained: Option<B>,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let word_table = match (config.embedding_source, pretrained) {
            (EmbeddingSource::PretrainedFile, Some(reader)) => EmbeddingTable::pretrained(
                reader,
                config.word_dim,
                word_vocab,
                "word_emb",
                store,
                rng,
            )?,
            (EmbeddingSource::PretrainedFile, None) => {
                return Err(EncoderError::BadConfig(
                    "pretrained embeddings requested but no vector file given".into(),
                ))
            }
            (EmbeddingSource::Trained, _) => {
                EmbeddingTable::trained(word_vocab, config.word_dim, "word_emb", store, rng)?
            }
        };
        let char_cnn = if config.use_char_cnn {
            Some(CharCnn::new(
                char_vocab,
                config.char_dim,
                config.char_filters,
                config.char_window,
                "char_cnn",
                store,
                rng,
            )?)
        } else {
            None
        };
        let input_dim = config.word_dim + if config.use_char_cnn { config.char_filters } else { 0 };
        let word_encoder = WordEncoder::new(
            config.word_encoder,
            input_dim,
            config.hidden_dim,
            config.word_window,
            store,
            rng,
        )?;
        let projection = EmissionProjection::new(config.hidden_dim, num_labels, store, rng)?;
        Ok(Self {
            config,
            word_table,
            char_cnn,
            word_encoder,
            projection,
        })
    }

    fn lowercase_lookup(&self) -> bool {
        self.config.embedding_source == EmbeddingSource::PretrainedFile
    }

    /// Runs the stack over one sentence. Dropout applies to the word
    /// representations and the encoder output, in train mode only.
    pub fn emissions<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[String],
        train: bool,
        rng: &mut R,
    ) -> Result<Var, EncoderError> {
        let embedded = embed_sequence(tape, store, &self.word_table, tokens, self.lowercase_lookup())?;
        let reps = if let Some(char_cnn) = &self.char_cnn {
            let mut char_vecs = Vec::with_capacity(tokens.len());
            for token in tokens {
                char_vecs.push(char_cnn.encode(tape, store, token)?);
            }
            let char_mat = tape.stack_rows(&char_vecs)?;
            tape.concat(&[embedded, char_mat], 1)?
        } else {
            embedded
        };
        let reps = tape.dropout(reps, self.config.dropout, train, rng)?;
        let hidden = self.word_encoder.run(tape, store, reps)?;
        let hidden = tape.dropout(hidden, self.config.dropout, train, rng)?;
        self.projection.project(tape, store, hidden)
    }
}

/// First-occurrence word vocabulary over tokenized sentences.
pub fn collect_word_vocab<'a>(sentences: impl Iterator<Item = &'a [String]>) -> Vec<String> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for sent in sentences {
        for tok in sent {
            if seen.insert(tok.clone(), ()).is_none() {
                out.push(tok.clone());
            }
        }
    }
    out
}

/// First-occurrence character alphabet over tokenized sentences.
pub fn collect_char_vocab<'a>(sentences: impl Iterator<Item = &'a [String]>) -> Vec<char> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for sent in sentences {
        for tok in sent {
            for c in tok.chars() {
                if seen.insert(c, ()).is_none() {
                    out.push(c);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strings(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn exactly_six_variants_exist() {
        let variants = ArchitectureConfig::six_variants();
        assert_eq!(variants.len(), 6);
        let names: Vec<String> = variants.iter().map(|v| v.describe()).collect();
        assert_eq!(
            names,
            [
                "word CNN + CRF",
                "word LSTM + CRF",
                "word BiLSTM + CRF",
                "word CNN + char CNN + CRF",
                "word LSTM + char CNN + CRF",
                "word BiLSTM + char CNN + CRF",
            ]
        );
    }

    #[test]
    fn config_kv_round_trips() {
        for cfg in ArchitectureConfig::six_variants() {
            let parsed = ArchitectureConfig::from_kv(&cfg.to_kv()).unwrap();
            assert_eq!(parsed, cfg);
        }
        assert!(ArchitectureConfig::from_kv("nonsense_key=1").is_err());
        assert!(ArchitectureConfig::from_kv("word_encoder=gru").is_err());
    }

    #[test]
    fn trained_table_counts_and_lookup() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable::trained(
            &strings(&["Deep", "Parsing", "Deep"]),
            8,
            "emb",
            &mut store,
            &mut rng,
        )
        .unwrap();
        assert_eq!(table.vocab_size(), 4); // pad, unk, Deep, Parsing
        assert_eq!(table.lookup("Deep", false), 2);
        assert_eq!(table.lookup("notseen", false), table.unk_index());
        // case-folding only when asked
        assert_eq!(table.lookup("deep", false), table.unk_index());
    }

    #[test]
    fn pretrained_counts_exact_rows_and_deterministic_unk() {
        let file = "alpha 1 2 3 4\nbeta 5 6 7 8\ngamma 9 10 11 12\n";
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = EmbeddingTable::pretrained(
            file.as_bytes(),
            4,
            &[],
            "emb",
            &mut store,
            &mut rng,
        )
        .unwrap();
        // 3 file tokens + unk + pad
        assert_eq!(table.vocab_size(), 5);
        assert_eq!(table.dim, 4);
        // in-file token returns the file vector exactly
        let idx = table.lookup("beta", true);
        let v = store.value(table.vectors);
        assert_eq!(&v.data()[idx * 4..(idx + 1) * 4], &[5.0, 6.0, 7.0, 8.0]);

        // unseen corpus token gets a row that is deterministic per seed
        let build = |seed: u64| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = EmbeddingTable::pretrained(
                file.as_bytes(),
                4,
                &strings(&["Novelty"]),
                "emb",
                &mut store,
                &mut rng,
            )
            .unwrap();
            let idx = t.lookup("novelty", true);
            assert_ne!(idx, t.unk_index());
            store.value(t.vectors).data()[idx * 4..(idx + 1) * 4].to_vec()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn pretrained_dim_mismatch_carries_line() {
        let file = "alpha 1 2 3 4\nbeta 5 6\n";
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        match EmbeddingTable::pretrained(file.as_bytes(), 4, &[], "emb", &mut store, &mut rng) {
            Err(EncoderError::DimMismatch(2, 4, 2)) => {}
            other => panic!("expected DimMismatch on line 2, got {:?}", other),
        }
    }

    #[test]
    fn embed_sequence_shape_and_row_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table =
            EmbeddingTable::trained(&strings(&["a", "b"]), 6, "emb", &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let toks = strings(&["a", "b", "a"]);
        let m = embed_sequence(&mut tape, &store, &table, &toks, false).unwrap();
        assert_eq!(tape.value(m).shape(), &[3, 6]);
        let v = tape.value(m);
        for j in 0..6 {
            assert_eq!(v.at(0, j), v.at(2, j)); // identical tokens, identical rows
        }
        let expected = &store.value(table.vectors).data()[2 * 6..3 * 6];
        assert_eq!(&v.data()[..6], expected); // known token -> its row
    }

    fn tiny_char_cnn(store: &mut ParamStore) -> CharCnn {
        // d=2, F=1, w=2; fixed weights for hand computation
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cnn = CharCnn::new(&['a', 'b'], 2, 1, 2, "cc", store, &mut rng).unwrap();
        let table = store.get_mut(cnn.table);
        // rows: pad, unk, 'a', 'b'
        table.value = Tensor::matrix(&[
            vec![0.0, 0.0],
            vec![0.5, 0.5],
            vec![0.1, 0.2],
            vec![0.3, 0.4],
        ])
        .unwrap();
        store.get_mut(cnn.conv_w).value =
            Tensor::matrix(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        store.get_mut(cnn.conv_b).value = Tensor::vector(vec![0.05]);
        cnn.dim = 2;
        cnn
    }

    #[test]
    fn char_cnn_hand_computed_scalar() {
        // window over "ab": [0.1 0.2 0.3 0.4] . [1 2 3 4] + 0.05 = 3.05
        let mut store = ParamStore::new();
        let cnn = tiny_char_cnn(&mut store);
        let mut tape = Tape::new();
        let out = cnn.encode(&mut tape, &store, "ab").unwrap();
        assert_eq!(tape.value(out).shape(), &[1]);
        assert!((tape.value(out).data()[0] - 3.05).abs() < 1e-12);
    }

    #[test]
    fn char_cnn_output_length_is_filter_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cnn = CharCnn::new(&['x', 'y', 'z'], 3, 7, 3, "cc", &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        for token in ["x", "xy", "xyzzy", "zyxwvut"] {
            let out = cnn.encode(&mut tape, &store, token).unwrap();
            assert_eq!(tape.value(out).shape(), &[7], "token {}", token);
        }
    }

    #[test]
    fn char_cnn_repeated_char_is_length_invariant_past_window() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cnn = CharCnn::new(&['q'], 2, 3, 2, "cc", &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let a = cnn.encode(&mut tape, &store, "qq").unwrap();
        let b = cnn.encode(&mut tape, &store, "qqqqq").unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn lstm_all_zero_weights_gives_zero_states() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = LstmCell::new(3, 4, "l", &mut store, &mut rng).unwrap();
        for id in [cell.w, cell.u, cell.b] {
            store.get_mut(id).value.fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(&[vec![1.0, -1.0, 0.5], vec![0.2, 0.0, -0.7]]).unwrap());
        let hs = cell.run(&mut tape, &store, x, false).unwrap();
        for h in hs {
            assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lstm_single_step_matches_gate_equations() {
        // d=1, H=1, hand-set gates; expected value computed from the scalar
        // LSTM equations with std functions (independent scalar route).
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = LstmCell::new(1, 1, "l", &mut store, &mut rng).unwrap();
        let (wi, wf, wg, wo) = (0.5, 0.25, 1.0, -0.5);
        store.get_mut(cell.w).value = Tensor::matrix(&[vec![wi, wf, wg, wo]]).unwrap();
        store.get_mut(cell.u).value.fill(0.0);
        store.get_mut(cell.b).value.fill(0.0);

        let x = 1.3;
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::matrix(&[vec![x]]).unwrap());
        let hs = cell.run(&mut tape, &store, xv, false).unwrap();
        let got = tape.value(hs[0]).data()[0];

        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sigma(wi * x);
        let g = (wg * x).tanh();
        let o = sigma(wo * x);
        let c = i * g; // c0 = 0, so the forget path vanishes
        let expect = o * c.tanh();
        assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
    }

    #[test]
    fn bilstm_output_width_is_sum_of_directions() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = WordEncoder::new(WordEncoderKind::Bilstm, 5, 8, 3, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(&[4, 5], 1.0, &mut rng));
        let h = enc.run(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(h).shape(), &[4, 8]);
    }

    #[test]
    fn bilstm_tied_directions_are_symmetric_on_palindromes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fwd = LstmCell::new(2, 3, "f", &mut store, &mut rng).unwrap();
        let bwd = LstmCell::new(2, 3, "b", &mut store, &mut rng).unwrap();
        // tie the directions
        for (a, b) in [(fwd.w, bwd.w), (fwd.u, bwd.u), (fwd.b, bwd.b)] {
            store.get_mut(b).value = store.value(a).clone();
        }
        let enc = WordEncoder::Bilstm { fwd, bwd };
        // palindromic input rows
        let rows = vec![vec![0.3, -0.7], vec![1.1, 0.2], vec![0.3, -0.7]];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(&rows).unwrap());
        let h = tape_value_matrix(&mut tape, &store, &enc, x);
        let steps = rows.len();
        for t in 0..steps {
            for j in 0..3 {
                let fwd_at_t = h.at(t, j);
                let bwd_at_mirror = h.at(steps - 1 - t, 3 + j);
                assert!(
                    (fwd_at_t - bwd_at_mirror).abs() < 1e-12,
                    "position {} feature {}",
                    t,
                    j
                );
            }
        }
    }

    fn tape_value_matrix(
        tape: &mut Tape,
        store: &ParamStore,
        enc: &WordEncoder,
        x: Var,
    ) -> Tensor {
        let h = enc.run(tape, store, x).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn projection_shape_bias_and_affinity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let proj = EmissionProjection::new(4, 5, &mut store, &mut rng).unwrap();
        store.get_mut(proj.b).value = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]);

        let mut tape = Tape::new();
        let zeros = tape.leaf(Tensor::zeros(&[3, 4]));
        // zero weights -> rows equal bias
        let w_backup = store.value(proj.w).clone();
        let mut store2 = store.clone();
        store2.get_mut(proj.w).value.fill(0.0);
        let out = proj.project(&mut tape, &store2, zeros).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 5]);
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(tape.value(out).at(i, j), store2.value(proj.b).data()[j]);
            }
        }

        // affine law: project(a+b) = project(a) + project(b) - bias
        store2.get_mut(proj.w).value = w_backup;
        let mut rng2 = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::uniform(&[2, 4], 1.0, &mut rng2);
        let b = Tensor::uniform(&[2, 4], 1.0, &mut rng2);
        let mut t2 = Tape::new();
        let av = t2.leaf(a.clone());
        let bv = t2.leaf(b.clone());
        let abv = t2.add(av, bv).unwrap();
        let pa = proj.project(&mut t2, &store2, av).unwrap();
        let pb = proj.project(&mut t2, &store2, bv).unwrap();
        let pab = proj.project(&mut t2, &store2, abv).unwrap();
        let bias = store2.value(proj.b).data();
        for i in 0..2 {
            for j in 0..5 {
                let lhs = t2.value(pab).at(i, j);
                let rhs = t2.value(pa).at(i, j) + t2.value(pb).at(i, j) - bias[j];
                assert!((lhs - rhs).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn all_six_variants_emit_identical_shapes() {
        let sentences = vec![strings(&["Deep", "QA", "System"]), strings(&["Another", "one"])];
        let word_vocab = collect_word_vocab(sentences.iter().map(|s| s.as_slice()));
        let char_vocab = collect_char_vocab(sentences.iter().map(|s| s.as_slice()));
        let labels = 7;
        for mut cfg in ArchitectureConfig::six_variants() {
            cfg.word_dim = 10;
            cfg.char_dim = 4;
            cfg.char_filters = 6;
            cfg.hidden_dim = 8;
            cfg.dropout = 0.5;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let enc = SequenceEncoder::init::<_, &[u8]>(
                cfg.clone(),
                &word_vocab,
                &char_vocab,
                labels,
                &mut store,
                &mut rng,
                None,
            )
            .unwrap();
            let mut tape = Tape::new();
            let em = enc
                .emissions(&mut tape, &store, &sentences[0], false, &mut rng)
                .unwrap();
            assert_eq!(
                tape.value(em).shape(),
                &[3, labels],
                "variant {}",
                cfg.describe()
            );
        }
    }
}
