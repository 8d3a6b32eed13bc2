//! The assembled tagger and its on-disk container.
//!
//! A [`TaggerModel`] owns the parameter store, the encoder stack, the CRF
//! layer and the schema. Decoding always applies the BIO transition mask, so
//! emitted tag sequences decode into spans without repair. The model file is
//! a single self-describing container: magic + version, a JSON metadata block
//! (schema, architecture, vocabularies), then length-prefixed named parameter
//! blocks of little-endian f64, and a closing marker.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor};
use crate::corpus::tokenize;
use crate::crf::{CrfError, CrfLayer, TransitionMask};
use crate::encoders::{
    ArchitectureConfig, CharCnn, EmbeddingTable, EmissionProjection, EncoderError, LstmCell,
    SequenceEncoder, WordCnn, WordEncoder, WordEncoderKind,
};
use crate::schema::{decode_bio, EntitySpan, LabelSchema, SchemaError, Tag};

/// Bumped when the container layout changes.
pub const MODEL_FORMAT_VERSION: u32 = 1;

const MAGIC: &[u8; 4] = b"STAG";
const END_MARKER: &[u8; 4] = b"ENDM";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("VersionMismatch: file version {0}, supported {1}")]
    VersionMismatch(u32, u32),
    #[error("Corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Annotation request: raw text plus an optional part hint ("title" or
/// "abstract") used to pick among served models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotateRequest {
    pub text: String,
    #[serde(default)]
    pub part: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateEntity {
    #[serde(rename = "type")]
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateResponse {
    pub tokens: Vec<String>,
    pub entities: Vec<AnnotateEntity>,
}

/// Trained tagger: parameters, encoder stack, CRF and schema.
#[derive(Debug, Clone)]
pub struct TaggerModel {
    pub schema: LabelSchema,
    pub store: ParamStore,
    pub encoder: SequenceEncoder,
    pub crf: CrfLayer,
    mask: TransitionMask,
}

impl TaggerModel {
    /// Fresh model with seeded initialization over the given vocabularies.
    pub fn init<B: std::io::BufRead>(
        config: ArchitectureConfig,
        schema: LabelSchema,
        word_vocab: &[String],
        char_vocab: &[char],
        seed: u64,
        pretrained: Option<B>,
    ) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let num_labels = schema.num_tags();
        let encoder = SequenceEncoder::init(
            config,
            word_vocab,
            char_vocab,
            num_labels,
            &mut store,
            &mut rng,
            pretrained,
        )?;
        let crf = CrfLayer::new(&mut store, "crf.trans", num_labels, &mut rng)?;
        let mask = TransitionMask::bio(&schema);
        Ok(Self {
            schema,
            store,
            encoder,
            crf,
            mask,
        })
    }

    /// Decodes one token sequence with the BIO-constrained Viterbi path.
    /// Inference is deterministic: dropout is disabled.
    pub fn tag_tokens(&self, tokens: &[String]) -> Result<Vec<Tag>, ModelError> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: eval mode
        let em = self
            .encoder
            .emissions(&mut tape, &self.store, tokens, false, &mut rng)?;
        let em_values = tape.value(em).clone();
        let (indices, _) = self.crf.viterbi(&self.store, &em_values, Some(&self.mask))?;
        let all = self.schema.tags();
        Ok(indices.into_iter().map(|i| all[i].clone()).collect())
    }

    /// Constrained decoding yields valid BIO, so spans extract without repair.
    pub fn tag_spans(&self, tokens: &[String]) -> Result<Vec<EntitySpan>, ModelError> {
        let tags = self.tag_tokens(tokens)?;
        Ok(decode_bio(&tags, false)?)
    }

    /// Tokenizes raw text and returns tokens plus typed entity spans.
    pub fn annotate(&self, text: &str) -> Result<AnnotateResponse, ModelError> {
        let tokens = tokenize(text);
        let spans = self.tag_spans(&tokens)?;
        let entities = spans
            .into_iter()
            .map(|s| AnnotateEntity {
                entity_type: s.entity_type.name().to_string(),
                surface: tokens[s.start..s.end].join(" "),
                start: s.start,
                end: s.end,
            })
            .collect();
        Ok(AnnotateResponse { tokens, entities })
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;

        let meta = Meta {
            schema_types: self
                .schema
                .types()
                .iter()
                .map(|t| t.name().to_string())
                .collect(),
            config: ConfigMeta::from_config(&self.encoder.config),
            word_vocab: self.encoder.word_table.row_tokens().to_vec(),
            char_vocab: self
                .encoder
                .char_cnn
                .as_ref()
                .map(|c| c.alphabet().iter().collect::<String>()),
        };
        let meta_bytes =
            serde_json::to_vec(&meta).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&meta_bytes)?;

        let params: Vec<_> = self.store.iter().collect();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (_, p) in params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.write_all(END_MARKER)?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelError::VersionMismatch(version, MODEL_FORMAT_VERSION));
        }

        let meta_len = read_u64(&mut r)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta_bytes)?;
        let meta: Meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| ModelError::Corrupt(format!("metadata: {}", e)))?;

        let mut store = ParamStore::new();
        let n_params = read_u32(&mut r)?;
        for _ in 0..n_params {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| ModelError::Corrupt("parameter name not utf-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(read_f64(&mut r)?);
            }
            store.add(&name, Tensor::new(shape, data)?)?;
        }
        let mut end = [0u8; 4];
        read_exact(&mut r, &mut end)?;
        if &end != END_MARKER {
            return Err(ModelError::Corrupt("bad end marker".into()));
        }

        Self::assemble(meta, store)
    }

    fn assemble(meta: Meta, store: ParamStore) -> Result<Self, ModelError> {
        let type_refs: Vec<&str> = meta.schema_types.iter().map(String::as_str).collect();
        let schema = LabelSchema::with_types(&type_refs)?;
        let config = meta.config.into_config()?;
        config.validate()?;

        let find = |name: &str| -> Result<ParamId, ModelError> {
            store
                .iter()
                .find(|(_, p)| p.name == name)
                .map(|(id, _)| id)
                .ok_or_else(|| ModelError::Corrupt(format!("missing parameter {:?}", name)))
        };

        let word_table =
            EmbeddingTable::from_saved(meta.word_vocab, find("word_emb")?, config.word_dim);
        let char_cnn = if config.use_char_cnn {
            let chars: Vec<char> = meta
                .char_vocab
                .ok_or_else(|| ModelError::Corrupt("missing char vocabulary".into()))?
                .chars()
                .collect();
            Some(CharCnn::from_saved(
                chars,
                find("char_cnn.table")?,
                find("char_cnn.conv_w")?,
                find("char_cnn.conv_b")?,
                config.char_window,
                config.char_filters,
                config.char_dim,
            ))
        } else {
            None
        };
        let input_dim = config.word_dim + if config.use_char_cnn { config.char_filters } else { 0 };
        let word_encoder = match config.word_encoder {
            WordEncoderKind::Cnn => WordEncoder::Cnn(WordCnn::from_saved(
                find("word_cnn.conv_w")?,
                find("word_cnn.conv_b")?,
                config.word_window,
                input_dim,
            )),
            WordEncoderKind::Lstm => WordEncoder::Lstm(LstmCell::from_saved(
                find("lstm.w")?,
                find("lstm.u")?,
                find("lstm.b")?,
                config.hidden_dim,
            )),
            WordEncoderKind::Bilstm => WordEncoder::Bilstm {
                fwd: LstmCell::from_saved(
                    find("bilstm.fwd.w")?,
                    find("bilstm.fwd.u")?,
                    find("bilstm.fwd.b")?,
                    config.hidden_dim / 2,
                ),
                bwd: LstmCell::from_saved(
                    find("bilstm.bwd.w")?,
                    find("bilstm.bwd.u")?,
                    find("bilstm.bwd.b")?,
                    config.hidden_dim / 2,
                ),
            },
        };
        let projection = EmissionProjection::from_saved(find("proj.w")?, find("proj.b")?);
        let crf = CrfLayer::from_param(find("crf.trans")?, schema.num_tags());
        let mask = TransitionMask::bio(&schema);

        Ok(Self {
            encoder: SequenceEncoder {
                config,
                word_table,
                char_cnn,
                word_encoder,
                projection,
            },
            schema,
            store,
            crf,
            mask,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    schema_types: Vec<String>,
    config: ConfigMeta,
    word_vocab: Vec<String>,
    char_vocab: Option<String>,
}

/// Architecture fields in a serde-friendly shape.
#[derive(Serialize, Deserialize)]
struct ConfigMeta {
    word_encoder: String,
    use_char_cnn: bool,
    word_dim: usize,
    char_dim: usize,
    char_filters: usize,
    char_window: usize,
    word_window: usize,
    hidden_dim: usize,
    dropout: f64,
    embedding_source: String,
}

impl ConfigMeta {
    fn from_config(c: &ArchitectureConfig) -> Self {
        Self {
            word_encoder: c.word_encoder.as_str().to_string(),
            use_char_cnn: c.use_char_cnn,
            word_dim: c.word_dim,
            char_dim: c.char_dim,
            char_filters: c.char_filters,
            char_window: c.char_window,
            word_window: c.word_window,
            hidden_dim: c.hidden_dim,
            dropout: c.dropout,
            embedding_source: c.embedding_source.as_str().to_string(),
        }
    }

    fn into_config(self) -> Result<ArchitectureConfig, EncoderError> {
        Ok(ArchitectureConfig {
            word_encoder: WordEncoderKind::parse(&self.word_encoder)?,
            use_char_cnn: self.use_char_cnn,
            word_dim: self.word_dim,
            char_dim: self.char_dim,
            char_filters: self.char_filters,
            char_window: self.char_window,
            word_window: self.word_window,
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
            embedding_source: crate::encoders::EmbeddingSource::parse(&self.embedding_source)?,
        })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf)
        .map_err(|_| ModelError::Corrupt("unexpected end of file".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, ModelError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
