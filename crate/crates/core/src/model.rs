//! The graph-based detector network.
//!
//! A document flows through: per-token vectors -> entity node features ->
//! graph convolutions over the factual graph -> per-sentence vectors ->
//! a coherence LSTM -> a pair-score-weighted document vector -> a linear
//! classifier over [document vector ; global vector]. Every stage runs on
//! the tape so one backward pass covers all parameters, including the
//! embedding table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{EntityVecStore, MissPolicy, PrecomputedStore, TrainableEmbedding, Vocab};
use crate::entity::extract_mentions;
use crate::error::{Error, Result};
use crate::graph::{build_graph, normalized_adjacency, DEFAULT_EDGE_SIM_THRESHOLD};
use crate::nsp::NspScorer;
use crate::tape::{Tape, Value};
use crate::tensor::{softmax, Tensor};
use crate::text::{Document, Label};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastConfig {
    /// Word vector width.
    pub d_w: usize,
    /// Contextual node feature width; node rows are 2 * d_c wide.
    pub d_c: usize,
    /// Entity vector width.
    pub d_e: usize,
    /// Sentence representation width.
    pub d_s: usize,
    /// LSTM hidden width.
    pub d_h: usize,
    pub gcn_layers: usize,
    pub use_wiki: bool,
    pub use_lstm: bool,
    pub use_nsp: bool,
    /// With this off the whole graph branch is skipped and the classifier
    /// sees a zero document vector next to the global vector.
    pub use_graph: bool,
    pub self_loops: bool,
    pub edge_sim_threshold: f64,
    pub miss_policy: MissPolicy,
}

impl FastConfig {
    /// Full-scale defaults: d_c and d_e of 100, LSTM width 200.
    pub fn full() -> FastConfig {
        FastConfig {
            d_w: 64,
            d_c: 100,
            d_e: 100,
            d_s: 200,
            d_h: 200,
            gcn_layers: 2,
            use_wiki: true,
            use_lstm: true,
            use_nsp: true,
            use_graph: true,
            self_loops: true,
            edge_sim_threshold: DEFAULT_EDGE_SIM_THRESHOLD,
            miss_policy: MissPolicy::Zero,
        }
    }

    /// Small widths for CPU-scale experiments; no entity vector file is
    /// assumed.
    pub fn desk() -> FastConfig {
        FastConfig {
            d_w: 64,
            d_c: 64,
            d_e: 64,
            d_s: 64,
            d_h: 64,
            use_wiki: false,
            ..FastConfig::full()
        }
    }

    pub fn node_width(&self) -> usize {
        2 * self.d_c
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_w", self.d_w),
            ("d_c", self.d_c),
            ("d_e", self.d_e),
            ("d_s", self.d_s),
            ("d_h", self.d_h),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.use_lstm && self.d_h != self.d_s {
            return Err(Error::Config(format!(
                "with use_lstm off the identity pass-through requires d_h = d_s, got {} and {}",
                self.d_h, self.d_s
            )));
        }
        if !self.edge_sim_threshold.is_finite()
            || !(0.0..=1.0).contains(&self.edge_sim_threshold)
        {
            return Err(Error::Config(format!(
                "edge_sim_threshold must be in [0, 1], got {}",
                self.edge_sim_threshold
            )));
        }
        Ok(())
    }
}

/// All trainable tensors above the embedding layer.
#[derive(Debug, Clone)]
pub struct FastModel {
    pub config: FastConfig,
    /// d_w x d_c projection of the mean token vector of a mention span.
    pub w_b: Tensor,
    /// d_e x d_c projection of the external entity vector.
    pub w_w: Tensor,
    /// Per-layer d x d graph convolution weights, d = 2 * d_c.
    pub gcn: Vec<Tensor>,
    /// d x d_s sentence projection and its bias.
    pub w_s: Tensor,
    pub b_s: Tensor,
    /// 1 x d_s learned representation for sentences without entities.
    pub no_entity: Tensor,
    /// LSTM parameters; gate order along columns is input, forget, cell,
    /// output.
    pub lstm_w_x: Tensor,
    pub lstm_w_h: Tensor,
    pub lstm_b: Tensor,
    /// (2 * d_h + d_w) x 2 classifier and bias; class order (human, machine).
    pub w_c: Tensor,
    pub b_c: Tensor,
    /// 1 x d_e shared trainable vector for entities missing from the store.
    pub unk_entity: Tensor,
}

impl FastModel {
    pub fn new(config: FastConfig, rng: &mut impl Rng) -> Result<FastModel> {
        config.validate()?;
        let d = config.node_width();
        let w_b = Tensor::glorot(config.d_w, config.d_c, rng);
        let w_w = Tensor::glorot(config.d_e, config.d_c, rng);
        let gcn = (0..config.gcn_layers)
            .map(|_| Tensor::glorot(d, d, rng))
            .collect();
        let w_s = Tensor::glorot(d, config.d_s, rng);
        let lstm_w_x = Tensor::glorot(config.d_s, 4 * config.d_h, rng);
        let lstm_w_h = Tensor::glorot(config.d_h, 4 * config.d_h, rng);
        let mut lstm_b = Tensor::zeros(1, 4 * config.d_h);
        // Forget gate bias starts at one so early training does not erase
        // the carry state.
        for c in config.d_h..2 * config.d_h {
            lstm_b.set(0, c, 1.0);
        }
        let w_c = Tensor::glorot(2 * config.d_h + config.d_w, 2, rng);
        // Zero init would leave this row stuck: its only path to the loss
        // runs through ReLU(unk_entity W_w), whose gradient vanishes at
        // exactly zero.
        let unk_entity = Tensor::glorot(1, config.d_e, rng);
        Ok(FastModel {
            w_b,
            w_w,
            gcn,
            w_s,
            b_s: Tensor::zeros(1, config.d_s),
            no_entity: Tensor::zeros(1, config.d_s),
            lstm_w_x,
            lstm_w_h,
            lstm_b,
            w_c,
            b_c: Tensor::zeros(1, 2),
            unk_entity,
            config,
        })
    }

    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut entries = vec![
            ("model.w_b".to_string(), &self.w_b),
            ("model.w_w".to_string(), &self.w_w),
        ];
        for (i, w) in self.gcn.iter().enumerate() {
            entries.push((format!("model.gcn.{i}"), w));
        }
        entries.extend([
            ("model.w_s".to_string(), &self.w_s),
            ("model.b_s".to_string(), &self.b_s),
            ("model.no_entity".to_string(), &self.no_entity),
            ("model.lstm_w_x".to_string(), &self.lstm_w_x),
            ("model.lstm_w_h".to_string(), &self.lstm_w_h),
            ("model.lstm_b".to_string(), &self.lstm_b),
            ("model.w_c".to_string(), &self.w_c),
            ("model.b_c".to_string(), &self.b_c),
            ("model.unk_entity".to_string(), &self.unk_entity),
        ]);
        entries
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut entries: Vec<(String, &mut Tensor)> = vec![
            ("model.w_b".to_string(), &mut self.w_b),
            ("model.w_w".to_string(), &mut self.w_w),
        ];
        for (i, w) in self.gcn.iter_mut().enumerate() {
            entries.push((format!("model.gcn.{i}"), w));
        }
        entries.extend([
            ("model.w_s".to_string(), &mut self.w_s),
            ("model.b_s".to_string(), &mut self.b_s),
            ("model.no_entity".to_string(), &mut self.no_entity),
            ("model.lstm_w_x".to_string(), &mut self.lstm_w_x),
            ("model.lstm_w_h".to_string(), &mut self.lstm_w_h),
            ("model.lstm_b".to_string(), &mut self.lstm_b),
            ("model.w_c".to_string(), &mut self.w_c),
            ("model.b_c".to_string(), &mut self.b_c),
            ("model.unk_entity".to_string(), &mut self.unk_entity),
        ]);
        entries
    }
}

/// Embedding provider plus network: everything one checkpoint stores.
#[derive(Debug, Clone)]
pub struct Detector {
    pub embedding: TrainableEmbedding,
    pub model: FastModel,
}

impl Detector {
    pub fn new(config: FastConfig, vocab: Vocab, seed: u64) -> Result<Detector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = TrainableEmbedding::new(vocab, config.d_w, &mut rng);
        let model = FastModel::new(config, &mut rng)?;
        Ok(Detector { embedding, model })
    }

    pub fn config(&self) -> &FastConfig {
        &self.model.config
    }

    /// Embedding entries first, then the network, in a fixed order shared
    /// by the optimizer, the gradient slice, and the checkpoint.
    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut entries = vec![
            ("embed.table".to_string(), &self.embedding.table),
            ("embed.empty_doc".to_string(), &self.embedding.empty_doc),
        ];
        entries.extend(self.model.param_entries());
        entries
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut entries: Vec<(String, &mut Tensor)> = vec![
            ("embed.table".to_string(), &mut self.embedding.table),
            ("embed.empty_doc".to_string(), &mut self.embedding.empty_doc),
        ];
        entries.extend(self.model.param_entries_mut());
        entries
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.param_entries().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Places every parameter on the tape, in `param_entries` order.
    pub fn bind_values<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Value<'t>> {
        self.param_entries()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> DetectorBound<'t> {
        let values = self.bind_values(tape, trainable);
        DetectorBound::from_values(&self.model.config, &values)
            .expect("param_entries order matches from_values")
    }

    pub fn forward_trace(&self, input: &DocInput) -> Result<ForwardTrace> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let values = run_forward(&tape, &bound, &self.model.config, input)?;
        trace_from_values(&self.model.config, input, &values)
    }
}

/// Tape handles for every parameter, in `Detector::param_entries` order.
pub struct DetectorBound<'t> {
    pub table: Value<'t>,
    pub empty_doc: Value<'t>,
    pub w_b: Value<'t>,
    pub w_w: Value<'t>,
    pub gcn: Vec<Value<'t>>,
    pub w_s: Value<'t>,
    pub b_s: Value<'t>,
    pub no_entity: Value<'t>,
    pub lstm_w_x: Value<'t>,
    pub lstm_w_h: Value<'t>,
    pub lstm_b: Value<'t>,
    pub w_c: Value<'t>,
    pub b_c: Value<'t>,
    pub unk_entity: Value<'t>,
}

impl<'t> DetectorBound<'t> {
    pub fn from_values(config: &FastConfig, values: &[Value<'t>]) -> Result<DetectorBound<'t>> {
        let expected = 13 + config.gcn_layers;
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameter tensors, got {}",
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let table = next();
        let empty_doc = next();
        let w_b = next();
        let w_w = next();
        let gcn: Vec<Value<'t>> = (0..config.gcn_layers).map(|_| next()).collect();
        Ok(DetectorBound {
            table,
            empty_doc,
            w_b,
            w_w,
            gcn,
            w_s: next(),
            b_s: next(),
            no_entity: next(),
            lstm_w_x: next(),
            lstm_w_h: next(),
            lstm_b: next(),
            w_c: next(),
            b_c: next(),
            unk_entity: next(),
        })
    }
}

/// Where a document's token vectors come from during a forward pass.
#[derive(Debug, Clone)]
pub enum TokenFeed {
    /// Vocabulary ids resolved against the trainable table; gradients
    /// reach the table.
    Ids(Vec<usize>),
    /// Frozen per-token vectors and global vector from an external encoder.
    Vectors { vectors: Tensor, global: Tensor },
}

/// Entity vector available for a graph node.
#[derive(Debug, Clone)]
pub enum EntityFeed {
    Stored(Vec<f64>),
    /// Not in the store; the miss policy decides the substitute.
    Miss,
}

#[derive(Debug, Clone)]
pub struct NodeInput {
    /// Document-level token range of the mention span.
    pub token_start: usize,
    pub token_end: usize,
    pub entity: EntityFeed,
}

/// Everything the forward pass needs, resolved ahead of tape construction.
#[derive(Debug, Clone)]
pub struct DocInput {
    pub id: String,
    pub label: Option<Label>,
    /// `title` metadata, when present; pairs human and machine versions of
    /// the same underlying content for paired evaluation.
    pub title: Option<String>,
    pub sentence_count: usize,
    pub tokens: TokenFeed,
    pub nodes: Vec<NodeInput>,
    /// Node indices per sentence, aligned with `nodes`.
    pub sentence_nodes: Vec<Vec<usize>>,
    /// Normalized adjacency; present exactly when the graph branch runs
    /// with at least one node.
    pub adjacency: Option<Tensor>,
    /// One weight per adjacent sentence pair.
    pub nsp_scores: Vec<f64>,
}

pub enum WordsSource<'a> {
    Trainable(&'a TrainableEmbedding),
    Precomputed(&'a PrecomputedStore),
}

/// Resolves mentions, graph, adjacency, entity vectors, and pair scores
/// for one document.
pub fn prepare(
    doc: &Document,
    words: &WordsSource<'_>,
    store: Option<&EntityVecStore>,
    scorer: Option<&NspScorer>,
    config: &FastConfig,
) -> Result<DocInput> {
    let s = doc.sentences.len();
    let tokens = match words {
        WordsSource::Trainable(emb) => {
            if emb.d_w() != config.d_w {
                return Err(Error::Config(format!(
                    "embedding width {} does not match configured d_w {}",
                    emb.d_w(),
                    config.d_w
                )));
            }
            TokenFeed::Ids(emb.token_ids(doc))
        }
        WordsSource::Precomputed(store) => {
            if store.d_w() != config.d_w {
                return Err(Error::Config(format!(
                    "precomputed vector width {} does not match configured d_w {}",
                    store.d_w(),
                    config.d_w
                )));
            }
            let out = store.represent(doc)?;
            TokenFeed::Vectors {
                vectors: out.token_vectors,
                global: out.global_vector,
            }
        }
    };
    if config.use_wiki {
        if let Some(st) = store {
            if st.dim() != config.d_e {
                return Err(Error::Config(format!(
                    "entity vector dimension {} does not match configured d_e {}",
                    st.dim(),
                    config.d_e
                )));
            }
        }
    }
    let (nodes, sentence_nodes, adjacency) = if config.use_graph {
        let mentions = extract_mentions(doc);
        let graph = build_graph(mentions, config.edge_sim_threshold);
        let adjacency = if graph.node_count() > 0 {
            Some(normalized_adjacency(&graph, config.self_loops))
        } else {
            None
        };
        let sentence_nodes: Vec<Vec<usize>> = (0..s).map(|i| graph.sentence_nodes(i)).collect();
        let nodes = graph
            .mentions
            .iter()
            .map(|m| {
                let entity = match store {
                    Some(st) if config.use_wiki => match st.get(&m.normalized) {
                        Some(v) => EntityFeed::Stored(v.to_vec()),
                        None => EntityFeed::Miss,
                    },
                    _ => EntityFeed::Miss,
                };
                NodeInput {
                    token_start: m.token_start,
                    token_end: m.token_end,
                    entity,
                }
            })
            .collect();
        (nodes, sentence_nodes, adjacency)
    } else {
        (Vec::new(), vec![Vec::new(); s], None)
    };
    let nsp_scores = if s < 2 {
        Vec::new()
    } else if config.use_nsp && config.use_graph {
        let scorer = scorer.ok_or_else(|| {
            Error::invalid("use_nsp requires a trained pair scorer; pass one or disable use_nsp")
        })?;
        scorer.score_document(doc)
    } else {
        vec![1.0; s - 1]
    };
    Ok(DocInput {
        id: doc.id.clone(),
        label: doc.label,
        title: doc.meta.get("title").cloned(),
        sentence_count: s,
        tokens,
        nodes,
        sentence_nodes,
        adjacency,
        nsp_scores,
    })
}

/// Intermediate tape values of one forward pass.
pub struct ForwardValues<'t> {
    pub node_init: Option<Value<'t>>,
    pub layers: Vec<Value<'t>>,
    pub sentence_reps: Option<Value<'t>>,
    pub lstm_states: Option<Value<'t>>,
    pub doc_vector: Value<'t>,
    pub logits: Value<'t>,
}

/// Applies the convolution stack: H <- ReLU(A H W) per layer. Returns the
/// node states after each layer; an empty weight list returns an empty
/// vector, leaving the input as the final state.
pub fn gcn_forward<'t>(
    adjacency: Value<'t>,
    h0: Value<'t>,
    weights: &[Value<'t>],
) -> Result<Vec<Value<'t>>> {
    let mut layers = Vec::with_capacity(weights.len());
    let mut h = h0;
    for w in weights {
        h = adjacency.matmul(h)?.matmul(*w)?.relu();
        layers.push(h);
    }
    Ok(layers)
}

/// Unidirectional recurrent pass over the rows of `y` with zero initial
/// states. Pre-activation column layout: input, forget, cell, output
/// gates, each `d_h` wide. Returns one hidden-state row per input row.
pub fn coherence_lstm<'t>(
    tape: &'t Tape,
    y: Value<'t>,
    w_x: Value<'t>,
    w_h: Value<'t>,
    b: Value<'t>,
    d_h: usize,
) -> Result<Vec<Value<'t>>> {
    let steps = y.shape()[0];
    let mut h_prev = tape.constant(Tensor::zeros(1, d_h));
    let mut c_prev = tape.constant(Tensor::zeros(1, d_h));
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = y.select_rows(&[t])?;
        let pre = x_t
            .matmul(w_x)?
            .add(h_prev.matmul(w_h)?)?
            .add(b)?;
        let gate_i = pre.slice_cols(0, d_h)?.sigmoid();
        let gate_f = pre.slice_cols(d_h, 2 * d_h)?.sigmoid();
        let gate_g = pre.slice_cols(2 * d_h, 3 * d_h)?.tanh();
        let gate_o = pre.slice_cols(3 * d_h, 4 * d_h)?.sigmoid();
        let c = gate_f
            .mul_elementwise(c_prev)?
            .add(gate_i.mul_elementwise(gate_g)?)?;
        let h = gate_o.mul_elementwise(c.tanh())?;
        states.push(h);
        h_prev = h;
        c_prev = c;
    }
    Ok(states)
}

pub fn run_forward<'t>(
    tape: &'t Tape,
    bound: &DetectorBound<'t>,
    config: &FastConfig,
    input: &DocInput,
) -> Result<ForwardValues<'t>> {
    let s = input.sentence_count;
    let (x, global) = match &input.tokens {
        TokenFeed::Ids(ids) => {
            if ids.is_empty() {
                (None, bound.empty_doc)
            } else {
                let x = bound.table.select_rows(ids)?;
                (Some(x), x.mean_rows()?)
            }
        }
        TokenFeed::Vectors { vectors, global } => {
            let g = tape.constant(global.clone());
            if vectors.rows() == 0 {
                (None, g)
            } else {
                (Some(tape.constant(vectors.clone())), g)
            }
        }
    };

    if !config.use_graph {
        let doc_vector = tape.constant(Tensor::zeros(1, 2 * config.d_h));
        let logits = classify(tape, bound, doc_vector, global)?;
        return Ok(ForwardValues {
            node_init: None,
            layers: Vec::new(),
            sentence_reps: None,
            lstm_states: None,
            doc_vector,
            logits,
        });
    }

    // Node features: [ReLU(W_B . mean of span tokens) ; ReLU(W_w . v_e)].
    let node_init = if input.nodes.is_empty() {
        None
    } else {
        let x = x.expect("documents with entity mentions have tokens");
        let mut rows = Vec::with_capacity(input.nodes.len());
        for node in &input.nodes {
            let span: Vec<usize> = (node.token_start..node.token_end).collect();
            let token_mean = x.select_rows(&span)?.mean_rows()?;
            let eps_b = token_mean.matmul(bound.w_b)?.relu();
            let eps_w = if config.use_wiki {
                match &node.entity {
                    EntityFeed::Stored(v) => {
                        tape.constant(Tensor::row(v)?).matmul(bound.w_w)?.relu()
                    }
                    EntityFeed::Miss => match config.miss_policy {
                        MissPolicy::Zero => tape.constant(Tensor::zeros(1, config.d_c)),
                        MissPolicy::Unk => bound.unk_entity.matmul(bound.w_w)?.relu(),
                    },
                }
            } else {
                tape.constant(Tensor::zeros(1, config.d_c))
            };
            rows.push(tape.concat_cols(&[eps_b, eps_w])?);
        }
        Some(tape.concat_rows(&rows)?)
    };

    let mut layers = Vec::new();
    let h_final = match node_init {
        Some(h0) => {
            let adjacency = input.adjacency.as_ref().ok_or_else(|| {
                Error::document(&input.id, "graph nodes present without an adjacency matrix")
            })?;
            let a = tape.constant(adjacency.clone());
            layers = gcn_forward(a, h0, &bound.gcn)?;
            Some(layers.last().copied().unwrap_or(h0))
        }
        None => None,
    };

    if s == 0 {
        let doc_vector = tape.constant(Tensor::zeros(1, 2 * config.d_h));
        let logits = classify(tape, bound, doc_vector, global)?;
        return Ok(ForwardValues {
            node_init,
            layers,
            sentence_reps: None,
            lstm_states: None,
            doc_vector,
            logits,
        });
    }

    // Sentence representations: mean over the sentence's nodes of
    // ReLU(W_s node + b_s); sentences without nodes use the learned
    // fallback row.
    let z = match h_final {
        Some(h) => Some(h.matmul(bound.w_s)?.add(bound.b_s)?.relu()),
        None => None,
    };
    let mut y_rows = Vec::with_capacity(s);
    for ids in &input.sentence_nodes {
        let y_i = if ids.is_empty() {
            bound.no_entity
        } else {
            z.expect("sentences reference existing nodes")
                .select_rows(ids)?
                .mean_rows()?
        };
        y_rows.push(y_i);
    }
    let y = tape.concat_rows(&y_rows)?;

    // Coherence pass over sentence order.
    let tilde_rows: Vec<Value<'t>> = if config.use_lstm {
        coherence_lstm(
            tape,
            y,
            bound.lstm_w_x,
            bound.lstm_w_h,
            bound.lstm_b,
            config.d_h,
        )?
    } else {
        y_rows
    };
    let lstm_states = tape.concat_rows(&tilde_rows)?;

    // Document vector: weighted sum of adjacent state pairs.
    let doc_vector = if s >= 2 {
        if input.nsp_scores.len() != s - 1 {
            return Err(Error::document(
                &input.id,
                format!(
                    "{} pair scores for {} sentences (need {})",
                    input.nsp_scores.len(),
                    s,
                    s - 1
                ),
            ));
        }
        let mut acc: Option<Value<'t>> = None;
        for j in 1..s {
            let pair = tape.concat_cols(&[tilde_rows[j - 1], tilde_rows[j]])?;
            let term = pair.scale(input.nsp_scores[j - 1])?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
        acc.expect("s >= 2 yields at least one pair")
    } else {
        tape.constant(Tensor::zeros(1, 2 * config.d_h))
    };

    let logits = classify(tape, bound, doc_vector, global)?;
    Ok(ForwardValues {
        node_init,
        layers,
        sentence_reps: Some(y),
        lstm_states: Some(lstm_states),
        doc_vector,
        logits,
    })
}

fn classify<'t>(
    tape: &'t Tape,
    bound: &DetectorBound<'t>,
    doc_vector: Value<'t>,
    global: Value<'t>,
) -> Result<Value<'t>> {
    let features = tape.concat_cols(&[doc_vector, global])?;
    features.matmul(bound.w_c)?.add(bound.b_c)
}

/// Scalar training loss for one document.
pub fn document_loss<'t>(
    tape: &'t Tape,
    bound: &DetectorBound<'t>,
    config: &FastConfig,
    input: &DocInput,
) -> Result<Value<'t>> {
    let label = input.label.ok_or_else(|| {
        Error::document(&input.id, "unlabeled document cannot contribute a loss")
    })?;
    let values = run_forward(tape, bound, config, input)?;
    values.logits.softmax_cross_entropy(label.class_index())
}

/// Concrete tensors captured from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub node_init: Tensor,
    pub layers: Vec<Tensor>,
    pub sentence_reps: Tensor,
    pub lstm_states: Tensor,
    pub doc_vector: Tensor,
    pub logits: Tensor,
    pub p_human: f64,
    pub p_machine: f64,
}

impl ForwardTrace {
    pub fn predicted(&self) -> Label {
        predicted_label(self.p_machine)
    }
}

/// Argmax with the tie going to Human.
pub fn predicted_label(p_machine: f64) -> Label {
    if p_machine > 0.5 {
        Label::Machine
    } else {
        Label::Human
    }
}

fn trace_from_values(
    config: &FastConfig,
    input: &DocInput,
    values: &ForwardValues<'_>,
) -> Result<ForwardTrace> {
    let d = config.node_width();
    let node_init = values
        .node_init
        .map(|v| v.value())
        .unwrap_or_else(|| Tensor::zeros(0, d));
    let layers: Vec<Tensor> = values.layers.iter().map(|v| v.value()).collect();
    let sentence_reps = values
        .sentence_reps
        .map(|v| v.value())
        .unwrap_or_else(|| Tensor::zeros(0, config.d_s));
    let lstm_states = values
        .lstm_states
        .map(|v| v.value())
        .unwrap_or_else(|| Tensor::zeros(0, config.d_h));
    let doc_vector = values.doc_vector.value();
    let logits = values.logits.value();
    for (name, t) in [
        ("node features", &node_init),
        ("sentence representations", &sentence_reps),
        ("coherence states", &lstm_states),
        ("document vector", &doc_vector),
        ("logits", &logits),
    ] {
        if !t.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{name} of document {}", input.id),
            });
        }
    }
    for t in &layers {
        if !t.is_finite() {
            return Err(Error::NonFinite {
                context: format!("graph layer of document {}", input.id),
            });
        }
    }
    let probs = softmax(logits.row_slice(0));
    Ok(ForwardTrace {
        node_init,
        layers,
        sentence_reps,
        lstm_states,
        doc_vector,
        logits,
        p_human: probs[0],
        p_machine: probs[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{grad_check, loss_fn};

    fn tiny_config() -> FastConfig {
        FastConfig {
            d_w: 3,
            d_c: 2,
            d_e: 2,
            d_s: 3,
            d_h: 2,
            gcn_layers: 1,
            use_wiki: false,
            use_lstm: true,
            use_nsp: false,
            use_graph: true,
            self_loops: true,
            edge_sim_threshold: 0.5,
            miss_policy: MissPolicy::Zero,
        }
    }

    fn detector_for(docs: &[Document], config: FastConfig, seed: u64) -> Detector {
        Detector::new(config, Vocab::build(docs), seed).unwrap()
    }

    fn input_for(doc: &Document, detector: &Detector) -> DocInput {
        prepare(
            doc,
            &WordsSource::Trainable(&detector.embedding),
            None,
            None,
            &detector.model.config,
        )
        .unwrap()
    }

    #[test]
    fn lstm_off_requires_matching_widths() {
        let mut config = tiny_config();
        config.use_lstm = false;
        assert!(config.validate().is_err());
        config.d_h = config.d_s;
        assert!(config.validate().is_ok());
    }

    #[test]
    fn single_token_entity_node_is_the_projected_token() {
        let doc = Document::from_text("d", "so Alpha spoke .");
        let mut config = tiny_config();
        config.d_w = 2;
        config.d_c = 1;
        config.gcn_layers = 0;
        let mut detector = detector_for(std::slice::from_ref(&doc), config, 1);
        let id = detector.embedding.vocab.id("Alpha");
        assert_ne!(id, 0);
        let row = id * 2;
        detector.embedding.table.data_mut()[row] = 0.7;
        detector.embedding.table.data_mut()[row + 1] = -0.3;
        detector.model.w_b = Tensor::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let trace = detector.forward_trace(&input_for(&doc, &detector)).unwrap();
        assert_eq!(trace.node_init.shape(), vec![1, 2]);
        assert!((trace.node_init.get(0, 0) - 0.7).abs() < 1e-15);
        assert_eq!(trace.node_init.get(0, 1), 0.0);
    }

    #[test]
    fn zero_graph_layers_keep_node_features() {
        let doc = Document::from_text("d", "so Alpha spoke .");
        let mut config = tiny_config();
        config.gcn_layers = 0;
        let detector = detector_for(std::slice::from_ref(&doc), config, 2);
        let trace = detector.forward_trace(&input_for(&doc, &detector)).unwrap();
        assert!(trace.layers.is_empty());
        assert_eq!(trace.node_init.rows(), 1);
    }

    #[test]
    fn identity_adjacency_applies_relu_of_weighted_features() {
        // One isolated node with self loops has adjacency exactly [[1]].
        let doc = Document::from_text("d", "so Alpha spoke .");
        let config = tiny_config();
        let mut detector = detector_for(std::slice::from_ref(&doc), config, 3);
        let d = detector.model.config.node_width();
        let mut neg = Tensor::zeros(d, d);
        for i in 0..d {
            neg.set(i, i, -1.0);
        }
        detector.model.gcn[0] = neg;
        let input = input_for(&doc, &detector);
        assert_eq!(input.adjacency.as_ref().unwrap().data(), &[1.0]);
        let trace = detector.forward_trace(&input).unwrap();
        for c in 0..d {
            let expected = (-trace.node_init.get(0, c)).max(0.0);
            assert!((trace.layers[0].get(0, c) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn entity_free_sentences_use_the_fallback_row() {
        let doc = Document::from_text("d", "so it goes . then Alpha spoke .");
        let config = tiny_config();
        let mut detector = detector_for(std::slice::from_ref(&doc), config, 4);
        detector.model.no_entity = Tensor::row(&[0.1, 0.2, 0.3]).unwrap();
        let trace = detector.forward_trace(&input_for(&doc, &detector)).unwrap();
        assert_eq!(trace.sentence_reps.rows(), 2);
        assert_eq!(trace.sentence_reps.row_slice(0), &[0.1, 0.2, 0.3]);
        assert_ne!(trace.sentence_reps.row_slice(1), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn all_zero_lstm_parameters_produce_zero_states() {
        let doc = Document::from_text("d", "so Alpha spoke . then Bravo left .");
        let config = tiny_config();
        let mut detector = detector_for(std::slice::from_ref(&doc), config, 5);
        detector.model.lstm_w_x = Tensor::zeros(3, 8);
        detector.model.lstm_w_h = Tensor::zeros(2, 8);
        detector.model.lstm_b = Tensor::zeros(1, 8);
        let trace = detector.forward_trace(&input_for(&doc, &detector)).unwrap();
        assert_eq!(trace.lstm_states.rows(), 2);
        for v in trace.lstm_states.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn lstm_off_passes_sentence_reps_through() {
        let doc = Document::from_text("d", "so Alpha spoke . then Bravo left .");
        let mut config = tiny_config();
        config.use_lstm = false;
        config.d_h = config.d_s;
        let detector = detector_for(std::slice::from_ref(&doc), config, 6);
        let trace = detector.forward_trace(&input_for(&doc, &detector)).unwrap();
        assert_eq!(trace.lstm_states.data(), trace.sentence_reps.data());
    }

    #[test]
    fn document_vector_is_the_weighted_pair_sum() {
        let doc =
            Document::from_text("d", "so Alpha spoke . then Bravo left . later Alpha slept .");
        let config = tiny_config();
        let detector = detector_for(std::slice::from_ref(&doc), config, 7);
        let mut input = input_for(&doc, &detector);
        input.nsp_scores = vec![0.5, 0.25];
        let trace = detector.forward_trace(&input).unwrap();
        let h = &trace.lstm_states;
        let d_h = detector.model.config.d_h;
        for c in 0..d_h {
            let expected = 0.5 * h.get(0, c) + 0.25 * h.get(1, c);
            assert!((trace.doc_vector.get(0, c) - expected).abs() < 1e-12);
            let expected_right = 0.5 * h.get(1, c) + 0.25 * h.get(2, c);
            assert!((trace.doc_vector.get(0, d_h + c) - expected_right).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_nsp_weights_every_pair_at_one() {
        let doc = Document::from_text("d", "so Alpha spoke . then Bravo left .");
        let config = tiny_config();
        let detector = detector_for(std::slice::from_ref(&doc), config, 8);
        let input = input_for(&doc, &detector);
        assert_eq!(input.nsp_scores, vec![1.0]);
    }

    #[test]
    fn nsp_enabled_without_scorer_is_an_error() {
        let doc = Document::from_text("d", "so Alpha spoke . then Bravo left .");
        let mut config = tiny_config();
        config.use_nsp = true;
        let detector = detector_for(std::slice::from_ref(&doc), config, 9);
        let err = prepare(
            &doc,
            &WordsSource::Trainable(&detector.embedding),
            None,
            None,
            &config,
        )
        .unwrap_err();
        assert!(err.to_string().contains("pair scorer"));
    }

    #[test]
    fn wrong_score_count_is_rejected() {
        let doc = Document::from_text("d", "so Alpha spoke . then Bravo left .");
        let config = tiny_config();
        let detector = detector_for(std::slice::from_ref(&doc), config, 10);
        let mut input = input_for(&doc, &detector);
        input.nsp_scores = vec![1.0, 1.0, 1.0];
        let err = detector.forward_trace(&input).unwrap_err();
        assert!(err.to_string().contains("pair scores"));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let doc = Document::from_text(
            "d",
            "so Alpha spoke . then Bravo left . later Alpha and Bravo met .",
        );
        let config = tiny_config();
        let detector = detector_for(std::slice::from_ref(&doc), config, 11);
        let trace = detector.forward_trace(&input_for(&doc, &detector)).unwrap();
        assert!((trace.p_human + trace.p_machine - 1.0).abs() < 1e-12);
        assert!(trace.p_human > 0.0 && trace.p_machine > 0.0);
    }

    #[test]
    fn entity_free_documents_still_classify() {
        let doc = Document::from_text("d", "it rained today . nothing else happened .");
        let config = tiny_config();
        let detector = detector_for(std::slice::from_ref(&doc), config, 12);
        let trace = detector.forward_trace(&input_for(&doc, &detector)).unwrap();
        assert_eq!(trace.node_init.rows(), 0);
        assert_eq!(trace.sentence_reps.rows(), 2);
        assert!((trace.p_human + trace.p_machine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_document_classifies_from_the_fallback_vector() {
        let doc = Document::from_text("d", "");
        let config = tiny_config();
        let detector = detector_for(std::slice::from_ref(&doc), config, 13);
        let trace = detector.forward_trace(&input_for(&doc, &detector)).unwrap();
        assert_eq!(trace.sentence_reps.rows(), 0);
        assert!((trace.p_human + trace.p_machine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wiki_off_is_independent_of_the_store() {
        let doc = Document::from_text("d", "so Alpha spoke . then Alpha left .");
        let config = tiny_config();
        let detector = detector_for(std::slice::from_ref(&doc), config, 14);
        let store_a = EntityVecStore::from_entries(2, [("alpha", vec![5.0, -2.0])]).unwrap();
        let store_b = EntityVecStore::from_entries(2, [("alpha", vec![-9.0, 4.0])]).unwrap();
        let words = WordsSource::Trainable(&detector.embedding);
        let t_a = detector
            .forward_trace(&prepare(&doc, &words, Some(&store_a), None, &config).unwrap())
            .unwrap();
        let t_b = detector
            .forward_trace(&prepare(&doc, &words, Some(&store_b), None, &config).unwrap())
            .unwrap();
        assert_eq!(t_a.logits.data(), t_b.logits.data());
    }

    #[test]
    fn wiki_on_feeds_stored_vectors_through_the_projection() {
        let doc = Document::from_text("d", "so Alpha spoke .");
        let mut config = tiny_config();
        config.use_wiki = true;
        let detector = detector_for(std::slice::from_ref(&doc), config, 15);
        let store = EntityVecStore::from_entries(2, [("alpha", vec![1.0, 2.0])]).unwrap();
        let words = WordsSource::Trainable(&detector.embedding);
        let with = detector
            .forward_trace(&prepare(&doc, &words, Some(&store), None, &config).unwrap())
            .unwrap();
        let without = detector
            .forward_trace(&prepare(&doc, &words, None, None, &config).unwrap())
            .unwrap();
        let d_c = config.d_c;
        let mut expected = vec![0.0; d_c];
        for (c, e) in expected.iter_mut().enumerate() {
            let pre = 1.0 * detector.model.w_w.get(0, c) + 2.0 * detector.model.w_w.get(1, c);
            *e = pre.max(0.0);
        }
        for c in 0..d_c {
            assert!((with.node_init.get(0, d_c + c) - expected[c]).abs() < 1e-15);
            assert_eq!(without.node_init.get(0, d_c + c), 0.0);
        }
    }

    #[test]
    fn unk_policy_routes_misses_through_the_shared_vector() {
        let doc = Document::from_text("d", "so Alpha spoke .");
        let mut config = tiny_config();
        config.use_wiki = true;
        config.miss_policy = MissPolicy::Unk;
        let mut detector = detector_for(std::slice::from_ref(&doc), config, 16);
        detector.model.unk_entity = Tensor::row(&[1.0, -1.0]).unwrap();
        let words = WordsSource::Trainable(&detector.embedding);
        let trace = detector
            .forward_trace(&prepare(&doc, &words, None, None, &config).unwrap())
            .unwrap();
        let d_c = config.d_c;
        for c in 0..d_c {
            let pre = detector.model.w_w.get(0, c) - detector.model.w_w.get(1, c);
            assert!((trace.node_init.get(0, d_c + c) - pre.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_predict_human() {
        assert_eq!(predicted_label(0.5), Label::Human);
        assert_eq!(predicted_label(0.500001), Label::Machine);
        assert_eq!(predicted_label(0.2), Label::Human);
    }

    #[test]
    fn trace_shapes_follow_the_config() {
        let doc =
            Document::from_text("d", "so Alpha spoke . then Bravo left . later Alpha slept .");
        let config = tiny_config();
        let detector = detector_for(std::slice::from_ref(&doc), config, 17);
        let trace = detector.forward_trace(&input_for(&doc, &detector)).unwrap();
        assert_eq!(trace.node_init.cols(), config.node_width());
        assert_eq!(trace.sentence_reps.shape(), vec![3, config.d_s]);
        assert_eq!(trace.lstm_states.shape(), vec![3, config.d_h]);
        assert_eq!(trace.doc_vector.shape(), vec![1, 2 * config.d_h]);
        assert_eq!(trace.logits.shape(), vec![1, 2]);
    }

    #[test]
    fn global_only_ablation_ignores_sentence_structure() {
        // Same token multiset, different arrangement: with the graph
        // branch off both orders produce identical logits because only the
        // token mean survives.
        let doc_a = Document::from_text("d", "so Alpha spoke . then Bravo left .");
        let doc_b = Document::from_text("d", "so Bravo spoke . then Alpha left .");
        let mut config = tiny_config();
        config.use_graph = false;
        config.use_lstm = false;
        config.d_h = config.d_s;
        let detector = detector_for(&[doc_a.clone(), doc_b.clone()], config, 18);
        let t_a = detector.forward_trace(&input_for(&doc_a, &detector)).unwrap();
        let t_b = detector.forward_trace(&input_for(&doc_b, &detector)).unwrap();
        assert_eq!(t_a.logits.data(), t_b.logits.data());
        assert!(t_a.doc_vector.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let doc = Document::from_text("d", "so Alpha spoke . then Alpha left .");
        let config = tiny_config();
        let detector = detector_for(std::slice::from_ref(&doc), config, 19);
        let input = input_for(&doc, &detector);
        let a = detector.forward_trace(&input).unwrap();
        let b = detector.forward_trace(&input).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        assert_eq!(a.p_machine, b.p_machine);
    }

    #[test]
    fn toy_document_gradients_match_finite_differences() {
        let doc = Document::from_text(
            "d",
            "so Alpha spoke . it was quiet . then Alpha met Bravo .",
        )
        .with_label(Label::Machine);
        let config = tiny_config();
        let detector = detector_for(std::slice::from_ref(&doc), config, 20);
        let input = input_for(&doc, &detector);
        let params = detector.param_tensors();
        let loss = loss_fn(move |tape, values| {
            let bound = DetectorBound::from_values(&config, values)?;
            document_loss(tape, &bound, &config, &input)
        });
        let report = grad_check(&loss, &params, 1e-4).unwrap();
        assert!(
            report.pass,
            "worst {} at {} [{}]",
            report.worst_rel_err, report.worst_param, report.worst_element
        );
    }
}
