//! Post-LayerNorm bidirectional transformer with tied input/output embeddings.
//!
//! `h = E[tokens] + Pos`, then per layer `h = LN1(h + Attn(h))`,
//! `h = LN2(h + FF(h))`, and logits are `h · Eᵀ`. There is no output bias and
//! no extra prediction-head transform, so appending rows to `E` extends both
//! the input vocabulary and the output vocabulary consistently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{TokenId, MASK_POSITIONS, SEQ_LEN};
use crate::numerics::{argmax, log_sum_exp, Array, Rng, Tape, Var, LAYER_NORM_EPS};

pub const DEFAULT_INIT_STD: f64 = 0.02;

fn default_layers() -> usize {
    6
}
fn default_heads() -> usize {
    1
}
fn default_d_model() -> usize {
    64
}
fn default_d_ff() -> usize {
    128
}
fn default_max_len() -> usize {
    SEQ_LEN
}
fn default_init_std() -> f64 {
    DEFAULT_INIT_STD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Content vocabulary plus copula and mask (`v + 2`).
    pub vocab_size: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    /// The toy configuration: 6 layers, 1 head, d_model 64, d_ff 128.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: default_layers(),
            n_heads: default_heads(),
            d_model: default_d_model(),
            d_ff: default_d_ff(),
            max_len: default_max_len(),
            vocab_size,
            init_std: DEFAULT_INIT_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads != 1 {
            return Err(Error::Config(format!(
                "only single-head attention is supported, got n_heads = {}",
                self.n_heads
            )));
        }
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("bad d_model {}", self.d_model)));
        }
        if self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Config("d_ff and n_layers must be positive".into()));
        }
        if self.max_len != SEQ_LEN {
            return Err(Error::Config(format!(
                "max_len must be {SEQ_LEN}, got {}",
                self.max_len
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 4, got {}",
                self.vocab_size
            )));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config(format!("bad init_std {}", self.init_std)));
        }
        Ok(())
    }
}

/// Offsets of the per-layer tensors inside a layer block.
mod slot {
    pub const WQ: usize = 0;
    pub const WK: usize = 1;
    pub const WV: usize = 2;
    pub const WO: usize = 3;
    pub const LN1_G: usize = 4;
    pub const LN1_B: usize = 5;
    pub const W1: usize = 6;
    pub const B1: usize = 7;
    pub const W2: usize = 8;
    pub const B2: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const PER_LAYER: usize = 12;
    pub const NAMES: [&str; PER_LAYER] = [
        "wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias", "ff_w1", "ff_b1", "ff_w2", "ff_b2",
        "ln2_gain", "ln2_bias",
    ];
}

pub const EMBED: usize = 0;
pub const POS: usize = 1;
const LAYERS_START: usize = 2;

/// All trainable tensors in a fixed order: token embeddings, positional
/// embeddings, then per layer `wq wk wv wo ln1_gain ln1_bias ff_w1 ff_b1
/// ff_w2 ff_b2 ln2_gain ln2_bias`. Matrices multiply from the right
/// (`h · W`), so `wq` is `d_model × d_model` and `ff_w1` is `d_model × d_ff`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Array>,
}

fn normal_array(shape: &[usize], std: f64, rng: &mut Rng) -> Array {
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.normal(0.0, std)).collect(),
    )
    .expect("length matches shape")
}

/// Fresh embedding matrix drawn from the initializer.
pub fn init_embeddings(cfg: &ModelConfig, rng: &mut Rng) -> Array {
    normal_array(&[cfg.vocab_size, cfg.d_model], cfg.init_std, rng)
}

pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let (d, f, std) = (cfg.d_model, cfg.d_ff, cfg.init_std);
    let mut tensors = vec![
        init_embeddings(cfg, rng),
        normal_array(&[cfg.max_len, d], std, rng),
    ];
    for _ in 0..cfg.n_layers {
        for _ in 0..4 {
            tensors.push(normal_array(&[d, d], std, rng));
        }
        tensors.push(Array::full(&[d], 1.0));
        tensors.push(Array::zeros(&[d]));
        tensors.push(normal_array(&[d, f], std, rng));
        tensors.push(Array::zeros(&[f]));
        tensors.push(normal_array(&[f, d], std, rng));
        tensors.push(Array::zeros(&[d]));
        tensors.push(Array::full(&[d], 1.0));
        tensors.push(Array::zeros(&[d]));
    }
    Ok(ModelParams { tensors })
}

impl ModelParams {
    pub fn n_layers(&self) -> usize {
        (self.tensors.len() - LAYERS_START) / slot::PER_LAYER
    }

    pub fn embeddings(&self) -> &Array {
        &self.tensors[EMBED]
    }

    pub fn embeddings_mut(&mut self) -> &mut Array {
        &mut self.tensors[EMBED]
    }

    pub fn vocab_size(&self) -> usize {
        self.tensors[EMBED].rows()
    }

    pub fn d_model(&self) -> usize {
        self.tensors[EMBED].cols()
    }

    /// Tensor names in storage order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![
            "token_embeddings".to_string(),
            "position_embeddings".to_string(),
        ];
        for l in 0..self.n_layers() {
            names.extend(slot::NAMES.iter().map(|n| format!("layer{l}.{n}")));
        }
        names
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Array::is_finite)
    }

    pub fn layer_tensor(&self, layer: usize, name: &str) -> Option<&Array> {
        let off = slot::NAMES.iter().position(|n| *n == name)?;
        self.tensors
            .get(LAYERS_START + layer * slot::PER_LAYER + off)
    }
}

/// Which rows of the hidden state are projected to logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Readout {
    AllPositions,
    MaskedOnly,
}

struct Graph {
    leaves: Vec<Var>,
    logits: Var,
    attention: Vec<Var>,
}

fn check_ids(batch: &[[TokenId; SEQ_LEN]], limit: usize) -> Result<()> {
    for tokens in batch {
        if let Some(&t) = tokens.iter().find(|&&t| t >= limit) {
            return Err(Error::Index(format!(
                "token id {t} outside vocabulary of {limit}"
            )));
        }
    }
    Ok(())
}

fn build_graph(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &[[TokenId; SEQ_LEN]],
    extra_rows: Option<&Array>,
    readout: Readout,
) -> Result<Graph> {
    let vocab = params.vocab_size() + extra_rows.map_or(0, Array::rows);
    check_ids(batch, vocab)?;
    let leaves: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();
    let table = match extra_rows {
        Some(rows) => {
            if rows.cols() != params.d_model() {
                return Err(Error::Dimension(format!(
                    "extra rows have width {}, model has {}",
                    rows.cols(),
                    params.d_model()
                )));
            }
            let extra = tape.leaf(rows.clone());
            tape.concat_rows(leaves[EMBED], extra)?
        }
        None => leaves[EMBED],
    };
    let ids: Vec<usize> = batch.iter().flatten().copied().collect();
    let x = tape.gather_rows(table, &ids)?;
    let mut h = tape.add_tiled(x, leaves[POS])?;
    let mut attention = Vec::with_capacity(params.n_layers());
    for l in 0..params.n_layers() {
        let w = |s: usize| leaves[LAYERS_START + l * slot::PER_LAYER + s];
        let q = tape.matmul(h, w(slot::WQ))?;
        let k = tape.matmul(h, w(slot::WK))?;
        let v = tape.matmul(h, w(slot::WV))?;
        let a = tape.attention(q, k, v, SEQ_LEN)?;
        attention.push(a);
        let o = tape.matmul(a, w(slot::WO))?;
        let r = tape.add(h, o)?;
        h = tape.layer_norm(r, w(slot::LN1_G), w(slot::LN1_B), LAYER_NORM_EPS)?;
        let f = tape.matmul(h, w(slot::W1))?;
        let f = tape.add_tiled(f, w(slot::B1))?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w(slot::W2))?;
        let f = tape.add_tiled(f, w(slot::B2))?;
        let r = tape.add(h, f)?;
        h = tape.layer_norm(r, w(slot::LN2_G), w(slot::LN2_B), LAYER_NORM_EPS)?;
    }
    let readout_rows = match readout {
        Readout::AllPositions => h,
        Readout::MaskedOnly => {
            let rows: Vec<usize> = (0..batch.len())
                .flat_map(|b| MASK_POSITIONS.iter().map(move |&p| b * SEQ_LEN + p))
                .collect();
            tape.gather_rows(h, &rows)?
        }
    };
    let logits = tape.matmul_t(readout_rows, table, true)?;
    Ok(Graph {
        leaves,
        logits,
        attention,
    })
}

fn split_rows(all: &Array, rows_per_item: usize) -> Vec<Array> {
    let cols = all.cols();
    all.data()
        .chunks(rows_per_item * cols)
        .map(|c| Array::new(vec![rows_per_item, cols], c.to_vec()).expect("exact chunk"))
        .collect()
}

/// Logits for all seven positions, `7 × (vocab + extra rows)`. Token ids at or
/// above the trained vocabulary index into `extra_rows`.
pub fn forward(
    params: &ModelParams,
    tokens: &[TokenId; SEQ_LEN],
    extra_rows: Option<&Array>,
) -> Result<Array> {
    let mut tape = Tape::new();
    let g = build_graph(
        &mut tape,
        params,
        std::slice::from_ref(tokens),
        extra_rows,
        Readout::AllPositions,
    )?;
    Ok(tape.value(g.logits).clone())
}

/// Per-layer attention matrices (`7 × 7`, flattened row-major) for one sentence.
pub fn attention_maps(params: &ModelParams, tokens: &[TokenId; SEQ_LEN]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let g = build_graph(
        &mut tape,
        params,
        std::slice::from_ref(tokens),
        None,
        Readout::AllPositions,
    )?;
    Ok(g.attention
        .iter()
        .map(|&a| tape.attention_probs(a).expect("attention node").to_vec())
        .collect())
}

const EVAL_CHUNK: usize = 128;

/// Logits at the three masked positions for each sentence (`3 × vocab` each).
pub fn masked_logits_batch(
    params: &ModelParams,
    batch: &[[TokenId; SEQ_LEN]],
    extra_rows: Option<&Array>,
) -> Result<Vec<Array>> {
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let g = build_graph(&mut tape, params, chunk, extra_rows, Readout::MaskedOnly)?;
        out.extend(split_rows(tape.value(g.logits), MASK_POSITIONS.len()));
    }
    Ok(out)
}

/// Mean masked-token cross-entropy over a batch and its gradient for every
/// parameter tensor (same order as [`ModelParams::tensors`]).
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[[TokenId; SEQ_LEN]],
    targets: &[[TokenId; 3]],
) -> Result<(f64, Vec<Array>)> {
    if batch.len() != targets.len() || batch.is_empty() {
        return Err(Error::Dimension(format!(
            "{} sentences, {} target triples",
            batch.len(),
            targets.len()
        )));
    }
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, params, batch, None, Readout::MaskedOnly)?;
    let flat: Vec<usize> = targets.iter().flatten().copied().collect();
    let loss = tape.cross_entropy(g.logits, &flat)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((value, g.leaves.iter().map(|&v| grads.take(v)).collect()))
}

/// The three masked-position rows of a logit matrix: the last three rows,
/// which covers both full `7 × V` and masked-only `3 × V` layouts.
fn masked_rows(logits: &Array) -> impl Iterator<Item = &[f64]> {
    let n = logits.rows();
    (n - MASK_POSITIONS.len()..n).map(move |r| logits.row(r))
}

/// Mean cross-entropy over the three masked positions.
pub fn mlm_loss(logits: &Array, targets: &[TokenId; 3]) -> f64 {
    -pattern_loglik(logits, targets) / 3.0
}

/// Sum over masked positions of `log softmax(logits[pos])[triple[pos]]`.
pub fn pattern_loglik(logits: &Array, triple: &[TokenId; 3]) -> f64 {
    masked_rows(logits)
        .zip(triple)
        .map(|(row, &t)| row[t] - log_sum_exp(row))
        .sum()
}

/// Argmax id at each masked position; ties go to the lower id.
pub fn predict(logits: &Array) -> [TokenId; 3] {
    let mut out = [0; 3];
    for (o, row) in out.iter_mut().zip(masked_rows(logits)) {
        *o = argmax(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 4,
            d_ff: 8,
            ..ModelConfig::toy(vocab)
        }
    }

    #[test]
    fn init_follows_initializer() {
        let cfg = ModelConfig::toy(10_002);
        let p = init_params(&cfg, &mut Rng::new(1)).unwrap();
        let e = p.embeddings();
        assert_eq!(e.shape(), &[10_002, 64]);
        let n = e.len() as f64;
        let mean = e.sum() / n;
        let std = (e.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() < 0.001, "{std}");
        assert_eq!(
            p.layer_tensor(0, "ln1_gain").unwrap(),
            &Array::full(&[64], 1.0)
        );
        assert_eq!(p.layer_tensor(5, "ff_b2").unwrap(), &Array::zeros(&[64]));
        assert_eq!(p.tensors.len(), 2 + 6 * 12);
        assert_eq!(p, init_params(&cfg, &mut Rng::new(1)).unwrap());
        assert_eq!(p.names().len(), p.tensors.len());
    }

    #[test]
    fn rejects_unsupported_configs() {
        let mut c = ModelConfig::toy(12);
        c.n_heads = 2;
        assert!(init_params(&c, &mut Rng::new(0)).is_err());
        let mut c = ModelConfig::toy(3);
        c.n_heads = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_index_errors() {
        let p = init_params(&tiny(12), &mut Rng::new(2)).unwrap();
        let toks = [0, 10, 6, 0, 11, 11, 11];
        assert_eq!(forward(&p, &toks, None).unwrap().shape(), &[7, 12]);
        let extra = Array::zeros(&[3, 4]);
        assert_eq!(forward(&p, &toks, Some(&extra)).unwrap().shape(), &[7, 15]);
        assert!(matches!(
            forward(&p, &[12, 10, 6, 0, 11, 11, 11], None),
            Err(Error::Index(_))
        ));
        assert!(forward(&p, &[14, 10, 13, 14, 11, 11, 11], Some(&extra)).is_ok());
    }

    #[test]
    fn loss_examples() {
        let uniform = Array::zeros(&[7, 10_002]);
        assert!((mlm_loss(&uniform, &[1, 2, 3]) - (10_002f64).ln()).abs() < 1e-12);
        assert!((pattern_loglik(&uniform, &[4, 4, 9]) + 3.0 * (10_002f64).ln()).abs() < 1e-9);

        let mut peaked = Array::zeros(&[3, 5]);
        for (r, t) in [1, 4, 2].iter().enumerate() {
            peaked.row_mut(r)[*t] = 200.0;
        }
        assert!(mlm_loss(&peaked, &[1, 4, 2]) < 1e-80);
        assert!(pattern_loglik(&peaked, &[1, 4, 2]).abs() < 1e-80);

        let two = Array::from_rows(&vec![vec![3f64.ln(), 0.0]; 3]).unwrap();
        assert!((mlm_loss(&two, &[0, 0, 0]) + 0.75f64.ln()).abs() < 1e-15);
        assert!(
            (pattern_loglik(&two, &[0, 0, 0]) + 3.0 * mlm_loss(&two, &[0, 0, 0])).abs() < 1e-15
        );
    }

    #[test]
    fn predict_examples() {
        let mut hot = Array::zeros(&[3, 6]);
        hot.row_mut(0)[5] = 1.0;
        hot.row_mut(1)[2] = 1.0;
        hot.row_mut(2)[0] = 1.0;
        assert_eq!(predict(&hot), [5, 2, 0]);
        assert_eq!(predict(&Array::zeros(&[7, 6])), [0, 0, 0]);

        let mut rng = Rng::new(4);
        let logits = Array::new(
            vec![3, 50],
            (0..150).map(|_| rng.normal(0.0, 1.0)).collect(),
        )
        .unwrap();
        let scan: Vec<usize> = (0..3)
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for i in 0..row.len() {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        assert_eq!(predict(&logits).to_vec(), scan);
    }

    #[test]
    fn batch_equals_single_forward() {
        let p = init_params(&tiny(12), &mut Rng::new(3)).unwrap();
        let batch = [
            [0, 10, 6, 0, 11, 11, 11],
            [10, 7, 1, 7, 11, 11, 11],
            [2, 10, 9, 9, 11, 11, 11],
        ];
        let together = masked_logits_batch(&p, &batch, None).unwrap();
        let mut reversed = batch;
        reversed.reverse();
        let rev = masked_logits_batch(&p, &reversed, None).unwrap();
        for (i, toks) in batch.iter().enumerate() {
            let single = forward(&p, toks, None).unwrap();
            for r in 0..3 {
                for (a, b) in together[i].row(r).iter().zip(single.row(4 + r)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            assert_eq!(together[i], rev[batch.len() - 1 - i]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = init_params(&ModelConfig::toy(12), &mut Rng::new(5)).unwrap();
        let maps = attention_maps(&p, &[0, 10, 6, 0, 11, 11, 11]).unwrap();
        assert_eq!(maps.len(), 6);
        for m in maps {
            for row in m.chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_extra_rows_permutes_logit_columns() {
        let p = init_params(&tiny(12), &mut Rng::new(6)).unwrap();
        let mut rng = Rng::new(7);
        let extra = Array::new(vec![2, 4], (0..8).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let swapped = Array::new(
            vec![2, 4],
            extra.row(1).iter().chain(extra.row(0)).copied().collect(),
        )
        .unwrap();
        let toks = [0, 10, 6, 0, 11, 11, 11];
        let a = forward(&p, &toks, Some(&extra)).unwrap();
        let b = forward(&p, &toks, Some(&swapped)).unwrap();
        for r in 0..7 {
            assert_eq!(a.row(r)[12], b.row(r)[13]);
            assert_eq!(a.row(r)[13], b.row(r)[12]);
            assert_eq!(&a.row(r)[..12], &b.row(r)[..12]);
        }
    }
}
