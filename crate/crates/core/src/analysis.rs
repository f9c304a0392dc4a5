//! Embedding geometry: PCA per token stratum and a linear part-of-speech probe.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grammar::{sample_unseen_rows, Lexicon, Pos, TokenId};
use crate::model::ModelParams;
use crate::numerics::{Array, Rng};
use crate::trainer::Checkpoint;

pub const PROBE_ITERS: usize = 1000;
pub const PROBE_STEP: f64 = 1e-2;
pub const PROBE_SPLIT: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stratum {
    All,
    Head,
    Tail,
    Unseen,
}

impl Stratum {
    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Head => "head",
            Stratum::Tail => "tail",
            Stratum::Unseen => "unseen",
        }
    }
}

impl std::str::FromStr for Stratum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Stratum::All),
            "head" => Ok(Stratum::Head),
            "tail" => Ok(Stratum::Tail),
            "unseen" => Ok(Stratum::Unseen),
            other => Err(Error::Config(format!("unknown stratum {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub stratum: String,
    pub n_train: usize,
    pub n_heldout: usize,
    pub dim: usize,
    pub train_acc: f64,
    pub heldout_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// `k × d`, one unit-norm component per row, by decreasing variance.
    pub components: Array,
    pub explained_variance_ratio: Vec<f64>,
    /// Centered data projected on the components, `n × k`.
    pub projections: Array,
    pub mean: Vec<f64>,
}

/// Eigenvalues and eigenvectors (as columns) of a symmetric matrix by cyclic
/// Jacobi rotations. Values come back in decreasing order.
pub fn symmetric_eigen(a: &Array) -> Result<(Vec<f64>, Array)> {
    let (n, c) = a.matrix_dims("symmetric_eigen")?;
    if n != c {
        return Err(Error::Dimension(format!("eigen of a {n}×{c} matrix")));
    }
    let mut m = a.data().to_vec();
    let mut v = Array::identity(n).into_data();
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s
    };
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        if off(&m) <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = cs * mkp - sn * mkq;
                    m[k * n + q] = sn * mkp + cs * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = cs * mpk - sn * mqk;
                    m[q * n + k] = sn * mpk + cs * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + col] = v[r * n + src];
        }
    }
    Ok((values, Array::new(vec![n, n], vecs)?))
}

/// Flips `v` so its largest-magnitude coordinate (first on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn pca(data: &Array, n_components: usize) -> Result<PcaResult> {
    let (n, d) = data.matrix_dims("pca")?;
    if n < 2 {
        return Err(Error::Domain(format!("pca needs at least 2 rows, got {n}")));
    }
    if n_components == 0 || n_components > n.min(d) {
        return Err(Error::Domain(format!(
            "{n_components} components requested from {n}×{d} data"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(data.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = data.clone();
    for r in 0..n {
        for (x, m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let mut cov = crate::numerics::matmul(&centered.transpose()?, &centered)?;
    cov.data_mut().iter_mut().for_each(|x| *x /= (n - 1) as f64);
    let (values, vectors) = symmetric_eigen(&cov)?;
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let mut comps = Vec::with_capacity(n_components * d);
    for c in 0..n_components {
        let mut col: Vec<f64> = (0..d).map(|r| vectors.get(r, c)).collect();
        canonical_sign(&mut col);
        comps.extend(col);
    }
    let components = Array::new(vec![n_components, d], comps)?;
    let ratios = values[..n_components]
        .iter()
        .map(|&v| if total > 0.0 { v.max(0.0) / total } else { 0.0 })
        .collect();
    let projections = crate::numerics::matmul(&centered, &components.transpose()?)?;
    Ok(PcaResult {
        components,
        explained_variance_ratio: ratios,
        projections,
        mean,
    })
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logistic-regression probe with bias. Rows are shuffled by `rng`, the first
/// `split` fraction trains, the rest is held out. Features are standardized
/// with training-split statistics, then the mean logistic loss is minimized
/// by full-batch gradient descent.
pub fn train_probe(x: &Array, labels: &[bool], split: f64, rng: &mut Rng) -> Result<ProbeResult> {
    let (n, d) = x.matrix_dims("train_probe")?;
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{n} rows, {} labels",
            labels.len()
        )));
    }
    if n < 2 || !(split > 0.0 && split < 1.0) {
        return Err(Error::Domain(format!(
            "probe needs n >= 2 and split in (0,1), got {n}, {split}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let n_train = ((split * n as f64).round() as usize).clamp(1, n - 1);
    let (train, test) = idx.split_at(n_train);
    let positives = train.iter().filter(|&&i| labels[i]).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::Domain(
            "probe training split holds a single class".into(),
        ));
    }

    let mut mu = vec![0.0; d];
    for &i in train {
        for (m, v) in mu.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut sd = vec![0.0; d];
    for &i in train {
        for ((s, v), m) in sd.iter_mut().zip(x.row(i)).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    for s in sd.iter_mut() {
        let s2 = (*s / train.len() as f64).sqrt();
        *s = if s2 > 1e-12 { s2 } else { 1.0 };
    }
    let feats = |i: usize| -> Vec<f64> {
        x.row(i)
            .iter()
            .zip(&mu)
            .zip(&sd)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let xt: Vec<Vec<f64>> = train.iter().map(|&i| feats(i)).collect();
    let yt: Vec<f64> = train
        .iter()
        .map(|&i| if labels[i] { 1.0 } else { 0.0 })
        .collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    for _ in 0..PROBE_ITERS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (xi, yi) in xt.iter().zip(&yt) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let r = sigmoid(z) - yi;
            for (g, v) in gw.iter_mut().zip(xi) {
                *g += r * v;
            }
            gb += r;
        }
        let scale = PROBE_STEP / xt.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= scale * g;
        }
        b -= scale * gb;
    }
    let correct = |rows: &[usize]| -> f64 {
        let hits = rows
            .iter()
            .filter(|&&i| {
                let z: f64 = feats(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                (z > 0.0) == labels[i]
            })
            .count();
        hits as f64 / rows.len() as f64
    };
    Ok(ProbeResult {
        stratum: String::new(),
        n_train: train.len(),
        n_heldout: test.len(),
        dim: d,
        train_acc: correct(train),
        heldout_acc: correct(test),
    })
}

/// Unambiguous trained tokens of a stratum with their part of speech,
/// nouns then adjectives, each by increasing rank.
pub fn stratum_tokens(lex: &Lexicon, stratum: Stratum) -> Vec<(TokenId, Pos)> {
    let ranks: Vec<usize> = match stratum {
        Stratum::All => (1..lex.half() + 1).collect(),
        Stratum::Head => lex.head_ranks().collect(),
        Stratum::Tail => lex.tail_ranks().collect(),
        Stratum::Unseen => Vec::new(),
    };
    let ranks: Vec<usize> = ranks
        .into_iter()
        .filter(|&r| !lex.is_ambiguous(r))
        .collect();
    ranks
        .iter()
        .map(|&r| (lex.noun_id(r), Pos::Noun))
        .chain(ranks.iter().map(|&r| (lex.adj_id(r), Pos::Adj)))
        .collect()
}

fn gather(e: &Array, ids: &[TokenId]) -> Result<Array> {
    let rows: Vec<Vec<f64>> = ids.iter().map(|&i| e.row(i).to_vec()).collect();
    Array::from_rows(&rows)
}

/// POS probe on the token embeddings of a trained stratum (nouns positive).
pub fn probe_stratum(
    params: &ModelParams,
    lex: &Lexicon,
    stratum: Stratum,
    rng: &mut Rng,
) -> Result<ProbeResult> {
    if stratum == Stratum::Unseen {
        return Err(Error::Domain(
            "unseen tokens carry no part-of-speech label".into(),
        ));
    }
    let toks = stratum_tokens(lex, stratum);
    if toks.len() < 2 {
        return Err(Error::Domain(format!(
            "{} stratum has too few labeled tokens",
            stratum.name()
        )));
    }
    let ids: Vec<TokenId> = toks.iter().map(|t| t.0).collect();
    let labels: Vec<bool> = toks.iter().map(|t| t.1 == Pos::Noun).collect();
    let x = gather(params.embeddings(), &ids)?;
    let mut res = train_probe(&x, &labels, PROBE_SPLIT, rng)?;
    res.stratum = stratum.name().to_string();
    Ok(res)
}

#[derive(Serialize)]
struct PcaRow<'a> {
    token_id: TokenId,
    stratum: &'a str,
    pos_label: &'a str,
    pc1: f64,
    pc2: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Contract(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `pca_<stratum>.csv` for each requested stratum and
/// `probe_results.csv` (every requested labeled stratum plus `all`).
/// Returns the probe results in file order.
pub fn embedding_report(
    ck: &Checkpoint,
    strata: &[Stratum],
    out_dir: &Path,
) -> Result<Vec<ProbeResult>> {
    let cfg = &ck.config;
    let lex = Lexicon::new(&cfg.grammar)?;
    let params = &ck.state.params;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let root = Rng::new(cfg.seed)
        .split("analysis")
        .split(&ck.state.step.to_string());

    for &s in strata {
        let (ids, labels, rows) = if s == Stratum::Unseen {
            let rows = sample_unseen_rows(
                cfg.unseen_dist,
                cfg.unseen_count,
                cfg.model.d_model,
                cfg.model.init_std,
                &mut root.split("unseen"),
            )?;
            let ids: Vec<TokenId> = (0..cfg.unseen_count)
                .map(|i| lex.vocab_size() + i)
                .collect();
            (ids, vec!["none"; cfg.unseen_count], rows)
        } else {
            let toks = stratum_tokens(&lex, s);
            let ids: Vec<TokenId> = toks.iter().map(|t| t.0).collect();
            let labels = toks
                .iter()
                .map(|t| if t.1 == Pos::Noun { "noun" } else { "adj" })
                .collect();
            let rows = gather(params.embeddings(), &ids)?;
            (ids, labels, rows)
        };
        let proj = pca(&rows, 2)?.projections;
        let path = out_dir.join(format!("pca_{}.csv", s.name()));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        for (i, (&id, &label)) in ids.iter().zip(&labels).enumerate() {
            let row = PcaRow {
                token_id: id,
                stratum: s.name(),
                pos_label: label,
                pc1: proj.get(i, 0),
                pc2: proj.get(i, 1),
            };
            w.serialize(row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let mut probed: Vec<Stratum> = strata
        .iter()
        .copied()
        .filter(|&s| s != Stratum::Unseen)
        .collect();
    if !probed.contains(&Stratum::All) {
        probed.push(Stratum::All);
    }
    let mut results = Vec::new();
    for s in probed {
        results.push(probe_stratum(params, &lex, s, &mut root.split(s.name()))?);
    }
    let path = out_dir.join("probe_results.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for r in &results {
        w.serialize(r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(results)
}
