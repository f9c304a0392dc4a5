//! The synthetic noun/adjective cloze grammar.
//!
//! Every sentence has seven tokens: a three-token sequence (either
//! `noun copula adj` or `copula adj noun`), a query token repeating one of the
//! two content tokens, and three masked pattern slots. The pattern is
//! `adj noun noun` when the query is the noun and `adj adj adj` when the query
//! is the adjective, so a model must classify the query's part of speech and
//! then copy tokens in a role-dependent order.
//!
//! Nouns are token ids `0..v/2`, adjectives `v/2..v`; rank `r` (1-based) maps
//! to noun `r-1` and adjective `v/2+r-1`, and both halves are sampled from
//! the same truncated Zipf law over ranks. A fraction `epsilon` of ranks in
//! each probability-mass bin is ambiguous: a slot drawn at such a rank holds
//! the noun-half or adjective-half id at that rank with equal odds.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Rng};

pub type TokenId = usize;

pub const SEQ_LEN: usize = 7;
pub const MASK_POSITIONS: [usize; 3] = [4, 5, 6];
pub const QUERY_POSITION: usize = 3;

fn default_bins() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarConfig {
    /// Number of content tokens (nouns + adjectives); even, at least 4.
    pub v: usize,
    /// Zipf skew; 0 gives uniform sampling.
    pub alpha: f64,
    /// Fraction of ambiguous ranks per probability-mass bin.
    pub epsilon: f64,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    pub seed: u64,
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.v < 4 || self.v % 2 != 0 {
            return Err(Error::Config(format!(
                "v must be even and >= 4, got {}",
                self.v
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [0,1], got {}",
                self.epsilon
            )));
        }
        if self.n_bins == 0 {
            return Err(Error::Config("n_bins must be >= 1".into()));
        }
        Ok(())
    }
}

/// Truncated Zipf probabilities over ranks `1..=e-s+1`:
/// `P(k) = k^-alpha / sum_j j^-alpha`.
pub fn zipf_pmf(alpha: f64, s: usize, e: usize) -> Result<Vec<f64>> {
    if e < s {
        return Err(Error::Domain(format!("zipf support end {e} < start {s}")));
    }
    let n = e - s + 1;
    let weights: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-alpha)).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pos {
    Noun,
    Adj,
}

#[derive(Clone, Debug)]
pub struct Lexicon {
    v: usize,
    pmf: Vec<f64>,
    cdf: Vec<f64>,
    /// Indexed by rank − 1.
    ambiguous: Vec<bool>,
    /// Rank-index ranges (0-based, half-open).
    bins: Vec<Range<usize>>,
}

impl Lexicon {
    pub fn new(cfg: &GrammarConfig) -> Result<Self> {
        cfg.validate()?;
        let half = cfg.v / 2;
        let pmf = zipf_pmf(cfg.alpha, 0, half - 1)?;
        let cdf: Vec<f64> = pmf
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();

        let n_bins = cfg.n_bins.min(half);
        let mut bins = Vec::with_capacity(n_bins);
        let mut start = 0;
        for b in 0..n_bins {
            let end = if b + 1 == n_bins {
                half
            } else {
                let target = (b + 1) as f64 / n_bins as f64;
                let reach = cdf.partition_point(|&c| c < target) + 1;
                reach.max(start + 1).min(half - (n_bins - 1 - b))
            };
            bins.push(start..end);
            start = end;
        }

        let mut rng = Rng::new(cfg.seed).split("lexicon");
        let mut ambiguous = vec![false; half];
        for bin in &bins {
            let mut idx: Vec<usize> = bin.clone().collect();
            let count = ((cfg.epsilon * idx.len() as f64) - 1e-9).ceil().max(0.0) as usize;
            rng.shuffle(&mut idx);
            for &i in idx.iter().take(count) {
                ambiguous[i] = true;
            }
        }

        Ok(Lexicon {
            v: cfg.v,
            pmf,
            cdf,
            ambiguous,
            bins,
        })
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn half(&self) -> usize {
        self.v / 2
    }

    pub fn copula(&self) -> TokenId {
        self.v
    }

    pub fn mask(&self) -> TokenId {
        self.v + 1
    }

    /// Content tokens plus copula and mask.
    pub fn vocab_size(&self) -> usize {
        self.v + 2
    }

    pub fn noun_id(&self, rank: usize) -> TokenId {
        rank - 1
    }

    pub fn adj_id(&self, rank: usize) -> TokenId {
        self.half() + rank - 1
    }

    pub fn rank_of(&self, id: TokenId) -> Option<usize> {
        let half = self.half();
        if id < half {
            Some(id + 1)
        } else if id < self.v {
            Some(id - half + 1)
        } else {
            None
        }
    }

    /// Nominal part of speech of a content token (its half of the vocabulary).
    pub fn pos_of(&self, id: TokenId) -> Option<Pos> {
        if id < self.half() {
            Some(Pos::Noun)
        } else if id < self.v {
            Some(Pos::Adj)
        } else {
            None
        }
    }

    pub fn is_ambiguous(&self, rank: usize) -> bool {
        self.ambiguous[rank - 1]
    }

    pub fn ambiguous_count(&self) -> usize {
        self.ambiguous.iter().filter(|&&a| a).count()
    }

    /// Probability of drawing `rank` (1-based) for either slot.
    pub fn prob(&self, rank: usize) -> f64 {
        self.pmf[rank - 1]
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// Ambiguity bins as 1-based inclusive rank ranges.
    pub fn bins(&self) -> Vec<Range<usize>> {
        self.bins.iter().map(|b| b.start + 1..b.end + 1).collect()
    }

    /// Number of ranks in the head (and in the tail): ⌈v/20⌉.
    pub fn stratum_size(&self) -> usize {
        self.v.div_ceil(20).min(self.half())
    }

    pub fn head_ranks(&self) -> Range<usize> {
        1..self.stratum_size() + 1
    }

    pub fn tail_ranks(&self) -> Range<usize> {
        self.half() - self.stratum_size() + 1..self.half() + 1
    }

    pub fn sample_rank(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        let i = self.cdf.partition_point(|&c| c <= u);
        i.min(self.half() - 1) + 1
    }

    fn slot_token(&self, rank: usize, nominal: Pos, rng: &mut Rng) -> TokenId {
        let pos = if self.is_ambiguous(rank) {
            if rng.coin() {
                Pos::Noun
            } else {
                Pos::Adj
            }
        } else {
            nominal
        };
        match pos {
            Pos::Noun => self.noun_id(rank),
            Pos::Adj => self.adj_id(rank),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// `noun copula adj`
    NounFirst,
    /// `copula adj noun`
    CopulaFirst,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    /// Token in the noun slot.
    pub noun: TokenId,
    /// Token in the adjective slot.
    pub adj: TokenId,
    pub order: Order,
    pub query_role: Pos,
    pub noun_rank: Option<usize>,
    pub adj_rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: [TokenId; SEQ_LEN],
    pub targets: [TokenId; 3],
    pub meta: ExampleMeta,
}

/// Pattern for a query of the given role: `adj noun noun` or `adj adj adj`.
pub fn pattern(noun: TokenId, adj: TokenId, role: Pos) -> [TokenId; 3] {
    match role {
        Pos::Noun => [adj, noun, noun],
        Pos::Adj => [adj, adj, adj],
    }
}

/// Assembles a sentence from its slot occupants. Ids outside the lexicon
/// (unseen tokens) are allowed and get no rank.
pub fn build_example(
    noun: TokenId,
    adj: TokenId,
    order: Order,
    query_role: Pos,
    lex: &Lexicon,
) -> Example {
    let c = lex.copula();
    let m = lex.mask();
    let query = match query_role {
        Pos::Noun => noun,
        Pos::Adj => adj,
    };
    let tokens = match order {
        Order::NounFirst => [noun, c, adj, query, m, m, m],
        Order::CopulaFirst => [c, adj, noun, query, m, m, m],
    };
    Example {
        tokens,
        targets: pattern(noun, adj, query_role),
        meta: ExampleMeta {
            noun,
            adj,
            order,
            query_role,
            noun_rank: lex.rank_of(noun),
            adj_rank: lex.rank_of(adj),
        },
    }
}

fn random_order(rng: &mut Rng) -> Order {
    if rng.coin() {
        Order::NounFirst
    } else {
        Order::CopulaFirst
    }
}

fn random_role(rng: &mut Rng) -> Pos {
    if rng.coin() {
        Pos::Noun
    } else {
        Pos::Adj
    }
}

/// One training sentence.
pub fn sample_example(lex: &Lexicon, rng: &mut Rng) -> Example {
    let noun_rank = lex.sample_rank(rng);
    let adj_rank = lex.sample_rank(rng);
    let noun = lex.slot_token(noun_rank, Pos::Noun, rng);
    let adj = lex.slot_token(adj_rank, Pos::Adj, rng);
    let order = random_order(rng);
    let role = random_role(rng);
    build_example(noun, adj, order, role, lex)
}

/// (noun-slot token, adj-slot token) pairs seen in training. Only grows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SeenPairs {
    pairs: HashSet<(TokenId, TokenId)>,
}

impl SeenPairs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, ex: &Example) {
        self.pairs.insert((ex.meta.noun, ex.meta.adj));
    }

    pub fn insert(&mut self, noun: TokenId, adj: TokenId) {
        self.pairs.insert((noun, adj));
    }

    pub fn contains(&self, noun: TokenId, adj: TokenId) -> bool {
        self.pairs.contains(&(noun, adj))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sorted(&self) -> Vec<(TokenId, TokenId)> {
        let mut v: Vec<_> = self.pairs.iter().copied().collect();
        v.sort_unstable();
        v
    }

    /// FNV-1a over the sorted pair list; identical registries give identical digests.
    pub fn digest(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (a, b) in self.sorted() {
            for byte in (a as u64)
                .to_le_bytes()
                .into_iter()
                .chain((b as u64).to_le_bytes())
            {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }
}

impl FromIterator<(TokenId, TokenId)> for SeenPairs {
    fn from_iter<I: IntoIterator<Item = (TokenId, TokenId)>>(iter: I) -> Self {
        SeenPairs {
            pairs: iter.into_iter().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Validation,
    Head,
    Tail,
    HeadSwitch,
    TailSwitch,
    Unseen,
}

impl EvalKind {
    pub const ALL: [EvalKind; 6] = [
        EvalKind::Validation,
        EvalKind::Head,
        EvalKind::Tail,
        EvalKind::HeadSwitch,
        EvalKind::TailSwitch,
        EvalKind::Unseen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalKind::Validation => "validation",
            EvalKind::Head => "head",
            EvalKind::Tail => "tail",
            EvalKind::HeadSwitch => "head_switch",
            EvalKind::TailSwitch => "tail_switch",
            EvalKind::Unseen => "unseen",
        }
    }

    pub fn is_switch(self) -> bool {
        matches!(self, EvalKind::HeadSwitch | EvalKind::TailSwitch)
    }
}

impl fmt::Display for EvalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown eval kind {s:?}")))
    }
}

/// Distribution for fresh (never trained) embedding rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenDist {
    /// Same law as the model's initializer.
    Init,
    /// U[0, 1).
    Uniform01,
    /// Normal with mean 5 and standard deviation 5.
    #[serde(rename = "normal_5_5")]
    Normal55,
}

impl FromStr for UnseenDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(UnseenDist::Init),
            "uniform01" => Ok(UnseenDist::Uniform01),
            "normal_5_5" => Ok(UnseenDist::Normal55),
            other => Err(Error::Config(format!(
                "unknown unseen distribution {other:?}"
            ))),
        }
    }
}

/// `m × d` fresh rows. `init_std` is the model initializer's standard deviation.
pub fn sample_unseen_rows(
    dist: UnseenDist,
    m: usize,
    d: usize,
    init_std: f64,
    rng: &mut Rng,
) -> Result<Array> {
    if m < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 unseen rows, got {m}"
        )));
    }
    let data = (0..m * d)
        .map(|_| match dist {
            UnseenDist::Init => rng.normal(0.0, init_std),
            UnseenDist::Uniform01 => rng.uniform(),
            UnseenDist::Normal55 => rng.normal(5.0, 5.0),
        })
        .collect();
    Array::new(vec![m, d], data)
}

/// How unseen-token sets are populated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnseenSpec {
    pub count: usize,
    pub dist: UnseenDist,
    pub dim: usize,
    pub init_std: f64,
}

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub kind: EvalKind,
    pub examples: Vec<Example>,
    /// Switch sets only: targets under the slot (in-context) reading.
    pub ic_targets: Vec<[TokenId; 3]>,
    /// Switch sets only: targets under the lexical (in-weights) reading.
    pub iw_targets: Vec<[TokenId; 3]>,
    /// Unseen sets only: rows appended after the trained vocabulary, so that
    /// row `i` has token id `vocab_size + i`.
    pub unseen_rows: Option<Array>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Draws rank pairs for one stratum, rejecting pairs the predicate refuses.
/// Falls back to enumerating the whole admissible pool when rejection stalls,
/// and fails only when that pool is empty.
struct PairSampler<'a> {
    stratum: &'static str,
    noun_ranks: Vec<usize>,
    adj_ranks: Vec<usize>,
    zipf: Option<&'a Lexicon>,
    pool: Option<Vec<(usize, usize)>>,
}

const REJECTION_TRIES: usize = 64;

impl<'a> PairSampler<'a> {
    fn draw_one(&self, rng: &mut Rng) -> (usize, usize) {
        match self.zipf {
            Some(lex) => (lex.sample_rank(rng), lex.sample_rank(rng)),
            None => (
                self.noun_ranks[rng.below(self.noun_ranks.len())],
                self.adj_ranks[rng.below(self.adj_ranks.len())],
            ),
        }
    }

    fn draw(&mut self, rng: &mut Rng, ok: impl Fn(usize, usize) -> bool) -> Result<(usize, usize)> {
        if self.pool.is_none() {
            for _ in 0..REJECTION_TRIES {
                let (a, b) = self.draw_one(rng);
                if ok(a, b) {
                    return Ok((a, b));
                }
            }
            let mut pool = Vec::new();
            for &a in &self.noun_ranks {
                for &b in &self.adj_ranks {
                    if ok(a, b) {
                        pool.push((a, b));
                    }
                }
            }
            self.pool = Some(pool);
        }
        let pool = self.pool.as_mut().expect("pool built above");
        pool.retain(|&(a, b)| ok(a, b));
        if pool.is_empty() {
            return Err(Error::Generation {
                stratum: self.stratum.to_string(),
                reason: "every unambiguous pair in the stratum was seen in training".into(),
            });
        }
        Ok(pool[rng.below(pool.len())])
    }
}

/// Builds `n` evaluation examples of the requested kind. Ambiguous ranks are
/// excluded and (noun-slot, adj-slot) pairs present in `seen` are rejected.
pub fn build_eval_set(
    kind: EvalKind,
    n: usize,
    lex: &Lexicon,
    seen: &SeenPairs,
    unseen: &UnseenSpec,
    rng: &mut Rng,
) -> Result<EvalSet> {
    if kind == EvalKind::Unseen {
        return build_unseen_set(n, lex, unseen, rng);
    }
    let unambiguous =
        |r: Range<usize>| -> Vec<usize> { r.filter(|&rank| !lex.is_ambiguous(rank)).collect() };
    let (ranks, zipf) = match kind {
        EvalKind::Validation => (unambiguous(1..lex.half() + 1), Some(lex)),
        EvalKind::Head | EvalKind::HeadSwitch => (unambiguous(lex.head_ranks()), None),
        EvalKind::Tail | EvalKind::TailSwitch => (unambiguous(lex.tail_ranks()), None),
        EvalKind::Unseen => unreachable!(),
    };
    if ranks.is_empty() {
        return Err(Error::Generation {
            stratum: kind.name().into(),
            reason: "no unambiguous ranks in the stratum".into(),
        });
    }
    let mut sampler = PairSampler {
        stratum: kind.name(),
        noun_ranks: ranks.clone(),
        adj_ranks: ranks,
        zipf,
        pool: None,
    };
    let switch = kind.is_switch();
    // Slot occupants for a (lexical noun rank, lexical adj rank) pair.
    let slots = |nr: usize, ar: usize| {
        if switch {
            (lex.adj_id(ar), lex.noun_id(nr))
        } else {
            (lex.noun_id(nr), lex.adj_id(ar))
        }
    };
    let admissible = |nr: usize, ar: usize| {
        if lex.is_ambiguous(nr) || lex.is_ambiguous(ar) {
            return false;
        }
        let (ns, as_) = slots(nr, ar);
        !seen.contains(ns, as_)
    };

    let mut set = EvalSet {
        kind,
        examples: Vec::with_capacity(n),
        ic_targets: Vec::new(),
        iw_targets: Vec::new(),
        unseen_rows: None,
    };
    for _ in 0..n {
        let (nr, ar) = sampler.draw(rng, admissible)?;
        let (noun_slot, adj_slot) = slots(nr, ar);
        let order = random_order(rng);
        let role = random_role(rng);
        let ex = build_example(noun_slot, adj_slot, order, role, lex);
        if switch {
            let (lex_noun, lex_adj) = (lex.noun_id(nr), lex.adj_id(ar));
            // The query's lexical part of speech is the opposite of its slot.
            let lexical_role = match role {
                Pos::Noun => Pos::Adj,
                Pos::Adj => Pos::Noun,
            };
            set.ic_targets.push(ex.targets);
            set.iw_targets
                .push(pattern(lex_noun, lex_adj, lexical_role));
        }
        set.examples.push(ex);
    }
    Ok(set)
}

fn build_unseen_set(n: usize, lex: &Lexicon, spec: &UnseenSpec, rng: &mut Rng) -> Result<EvalSet> {
    let rows = sample_unseen_rows(spec.dist, spec.count, spec.dim, spec.init_std, rng)?;
    let base = lex.vocab_size();
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.below(spec.count);
        let mut j = rng.below(spec.count - 1);
        if j >= i {
            j += 1;
        }
        let order = random_order(rng);
        let role = random_role(rng);
        examples.push(build_example(base + i, base + j, order, role, lex));
    }
    Ok(EvalSet {
        kind: EvalKind::Unseen,
        examples,
        ic_targets: Vec::new(),
        iw_targets: Vec::new(),
        unseen_rows: Some(rows),
    })
}
