//! AdamW and the embedding-forgetting schedules.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{init_embeddings, ModelConfig, ModelParams, EMBED};
use crate::numerics::{Array, Rng};

fn default_lr() -> f64 {
    5e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_wd(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// First and second moments shaped like the parameters, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub t: u64,
}

impl OptState {
    pub fn new(params: &[Array]) -> Self {
        let zeros = || params.iter().map(|p| Array::zeros(p.shape())).collect();
        OptState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update:
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`.
pub fn adamw_step(
    params: &mut [Array],
    grads: &[Array],
    state: &mut OptState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension(format!(
                "tensor {i}: param {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        g.check_finite(&format!("gradient of tensor {i}"))?;
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((theta, &gi), (mi, vi)) in it {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
        }
    }
    Ok(())
}

/// Forgetting horizon: a step count or unbounded. Serialized as a number or
/// the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Horizon {
    Steps(u64),
    Unbounded,
}

impl Horizon {
    pub fn covers(self, step: u64) -> bool {
        match self {
            Horizon::Steps(n) => step <= n,
            Horizon::Unbounded => true,
        }
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Steps(n) => write!(f, "{n}"),
            Horizon::Unbounded => f.write_str("inf"),
        }
    }
}

impl Serialize for Horizon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Horizon::Steps(n) => s.serialize_u64(*n),
            Horizon::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct HorizonVisitor;
        impl Visitor<'_> for HorizonVisitor {
            type Value = Horizon;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative step count or \"inf\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Horizon, E> {
                Ok(Horizon::Steps(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Horizon, E> {
                u64::try_from(v)
                    .map(Horizon::Steps)
                    .map_err(|_| E::custom("horizon must be non-negative"))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Horizon, E> {
                match v {
                    "inf" | "unbounded" => Ok(Horizon::Unbounded),
                    other => other
                        .parse()
                        .map(Horizon::Steps)
                        .map_err(|_| E::custom(format!("bad horizon {other:?}"))),
                }
            }
        }
        d.deserialize_any(HorizonVisitor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Vanilla,
    Active,
    Temporary,
}

fn default_k() -> u64 {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgettingSchedule {
    pub kind: ScheduleKind,
    /// Reset period in steps.
    #[serde(default = "default_k")]
    pub k: u64,
    /// Steps during which resets happen: 0 for vanilla, `inf` for active.
    #[serde(rename = "N")]
    pub n: Horizon,
}

impl ForgettingSchedule {
    pub fn vanilla() -> Self {
        ForgettingSchedule {
            kind: ScheduleKind::Vanilla,
            k: default_k(),
            n: Horizon::Steps(0),
        }
    }

    pub fn active(k: u64) -> Self {
        ForgettingSchedule {
            kind: ScheduleKind::Active,
            k,
            n: Horizon::Unbounded,
        }
    }

    pub fn temporary(k: u64, n: u64) -> Self {
        ForgettingSchedule {
            kind: ScheduleKind::Temporary,
            k,
            n: Horizon::Steps(n),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("forgetting period k must be >= 1".into()));
        }
        let consistent = match self.kind {
            ScheduleKind::Vanilla => self.n == Horizon::Steps(0),
            ScheduleKind::Active => self.n == Horizon::Unbounded,
            ScheduleKind::Temporary => matches!(self.n, Horizon::Steps(_)),
        };
        if !consistent {
            return Err(Error::Config(format!(
                "{:?} schedule is inconsistent with N = {}",
                self.kind, self.n
            )));
        }
        Ok(())
    }
}

/// Whether the embeddings are re-initialized after optimizer step `step`:
/// at positive multiples of `k` no later than the horizon.
pub fn should_reset(step: u64, sched: &ForgettingSchedule) -> bool {
    step > 0 && step % sched.k == 0 && sched.n.covers(step)
}

/// Redraws the token embeddings from the initializer and zeroes their Adam
/// moments. Positional embeddings and every other tensor are left alone.
pub fn reset_embeddings(
    params: &mut ModelParams,
    state: &mut OptState,
    cfg: &ModelConfig,
    rng: &mut Rng,
) {
    *params.embeddings_mut() = init_embeddings(cfg, rng);
    let shape = params.embeddings().shape().to_vec();
    state.m[EMBED] = Array::zeros(&shape);
    state.v[EMBED] = Array::zeros(&shape);
}
