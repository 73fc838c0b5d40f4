//! Scaling-law evaluators and robust curve fitting.

mod fit;
pub mod fixtures;
pub mod lbfgs;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use fit::{fit, heldout_error, ErrorMetric, FitOptions, FitResult, ResidualForm};
pub use lbfgs::{LbfgsOptions, LbfgsResult};

use crate::util::{read_jsonl, write_jsonl};

/// Threshold of the Huber penalty used for every fit.
pub const HUBER_SIGMA: f64 = 0.03;

#[derive(Debug, thiserror::Error)]
pub enum ScalingError {
    #[error("{form} needs size {name}")]
    MissingSize { form: EqForm, name: &'static str },
    #[error("size {name} is out of range: {value}")]
    NonPositiveSize { name: String, value: f64 },
    #[error("parameter {name} = {value} is outside its domain")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("{got} points cannot determine {needed} free parameters")]
    TooFewPoints { needed: usize, got: usize },
    #[error("observation {index} = {value} must lie in (0, 1)")]
    InvalidObservation { index: usize, value: f64 },
    #[error("holdout fraction {0} leaves no held-out points")]
    EmptyHoldout(f64),
    #[error("holdout fraction {0} leaves too few fitting points")]
    EmptyFitSet(f64),
    #[error("every start produced an undefined objective")]
    NoValidStart,
    #[error("points file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EqForm {
    /// Loss form: `E + A/N_SI^a + B/N_CF^b`.
    Eq1,
    /// `R0 - A/N_SI^a - B/N_CF^b`.
    Eq2,
    /// `R0 - A/(N_RS + γ1 N_LLM + γ2 N_QT)^a - B/N_RS^b`.
    Eq3,
    /// Eq3 with `γ1 = γ2 = 0`: `R0 - A/N_RS^a - B/N_RS^b`.
    Sid,
    /// `R0 - A/(N_LoRA + γ N_LLM)^a - B/(N_LoRA + β N_LLM)^b`.
    Eq4,
    /// Eq4 with `β = 0`.
    Eq6,
    /// Eq6 with the CF term fed by `N_LoRA + N_SA`.
    Eq7,
    /// `B/N_LoRA^b - B/(N_LoRA + N_SA)^b`, i.e. Eq7 minus Eq6.
    Eq8,
}

impl std::fmt::Display for EqForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum");
        write!(f, "{}", s.as_str().expect("string"))
    }
}

impl std::str::FromStr for EqForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| format!("unknown equation form {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Param {
    R0,
    E,
    A,
    B,
    /// Exponent `a`.
    ExpA,
    /// Exponent `b`.
    ExpB,
    Gamma,
    Beta,
    Gamma1,
    Gamma2,
}

/// How a parameter is mapped to an unconstrained coordinate during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Log,
    Logit,
}

impl Param {
    pub const ALL: [Param; 10] = [
        Param::R0,
        Param::E,
        Param::A,
        Param::B,
        Param::ExpA,
        Param::ExpB,
        Param::Gamma,
        Param::Beta,
        Param::Gamma1,
        Param::Gamma2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::R0 => "R0",
            Param::E => "E",
            Param::A => "A",
            Param::B => "B",
            Param::ExpA => "a",
            Param::ExpB => "b",
            Param::Gamma => "gamma",
            Param::Beta => "beta",
            Param::Gamma1 => "gamma1",
            Param::Gamma2 => "gamma2",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, ScalingError> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ScalingError::UnknownParam(s.to_string()))
    }

    pub fn transform(self) -> Transform {
        match self {
            Param::R0 | Param::Gamma | Param::Beta | Param::Gamma1 | Param::Gamma2 => Transform::Logit,
            _ => Transform::Log,
        }
    }
}

/// Named size inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Size {
    Rs,
    Llm,
    Qt,
    Lora,
    Sa,
    Si,
    Cf,
}

impl Size {
    pub fn name(self) -> &'static str {
        match self {
            Size::Rs => "N_RS",
            Size::Llm => "N_LLM",
            Size::Qt => "N_QT",
            Size::Lora => "N_LoRA",
            Size::Sa => "N_SA",
            Size::Si => "N_SI",
            Size::Cf => "N_CF",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingParams {
    #[serde(rename = "R0")]
    pub r0: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "A")]
    pub big_a: f64,
    #[serde(rename = "B")]
    pub big_b: f64,
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl ScalingParams {
    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::R0 => self.r0,
            Param::E => self.e,
            Param::A => self.big_a,
            Param::B => self.big_b,
            Param::ExpA => self.a,
            Param::ExpB => self.b,
            Param::Gamma => self.gamma,
            Param::Beta => self.beta,
            Param::Gamma1 => self.gamma1,
            Param::Gamma2 => self.gamma2,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        *match p {
            Param::R0 => &mut self.r0,
            Param::E => &mut self.e,
            Param::A => &mut self.big_a,
            Param::B => &mut self.big_b,
            Param::ExpA => &mut self.a,
            Param::ExpB => &mut self.b,
            Param::Gamma => &mut self.gamma,
            Param::Beta => &mut self.beta,
            Param::Gamma1 => &mut self.gamma1,
            Param::Gamma2 => &mut self.gamma2,
        } = v;
    }

    /// Checks the domain of every parameter `form` reads.
    pub fn validate(&self, form: EqForm) -> Result<(), ScalingError> {
        for p in form.params() {
            let v = self.get(p);
            let ok = v.is_finite()
                && match p {
                    Param::R0 => v > 0.0 && v < 1.0,
                    Param::Gamma | Param::Beta | Param::Gamma1 | Param::Gamma2 => (0.0..=1.0).contains(&v),
                    _ => v >= 0.0,
                };
            if !ok {
                return Err(ScalingError::InvalidParam { name: p.name(), value: v });
            }
        }
        Ok(())
    }
}

/// A weight on one size inside a power-law base: `1` or a coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Weight {
    One,
    P(Param),
}

/// `sign * scale * (Σ weight·size)^(-exponent)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Term {
    pub sign: f64,
    pub scale: Param,
    pub exponent: Param,
    pub base: Vec<(Weight, Size)>,
}

/// `offset + Σ terms`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Structure {
    pub offset: Option<Param>,
    pub terms: Vec<Term>,
}

fn term(sign: f64, scale: Param, exponent: Param, base: &[(Weight, Size)]) -> Term {
    Term {
        sign,
        scale,
        exponent,
        base: base.to_vec(),
    }
}

impl EqForm {
    pub const ALL: [EqForm; 8] = [
        EqForm::Eq1,
        EqForm::Eq2,
        EqForm::Eq3,
        EqForm::Sid,
        EqForm::Eq4,
        EqForm::Eq6,
        EqForm::Eq7,
        EqForm::Eq8,
    ];

    pub(crate) fn structure(self) -> Structure {
        use Param::*;
        use Size::*;
        use Weight::{One, P};
        let (offset, terms) = match self {
            EqForm::Eq1 => (
                Some(E),
                vec![term(1.0, A, ExpA, &[(One, Si)]), term(1.0, B, ExpB, &[(One, Cf)])],
            ),
            EqForm::Eq2 => (
                Some(R0),
                vec![term(-1.0, A, ExpA, &[(One, Si)]), term(-1.0, B, ExpB, &[(One, Cf)])],
            ),
            EqForm::Eq3 => (
                Some(R0),
                vec![
                    term(-1.0, A, ExpA, &[(One, Rs), (P(Gamma1), Llm), (P(Gamma2), Qt)]),
                    term(-1.0, B, ExpB, &[(One, Rs)]),
                ],
            ),
            EqForm::Sid => (
                Some(R0),
                vec![term(-1.0, A, ExpA, &[(One, Rs)]), term(-1.0, B, ExpB, &[(One, Rs)])],
            ),
            EqForm::Eq4 => (
                Some(R0),
                vec![
                    term(-1.0, A, ExpA, &[(One, Lora), (P(Gamma), Llm)]),
                    term(-1.0, B, ExpB, &[(One, Lora), (P(Beta), Llm)]),
                ],
            ),
            EqForm::Eq6 => (
                Some(R0),
                vec![
                    term(-1.0, A, ExpA, &[(One, Lora), (P(Gamma), Llm)]),
                    term(-1.0, B, ExpB, &[(One, Lora)]),
                ],
            ),
            EqForm::Eq7 => (
                Some(R0),
                vec![
                    term(-1.0, A, ExpA, &[(One, Lora), (P(Gamma), Llm)]),
                    term(-1.0, B, ExpB, &[(One, Lora), (One, Sa)]),
                ],
            ),
            EqForm::Eq8 => (
                None,
                vec![
                    term(1.0, B, ExpB, &[(One, Lora)]),
                    term(-1.0, B, ExpB, &[(One, Lora), (One, Sa)]),
                ],
            ),
        };
        Structure { offset, terms }
    }

    /// Parameters the form reads, in canonical order.
    pub fn params(self) -> Vec<Param> {
        let s = self.structure();
        let mut used: Vec<Param> = s.offset.into_iter().collect();
        for t in &s.terms {
            used.push(t.scale);
            used.push(t.exponent);
            used.extend(t.base.iter().filter_map(|(w, _)| match w {
                Weight::P(p) => Some(*p),
                Weight::One => None,
            }));
        }
        Param::ALL.into_iter().filter(|p| used.contains(p)).collect()
    }

    /// Size names the form reads.
    pub fn sizes(self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for t in self.structure().terms {
            for (_, s) in t.base {
                if !out.contains(&s.name()) {
                    out.push(s.name());
                }
            }
        }
        out
    }
}

pub type Sizes = BTreeMap<String, f64>;

/// Reads one size. The leading size of a base must be positive; sizes that
/// are only added to it may be zero (an absent component).
pub(crate) fn size_of(form: EqForm, sizes: &Sizes, s: Size, leading: bool) -> Result<f64, ScalingError> {
    let v = *sizes.get(s.name()).ok_or(ScalingError::MissingSize {
        form,
        name: s.name(),
    })?;
    let ok = v.is_finite() && if leading { v > 0.0 } else { v >= 0.0 };
    if !ok {
        return Err(ScalingError::NonPositiveSize {
            name: s.name().to_string(),
            value: v,
        });
    }
    Ok(v)
}

/// Evaluates `form` in closed form.
pub fn eval_eq(form: EqForm, params: &ScalingParams, sizes: &Sizes) -> Result<f64, ScalingError> {
    let st = form.structure();
    let mut out = st.offset.map_or(0.0, |p| params.get(p));
    for t in &st.terms {
        let mut base = 0.0;
        for (i, &(w, s)) in t.base.iter().enumerate() {
            let n = size_of(form, sizes, s, i == 0)?;
            base += match w {
                Weight::One => n,
                Weight::P(p) => params.get(p) * n,
            };
        }
        out += t.sign * params.get(t.scale) * base.powf(-params.get(t.exponent));
    }
    Ok(out)
}

/// `½r²` inside `σ`, linear with matching slope outside.
pub fn huber(r: f64, sigma: f64) -> f64 {
    crate::autodiff::huber(r, sigma)
}

/// Coefficient of determination. A constant observation vector gives 1 when
/// matched exactly and 0 otherwise.
pub fn r_square(preds: &[f64], obs: &[f64]) -> f64 {
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let ss_tot: f64 = obs.iter().map(|o| (o - mean).powi(2)).sum();
    let ss_res: f64 = preds.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub sizes: Sizes,
    pub recall: f64,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    5
}

impl ScalingPoint {
    pub fn new(sizes: &[(&str, f64)], recall: f64) -> Self {
        Self {
            sizes: sizes.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            recall,
            k: default_k(),
        }
    }
}

pub fn read_points<R: BufRead>(r: R) -> Result<Vec<ScalingPoint>, ScalingError> {
    read_jsonl(r).map_err(|(line, reason)| ScalingError::Format { line, reason })
}

pub fn write_points<W: Write>(w: W, points: &[ScalingPoint]) -> std::io::Result<()> {
    write_jsonl(w, points)
}

#[cfg(test)]
mod tests;
