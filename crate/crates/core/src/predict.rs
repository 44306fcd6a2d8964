//! Closed-form detection probabilities and delay bounds, evaluated exactly.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PredictError {
    #[error("unsupported formula {0:?}; expected one of {1}")]
    Unsupported(String, &'static str),
    #[error("missing parameter {0:?}")]
    Missing(&'static str),
    #[error("parameter {0:?}: {1}")]
    Bad(&'static str, String),
}

pub const FORMULAS: &str = "akm, akm_general_owner, akm_general_any, akm_churn, ktaca, ktca_bound";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub formula: String,
    /// Exact value as `num/den`.
    pub exact: String,
    pub value: f64,
}

impl Prediction {
    fn new(formula: &str, r: BigRational) -> Self {
        Prediction {
            formula: formula.to_string(),
            exact: format!("{}/{}", r.numer(), r.denom()),
            value: r.to_f64().unwrap_or(f64::NAN),
        }
    }
}

fn ratio(n: u64, d: u64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn pow(r: &BigRational, e: u64) -> BigRational {
    num_traits::pow(r.clone(), e as usize)
}

fn binomial(n: u64, k: u64) -> BigInt {
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Owner plus `c` fake-key holders each asking once per epoch for `m`
/// epochs; the adversary must guess which single request is the owner's.
pub fn akm(c: u64, m: u64) -> BigRational {
    BigRational::one() - pow(&ratio(1, c + 1), m)
}

/// Only the owner counts: it escapes when its request lands among the
/// `r + 1` real answers.
pub fn akm_general_owner(f: u64, r: u64, m: u64) -> BigRational {
    BigRational::one() - pow(&ratio(r + 1, r + f + 1), m)
}

/// Every client counts: the adversary must hit the exact split of `f` fake
/// answers among `f + r + 1` requests.
pub fn akm_general_any(f: u64, r: u64, m: u64) -> BigRational {
    let ways = binomial(f + r + 1, f);
    BigRational::one() - pow(&BigRational::new(BigInt::one(), ways), m)
}

/// Per monitoring epoch `i`: `contacts[i]` online holders, and whether the
/// owner was online. An offline owner makes that epoch undetectable.
pub fn akm_churn(contacts: &[u64], owner_online: &[bool]) -> BigRational {
    let mut miss = BigRational::one();
    for (&c, &on) in contacts.iter().zip(owner_online) {
        if on {
            miss *= ratio(1, c + 1);
        }
    }
    BigRational::one() - miss
}

/// A single victim among `n` anonymous root requesters, over `k` epochs.
pub fn ktaca(n: u64, k: u64) -> BigRational {
    BigRational::one() - pow(&ratio(1, n), k)
}

/// Time after epoch start by which every online client holds a proof.
pub fn ktca_bound(diameter: u64, delta: u64) -> u64 {
    2 * (diameter + 1) * delta
}

fn int(p: &toml::Table, k: &'static str) -> Result<u64, PredictError> {
    match p.get(k) {
        None => Err(PredictError::Missing(k)),
        Some(toml::Value::Integer(i)) if *i >= 0 => Ok(*i as u64),
        Some(v) => Err(PredictError::Bad(
            k,
            format!("expected a non-negative integer, got {v}"),
        )),
    }
}

fn list(p: &toml::Table, k: &'static str) -> Result<Vec<u64>, PredictError> {
    match p.get(k) {
        None => Err(PredictError::Missing(k)),
        Some(toml::Value::Array(a)) => a
            .iter()
            .map(|v| match v {
                toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
                toml::Value::Boolean(b) => Ok(*b as u64),
                _ => Err(PredictError::Bad(k, "expected a list of non-negative integers".into())),
            })
            .collect(),
        Some(v) => Err(PredictError::Bad(k, format!("expected a list, got {v}"))),
    }
}

/// Evaluates the named formula.
pub fn predict(formula: &str, p: &toml::Table) -> Result<Prediction, PredictError> {
    let r = match formula {
        "akm" => akm(int(p, "c")?, int(p, "m")?),
        "akm_general_owner" => akm_general_owner(int(p, "f")?, int(p, "r")?, int(p, "m")?),
        "akm_general_any" => akm_general_any(int(p, "f")?, int(p, "r")?, int(p, "m")?),
        "akm_churn" => {
            let c = list(p, "contacts")?;
            let o = list(p, "owner_online")?;
            if c.len() != o.len() {
                return Err(PredictError::Bad(
                    "owner_online",
                    "must have one entry per epoch in contacts".into(),
                ));
            }
            akm_churn(&c, &o.iter().map(|&x| x != 0).collect::<Vec<_>>())
        }
        "ktaca" => {
            let n = int(p, "n")?;
            if n == 0 {
                return Err(PredictError::Bad("n", "must be at least 1".into()));
            }
            ktaca(n, p.get("k").map(|_| int(p, "k")).transpose()?.unwrap_or(1))
        }
        "ktca_bound" => BigRational::from_integer(BigInt::from(ktca_bound(int(p, "diameter")?, int(p, "delta")?))),
        other => return Err(PredictError::Unsupported(other.to_string(), FORMULAS)),
    };
    if r < BigRational::zero() {
        return Err(PredictError::Bad("formula", "negative result".into()));
    }
    Ok(Prediction::new(formula, r))
}

/// Parses `k=v,k=v` where `v` is an integer or a `;`-separated list.
pub fn parse_params(s: &str) -> Result<toml::Table, PredictError> {
    let mut t = toml::Table::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((k, v)) = part.split_once('=') else {
            return Err(PredictError::Bad("params", format!("{part:?} is not key=value")));
        };
        let parse = |x: &str| {
            x.trim()
                .parse::<i64>()
                .map_err(|_| PredictError::Bad("params", format!("{x:?} is not an integer")))
        };
        let value = if v.contains(';') {
            toml::Value::Array(
                v.split(';')
                    .map(|x| parse(x).map(toml::Value::Integer))
                    .collect::<Result<_, _>>()?,
            )
        } else {
            toml::Value::Integer(parse(v)?)
        };
        t.insert(k.trim().to_string(), value);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> toml::Table {
        parse_params(s).unwrap()
    }

    #[test]
    fn named_examples() {
        assert_eq!(predict("akm", &p("c=1,m=10")).unwrap().exact, "1023/1024");
        assert_eq!(
            predict("akm_general_owner", &p("f=2,r=2,m=4")).unwrap().exact,
            "544/625"
        );
        assert_eq!(
            predict("akm_general_any", &p("f=2,r=2,m=4")).unwrap().exact,
            "9999/10000"
        );
        assert_eq!(predict("ktaca", &p("n=1")).unwrap().value, 0.0);
        assert_eq!(predict("ktaca", &p("n=50")).unwrap().exact, "49/50");
        assert_eq!(predict("ktca_bound", &p("diameter=5,delta=1")).unwrap().value, 12.0);
        assert_eq!(
            predict("akm_churn", &p("contacts=2;2;2;2;2,owner_online=1;0;0;1;1"))
                .unwrap()
                .exact,
            "26/27"
        );
    }

    #[test]
    fn errors_name_the_problem() {
        assert_eq!(predict("akm", &p("c=1")), Err(PredictError::Missing("m")));
        assert!(matches!(predict("nope", &p("")), Err(PredictError::Unsupported(..))));
    }
}
