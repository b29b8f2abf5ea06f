//! Plain-text parameter dump.
//!
//! ```text
//! towerlab-params 1
//! tower mlp
//! tensor bias.theta 10
//! tensor relevance.w1 10 32
//! ...
//! values
//! 0
//! -0.6931471805599453
//! ...
//! ```
//!
//! Embedding dumps carry one `pair <query_id> <doc_id>` line per logit
//! before `values`. Values are written with the shortest representation
//! that parses back to the same bits.

use std::io::{BufRead, BufReader, Read, Write};

use super::towers::{Embedding, Linear, Mlp, RelevanceTower};
use super::{BiasTower, Tensor, TowerKind, TwoTowerModel};
use crate::error::{Error, Result};

const MAGIC: &str = "towerlab-params 1";

pub fn write_params<W: Write>(model: &TwoTowerModel, mut out: W) -> Result<()> {
    let io = |e| Error::io("<params>", e);
    writeln!(out, "{MAGIC}").map_err(io)?;
    writeln!(out, "tower {}", model.kind()).map_err(io)?;
    for t in model.tensors() {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "tensor {} {}", t.name, dims.join(" ")).map_err(io)?;
    }
    if let RelevanceTower::Embedding(e) = &model.relevance {
        for (q, d) in e.keys() {
            writeln!(out, "pair {q} {d}").map_err(io)?;
        }
    }
    writeln!(out, "values").map_err(io)?;
    for t in model.tensors() {
        for v in &t.data {
            writeln!(out, "{v:?}").map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

pub fn read_params<R: Read>(input: R) -> Result<TwoTowerModel> {
    let mut lines = BufReader::new(input).lines();
    let mut next = || -> Result<Option<String>> {
        lines
            .next()
            .transpose()
            .map_err(|e| Error::io("<params>", e))
    };
    if next()?.as_deref() != Some(MAGIC) {
        return Err(bad("missing header"));
    }
    let kind: TowerKind = next()?
        .as_deref()
        .and_then(|l| l.strip_prefix("tower "))
        .ok_or_else(|| bad("missing tower line"))?
        .parse()?;

    let mut headers: Vec<(String, Vec<usize>)> = Vec::new();
    let mut pairs: Vec<(String, u32)> = Vec::new();
    loop {
        let line = next()?.ok_or_else(|| bad("missing values section"))?;
        if line == "values" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| bad("tensor without name"))?;
                let shape = parts
                    .map(|p| {
                        p.parse::<usize>()
                            .map_err(|_| bad(format!("bad shape in '{line}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                headers.push((name.to_string(), shape));
            }
            Some("pair") => {
                let q = parts.next().ok_or_else(|| bad("pair without query"))?;
                let d = parts
                    .next()
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(|| bad(format!("bad pair line '{line}'")))?;
                pairs.push((q.to_string(), d));
            }
            _ => return Err(bad(format!("unexpected line '{line}'"))),
        }
    }

    let mut tensors = Vec::with_capacity(headers.len());
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let line = next()?.ok_or_else(|| bad(format!("truncated values of {name}")))?;
            data.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad value '{line}'")))?,
            );
        }
        tensors.push(Tensor { name, shape, data });
    }
    if let Some(extra) = next()? {
        if !extra.trim().is_empty() {
            return Err(bad("trailing values"));
        }
    }
    assemble(kind, tensors, pairs)
}

fn assemble(
    kind: TowerKind,
    tensors: Vec<Tensor>,
    pairs: Vec<(String, u32)>,
) -> Result<TwoTowerModel> {
    let mut it = tensors.into_iter();
    let mut take = |name: &str, rank: usize| -> Result<Tensor> {
        let t = it
            .next()
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.name != name || t.shape.len() != rank {
            return Err(bad(format!("expected tensor {name}, found {}", t.name)));
        }
        Ok(t)
    };
    let theta = take("bias.theta", 1)?;
    let relevance = match kind {
        TowerKind::Embedding => {
            let gamma = take("relevance.gamma", 1)?;
            if gamma.data.len() != pairs.len() {
                return Err(bad("embedding size does not match pair list"));
            }
            RelevanceTower::Embedding(Embedding::from_keys(pairs, Some(gamma.data)))
        }
        TowerKind::Linear => {
            let weight = take("relevance.weight", 1)?;
            let intercept = take("relevance.intercept", 1)?;
            RelevanceTower::Linear(Linear { weight, intercept })
        }
        TowerKind::Mlp => {
            let w1 = take("relevance.w1", 2)?;
            let b1 = take("relevance.b1", 1)?;
            let w2 = take("relevance.w2", 2)?;
            let b2 = take("relevance.b2", 1)?;
            let w3 = take("relevance.w3", 1)?;
            let b3 = take("relevance.b3", 1)?;
            let h = w1.shape[1];
            if b1.shape != [h]
                || w2.shape != [h, h]
                || b2.shape != [h]
                || w3.shape != [h]
                || b3.shape != [1]
            {
                return Err(bad("inconsistent mlp shapes"));
            }
            RelevanceTower::Mlp(Mlp {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            })
        }
    };
    if it.next().is_some() {
        return Err(bad("unexpected extra tensor"));
    }
    Ok(TwoTowerModel {
        bias: BiasTower { theta },
        relevance,
    })
}
