//! Channel importance scores and the plans derived from them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    L1,
    BnGamma,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Method::L1),
            "bn_gamma" => Ok(Method::BnGamma),
            other => Err(Error::invalid(format!("unknown importance method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::L1 => "l1",
            Method::BnGamma => "bn_gamma",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    PerLayer,
    Global,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_layer" => Ok(Scope::PerLayer),
            "global" => Ok(Scope::Global),
            other => Err(Error::invalid(format!("unknown pruning scope `{other}`"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::PerLayer => "per_layer",
            Scope::Global => "global",
        })
    }
}

/// Per-channel scores for every prunable convolution, in layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub method: Method,
    pub scores: IndexMap<String, Vec<f64>>,
    pub graph_fingerprint: String,
}

impl ImportanceReport {
    pub fn total_channels(&self) -> usize {
        self.scores.values().map(Vec::len).sum()
    }
}

/// Output channels to remove, keyed by convolution id. Index lists are
/// strictly increasing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub removals: BTreeMap<String, Vec<usize>>,
    pub source_graph_fingerprint: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PrunePlan {
    pub fn empty(graph: &ModelGraph) -> Self {
        Self {
            removals: BTreeMap::new(),
            source_graph_fingerprint: graph.fingerprint(),
            warnings: Vec::new(),
        }
    }

    pub fn removed_channels(&self) -> usize {
        self.removals.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.removed_channels() == 0
    }
}

/// L1 norm of each output filter, `Σ |weights[.., .., .., c]|`. The bias is
/// not part of the filter.
pub fn score_l1(graph: &ModelGraph) -> ImportanceReport {
    let scores = graph
        .convs()
        .map(|conv| {
            let out = conv.out_channels;
            let mut sums = vec![0.0f64; out];
            for (i, w) in conv.weights.data().iter().enumerate() {
                sums[i % out] += (*w as f64).abs();
            }
            (conv.id.clone(), sums)
        })
        .collect();
    ImportanceReport {
        method: Method::L1,
        scores,
        graph_fingerprint: graph.fingerprint(),
    }
}

/// `|γ|` of the batch norm that immediately follows each convolution.
pub fn score_bn_gamma(graph: &ModelGraph) -> Result<ImportanceReport> {
    let mut scores = IndexMap::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        let Layer::Conv2d(conv) = layer else { continue };
        match graph.layers.get(i + 1) {
            Some(Layer::BatchNorm(bn)) if bn.channels == conv.out_channels => {
                let s = bn.gamma.data().iter().map(|g| (*g as f64).abs()).collect();
                scores.insert(conv.id.clone(), s);
            }
            _ => {
                return Err(Error::structure(
                    &conv.id,
                    "scaling-factor importance needs a batch norm directly after the convolution",
                ))
            }
        }
    }
    Ok(ImportanceReport {
        method: Method::BnGamma,
        scores,
        graph_fingerprint: graph.fingerprint(),
    })
}

pub fn score(graph: &ModelGraph, method: Method) -> Result<ImportanceReport> {
    match method {
        Method::L1 => Ok(score_l1(graph)),
        Method::BnGamma => score_bn_gamma(graph),
    }
}

/// `floor(ratio · n)`, tolerant of products like `0.29 · 100` landing just
/// below an integer.
pub fn removal_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Selects the lowest-scoring channels for removal.
///
/// Ties go to the earlier layer, then the lower channel index. Under
/// [`Scope::Global`] a candidate that would leave its layer empty is skipped
/// in favour of the next one.
pub fn make_plan(report: &ImportanceReport, ratio: f64, scope: Scope) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("ratio must be in [0, 1), got {ratio}")));
    }
    for (id, s) in &report.scores {
        if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("scores for `{id}` must be finite and non-negative")));
        }
    }
    let mut removals: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut warnings = Vec::new();
    match scope {
        Scope::PerLayer => {
            for (id, scores) in &report.scores {
                let k = removal_count(ratio, scores.len());
                if k == 0 {
                    continue;
                }
                let mut order: Vec<usize> = (0..scores.len()).collect();
                order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
                let mut chosen = order[..k].to_vec();
                chosen.sort_unstable();
                removals.insert(id.clone(), chosen);
            }
        }
        Scope::Global => {
            let target = removal_count(ratio, report.total_channels());
            let mut pool: Vec<(f64, usize, usize)> = report
                .scores
                .values()
                .enumerate()
                .flat_map(|(layer, s)| s.iter().enumerate().map(move |(c, &v)| (v, layer, c)))
                .collect();
            pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

            let sizes: Vec<usize> = report.scores.values().map(Vec::len).collect();
            let mut taken = vec![0usize; sizes.len()];
            let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
            let mut skipped = 0usize;
            let mut removed = 0usize;
            for &(_, layer, channel) in &pool {
                if removed == target {
                    break;
                }
                if taken[layer] + 1 >= sizes[layer] {
                    skipped += 1;
                    continue;
                }
                taken[layer] += 1;
                chosen[layer].push(channel);
                removed += 1;
            }
            if removed < target {
                warnings.push(format!(
                    "global target of {target} channels cut to {removed}: every layer must keep one channel"
                ));
            } else if skipped > 0 {
                warnings.push(format!("{skipped} candidates skipped to keep every layer non-empty"));
            }
            for ((id, _), mut list) in report.scores.iter().zip(chosen) {
                if !list.is_empty() {
                    list.sort_unstable();
                    removals.insert(id.clone(), list);
                }
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(PrunePlan {
        removals,
        source_graph_fingerprint: report.graph_fingerprint.clone(),
        warnings,
    })
}
