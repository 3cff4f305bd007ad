//! Nearest-neighbor identification in raw pixel space and the paired sign
//! test used to compare two query conditions.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageU8;

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub identity: String,
    pub features: Vec<f32>,
}

/// Ordered, immutable set of labelled pixel vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    entries: Vec<GalleryEntry>,
    dims: (usize, usize, usize),
}

impl Gallery {
    pub fn new(items: Vec<(String, ImageU8)>) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("gallery is empty"))?;
        let dims = (first.1.width(), first.1.height(), first.1.channels());
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(items.len());
        for (identity, img) in items {
            if (img.width(), img.height(), img.channels()) != dims {
                return Err(Error::invalid(format!(
                    "gallery entry `{identity}` has different dimensions"
                )));
            }
            if !seen.insert(identity.clone()) {
                return Err(Error::invalid(format!("gallery label `{identity}` is not unique")));
            }
            entries.push(GalleryEntry {
                identity,
                features: img.data().iter().map(|&v| v as f32).collect(),
            });
        }
        Ok(Gallery { entries, dims })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Gallery indices sorted by ascending Euclidean distance to `query`,
    /// ties kept in gallery order.
    pub fn rank(&self, query: &ImageU8) -> Result<Vec<(usize, f64)>> {
        if (query.width(), query.height(), query.channels()) != self.dims {
            return Err(Error::shape(
                "identify",
                "query",
                format!(
                    "query is {}x{}x{}, gallery is {}x{}x{}",
                    query.width(),
                    query.height(),
                    query.channels(),
                    self.dims.0,
                    self.dims.1,
                    self.dims.2
                ),
            ));
        }
        let mut ranked: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let d2: f64 = e
                    .features
                    .iter()
                    .zip(query.data())
                    .map(|(&g, &q)| (g as f64 - q as f64).powi(2))
                    .sum();
                (i, d2.sqrt())
            })
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        Ok(ranked)
    }

    pub fn identify(&self, query: &ImageU8) -> Result<&str> {
        let best = self.rank(query)?[0].0;
        Ok(&self.entries[best].identity)
    }

    /// 1-based position of `identity` in the ranking of `query`.
    pub fn rank_of(&self, query: &ImageU8, identity: &str) -> Result<Option<usize>> {
        Ok(self
            .rank(query)?
            .iter()
            .position(|&(i, _)| self.entries[i].identity == identity)
            .map(|p| p + 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query: String,
    pub predicted: String,
    pub truth: String,
    /// 1-based rank of the true identity; `None` when it is not in the gallery.
    pub rank: Option<usize>,
}

impl QueryOutcome {
    pub fn correct(&self) -> bool {
        self.rank == Some(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationResult {
    pub outcomes: Vec<QueryOutcome>,
    pub accuracy: f64,
}

impl IdentificationResult {
    pub fn run<'a>(
        gallery: &Gallery,
        queries: impl IntoIterator<Item = (String, String, &'a ImageU8)>,
    ) -> Result<Self> {
        let mut outcomes = Vec::new();
        for (query, truth, img) in queries {
            let ranked = gallery.rank(img)?;
            let predicted = gallery.entries[ranked[0].0].identity.clone();
            let rank = ranked
                .iter()
                .position(|&(i, _)| gallery.entries[i].identity == truth)
                .map(|p| p + 1);
            outcomes.push(QueryOutcome {
                query,
                predicted,
                truth,
                rank,
            });
        }
        if outcomes.is_empty() {
            return Err(Error::invalid("identification needs at least one query"));
        }
        let accuracy = outcomes.iter().filter(|o| o.correct()).count() as f64 / outcomes.len() as f64;
        Ok(IdentificationResult { outcomes, accuracy })
    }

    pub fn correctness(&self) -> Vec<bool> {
        self.outcomes.iter().map(QueryOutcome::correct).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["query", "predicted", "truth", "rank"])?;
        for o in &self.outcomes {
            let rank = o.rank.map(|r| r.to_string()).unwrap_or_default();
            w.write_record([o.query.as_str(), &o.predicted, &o.truth, &rank])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Exact two-sided sign test on the discordant pairs of two paired
/// correctness vectors. No discordant pairs gives p = 1.
pub fn compare_conditions(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired comparison needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let wins_a = a.iter().zip(b).filter(|&(&x, &y)| x && !y).count() as u64;
    let wins_b = a.iter().zip(b).filter(|&(&x, &y)| !x && y).count() as u64;
    let d = wins_a + wins_b;
    if d == 0 {
        return Ok(1.0);
    }
    let k = wins_a.max(wins_b);
    let ln_half = 0.5f64.ln() * d as f64;
    let tail: f64 = (k..=d).map(|i| (ln_choose(d, i) + ln_half).exp()).sum();
    Ok((2.0 * tail).min(1.0))
}
