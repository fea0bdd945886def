//! Plan assessment: answer voting, duplicate-query filtering and best-query
//! selection over one batch of sampled plannings.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::Planning;
use crate::retriever::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum AssessorError {
    #[error("plan set is empty")]
    EmptyPlanSet,
    #[error("no viable plan: no search plans and the answer vote did not pass")]
    NoViablePlan,
    #[error("{plans} plans but {scores} scores")]
    ScoreCountMismatch { plans: usize, scores: usize },
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
}

/// One iteration's sampled plannings, split into search and answer plans.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSet {
    pub t: usize,
    pub plans: Vec<Planning>,
}

impl PlanSet {
    pub fn new(t: usize, plans: Vec<Planning>) -> Self {
        PlanSet { t, plans }
    }

    pub fn searches(&self) -> impl Iterator<Item = &Planning> {
        self.plans.iter().filter(|p| p.action.is_search())
    }

    pub fn answers(&self) -> impl Iterator<Item = &Planning> {
        self.plans.iter().filter(|p| !p.action.is_search())
    }

    pub fn search_count(&self) -> usize {
        self.searches().count()
    }

    pub fn answer_count(&self) -> usize {
        self.answers().count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    /// The first answer plan in generation order.
    Answer(Planning),
    /// All search plans in generation order.
    Query(Vec<Planning>),
}

pub fn validate_threshold(theta: f64) -> Result<f64, AssessorError> {
    if theta > 0.0 && theta <= 1.0 {
        Ok(theta)
    } else {
        Err(AssessorError::InvalidThreshold(theta))
    }
}

/// Answer once `t > 0` and the answer share of the batch reaches `theta`.
pub fn decide_plan(t: usize, plans: &PlanSet, theta: f64) -> Result<Branch, AssessorError> {
    validate_threshold(theta)?;
    if plans.plans.is_empty() {
        return Err(AssessorError::EmptyPlanSet);
    }
    let answers = plans.answer_count();
    // Correctly rounded division makes the boundary case (ratio == theta) exact.
    let ratio = answers as f64 / plans.plans.len() as f64;
    if t > 0 && ratio >= theta {
        let first = plans.answers().next().expect("ratio > 0 implies an answer");
        return Ok(Branch::Answer(first.clone()));
    }
    let queries: Vec<Planning> = plans.searches().cloned().collect();
    if queries.is_empty() {
        return Err(AssessorError::NoViablePlan);
    }
    Ok(Branch::Query(queries))
}

/// Sorted distinct terms over a group of queries.
pub fn build_vocabulary<'a>(queries: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let terms: BTreeSet<String> = queries.into_iter().flat_map(tokenize).collect();
    terms.into_iter().collect()
}

/// Bag-of-words count vector over `vocabulary`; unknown terms are ignored.
pub fn embed_query(query: &str, vocabulary: &[String]) -> Vec<u32> {
    let mut counts = vec![0u32; vocabulary.len()];
    for token in tokenize(query) {
        if let Some(pos) = vocabulary.iter().position(|v| *v == token) {
            counts[pos] += 1;
        }
    }
    counts
}

pub fn squared_distance(a: &[u32], b: &[u32]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = i64::from(x) - i64::from(y);
            (d * d) as u64
        })
        .sum()
}

pub const NOISE: usize = usize::MAX;

/// Classic DBSCAN under Euclidean distance. Returns one cluster label per
/// point (`NOISE` for noise); labels are numbered in order of discovery.
pub fn dbscan(points: &[Vec<u32>], eps: f64, min_pts: usize) -> Vec<usize> {
    let eps_sq = eps * eps;
    let neighbours = |i: usize| -> Vec<usize> {
        (0..points.len())
            .filter(|&j| squared_distance(&points[i], &points[j]) as f64 <= eps_sq)
            .collect()
    };
    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    let mut next = 0;
    for i in 0..points.len() {
        if labels[i].is_some() {
            continue;
        }
        let seeds = neighbours(i);
        if seeds.len() < min_pts {
            labels[i] = Some(NOISE);
            continue;
        }
        let cluster = next;
        next += 1;
        labels[i] = Some(cluster);
        let mut queue: std::collections::VecDeque<usize> = seeds.into();
        while let Some(j) = queue.pop_front() {
            match labels[j] {
                Some(NOISE) => labels[j] = Some(cluster),
                Some(_) => continue,
                None => {
                    labels[j] = Some(cluster);
                    let reach = neighbours(j);
                    if reach.len() >= min_pts {
                        queue.extend(reach);
                    }
                }
            }
        }
    }
    labels.into_iter().map(|l| l.unwrap_or(NOISE)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCluster {
    /// Indices into the candidate list, in generation order.
    pub members: Vec<usize>,
    pub representative: usize,
}

/// Member with the smallest summed distance to the others; ties go to the
/// earliest generated.
fn medoid(members: &[usize], vectors: &[Vec<u32>]) -> usize {
    let cost = |i: usize| -> f64 {
        members
            .iter()
            .map(|&j| (squared_distance(&vectors[i], &vectors[j]) as f64).sqrt())
            .sum()
    };
    let mut best = members[0];
    let mut best_cost = cost(best);
    for &m in &members[1..] {
        let c = cost(m);
        if c < best_cost {
            best = m;
            best_cost = c;
        }
    }
    best
}

/// Clusters candidates together with the already-executed queries
/// (minPts = 1) and keeps only the clusters without an executed query.
pub fn cluster_queries(candidates: &[&str], executed: &[String], eps: f64) -> Vec<QueryCluster> {
    let vocabulary = build_vocabulary(
        candidates
            .iter()
            .copied()
            .chain(executed.iter().map(String::as_str)),
    );
    let vectors: Vec<Vec<u32>> = candidates
        .iter()
        .copied()
        .chain(executed.iter().map(String::as_str))
        .map(|q| embed_query(q, &vocabulary))
        .collect();
    let labels = dbscan(&vectors, eps, 1);

    let cluster_count = labels
        .iter()
        .filter(|&&l| l != NOISE)
        .max()
        .map_or(0, |m| m + 1);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cluster_count];
    let mut tainted = vec![false; cluster_count];
    for (point, &label) in labels.iter().enumerate() {
        if label == NOISE {
            continue;
        }
        if point < candidates.len() {
            buckets[label].push(point);
        } else {
            tainted[label] = true;
        }
    }
    let mut clusters: Vec<QueryCluster> = buckets
        .into_iter()
        .zip(tainted)
        .filter(|(members, tainted)| !tainted && !members.is_empty())
        .map(|(members, _)| QueryCluster {
            representative: medoid(&members, &vectors),
            members,
        })
        .collect();
    clusters.sort_by_key(|c| c.representative);
    clusters
}

/// Deduplicated search plans: one medoid per surviving cluster, in
/// generation order. Empty output means every candidate repeats an executed
/// query.
pub fn filter_queries(candidates: &[Planning], executed: &[String], eps: f64) -> Vec<Planning> {
    let texts: Vec<&str> = candidates
        .iter()
        .map(|p| p.query().unwrap_or_else(|| p.action.text()))
        .collect();
    cluster_queries(&texts, executed, eps)
        .into_iter()
        .map(|c| candidates[c.representative].clone())
        .collect()
}

/// Index of the highest score, earliest on ties. NaN never wins.
pub fn select_best_query(filtered: &[Planning], scores: &[f64]) -> Result<usize, AssessorError> {
    if filtered.len() != scores.len() || filtered.is_empty() {
        return Err(AssessorError::ScoreCountMismatch {
            plans: filtered.len(),
            scores: scores.len(),
        });
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] || scores[best].is_nan() && !s.is_nan() {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    AnswerChosen(Planning),
    QueryChosen {
        plan: Planning,
        filtered: Vec<Planning>,
        scores: Vec<f64>,
    },
    /// Every candidate duplicated an executed query.
    EscalateTemperature {
        candidates: Vec<Planning>,
    },
}

/// Runs the full assessment for one batch. `score` maps a query to its
/// predicted quality.
pub fn assess<E>(
    plans: &PlanSet,
    executed: &[String],
    theta: f64,
    eps: f64,
    mut score: impl FnMut(&str) -> Result<f64, E>,
) -> Result<Result<Decision, AssessorError>, E> {
    let queries = match decide_plan(plans.t, plans, theta) {
        Ok(Branch::Answer(plan)) => return Ok(Ok(Decision::AnswerChosen(plan))),
        Ok(Branch::Query(queries)) => queries,
        Err(e) => return Ok(Err(e)),
    };
    let filtered = filter_queries(&queries, executed, eps);
    if filtered.is_empty() {
        return Ok(Ok(Decision::EscalateTemperature {
            candidates: queries,
        }));
    }
    let mut scores = Vec::with_capacity(filtered.len());
    for plan in &filtered {
        scores.push(score(plan.action.text())?);
    }
    let best = select_best_query(&filtered, &scores).expect("lengths match");
    Ok(Ok(Decision::QueryChosen {
        plan: filtered[best].clone(),
        filtered,
        scores,
    }))
}
