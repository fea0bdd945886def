//! Training-data sampling for the external query scorer.
//!
//! Each instance is run through the reasoning engine; every search plan the
//! model proposes is ranked against the instance's documents and labelled
//! against its gold titles.

use std::collections::HashSet;

use log::warn;

use crate::config::{CorpusScope, EngineConfig};
use crate::engine::{Engine, EngineError};
use crate::evaluation::{full_corpus, MHQAInstance};
use crate::llm::ChatBackend;
use crate::prompting::ExemplarSet;
use crate::retriever::Corpus;
use crate::scorer::{label_query, RelevanceModel, ScorerError, TrainingExample};

#[derive(Debug, Default)]
pub struct SampleReport {
    pub examples: Vec<TrainingExample>,
    /// Queries whose ranking never reached a gold document.
    pub gold_not_found: usize,
    /// Instances whose session failed, with the error text.
    pub failed: Vec<(String, String)>,
}

/// Labels every candidate query proposed for one instance.
pub fn label_candidates<'q>(
    queries: impl IntoIterator<Item = &'q str>,
    corpus: &Corpus,
    gold: &HashSet<String>,
    report: &mut SampleReport,
) -> Result<(), EngineError> {
    for query in queries {
        let ranked = corpus.rank(query)?;
        match label_query(query, &ranked, gold) {
            Ok(example) => report.examples.push(example),
            Err(ScorerError::GoldNotFound { query }) => {
                warn!("skipping {query:?}: GoldNotFound");
                report.gold_not_found += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn sample_training_data<F>(
    instances: &[MHQAInstance],
    config: &EngineConfig,
    exemplars: &ExemplarSet,
    relevance: &dyn RelevanceModel,
    mut backend_for: F,
) -> Result<SampleReport, EngineError>
where
    F: FnMut(&MHQAInstance) -> Result<Box<dyn ChatBackend>, EngineError>,
{
    config.validate()?;
    let engine = Engine::new(config, exemplars, relevance);
    let shared = match config.corpus_scope {
        CorpusScope::Full if !instances.is_empty() => Some(full_corpus(instances)?),
        _ => None,
    };
    let mut report = SampleReport::default();
    for instance in instances {
        let outcome = (|| {
            let pool = match &shared {
                Some(c) => c.clone(),
                None => instance.pool()?,
            };
            let mut backend = backend_for(instance)?;
            let outcome = engine.run_session(&instance.question, &pool, backend.as_mut())?;
            Ok::<_, EngineError>((pool, outcome))
        })();
        let (pool, outcome) = match outcome {
            Ok(v) => v,
            Err(e) => {
                warn!("instance {}: {e}", instance.id);
                report.failed.push((instance.id.clone(), e.to_string()));
                continue;
            }
        };
        let gold: HashSet<String> = instance.gold_titles().into_iter().collect();
        // identical strings would produce identical examples
        let mut seen = HashSet::new();
        let queries = outcome.candidate_queries().filter(|q| seen.insert(*q));
        if let Err(e) = label_candidates(queries, &pool, &gold, &mut report) {
            warn!("instance {}: {e}", instance.id);
            report.failed.push((instance.id.clone(), e.to_string()));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::parse_dataset;
    use crate::llm::ScriptedBackend;
    use crate::scorer::LexicalRelevance;

    fn dataset() -> Vec<MHQAInstance> {
        parse_dataset(
            r#"[{"_id": "s1", "question": "Which river runs through the capital of France?",
                 "answer": "Seine",
                 "context": [["Paris", ["Paris is the capital of France."]],
                             ["Seine", ["The Seine is a river that runs through Paris."]],
                             ["Lyon", ["Lyon is a city in France."]]],
                 "supporting_facts": [["Paris", 0], ["Seine", 0]]}]"#,
        )
        .unwrap()
    }

    fn steps(batches: &[&[&str]]) -> Vec<Vec<String>> {
        batches
            .iter()
            .map(|b| b.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    #[test]
    fn three_queries_over_two_iterations() {
        let config = EngineConfig {
            choices: 2,
            ..Default::default()
        };
        let script = steps(&[
            &["[Search] capital of France", "[Search] France capital city"],
            &[
                "[Analysis] a [Search] river through Paris",
                "[Analysis] b [Answer] Seine",
            ],
            &["[Analysis] c [Answer] Seine", "[Analysis] d [Answer] Seine"],
        ]);
        let exemplars = ExemplarSet::builtin();
        let report =
            sample_training_data(&dataset(), &config, &exemplars, &LexicalRelevance, |_| {
                Ok(Box::new(ScriptedBackend::new(script.clone())))
            })
            .unwrap();
        assert_eq!(report.examples.len(), 3);
        assert!(report.failed.is_empty());
        let first = &report.examples[0];
        assert_eq!(first.doc_ids[0], "Paris");
        assert_eq!(first.gold_score, 1.0);
    }

    #[test]
    fn repeated_queries_are_labelled_once() {
        let script = steps(&[&["[Search] capital of France"], &["[Answer] Seine"]]);
        let exemplars = ExemplarSet::builtin();
        let report = sample_training_data(
            &dataset(),
            &EngineConfig::default(),
            &exemplars,
            &LexicalRelevance,
            |_| Ok(Box::new(ScriptedBackend::new(script.clone()))),
        )
        .unwrap();
        assert_eq!(report.examples.len(), 1);
    }

    #[test]
    fn zero_score_gold_is_still_ranked() {
        let mut data = dataset();
        data[0]
            .context
            .push(("Moon".into(), vec!["Cheese.".into()]));
        data[0].supporting_facts = vec![("Moon".into(), 0)];
        let config = EngineConfig {
            choices: 1,
            max_iterations: 1,
            ..Default::default()
        };
        let script = steps(&[&["[Search] capital of France"], &["[Answer] x"]]);
        let exemplars = ExemplarSet::builtin();
        let report = sample_training_data(&data, &config, &exemplars, &LexicalRelevance, |_| {
            Ok(Box::new(ScriptedBackend::new(script.clone())))
        })
        .unwrap();
        // every document is ranked, so a zero-score gold still gets a rank
        assert_eq!(report.examples.len(), 1);
        assert_eq!(report.examples[0].gold_rank(), 3);
        assert_eq!(report.gold_not_found, 0);
    }

    #[test]
    fn gold_outside_corpus_is_counted() {
        let corpus = dataset()[0].pool().unwrap();
        let gold: HashSet<String> = ["Atlantis".to_string()].into();
        let mut report = SampleReport::default();
        label_candidates(["capital of France", "river"], &corpus, &gold, &mut report).unwrap();
        assert!(report.examples.is_empty());
        assert_eq!(report.gold_not_found, 2);
    }

    #[test]
    fn failing_session_is_logged_and_skipped() {
        let exemplars = ExemplarSet::builtin();
        let report = sample_training_data(
            &dataset(),
            &EngineConfig::default(),
            &exemplars,
            &LexicalRelevance,
            |_| Ok(Box::new(ScriptedBackend::new(Vec::new()))),
        )
        .unwrap();
        assert!(report.examples.is_empty());
        assert_eq!(report.failed.len(), 1);
    }

    #[test]
    fn empty_dataset_is_empty_stream() {
        let exemplars = ExemplarSet::builtin();
        let report = sample_training_data(
            &[],
            &EngineConfig::default(),
            &exemplars,
            &LexicalRelevance,
            |_| unreachable!(),
        )
        .unwrap();
        assert!(report.examples.is_empty());
    }
}
