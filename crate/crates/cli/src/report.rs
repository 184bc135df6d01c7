//! Markdown summary built from stage artifacts.

use funcda_core::annotate::AnnotationReport;
use funcda_core::eval::{render_table, table_cells, table_headers};
use funcda_core::search::{subsample_table, SearchReport};

use crate::config::Provenance;
use crate::pipeline::{EvalArtifact, IngestSummary, SplitSummary, SubsampleArtifact};

#[derive(Debug, Default)]
pub struct ReportInputs {
    pub ingest: Option<IngestSummary>,
    pub split: Option<SplitSummary>,
    pub search: Option<SearchReport>,
    pub subsample: Option<SubsampleArtifact>,
    pub eval: Option<EvalArtifact>,
    pub distribution: Option<AnnotationReport>,
}

impl ReportInputs {
    pub fn is_empty(&self) -> bool {
        self.ingest.is_none()
            && self.split.is_none()
            && self.search.is_none()
            && self.subsample.is_none()
            && self.eval.is_none()
            && self.distribution.is_none()
    }
}

/// Model comparison: one row per model and split.
pub fn model_table(eval: &EvalArtifact) -> String {
    let mut headers = vec!["Model".to_string(), "Id".to_string(), "Split".to_string()];
    headers.extend(table_headers(""));
    let mut rows = Vec::new();
    for m in &eval.models {
        for (split, r) in [("train", &m.train), ("test", &m.test)] {
            let mut row = vec![m.name.clone(), m.model_id.clone(), split.to_string()];
            row.extend(table_cells(r));
            rows.push(row);
        }
    }
    render_table(&headers, &rows)
}

fn section(out: &mut String, title: &str, body: Option<String>) {
    out.push_str(&format!("## {title}\n\n"));
    match body {
        Some(b) => {
            out.push_str("```\n");
            out.push_str(&b);
            if !b.ends_with('\n') {
                out.push('\n');
            }
            out.push_str("```\n\n");
        }
        None => out.push_str("not available\n\n"),
    }
}

pub fn render(inputs: &ReportInputs, prov: &Provenance) -> String {
    let mut out = String::from("# Pipeline report\n\n");
    out.push_str(&format!(
        "config hash `{}`, seeds: split {}, search {}, train {}\n\n",
        prov.config_hash, prov.split_seed, prov.search_seed, prov.train_seed
    ));

    section(
        &mut out,
        "Corpus",
        inputs.ingest.as_ref().map(|i| {
            let s = i.stats;
            let mut t = render_table(
                &["Raw rows", "Incomplete", "Duplicate", "Retained"].map(String::from),
                &[vec![
                    s.raw_count.to_string(),
                    s.dropped_incomplete.to_string(),
                    s.dropped_duplicate.to_string(),
                    s.retained.to_string(),
                ]],
            );
            t.push('\n');
            let rows: Vec<Vec<String>> = i.labels.iter().map(|(l, n)| vec![l.to_string(), n.to_string()]).collect();
            t.push_str(&render_table(&["Function".into(), "Records".into()], &rows));
            t
        }),
    );

    section(
        &mut out,
        "Train/test split",
        inputs.split.as_ref().map(|s| {
            let mut rows: Vec<Vec<String>> = s
                .histogram
                .iter()
                .map(|h| vec![h.label.to_string(), h.train.to_string(), h.test.to_string()])
                .collect();
            rows.push(vec!["total".into(), s.train.to_string(), s.test.to_string()]);
            let mut t = render_table(&["Function".into(), "Train".into(), "Test".into()], &rows);
            t.push_str(&format!("training pool before subsampling: {}\n", s.train_pool));
            t
        }),
    );

    section(&mut out, "Hyperparameter search", inputs.search.as_ref().map(SearchReport::to_table));

    section(
        &mut out,
        "Training-set size",
        inputs
            .subsample
            .as_ref()
            .map(|s| format!("configuration {}\n{}", s.hp, subsample_table(&s.rows))),
    );

    section(&mut out, "Model comparison", inputs.eval.as_ref().map(model_table));

    section(
        &mut out,
        "Annotation distribution",
        inputs.distribution.as_ref().map(|d| {
            let rows: Vec<Vec<String>> = d
                .per_label
                .iter()
                .map(|lc| {
                    vec![
                        lc.label.clone(),
                        lc.count.to_string(),
                        format!("{:.4}", lc.count as f64 / d.total as f64),
                    ]
                })
                .collect();
            let mut t = render_table(&["Function".into(), "Parts".into(), "Fraction".into()], &rows);
            t.push_str(&format!(
                "total {}, in-vocabulary fraction {:.4}\n",
                d.total, d.in_vocabulary_fraction
            ));
            t
        }),
    );
    out
}
