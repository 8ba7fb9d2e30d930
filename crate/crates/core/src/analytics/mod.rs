//! Resource-usage models over the job archive.
//!
//! Jobs are tagged by [`tags::TagRule`]s (tool name, read count, ...), grouped
//! by chosen tag keys, and for each group elapsed time and peak memory are
//! regressed on a numeric covariate tag.

pub mod regression;
pub mod tags;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use regression::{fit_line, predict_value, Fit};
pub use tags::{parse_number, parse_rules, tag_job, MatchField, TagRule, TagRuleSpec, TagWarning, Tagging};

use crate::adapter::JobStatus;
use crate::duration::parse_hms;
use crate::store::{HistoryQuery, JobRecord, JobStore, StoreError, TagValue};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("need at least 2 samples, have {n}")]
    InsufficientData { n: usize },
    #[error("covariate is constant over the sample")]
    DegenerateCovariate,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("no fitted model for {group} / {metric}")]
    UnfittedModel { group: String, metric: Metric },
    #[error("rule {rule:?}: {message}")]
    InvalidRule { rule: String, message: String },
    #[error("rules file: {0}")]
    RuleFile(String),
    #[error("store: {0}")]
    Store(String),
    #[error("csv: {0}")]
    Csv(String),
}

impl From<StoreError> for AnalyticsError {
    fn from(e: StoreError) -> Self {
        AnalyticsError::Store(e.to_string())
    }
}

impl From<csv::Error> for AnalyticsError {
    fn from(e: csv::Error) -> Self {
        AnalyticsError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    ElapsedSeconds,
    MaxMemoryBytes,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::ElapsedSeconds, Metric::MaxMemoryBytes];

    /// The metric's value for a finished job, if known.
    pub fn of(self, record: &JobRecord) -> Option<f64> {
        match self {
            Metric::ElapsedSeconds => parse_hms(&record.final_run_time).map(|s| s as f64),
            Metric::MaxMemoryBytes => Some(record.maximum_memory as f64),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RegressionModel {
    pub tag_filter: BTreeMap<String, TagValue>,
    pub covariate_key: String,
    pub metric: Metric,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
    pub rmse: f64,
}

impl RegressionModel {
    /// `key=value` pairs joined by `,`; empty for the ungrouped model.
    pub fn group(&self) -> String {
        group_label(&self.tag_filter)
    }

    pub fn predict(&self, covariate: f64) -> Estimate {
        Estimate {
            value: predict_value(self.slope, self.intercept, covariate),
            rmse: self.rmse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub rmse: f64,
}

fn group_label(filter: &BTreeMap<String, TagValue>) -> String {
    filter.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SkipEntry {
    pub group: String,
    pub metric: Metric,
    pub n: usize,
    pub reason: String,
}

/// One finished job as seen by the models.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Sample {
    pub group: String,
    pub job_id: u64,
    pub covariate: f64,
    pub elapsed_seconds: Option<f64>,
    pub max_memory_bytes: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ModelSet {
    pub models: Vec<RegressionModel>,
    pub skipped: Vec<SkipEntry>,
    pub samples: Vec<Sample>,
    pub warnings: Vec<TagWarning>,
}

impl ModelSet {
    pub fn find(&self, group: &str, metric: Metric) -> Option<&RegressionModel> {
        self.models.iter().find(|m| m.metric == metric && m.group() == group)
    }

    pub fn predict(&self, group: &str, metric: Metric, covariate: f64) -> Result<Estimate, AnalyticsError> {
        self.find(group, metric)
            .map(|m| m.predict(covariate))
            .ok_or_else(|| AnalyticsError::UnfittedModel {
                group: group.to_string(),
                metric,
            })
    }

    /// CSV with columns `group,metric,slope,intercept,n,rmse`.
    pub fn write_models_csv<W: std::io::Write>(&self, out: W) -> Result<(), AnalyticsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "metric", "slope", "intercept", "n", "rmse"])?;
        for m in &self.models {
            w.write_record([
                m.group(),
                m.metric.to_string(),
                m.slope.to_string(),
                m.intercept.to_string(),
                m.n.to_string(),
                m.rmse.to_string(),
            ])?;
        }
        w.flush().map_err(|e| AnalyticsError::Csv(e.to_string()))
    }

    /// Scatter data: covariate against CPU hours and against RAM in GB.
    pub fn write_scatter_csv<W: std::io::Write>(&self, out: W) -> Result<(), AnalyticsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "jobId", "covariate", "elapsedHours", "maxMemoryGB"])?;
        for s in &self.samples {
            w.write_record([
                s.group.clone(),
                s.job_id.to_string(),
                s.covariate.to_string(),
                s.elapsed_seconds.map(|e| (e / 3600.0).to_string()).unwrap_or_default(),
                (s.max_memory_bytes / 1e9).to_string(),
            ])?;
        }
        w.flush().map_err(|e| AnalyticsError::Csv(e.to_string()))
    }
}

/// Tags for one record: stored tags first, then rule-derived tags for keys
/// the stored set lacks.
pub fn effective_tags(
    store: &JobStore,
    record: &JobRecord,
    rules: &[TagRule],
) -> Result<(BTreeMap<String, TagValue>, Vec<TagWarning>), AnalyticsError> {
    let mut tags = store.get_tags(record.job_id)?.tags;
    let derived = tag_job(record, rules);
    for (k, v) in derived.tags.tags {
        tags.entry(k).or_insert(v);
    }
    Ok((tags, derived.warnings))
}

/// Fit one model per (group, metric) over the archive's completed jobs.
/// Jobs lacking a grouping tag or a numeric covariate are left out; groups
/// that cannot be fitted are reported in `skipped`.
pub fn build_models(
    store: &JobStore,
    rules: &[TagRule],
    grouping: &[String],
    covariate_key: &str,
) -> Result<ModelSet, AnalyticsError> {
    let query = HistoryQuery::all().with_status([JobStatus::Completed]).finalized(true);
    let mut set = ModelSet::default();
    let mut groups: BTreeMap<String, (BTreeMap<String, TagValue>, Vec<Sample>)> = BTreeMap::new();
    for record in store.list_jobs(&query)? {
        let (tags, warnings) = effective_tags(store, &record, rules)?;
        set.warnings.extend(warnings);
        let Some(filter) = grouping
            .iter()
            .map(|k| tags.get(k).map(|v| (k.clone(), v.clone())))
            .collect::<Option<BTreeMap<_, _>>>()
        else {
            continue;
        };
        let Some(covariate) = tags.get(covariate_key).and_then(TagValue::as_number) else {
            continue;
        };
        let group = group_label(&filter);
        let sample = Sample {
            group: group.clone(),
            job_id: record.job_id,
            covariate,
            elapsed_seconds: Metric::ElapsedSeconds.of(&record),
            max_memory_bytes: record.maximum_memory as f64,
        };
        groups.entry(group).or_insert_with(|| (filter, Vec::new())).1.push(sample);
    }
    for (group, (filter, mut samples)) in groups {
        samples.sort_by_key(|s| s.job_id);
        for metric in Metric::ALL {
            let points: Vec<(f64, f64)> = samples
                .iter()
                .filter_map(|s| {
                    let y = match metric {
                        Metric::ElapsedSeconds => s.elapsed_seconds?,
                        Metric::MaxMemoryBytes => s.max_memory_bytes,
                    };
                    Some((s.covariate, y))
                })
                .collect();
            match fit_line(&points) {
                Ok(fit) => set.models.push(RegressionModel {
                    tag_filter: filter.clone(),
                    covariate_key: covariate_key.to_string(),
                    metric,
                    slope: fit.slope,
                    intercept: fit.intercept,
                    n: fit.n,
                    rmse: fit.rmse,
                }),
                Err(e) => set.skipped.push(SkipEntry {
                    group: group.clone(),
                    metric,
                    n: points.len(),
                    reason: e.to_string(),
                }),
            }
        }
        set.samples.extend(samples);
    }
    Ok(set)
}
