//! Long-tailed metrics, the expert-subset ablation and the λ sweep.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Group, LabelStats};
use crate::error::{MedcError, Result};
use crate::model::MedcModel;
use crate::sampling::ExpertKind;
use crate::training::{train, TrainConfig};

/// Non-interpolated AP: mean precision at the rank of each positive.
/// Ties in score keep the lower sample index first. `None` without positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len(), "scores and labels differ in length");
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_map: f64,
    /// `None` when no class of the group has a test positive.
    pub head_map: Option<f64>,
    pub medium_map: Option<f64>,
    pub tail_map: Option<f64>,
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub groups: Vec<Group>,
    /// Classes without a test positive, left out of every mean.
    pub skipped_classes: Vec<usize>,
    pub num_records: usize,
    pub config_digest: String,
    pub seed: u64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn hit_at_k(scores: &[f64], labels: &[bool], k: usize) -> bool {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().take(k).any(|&c| labels[c])
}

/// Metrics from a score matrix `scores[record][class]`.
pub fn score_report(scores: &[Vec<f64>], labels: &[Vec<bool>], groups: &[Group]) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(MedcError::Invalid("cannot evaluate an empty test set".into()));
    }
    if scores.len() != labels.len() {
        return Err(MedcError::Shape(format!("{} score rows for {} records", scores.len(), labels.len())));
    }
    let c = groups.len();
    for (s, y) in scores.iter().zip(labels) {
        if s.len() != c || y.len() != c {
            return Err(MedcError::Shape(format!(
                "score row of width {} / label row of width {} for C={c}",
                s.len(),
                y.len()
            )));
        }
    }
    let per_class_ap: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let col: Vec<f64> = scores.iter().map(|s| s[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|y| y[k]).collect();
            average_precision(&col, &pos)
        })
        .collect();
    let skipped_classes = (0..c).filter(|&k| per_class_ap[k].is_none()).collect();
    let group_map = |g: Group| {
        mean_of(
            per_class_ap
                .iter()
                .zip(groups)
                .filter(|(_, &gg)| gg == g)
                .filter_map(|(ap, _)| *ap),
        )
    };
    let overall_map = mean_of(per_class_ap.iter().filter_map(|ap| *ap))
        .ok_or_else(|| MedcError::Invalid("no class has a positive test record".into()))?;
    let n = scores.len() as f64;
    let acc = |k: usize| scores.iter().zip(labels).filter(|(s, y)| hit_at_k(s, y, k)).count() as f64 / n;
    Ok(MetricsReport {
        overall_map,
        head_map: group_map(Group::Head),
        medium_map: group_map(Group::Medium),
        tail_map: group_map(Group::Tail),
        acc_at_1: acc(1),
        acc_at_5: acc(5),
        per_class_ap,
        groups: groups.to_vec(),
        skipped_classes,
        num_records: scores.len(),
        config_digest: String::new(),
        seed: 0,
    })
}

fn check_compatible(model: &MedcModel, test: &Dataset, stats: &LabelStats) -> Result<()> {
    if model.num_classes != test.num_classes {
        return Err(MedcError::Shape(format!(
            "model has C={} but data has C={}",
            model.num_classes, test.num_classes
        )));
    }
    if model.input_dim != test.dim {
        return Err(MedcError::Shape(format!(
            "model expects feature dim {} but data has D={}",
            model.input_dim, test.dim
        )));
    }
    if stats.num_classes() != test.num_classes {
        return Err(MedcError::Shape(format!(
            "label stats cover {} classes but data has C={}",
            stats.num_classes(),
            test.num_classes
        )));
    }
    Ok(())
}

/// Scores every test record with expert-averaged probabilities. Records are
/// ranked in id order so the report does not depend on file order.
pub fn evaluate(model: &MedcModel, test: &Dataset, stats: &LabelStats, experts: Option<&[ExpertKind]>) -> Result<MetricsReport> {
    check_compatible(model, test, stats)?;
    let mut records: Vec<_> = test.records.iter().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let videos: Vec<_> = records.iter().map(|r| &r.features).collect();
    let scores = model.forward_inference(&videos, experts)?;
    let labels: Vec<Vec<bool>> = records.iter().map(|r| r.labels.clone()).collect();
    score_report(&scores, &labels, &stats.groups)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn with_provenance(mut self, config_digest: &str, seed: u64) -> Self {
        self.config_digest = config_digest.to_string();
        self.seed = seed;
        self
    }

    /// overall, head, medium, tail, acc@1, acc@5
    pub fn headline(&self) -> [Option<f64>; 6] {
        [
            Some(self.overall_map),
            self.head_map,
            self.medium_map,
            self.tail_map,
            Some(self.acc_at_1),
            Some(self.acc_at_5),
        ]
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, v) in METRIC_NAMES.iter().zip(self.headline()) {
            s.push_str(&format!("{name},{}\n", opt(v)));
        }
        s
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,group,ap\n");
        for (k, (ap, g)) in self.per_class_ap.iter().zip(&self.groups).enumerate() {
            s.push_str(&format!("{k},{g},{}\n", opt(*ap)));
        }
        s
    }
}

pub const METRIC_NAMES: [&str; 6] = ["overall_map", "head_map", "medium_map", "tail_map", "acc_at_1", "acc_at_5"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub experts: Vec<ExpertKind>,
    pub temporal_attention: bool,
}

impl Variant {
    /// Parses "MEDC", "E2" or "E1+E3".
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.eq_ignore_ascii_case("medc") {
            return Ok(Self::medc());
        }
        let mut experts: Vec<ExpertKind> = spec.split('+').map(|p| p.trim().parse()).collect::<Result<_>>()?;
        experts.sort();
        let len = experts.len();
        experts.dedup();
        if experts.len() != len {
            return Err(MedcError::Invalid(format!("variant {spec:?} repeats an expert")));
        }
        Ok(Self::from_experts(experts))
    }

    pub fn from_experts(experts: Vec<ExpertKind>) -> Self {
        let name = if experts.len() == ExpertKind::ALL.len() {
            "MEDC".to_string()
        } else {
            experts.iter().map(|k| k.short_name()).collect::<Vec<_>>().join("+")
        };
        Self {
            name,
            experts,
            temporal_attention: true,
        }
    }

    pub fn medc() -> Self {
        Self::from_experts(ExpertKind::ALL.to_vec())
    }

    pub fn no_temporal_attention() -> Self {
        Self {
            name: "No-Temporal-Attention".into(),
            experts: ExpertKind::ALL.to_vec(),
            temporal_attention: false,
        }
    }
}

/// Single experts, pairs, the full model and the attention-free model.
pub fn table3_variants() -> Vec<Variant> {
    let mut v: Vec<Variant> = ["E1", "E2", "E3", "E1+E2", "E1+E3", "E2+E3", "MEDC"]
        .iter()
        .map(|s| Variant::parse(s).expect("built-in variant"))
        .collect();
    v.push(Variant::no_temporal_attention());
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Seed-averaged headline metrics, in `METRIC_NAMES` order.
    pub means: [Option<f64>; 6],
    pub reports: Vec<MetricsReport>,
}

/// Trains and evaluates every variant under every seed.
pub fn ablate(
    base: &TrainConfig,
    variants: &[Variant],
    train_data: &Dataset,
    test_data: &Dataset,
    stats: &LabelStats,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(MedcError::Invalid("ablation grid needs at least one variant and one seed".into()));
    }
    variants
        .iter()
        .map(|variant| {
            let mut cfg = base.clone();
            cfg.active_experts = variant.experts.clone();
            cfg.model.temporal_attention = variant.temporal_attention;
            let reports = seeds
                .iter()
                .map(|&seed| {
                    let out = train(cfg.clone(), train_data, stats.clone(), seed, None)?;
                    Ok(evaluate(&out.trainer.model, test_data, stats, None)?.with_provenance("", seed))
                })
                .collect::<Result<Vec<_>>>()?;
            let means = std::array::from_fn(|m| mean_of(reports.iter().filter_map(|r| r.headline()[m])));
            Ok(AblationRow {
                variant: variant.clone(),
                means,
                reports,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("variant,{}\n", METRIC_NAMES.join(","));
    for r in rows {
        let cells: Vec<String> = r.means.iter().map(|v| opt(*v)).collect();
        s.push_str(&format!("{},{}\n", r.variant.name, cells.join(",")));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda1: f64,
    pub lambda3: f64,
    pub overall_map: f64,
}

/// One model per (λ1, λ3) with λ2 held at 1.
pub fn lambda_sweep(
    base: &TrainConfig,
    lambda1: &[f64],
    lambda3: &[f64],
    train_data: &Dataset,
    test_data: &Dataset,
    stats: &LabelStats,
    seed: u64,
) -> Result<Vec<SweepCell>> {
    if lambda1.is_empty() || lambda3.is_empty() {
        return Err(MedcError::Invalid("lambda grids must be non-empty".into()));
    }
    let mut cells = Vec::with_capacity(lambda1.len() * lambda3.len());
    for &l1 in lambda1 {
        for &l3 in lambda3 {
            let mut cfg = base.clone();
            cfg.losses.lambda1 = l1;
            cfg.losses.lambda2 = 1.0;
            cfg.losses.lambda3 = l3;
            let out = train(cfg, train_data, stats.clone(), seed, None)?;
            let report = evaluate(&out.trainer.model, test_data, stats, None)?;
            cells.push(SweepCell {
                lambda1: l1,
                lambda3: l3,
                overall_map: report.overall_map,
            });
        }
    }
    Ok(cells)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("lambda1,lambda3,overall_map\n");
    for c in cells {
        s.push_str(&format!("{},{},{}\n", c.lambda1, c.lambda3, c.overall_map));
    }
    s
}
