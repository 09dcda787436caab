//! Per-pair evaluation records and their per-family aggregate (Table-style
//! CSV plus a JSON mirror).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub family: String,
    pub case: String,
    pub has_correspondence: bool,
    pub pre_rmse: f64,
    pub rmse: f64,
    pub cd: f64,
    pub inference_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub family: String,
    pub count: usize,
    pub mean_pre_rmse: f64,
    pub mean_rmse: f64,
    pub median_rmse: f64,
    pub mean_cd: f64,
    pub median_cd: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub rows: Vec<AggregateRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn row_for(family: &str, records: &[&PairRecord]) -> AggregateRow {
    let rmse: Vec<f64> = records.iter().map(|r| r.rmse).collect();
    let cd: Vec<f64> = records.iter().map(|r| r.cd).collect();
    let pre: Vec<f64> = records.iter().map(|r| r.pre_rmse).collect();
    AggregateRow {
        family: family.to_string(),
        count: records.len(),
        mean_pre_rmse: mean(&pre),
        mean_rmse: mean(&rmse),
        median_rmse: median(&rmse),
        mean_cd: mean(&cd),
        median_cd: median(&cd),
    }
}

/// One row per shape family (in first-appearance order) plus an `overall`
/// row across everything.
pub fn report_aggregate(records: &[PairRecord]) -> Aggregate {
    let mut families: Vec<String> = Vec::new();
    for r in records {
        if !families.contains(&r.family) {
            families.push(r.family.clone());
        }
    }
    let mut rows: Vec<AggregateRow> = families
        .iter()
        .map(|f| {
            let subset: Vec<&PairRecord> = records.iter().filter(|r| &r.family == f).collect();
            row_for(f, &subset)
        })
        .collect();
    let all: Vec<&PairRecord> = records.iter().collect();
    rows.push(row_for("overall", &all));
    Aggregate { rows }
}

impl Aggregate {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("family,count,mean_pre_rmse,mean_rmse,median_rmse,mean_cd,median_cd\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.family, r.count, r.mean_pre_rmse, r.mean_rmse, r.median_rmse, r.mean_cd, r.median_cd
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, family: &str, pre: f64, rmse: f64, cd: f64) -> PairRecord {
        PairRecord {
            pair_id: id.into(),
            family: family.into(),
            case: "a".into(),
            has_correspondence: true,
            pre_rmse: pre,
            rmse,
            cd,
            inference_seconds: 0.0,
        }
    }

    #[test]
    fn single_record_aggregate_equals_record() {
        let agg = report_aggregate(&[rec("p", "sphere", 3.0, 1.5, 0.25)]);
        assert_eq!(agg.rows.len(), 2); // family + overall
        for row in &agg.rows {
            assert_eq!(row.count, 1);
            assert_eq!(row.mean_rmse, 1.5);
            assert_eq!(row.median_rmse, 1.5);
            assert_eq!(row.mean_cd, 0.25);
            assert_eq!(row.mean_pre_rmse, 3.0);
        }
    }

    #[test]
    fn two_families_give_three_rows() {
        let agg = report_aggregate(&[
            rec("a", "sphere", 1.0, 1.0, 1.0),
            rec("b", "torus", 2.0, 2.0, 2.0),
            rec("c", "torus", 4.0, 4.0, 4.0),
        ]);
        assert_eq!(agg.rows.len(), 3);
        let csv = agg.to_csv();
        assert_eq!(csv.lines().count(), 4); // header + 3 data rows
        assert_eq!(agg.rows[1].family, "torus");
        assert_eq!(agg.rows[1].mean_rmse, 3.0);
        assert_eq!(agg.rows[1].median_rmse, 3.0);
        assert_eq!(agg.rows[2].family, "overall");
        assert!((agg.rows[2].mean_rmse - 7.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn median_of_even_count_is_midpoint() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[5.0, 1.0, 9.0]), 5.0);
    }
}
