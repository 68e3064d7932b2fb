//! Dice, Bhattacharyya coefficient, and summary statistics.

use crate::error::{shape_err, Error, Result};
use crate::geometry::BinaryMask;
use std::collections::BTreeMap;
use std::fmt::Write as _;

const NORM_TOL: f64 = 1e-9;

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if !pred.same_shape(gt) {
        return shape_err(format!(
            "dsc: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        ));
    }
    let inter = pred.bits().iter().zip(gt.bits()).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

pub fn bhattacharyya(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return shape_err(format!("bhattacharyya: lengths {} and {}", p.len(), q.len()));
    }
    for v in [p, q] {
        let s: f64 = v.iter().sum();
        if v.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > NORM_TOL {
            return Err(Error::Contract(format!("distribution not normalised (sum {s})")));
        }
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum())
}

/// One evaluated episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub config: String,
    pub seed: u64,
    pub family: String,
    pub domain: String,
    pub dsc: f64,
    pub bin_mae: f64,
    pub bc: f64,
}

pub const RECORD_HEADER: &str = "config,seed,family,domain,dsc,bin_mae,bc";
pub const SUMMARY_HEADER: &str = "config,group,metric,n,mean,median,std";
pub const DELTA_HEADER: &str = "config,baseline,n_paired,mean_delta_dsc";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("statistics of an empty sample".into()));
        }
        let n = values.len();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Ok(Self {
            n,
            mean,
            median,
            std: var.sqrt(),
        })
    }
}

/// Summary rows keyed by (config, group, metric). Groups are `all`,
/// `family=<name>` and `domain=<name>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub rows: BTreeMap<(String, String, String), Stats>,
}

impl Summary {
    pub fn get(&self, config: &str, group: &str, metric: &str) -> Option<&Stats> {
        self.rows
            .get(&(config.to_string(), group.to_string(), metric.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for ((c, g, m), s) in &self.rows {
            writeln!(out, "{c},{g},{m},{},{},{},{}", s.n, s.mean, s.median, s.std).expect("string write");
        }
        out
    }
}

pub fn aggregate(records: &[EvalRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Contract("aggregate needs at least one record".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        for g in ["all".to_string(), format!("family={}", r.family), format!("domain={}", r.domain)] {
            groups.entry((r.config.clone(), g)).or_default().push(r);
        }
    }
    let mut rows = BTreeMap::new();
    for ((config, group), rs) in groups {
        let metrics: [(&str, fn(&EvalRecord) -> f64); 3] =
            [("dsc", |r| r.dsc), ("bin_mae", |r| r.bin_mae), ("bc", |r| r.bc)];
        for (name, f) in metrics {
            let vals: Vec<f64> = rs.iter().map(|r| f(r)).collect();
            rows.insert((config.clone(), group.clone(), name.to_string()), Stats::of(&vals)?);
        }
    }
    Ok(Summary { rows })
}

/// Mean of `dsc(config) − dsc(baseline)` over seeds present in both.
pub fn paired_delta(records: &[EvalRecord], config: &str, baseline: &str) -> Result<(usize, f64)> {
    let base: BTreeMap<u64, f64> = records
        .iter()
        .filter(|r| r.config == baseline)
        .map(|r| (r.seed, r.dsc))
        .collect();
    let deltas: Vec<f64> = records
        .iter()
        .filter(|r| r.config == config)
        .filter_map(|r| base.get(&r.seed).map(|b| r.dsc - b))
        .collect();
    if deltas.is_empty() {
        return Err(Error::Contract(format!("no paired seeds between {config} and {baseline}")));
    }
    Ok((deltas.len(), deltas.iter().sum::<f64>() / deltas.len() as f64))
}

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = format!("{RECORD_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.config, r.seed, r.family, r.domain, r.dsc, r.bin_mae, r.bc
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let a = mask(&[1, 1, 1, 1, 0, 0]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(&[0, 0, 0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dsc(&a, &mask(&[0, 0, 1, 1, 1, 1])).unwrap(), 0.5);
        assert_eq!(dsc(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert_eq!(dsc(&mask(&[0, 0]), &mask(&[0, 1])).unwrap(), 0.0);
        assert!(dsc(&a, &mask(&[1])).is_err());
    }

    #[test]
    fn bc_examples() {
        assert!((bhattacharyya(&[0.3, 0.7], &[0.3, 0.7]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bhattacharyya(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((bhattacharyya(&[0.9, 0.1], &[0.1, 0.9]).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(bhattacharyya(&[0.5, 0.4], &[0.5, 0.5]), Err(Error::Contract(_))));
    }

    fn rec(config: &str, seed: u64, d: f64) -> EvalRecord {
        EvalRecord {
            config: config.into(),
            seed,
            family: "annulus".into(),
            domain: "target".into(),
            dsc: d,
            bin_mae: 0.0,
            bc: 1.0,
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[rec("full", 0, 0.7)]).unwrap();
        let s = one.get("full", "all", "dsc").unwrap();
        assert_eq!((s.mean, s.median, s.std), (0.7, 0.7, 0.0));
        let two = aggregate(&[rec("full", 0, 0.4), rec("full", 1, 0.6)]).unwrap();
        assert!((two.get("full", "family=annulus", "dsc").unwrap().mean - 0.5).abs() < 1e-15);
        assert!(aggregate(&[]).is_err());

        let rs = [rec("a", 0, 0.3), rec("a", 1, 0.5), rec("b", 0, 0.3), rec("b", 1, 0.5), rec("b", 2, 0.9)];
        assert_eq!(paired_delta(&rs, "b", "a").unwrap(), (2, 0.0));
        assert!(paired_delta(&rs, "b", "c").is_err());
        assert!(two.to_csv().starts_with(SUMMARY_HEADER));
        assert_eq!(records_csv(&rs).lines().count(), 6);
    }

    fn dist() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 5).prop_filter("nonzero", |v| v.iter().sum::<f64>() > 1e-3).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn dsc_is_symmetric(a in prop::collection::vec(any::<bool>(), 16), b in prop::collection::vec(any::<bool>(), 16)) {
            let a = BinaryMask::new(4, 4, a).unwrap();
            let b = BinaryMask::new(4, 4, b).unwrap();
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        }

        #[test]
        fn bc_symmetric_and_bounded(p in dist(), q in dist()) {
            let pq = bhattacharyya(&p, &q).unwrap();
            prop_assert!((pq - bhattacharyya(&q, &p).unwrap()).abs() < 1e-15);
            prop_assert!(pq <= 1.0 + 1e-12);
            prop_assert!((bhattacharyya(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn aggregate_is_permutation_invariant(vals in prop::collection::vec(0.0f64..1.0, 1..20), rot in 0usize..20) {
            let rs: Vec<EvalRecord> = vals.iter().enumerate().map(|(i, &v)| rec("x", i as u64, v)).collect();
            let mut shuffled = rs.clone();
            shuffled.rotate_left(rot % rs.len());
            shuffled.reverse();
            let a = aggregate(&rs).unwrap();
            let b = aggregate(&shuffled).unwrap();
            for (k, s) in &a.rows {
                let t = b.rows[k];
                prop_assert_eq!(s.median, t.median);
                prop_assert!((s.mean - t.mean).abs() < 1e-12);
            }
        }
    }
}
