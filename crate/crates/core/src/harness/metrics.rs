//! Per-round metrics rows and the run summary.
//!
//! `metrics.csv` columns, in order:
//! `seed, round, acc_<domain>…, avg_acc, ce_c<k>…, apc_c<k>…`.
//! Floats use Rust's shortest round-trip formatting, so every row parses
//! back to identical bits. Wall-clock time lives in `timings.csv`.

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Unweighted mean over domains.
pub fn average_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: u32,
    pub domain_acc: Vec<f64>,
    pub avg_acc: f64,
    pub client_ce: Vec<f64>,
    pub client_apc: Vec<f64>,
}

pub fn csv_header(domains: &[String], clients: usize) -> String {
    let mut cols = vec!["seed".to_string(), "round".to_string()];
    cols.extend(domains.iter().map(|d| format!("acc_{d}")));
    cols.push("avg_acc".into());
    cols.extend((0..clients).map(|k| format!("ce_c{k}")));
    cols.extend((0..clients).map(|k| format!("apc_c{k}")));
    cols.join(",")
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut cols = vec![self.seed.to_string(), self.round.to_string()];
        cols.extend(self.domain_acc.iter().map(f64::to_string));
        cols.push(self.avg_acc.to_string());
        cols.extend(self.client_ce.iter().map(f64::to_string));
        cols.extend(self.client_apc.iter().map(f64::to_string));
        cols.join(",")
    }

    pub fn parse(line: &str, domains: usize, clients: usize) -> Result<Self, HarnessError> {
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        let want = 3 + domains + 2 * clients;
        if cols.len() != want {
            return Err(HarnessError::Parse(format!("expected {want} columns, got {}", cols.len())));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|e| HarnessError::Parse(format!("{s:?}: {e}")));
        let floats = |r: std::ops::Range<usize>| cols[r].iter().map(|s| float(s)).collect::<Result<Vec<_>, _>>();
        Ok(Self {
            seed: cols[0].parse().map_err(|e| HarnessError::Parse(format!("seed: {e}")))?,
            round: cols[1].parse().map_err(|e| HarnessError::Parse(format!("round: {e}")))?,
            domain_acc: floats(2..2 + domains)?,
            avg_acc: float(cols[2 + domains])?,
            client_ce: floats(3 + domains..3 + domains + clients)?,
            client_apc: floats(3 + domains + clients..want)?,
        })
    }
}

/// Parses a whole `metrics.csv`, using the header to size the rows.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<MetricsRow>), HarnessError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| HarnessError::Parse("empty file".into()))?.split(',').collect();
    let domains: Vec<String> = header
        .iter()
        .filter_map(|c| c.strip_prefix("acc_"))
        .map(str::to_string)
        .collect();
    let clients = header.iter().filter(|c| c.starts_with("ce_c")).count();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| MetricsRow::parse(l, domains.len(), clients))
        .collect::<Result<_, _>>()?;
    Ok((domains, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub domains: Vec<DomainScore>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub rounds: u32,
    pub report_last: u32,
    pub seeds: Vec<u64>,
    /// Seed mean of each domain's accuracy over the last `report_last` rounds.
    pub domains: Vec<DomainScore>,
    pub average: f64,
    pub per_seed: Vec<SeedSummary>,
}

/// Mean over the last `report_last` rounds of each seed, then over seeds.
pub fn summarize(
    method: &str,
    domains: &[String],
    rows: &[MetricsRow],
    seeds: &[u64],
    report_last: u32,
) -> Result<Summary, HarnessError> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut rounds = 0;
    for &seed in seeds {
        let mine: Vec<&MetricsRow> = rows.iter().filter(|r| r.seed == seed).collect();
        let last_round = mine.iter().map(|r| r.round).max().ok_or(HarnessError::Parse(format!("no rows for seed {seed}")))?;
        rounds = rounds.max(last_round);
        let first = last_round.saturating_sub(report_last) + 1;
        let tail: Vec<&&MetricsRow> = mine.iter().filter(|r| r.round >= first).collect();
        let n = tail.len() as f64;
        let accs: Vec<DomainScore> = domains
            .iter()
            .enumerate()
            .map(|(d, name)| DomainScore {
                domain: name.clone(),
                accuracy: tail.iter().map(|r| r.domain_acc[d]).sum::<f64>() / n,
            })
            .collect();
        per_seed.push(SeedSummary {
            seed,
            domains: accs,
            average: tail.iter().map(|r| r.avg_acc).sum::<f64>() / n,
        });
    }
    let s = per_seed.len() as f64;
    let domain_means = domains
        .iter()
        .enumerate()
        .map(|(d, name)| DomainScore {
            domain: name.clone(),
            accuracy: per_seed.iter().map(|p| p.domains[d].accuracy).sum::<f64>() / s,
        })
        .collect();
    Ok(Summary {
        method: method.to_string(),
        rounds,
        report_last,
        seeds: seeds.to_vec(),
        domains: domain_means,
        average: per_seed.iter().map(|p| p.average).sum::<f64>() / s,
        per_seed,
    })
}

/// Seed-mean average accuracy per round, rounds ascending from 1.
pub fn average_curve(rows: &[MetricsRow]) -> Vec<f64> {
    let rounds = rows.iter().map(|r| r.round).max().unwrap_or(0) as usize;
    let mut sum = vec![0.0; rounds];
    let mut count = vec![0usize; rounds];
    for r in rows {
        sum[r.round as usize - 1] += r.avg_acc;
        count[r.round as usize - 1] += 1;
    }
    sum.iter().zip(&count).map(|(s, c)| s / *c.max(&1) as f64).collect()
}

/// First 1-based round whose value reaches `target`.
pub fn first_round_reaching(curve: &[f64], target: f64) -> Option<u32> {
    curve.iter().position(|v| *v >= target).map(|i| i as u32 + 1)
}
