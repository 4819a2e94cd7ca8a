//! Decoding cost saved per scenario, net of draft training cost.

use serde::Serialize;
use specdec_lab::costmodel::savings;

use super::sweep::{evaluate, scenario_tau};
use crate::config::Loaded;
use crate::error::{CliError, CliResult};
use crate::output::{csv_bytes, two_decimals};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub multiplier: f64,
    pub decode_budget: f64,
    pub gross_savings: f64,
    pub train_cost: f64,
    pub net_savings: f64,
}

pub fn rows(loaded: &Loaded) -> CliResult<Vec<ReportRow>> {
    let config = &loaded.config;
    let report = config
        .report
        .as_ref()
        .ok_or_else(|| CliError::schema("report", "required"))?;
    let budget = report.decode_budget;
    report
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let multiplier = match (&e.multiplier, &e.at) {
                (Some(m), _) => *m,
                (None, Some(at)) => {
                    let sweep = config.sweep()?;
                    let scenario = sweep
                        .scenarios
                        .iter()
                        .find(|s| s.name == at.scenario)
                        .ok_or_else(|| CliError::schema(format!("report.entries[{i}].at.scenario"), format!("no sweep scenario '{}'", at.scenario)))?;
                    let draft = config.models()?.draft(&scenario.draft)?;
                    let tau = scenario_tau(loaded, scenario)?;
                    evaluate(config, &draft, tau, at.batch, at.context)?.multiplier
                }
                (None, None) => unreachable!("validated"),
            };
            if !(multiplier > 0.0) {
                return Err(CliError::NonPositiveMultiplier {
                    name: e.name.clone(),
                    value: multiplier,
                });
            }
            let gross = savings(multiplier, budget, 0.0)?;
            Ok(ReportRow {
                name: e.name.clone(),
                multiplier,
                decode_budget: budget,
                gross_savings: gross,
                train_cost: e.train_cost,
                net_savings: savings(multiplier, budget, e.train_cost)?,
            })
        })
        .collect()
}

/// Fixed-width table with two-decimal values.
pub fn text(rows: &[ReportRow]) -> String {
    let header = ["scenario", "multiplier", "budget", "saved", "train", "net"];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        table.push(vec![
            r.name.clone(),
            two_decimals(r.multiplier),
            two_decimals(r.decode_budget),
            two_decimals(r.gross_savings),
            two_decimals(r.train_cost),
            two_decimals(r.net_savings),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn csv(rows: &[ReportRow]) -> CliResult<Vec<u8>> {
    csv_bytes(rows)
}
