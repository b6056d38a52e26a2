use super::{agreement_flags, EvalError, MetricsReport, PredictionSet};

/// Metrics of one (noise level, regime) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub noise: f64,
    pub regime: String,
    pub metrics: MetricsReport,
}

fn csv_string(header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("write to memory");
    for r in records {
        w.write_record(&r).expect("write to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 csv")
}

pub fn results_csv(rows: &[ReportRow]) -> String {
    csv_string(
        &["noise", "regime", "n_runs", "em_mean", "em_std", "agr", "run_em"],
        rows.iter().map(|r| {
            let m = &r.metrics;
            vec![
                format!("{:.2}", r.noise),
                r.regime.clone(),
                m.n_runs.to_string(),
                format!("{:.4}", m.em_mean),
                format!("{:.4}", m.em_std),
                format!("{:.4}", m.agr),
                m.run_em
                    .iter()
                    .map(|e| format!("{e:.2}"))
                    .collect::<Vec<_>>()
                    .join(" "),
            ]
        }),
    )
}

fn unique<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn aligned(header: Vec<String>, body: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
    for row in &body {
        out.push_str(&line(row));
    }
    out
}

/// Regimes down, noise levels across; each cell `EM mean ± std | AGR`.
pub fn results_table(rows: &[ReportRow]) -> String {
    let noises = unique(rows.iter().map(|r| format!("{:.2}", r.noise)));
    let regimes = unique(rows.iter().map(|r| r.regime.clone()));
    let n = unique(rows.iter().map(|r| r.metrics.n_runs));
    let mut header = vec!["regime".to_string()];
    header.extend(noises.iter().map(|x| format!("noise {x}: EM | AGR")));
    let body = regimes
        .iter()
        .map(|reg| {
            let mut cells = vec![reg.clone()];
            for x in &noises {
                let cell = rows
                    .iter()
                    .find(|r| &r.regime == reg && &format!("{:.2}", r.noise) == x)
                    .map(|r| {
                        let m = &r.metrics;
                        format!("{:.2} ± {:.2} | {:.2}", m.em_mean, m.em_std, m.agr)
                    })
                    .unwrap_or_else(|| "-".to_string());
                cells.push(cell);
            }
            cells
        })
        .collect();
    let runs = n
        .iter()
        .map(|k| k.to_string())
        .collect::<Vec<_>>()
        .join("/");
    format!(
        "EM: exact match, mean ± population std over N={runs} runs. \
         AGR: % of examples on which all runs agree.\n\n{}",
        aligned(header, body)
    )
}

fn ledger_rows(rows: &[ReportRow]) -> Vec<Vec<String>> {
    let regimes = unique(rows.iter().map(|r| r.regime.clone()));
    regimes
        .iter()
        .filter_map(|reg| {
            let l = rows.iter().find(|r| &r.regime == reg)?.metrics.ledger?;
            Some(vec![
                reg.clone(),
                l.training.to_string(),
                l.inference.to_string(),
            ])
        })
        .collect()
}

pub fn ledger_csv(rows: &[ReportRow]) -> String {
    csv_string(&["regime", "training", "inference"], ledger_rows(rows))
}

/// Parameter cost per regime; `*` marks work that can run in parallel.
pub fn ledger_table(rows: &[ReportRow]) -> String {
    let header = ["regime", "training", "inference"].map(String::from).to_vec();
    format!(
        "Cost in parameters relative to one baseline model. * = parallelizable.\n\n{}",
        aligned(header, ledger_rows(rows))
    )
}

/// Examples on which the runs do not all agree, one column per run.
pub fn disagreements_tsv(runs: &[PredictionSet]) -> Result<String, EvalError> {
    let flags = agreement_flags(runs)?;
    let mut out = String::from("id");
    for r in runs {
        out.push('\t');
        out.push_str(&r.run_id);
    }
    out.push('\n');
    for (id, _) in flags.iter().filter(|(_, &agree)| !agree) {
        out.push_str(&id.to_string());
        for r in runs {
            out.push('\t');
            out.push_str(&r.predictions[id]);
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::evaluation::{resource_ledger, MetricsReport};
    use crate::training::{Method, RegimeConfig};

    fn row(noise: f64, regime: &str, em: f64, agr: f64) -> ReportRow {
        let method = if regime == "ensemble" { Method::Ensemble } else { Method::Baseline };
        ReportRow {
            noise,
            regime: regime.into(),
            metrics: MetricsReport {
                em_mean: em,
                em_std: 0.5,
                agr,
                n_runs: 5,
                run_em: vec![em; 5],
                agreement: BTreeMap::new(),
                ledger: Some(resource_ledger(&RegimeConfig::new(method), 1, 1)),
            },
        }
    }

    #[test]
    fn results_layout() {
        let rows = [
            row(0.0, "baseline", 87.76, 83.0),
            row(0.1, "baseline", 86.0, 75.8),
            row(0.0, "ensemble", 88.0, 90.0),
        ];
        let t = results_table(&rows);
        assert!(t.contains("N=5"));
        let lines: Vec<&str> = t.lines().skip(2).collect();
        assert!(lines[0].starts_with("regime"));
        assert!(lines[2].contains("87.76 ± 0.50 | 83.00"));
        assert!(lines[2].contains("86.00 ± 0.50 | 75.80"));
        assert!(lines[3].starts_with("ensemble"));
        assert!(lines[3].trim_end().ends_with('-'));
        let csv = results_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("0.00,baseline,5,87.7600,0.5000,83.0000,"));

        let l = ledger_table(&rows);
        assert!(l.contains("3*x"));
        assert_eq!(ledger_csv(&rows).lines().collect::<Vec<_>>(), [
            "regime,training,inference",
            "baseline,1x,1x",
            "ensemble,3*x,3*x"
        ]);
    }

    #[test]
    fn disagreement_dump() {
        let mk = |id: &str, p: [&str; 3]| {
            PredictionSet::new(id, 0, p.iter().enumerate().map(|(i, s)| (i as u64, s.to_string())).collect())
        };
        let runs = [mk("s1", ["a", "b", "c"]), mk("s2", ["a", "x", "c"])];
        assert_eq!(disagreements_tsv(&runs).unwrap(), "id\ts1\ts2\n1\tb\tx\n");
    }
}
