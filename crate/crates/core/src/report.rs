//! Report emission: CSV, JSON, per-figure plot data, and the layer-search
//! evaluation log.
//!
//! Floats are printed with Rust's shortest round-trip formatting, so a value
//! parsed back from CSV or JSON is the identical f64 and the
//! `adv_loss = clean_acc - adv_acc` identity survives re-parsing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attacks::{AttackKind, AttackMode, ReportRow};
use crate::error::{Error, Result};
use crate::search::EvalLogEntry;

pub const CSV_HEADER: &str = "model_id,attack,mode,epsilon,clean_acc,adv_acc,adv_loss";

/// Writes the fixed-schema report CSV. Empty input yields a header-only file.
pub fn write_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        if r.model_id.contains(',') {
            return Err(Error::Config(format!(
                "model id '{}' must not contain commas",
                r.model_id
            )));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.model_id,
            r.attack.as_str(),
            r.mode.as_str(),
            r.epsilon.label(),
            r.clean_acc,
            r.adv_acc,
            r.adv_loss
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a report CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "{}: bad report header {other:?}",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!(
                "{}: line {} has {} fields, expected 7",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::Format(format!("{}: line {}: bad {what} '{s}'", path.display(), i + 2))
            })
        };
        rows.push(ReportRow {
            model_id: fields[0].to_string(),
            attack: fields[1].parse()?,
            mode: match fields[2] {
                "SW" => AttackMode::Sw,
                "SH" => AttackMode::Sh,
                "HH" => AttackMode::Hh,
                other => {
                    return Err(Error::Format(format!(
                        "{}: line {}: unknown mode '{other}'",
                        path.display(),
                        i + 2
                    )))
                }
            },
            epsilon: fields[3].parse()?,
            clean_acc: parse_f(fields[4], "clean_acc")?,
            adv_acc: parse_f(fields[5], "adv_acc")?,
            adv_loss: parse_f(fields[6], "adv_loss")?,
        });
    }
    Ok(rows)
}

pub fn write_json(rows: &[ReportRow], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<Vec<ReportRow>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Per-figure plot data: for each attack kind, the adversarial-loss series
/// of every mode over the epsilon grid (`plot_<attack>_al_vs_eps.csv`).
pub fn write_plot_data(rows: &[ReportRow], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for kind in [AttackKind::Fgsm, AttackKind::Pgd] {
        let kind_rows: Vec<&ReportRow> = rows.iter().filter(|r| r.attack == kind).collect();
        if kind_rows.is_empty() {
            continue;
        }
        let modes: Vec<AttackMode> = [AttackMode::Sw, AttackMode::Sh, AttackMode::Hh]
            .into_iter()
            .filter(|m| kind_rows.iter().any(|r| r.mode == *m))
            .collect();
        // epsilon grid in first-seen order
        let mut eps_order: Vec<String> = Vec::new();
        for r in &kind_rows {
            if !eps_order.iter().any(|e| e == r.epsilon.label()) {
                eps_order.push(r.epsilon.label().to_string());
            }
        }
        let mut table: BTreeMap<(String, AttackMode), f64> = BTreeMap::new();
        for r in &kind_rows {
            table.insert((r.epsilon.label().to_string(), r.mode), r.adv_loss);
        }
        let mut out = String::from("epsilon");
        for m in &modes {
            out.push_str(&format!(",al_{}", m.as_str().to_ascii_lowercase()));
        }
        out.push('\n');
        for eps in &eps_order {
            out.push_str(eps);
            for m in &modes {
                match table.get(&(eps.clone(), *m)) {
                    Some(al) => out.push_str(&format!(",{al}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        let path = dir.join(format!("plot_{}_al_vs_eps.csv", kind.as_str()));
        fs::write(&path, out)?;
        written.push(path);
    }
    Ok(written)
}

/// Full layer-search evaluation log as CSV.
pub fn write_search_log(entries: &[EvalLogEntry], path: &Path) -> Result<()> {
    let mut out = String::from("phase,layers,ratios,vdd,adv_accuracy\n");
    for e in entries {
        let layers = e
            .layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join("+");
        let ratios = e
            .ratios
            .iter()
            .map(|(n8, n6)| format!("{n8}/{n6}"))
            .collect::<Vec<_>>()
            .join("+");
        out.push_str(&format!(
            "{},{layers},{ratios},{},{}\n",
            match e.phase {
                crate::search::SearchPhase::Sweep => "sweep",
                crate::search::SearchPhase::Combine => "combine",
            },
            e.vdd,
            e.adv_accuracy
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes report.csv, report.json and plot data into `dir`; returns every
/// file written.
pub fn emit_report(rows: &[ReportRow], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("report.csv");
    let json_path = dir.join("report.json");
    write_csv(rows, &csv_path)?;
    write_json(rows, &json_path)?;
    let mut written = vec![csv_path, json_path];
    written.extend(write_plot_data(rows, dir)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Epsilon;
    use proptest::prelude::*;

    fn row(mode: AttackMode, eps: &str, ca: f64, aa: f64) -> ReportRow {
        ReportRow::new(
            "desk-cnn",
            AttackKind::Fgsm,
            mode,
            eps.parse().unwrap(),
            ca,
            aa,
        )
    }

    #[test]
    fn empty_rows_yield_header_only_csv() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("report.csv");
        write_csv(&[], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{CSV_HEADER}\n"));
        assert!(read_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trip_preserves_identity() {
        let rows = vec![
            row(AttackMode::Sw, "0.1", 97.3, 41.2),
            row(AttackMode::Sh, "8/255", 95.65, 60.1),
        ];
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("report.csv");
        write_csv(&rows, &path).unwrap();
        let parsed = read_csv(&path).unwrap();
        assert_eq!(rows, parsed);
        for r in &parsed {
            assert_eq!(r.adv_loss, r.clean_acc - r.adv_acc);
        }
    }

    #[test]
    fn plot_data_has_one_file_per_attack_kind() {
        let mut rows = vec![
            row(AttackMode::Sw, "0.05", 97.0, 80.0),
            row(AttackMode::Sh, "0.05", 96.0, 85.0),
            row(AttackMode::Sw, "0.1", 97.0, 60.0),
            row(AttackMode::Sh, "0.1", 96.0, 75.0),
        ];
        rows.push(ReportRow::new(
            "desk-cnn",
            AttackKind::Pgd,
            AttackMode::Hh,
            "2/255".parse().unwrap(),
            96.0,
            70.0,
        ));
        let tmp = tempfile::tempdir().unwrap();
        let files = write_plot_data(&rows, tmp.path()).unwrap();
        assert_eq!(files.len(), 2);
        let fgsm = fs::read_to_string(tmp.path().join("plot_fgsm_al_vs_eps.csv")).unwrap();
        let mut lines = fgsm.lines();
        assert_eq!(lines.next().unwrap(), "epsilon,al_sw,al_sh");
        assert_eq!(lines.next().unwrap(), "0.05,17,11");
    }

    proptest! {
        #[test]
        fn json_round_trip(
            entries in proptest::collection::vec(
                (0.0f64..100.0, 0.0f64..100.0, 0u32..40, prop_oneof![Just(true), Just(false)]),
                0..12
            )
        ) {
            let rows: Vec<ReportRow> = entries
                .iter()
                .map(|(ca, aa, k, frac)| {
                    let eps = if *frac {
                        Epsilon::fraction(*k, 255).unwrap()
                    } else {
                        Epsilon::new(*k as f64 / 40.0).unwrap()
                    };
                    ReportRow::new("m", AttackKind::Pgd, AttackMode::Hh, eps, *ca, *aa)
                })
                .collect();
            let tmp = tempfile::tempdir().unwrap();
            let path = tmp.path().join("r.json");
            write_json(&rows, &path).unwrap();
            let parsed = read_json(&path).unwrap();
            prop_assert_eq!(rows, parsed);
        }
    }
}
