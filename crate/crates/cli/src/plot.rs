//! Loss curves as tab-separated columns and a static SVG chart.

use std::fmt::Write as _;

use fedsplit_core::fedcore::RoundReport;

/// Per-round series derived from metrics records.
#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub rounds: Vec<usize>,
    pub client_mean: Vec<f64>,
    pub per_client: Vec<Vec<f64>>,
    pub align_mean: Vec<Option<f64>>,
    pub adapter_norm: Vec<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn curves(reports: &[RoundReport]) -> Curves {
    let n_clients = reports.iter().map(|r| r.client_losses.len()).max().unwrap_or(0);
    let mut per_client = vec![Vec::new(); n_clients];
    for r in reports {
        for (i, slot) in per_client.iter_mut().enumerate() {
            slot.push(r.client_losses.get(i).map_or(f64::NAN, |c| c.loss));
        }
    }
    Curves {
        rounds: reports.iter().map(|r| r.round).collect(),
        client_mean: reports
            .iter()
            .map(|r| mean(&r.client_losses.iter().map(|c| c.loss).collect::<Vec<_>>()).unwrap_or(f64::NAN))
            .collect(),
        per_client,
        align_mean: reports.iter().map(|r| mean(&r.align_losses)).collect(),
        adapter_norm: reports.iter().map(|r| r.adapter_norm).collect(),
    }
}

pub fn to_tsv(c: &Curves) -> String {
    let mut out = String::from("round\tclient_mean");
    for i in 0..c.per_client.len() {
        write!(out, "\tclient_{i}").unwrap();
    }
    out.push_str("\talign_mean\tadapter_norm\n");
    for (k, r) in c.rounds.iter().enumerate() {
        write!(out, "{r}\t{}", c.client_mean[k]).unwrap();
        for col in &c.per_client {
            write!(out, "\t{}", col[k]).unwrap();
        }
        match c.align_mean[k] {
            Some(a) => write!(out, "\t{a}").unwrap(),
            None => out.push('\t'),
        }
        writeln!(out, "\t{}", c.adapter_norm[k]).unwrap();
    }
    out
}

const W: f64 = 720.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[allow(clippy::too_many_arguments)]
fn polyline(out: &mut String, xs: &[usize], ys: &[f64], x_max: f64, y_lo: f64, y_hi: f64, color: &str, width: f64) {
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| y.is_finite())
        .map(|(&x, &y)| {
            let px = PAD + (x as f64 / x_max.max(1.0)) * (W - 2.0 * PAD);
            let py = H - PAD - (y - y_lo) / (y_hi - y_lo).max(1e-12) * (H - 2.0 * PAD);
            format!("{px:.1},{py:.1}")
        })
        .collect();
    if !pts.is_empty() {
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
    }
}

/// Client losses (thin, one per client), their mean (thick) and the mean
/// alignment loss (dashed) against the round index.
pub fn to_svg(c: &Curves, title: &str) -> String {
    let all = c
        .client_mean
        .iter()
        .chain(c.per_client.iter().flatten())
        .chain(c.align_mean.iter().flatten())
        .copied()
        .filter(|v| v.is_finite());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in all {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let x_max = c.rounds.last().copied().unwrap_or(1) as f64;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#,
        W / 2.0
    )
    .unwrap();
    writeln!(
        out,
        r#"<path d="M{PAD},{PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    )
    .unwrap();
    for (v, y) in [(hi, PAD), (lo, H - PAD)] {
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#,
            PAD - 4.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">round</text>"#,
        W / 2.0,
        H - 15.0
    )
    .unwrap();
    for (i, col) in c.per_client.iter().enumerate() {
        polyline(&mut out, &c.rounds, col, x_max, lo, hi, COLORS[i % COLORS.len()], 1.0);
    }
    polyline(&mut out, &c.rounds, &c.client_mean, x_max, lo, hi, "black", 2.5);
    let align: Vec<f64> = c.align_mean.iter().map(|a| a.unwrap_or(f64::NAN)).collect();
    let before = out.len();
    polyline(&mut out, &c.rounds, &align, x_max, lo, hi, "#555555", 1.5);
    if out.len() > before {
        out.insert_str(before + "<polyline".len(), r#" stroke-dasharray="6,4""#);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedsplit_core::fedcore::ClientLoss;

    fn reports() -> Vec<RoundReport> {
        (0..3)
            .map(|r| RoundReport {
                round: r,
                client_losses: vec![
                    ClientLoss {
                        client_id: 0,
                        loss: 2.0 - r as f64 * 0.5,
                    },
                    ClientLoss {
                        client_id: 1,
                        loss: 1.0,
                    },
                ],
                align_losses: if r == 0 { vec![] } else { vec![0.5, 0.3] },
                adapter_norm: r as f64,
            })
            .collect()
    }

    #[test]
    fn tsv_columns() {
        let t = to_tsv(&curves(&reports()));
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(
            lines[0],
            "round\tclient_mean\tclient_0\tclient_1\talign_mean\tadapter_norm"
        );
        assert_eq!(lines[1], "0\t1.5\t2\t1\t\t0");
        assert_eq!(lines[3], "2\t1\t1\t1\t0.4\t2");
    }

    #[test]
    fn svg_has_one_line_per_series() {
        let s = to_svg(&curves(&reports()), "t");
        assert!(s.starts_with("<svg"));
        assert_eq!(s.matches("<polyline").count(), 4);
        assert_eq!(s.matches("stroke-dasharray").count(), 1);
    }
}
