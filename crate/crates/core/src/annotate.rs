//! Zone annotation from POI distributions.
//!
//! Each zone gets its mean POI vector, the vector normalized by its maximum,
//! and a difference score against all other zones whose positive entries name
//! the categories that set the zone apart.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::poi::{CategoryTable, PoiMatrix};

/// Mean raw POI counts over the regions labeled `zone`.
pub fn zone_pr(labels: &[usize], poi: &PoiMatrix, zone: usize) -> Result<Vec<f64>> {
    if labels.len() != poi.regions() {
        return Err(Error::Shape(format!("{} labels for {} regions", labels.len(), poi.regions())));
    }
    let members = labels.iter().filter(|&&l| l == zone).count();
    if members == 0 {
        return Err(Error::InvalidArgument(format!("zone {zone} has no regions")));
    }
    let mut pr = vec![0.0; poi.n_categories()];
    for (cat, col, v) in poi.counts.iter() {
        if labels[col] == zone {
            pr[cat] += v;
        }
    }
    pr.iter_mut().for_each(|x| *x /= members as f64);
    Ok(pr)
}

/// `pr / max(pr)`.
pub fn zone_npr(pr: &[f64]) -> Result<Vec<f64>> {
    let max = pr.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::InvalidArgument("zone has no POIs; its normalized distribution is undefined".into()));
    }
    Ok(pr.iter().map(|x| x / max).collect())
}

/// `G_s = (n − 1)·NPR_s − Σ_{j≠s} NPR_j` over the `n` given zones.
pub fn zone_g(nprs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = nprs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("difference scores need at least 2 zones, got {n}")));
    }
    let dim = nprs[0].len();
    if nprs.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("normalized distributions differ in length".into()));
    }
    Ok((0..n)
        .map(|s| {
            (0..dim)
                .map(|c| {
                    let others: f64 = (0..n).filter(|&j| j != s).map(|j| nprs[j][c]).sum();
                    (n - 1) as f64 * nprs[s][c] - others
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZoneProfile {
    pub zone: usize,
    pub members: usize,
    /// `None` for zones without regions.
    pub pr: Option<Vec<f64>>,
    /// `None` when the zone has no POIs.
    pub npr: Option<Vec<f64>>,
    /// `None` for zones left out of the comparison.
    pub g: Option<Vec<f64>>,
}

impl ZoneProfile {
    pub fn is_annotatable(&self) -> bool {
        self.npr.is_some()
    }
}

/// Profiles for zones `0..c`. Zones without POIs are excluded from the difference scores.
pub fn zone_profiles(labels: &[usize], poi: &PoiMatrix, c: usize) -> Result<Vec<ZoneProfile>> {
    let mut profiles = Vec::with_capacity(c);
    for zone in 0..c {
        let members = labels.iter().filter(|&&l| l == zone).count();
        let pr = if members > 0 { Some(zone_pr(labels, poi, zone)?) } else { None };
        let npr = pr.as_deref().and_then(|p| zone_npr(p).ok());
        profiles.push(ZoneProfile {
            zone,
            members,
            pr,
            npr,
            g: None,
        });
    }
    let idx: Vec<usize> = profiles.iter().filter(|p| p.is_annotatable()).map(|p| p.zone).collect();
    if idx.len() >= 2 {
        let nprs: Vec<Vec<f64>> = idx.iter().map(|&z| profiles[z].npr.clone().unwrap()).collect();
        for (&z, g) in idx.iter().zip(zone_g(&nprs)?) {
            profiles[z].g = Some(g);
        }
    }
    Ok(profiles)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedCategory {
    pub category: usize,
    pub name: String,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum ZoneReport {
    Ranked { zone: usize, significant: Vec<RankedCategory> },
    NoPoiInformation { zone: usize },
    /// Annotatable but fewer than two annotatable zones exist.
    NotCompared { zone: usize },
    Empty { zone: usize },
}

/// Positive-difference categories per zone, largest first; ties keep category order.
pub fn ranked_report(profiles: &[ZoneProfile], table: &CategoryTable) -> Vec<ZoneReport> {
    profiles
        .iter()
        .map(|p| match (&p.pr, &p.npr, &p.g) {
            (None, _, _) => ZoneReport::Empty { zone: p.zone },
            (_, None, _) => ZoneReport::NoPoiInformation { zone: p.zone },
            (_, Some(_), None) => ZoneReport::NotCompared { zone: p.zone },
            (_, _, Some(g)) => {
                let mut sig: Vec<RankedCategory> = g
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 0.0)
                    .map(|(c, &v)| RankedCategory {
                        category: c,
                        name: table.name(c).to_owned(),
                        g: v,
                    })
                    .collect();
                sig.sort_by(|a, b| b.g.total_cmp(&a.g).then(a.category.cmp(&b.category)));
                ZoneReport::Ranked {
                    zone: p.zone,
                    significant: sig,
                }
            }
        })
        .collect()
}

/// `zone,rank,category,g_value`; zones without POIs get one row with an empty rank.
pub fn write_report_csv<W: std::io::Write>(reports: &[ZoneReport], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["zone", "rank", "category", "g_value"])?;
    for rep in reports {
        match rep {
            ZoneReport::Ranked { zone, significant } => {
                for (rank, rc) in significant.iter().enumerate() {
                    wtr.write_record([zone.to_string(), (rank + 1).to_string(), rc.name.clone(), rc.g.to_string()])?;
                }
            }
            ZoneReport::NoPoiInformation { zone } => {
                wtr.write_record([zone.to_string(), String::new(), "no POI information".into(), String::new()])?;
            }
            ZoneReport::NotCompared { .. } | ZoneReport::Empty { .. } => {}
        }
    }
    wtr.flush().map_err(|e| Error::io("report.csv", e))
}

/// Side-by-side table of the ranked categories, one column pair per compared zone.
pub fn render_text_table(reports: &[ZoneReport]) -> String {
    let ranked: Vec<(usize, &Vec<RankedCategory>)> = reports
        .iter()
        .filter_map(|r| match r {
            ZoneReport::Ranked { zone, significant } => Some((*zone, significant)),
            _ => None,
        })
        .collect();
    let mut out = String::new();
    if ranked.is_empty() {
        out.push_str("No zone comparison: fewer than 2 zones carry POI information.\n");
    } else {
        let width = ranked
            .iter()
            .flat_map(|(_, s)| s.iter().map(|r| r.name.len()))
            .max()
            .unwrap_or(8)
            .max(8);
        let _ = write!(out, "{:<6}", "Rank");
        for (zone, _) in &ranked {
            let _ = write!(out, " | {:<width$} {:>7}", format!("Zone {zone}"), format!("G_{zone}"));
        }
        out.push('\n');
        let depth = ranked.iter().map(|(_, s)| s.len()).max().unwrap_or(0);
        for i in 0..depth {
            let _ = write!(out, "{:<6}", i + 1);
            for (_, sig) in &ranked {
                match sig.get(i) {
                    Some(rc) => {
                        let _ = write!(out, " | {:<width$} {:>7.3}", rc.name, rc.g);
                    }
                    None => {
                        let _ = write!(out, " | {:<width$} {:>7}", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
    }
    for r in reports {
        match r {
            ZoneReport::NoPoiInformation { zone } => {
                let _ = writeln!(out, "Zone {zone}: no POI information");
            }
            ZoneReport::NotCompared { zone } => {
                let _ = writeln!(out, "Zone {zone}: no other zone to compare against");
            }
            ZoneReport::Empty { zone } => {
                let _ = writeln!(out, "Zone {zone}: no regions");
            }
            ZoneReport::Ranked { .. } => {}
        }
    }
    out
}
