//! POI records, the category-by-region count matrix with its observation mask,
//! and the feature transforms used by the POI-only baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, GridIndex};
use crate::linalg;
use crate::sparse::SparseMatrix;

/// The 28 default POI categories, in table order.
pub const DEFAULT_CATEGORIES: [&str; 28] = [
    "fast food",
    "coffee bar",
    "eateries",
    "fuel",
    "convenience store",
    "grocery",
    "supermarkets",
    "pharmacy",
    "amusement",
    "tutoring school",
    "shopping mall",
    "shopping center",
    "home improvement",
    "personal care",
    "fitness",
    "financial service",
    "theater",
    "hotel",
    "electronics store",
    "pets/veterinary",
    "retirement",
    "auto dealers",
    "auto rental",
    "auto service",
    "auto supply",
    "machinery",
    "shipping store",
    "park/lake(camping site)",
];

/// Ordered category table. Row position is the category index; `id` is the external label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTable {
    ids: Vec<String>,
    names: Vec<String>,
}

impl Default for CategoryTable {
    fn default() -> Self {
        CategoryTable {
            ids: (1..=DEFAULT_CATEGORIES.len()).map(|i| i.to_string()).collect(),
            names: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CategoryTable {
    pub fn new(ids: Vec<String>, names: Vec<String>) -> Result<Self> {
        if ids.len() != names.len() || ids.is_empty() {
            return Err(Error::Data("category table needs matching, non-empty id and name lists".into()));
        }
        Ok(CategoryTable { ids, names })
    }

    /// Reads an `id,name` CSV.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let (mut ids, mut names) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let (Some(id), Some(name)) = (rec.get(0), rec.get(1)) else {
                return Err(Error::Data("category rows need `id,name`".into()));
            };
            ids.push(id.to_owned());
            names.push(name.to_owned());
        }
        CategoryTable::new(ids, names)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["id", "name"])?;
        for (id, name) in self.ids.iter().zip(&self.names) {
            wtr.write_record([id, name])?;
        }
        wtr.flush().map_err(|e| Error::io("categories.csv", e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Resolves a category by case-insensitive name, then by id.
    pub fn lookup(&self, key: &str) -> Option<usize> {
        let key = key.trim();
        self.names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(key))
            .or_else(|| self.ids.iter().position(|i| i == key))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoiRecord {
    pub p: GeoPoint,
    pub category: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoiParse {
    pub records: Vec<PoiRecord>,
    /// Unknown category labels with their occurrence counts.
    pub rejected: BTreeMap<String, usize>,
    pub malformed: usize,
}

impl PoiParse {
    pub fn rejected_count(&self) -> usize {
        self.rejected.values().sum()
    }
}

/// Reads `lat,lon,category` rows; the category is a table name or id.
pub fn parse_pois<R: Read>(input: R, table: &CategoryTable) -> Result<PoiParse> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("poi csv is missing column `{name}`")))
    };
    let (c_lat, c_lon, c_cat) = (col("lat")?, col("lon")?, col("category")?);
    let mut out = PoiParse::default();
    for rec in rdr.records() {
        let rec = rec?;
        let point = (|| {
            let lat = rec.get(c_lat)?.parse().ok()?;
            let lon = rec.get(c_lon)?.parse().ok()?;
            GeoPoint::new(lat, lon).ok()
        })();
        let (Some(p), Some(cat)) = (point, rec.get(c_cat)) else {
            out.malformed += 1;
            continue;
        };
        match table.lookup(cat) {
            Some(category) => out.records.push(PoiRecord { p, category }),
            None => *out.rejected.entry(cat.to_owned()).or_default() += 1,
        }
    }
    Ok(out)
}

/// How the observation mask treats zero counts inside a region that has POIs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    /// Every entry of a region holding any POI is observed.
    #[default]
    Column,
    /// Only nonzero entries are observed.
    Element,
}

impl FromStr for MaskGranularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "column" => Ok(MaskGranularity::Column),
            "element" => Ok(MaskGranularity::Element),
            _ => Err(Error::Config(format!("mask must be `column` or `element`, got `{s}`"))),
        }
    }
}

/// Category-by-region POI counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PoiMatrix {
    pub counts: SparseMatrix,
    pub observed: Vec<bool>,
    pub categories: CategoryTable,
}

#[derive(Serialize, Deserialize)]
struct PoiSidecar {
    p_cat: usize,
    r: usize,
    categories: Vec<String>,
    ids: Vec<String>,
    observed_columns: usize,
}

pub fn build_poi_matrix(records: &[PoiRecord], grid: &GridIndex, table: &CategoryTable) -> Result<PoiMatrix> {
    let mut trips = Vec::with_capacity(records.len());
    for rec in records {
        if rec.category >= table.len() {
            return Err(Error::InvalidArgument(format!("category index {} not in table", rec.category)));
        }
        if let Some(col) = grid.locate(rec.p) {
            trips.push((rec.category, col, 1.0));
        }
    }
    let counts = SparseMatrix::from_triplets(table.len(), grid.len(), trips)?;
    Ok(PoiMatrix::from_counts(counts, table.clone()))
}

impl PoiMatrix {
    pub fn from_counts(counts: SparseMatrix, categories: CategoryTable) -> Self {
        let mut observed = vec![false; counts.ncols()];
        for (_, c, _) in counts.iter() {
            observed[c] = true;
        }
        PoiMatrix {
            counts,
            observed,
            categories,
        }
    }

    pub fn regions(&self) -> usize {
        self.counts.ncols()
    }

    pub fn n_categories(&self) -> usize {
        self.counts.nrows()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.counts.to_dense()
    }

    /// 0/1 indicator matrix with the shape of the counts.
    pub fn mask(&self, granularity: MaskGranularity) -> DMatrix<f64> {
        match granularity {
            MaskGranularity::Column => DMatrix::from_fn(self.n_categories(), self.regions(), |_, c| {
                if self.observed[c] {
                    1.0
                } else {
                    0.0
                }
            }),
            MaskGranularity::Element => {
                let mut m = DMatrix::zeros(self.n_categories(), self.regions());
                for (r, c, _) in self.counts.iter() {
                    m[(r, c)] = 1.0;
                }
                m
            }
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let coo = dir.join("poi.coo");
        self.counts
            .write_coo(crate::io::create(&coo)?)
            .map_err(|e| Error::io(&coo, e))?;
        let side = PoiSidecar {
            p_cat: self.n_categories(),
            r: self.regions(),
            categories: self.categories.names.clone(),
            ids: self.categories.ids.clone(),
            observed_columns: self.observed_count(),
        };
        crate::io::write_json(&dir.join("poi.json"), &side)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let side: PoiSidecar = crate::io::read_json(&dir.join("poi.json"))?;
        let counts = SparseMatrix::read_coo(crate::io::open(&dir.join("poi.coo"))?, side.p_cat, side.r)?;
        Ok(PoiMatrix::from_counts(counts, CategoryTable::new(side.ids, side.categories)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    RawPoi,
    TfIdf,
    SvdPoi,
    LatentV,
    LatentZ,
}

impl FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "raw_poi" | "rawpoi" => FeatureKind::RawPoi,
            "tfidf" | "tf_idf" => FeatureKind::TfIdf,
            "svd_poi" | "svdpoi" => FeatureKind::SvdPoi,
            "latent_v" | "latentv" => FeatureKind::LatentV,
            "latent_z" | "latentz" => FeatureKind::LatentZ,
            _ => return Err(Error::Config(format!("unknown feature kind `{s}`"))),
        })
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::RawPoi => "raw_poi",
            FeatureKind::TfIdf => "tfidf",
            FeatureKind::SvdPoi => "svd_poi",
            FeatureKind::LatentV => "latent_v",
            FeatureKind::LatentZ => "latent_z",
        })
    }
}

/// Region features: one column per region.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: DMatrix<f64>,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(data: DMatrix<f64>, kind: FeatureKind) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{kind} features contain non-finite values")));
        }
        Ok(FeatureMatrix { data, kind })
    }

    pub fn regions(&self) -> usize {
        self.data.ncols()
    }

    pub fn dims(&self) -> usize {
        self.data.nrows()
    }
}

pub fn raw_features(m: &PoiMatrix) -> FeatureMatrix {
    FeatureMatrix {
        data: m.dense(),
        kind: FeatureKind::RawPoi,
    }
}

/// TF-IDF over observed regions (documents) and categories (terms).
///
/// `tf = count / column total`, `idf = ln(n_obs / (1 + df)) + 1`; unobserved columns stay zero.
pub fn tfidf_transform(m: &PoiMatrix) -> Result<FeatureMatrix> {
    let n_obs = m.observed_count();
    if n_obs == 0 {
        return Err(Error::Data("tf-idf needs at least one region with POIs".into()));
    }
    let mut df = vec![0usize; m.n_categories()];
    for (r, c, _) in m.counts.iter() {
        if m.observed[c] {
            df[r] += 1;
        }
    }
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| (n_obs as f64 / (1.0 + d as f64)).ln() + 1.0)
        .collect();
    let totals = m.counts.col_sums();
    let mut out = DMatrix::zeros(m.n_categories(), m.regions());
    for (r, c, v) in m.counts.iter() {
        if m.observed[c] {
            out[(r, c)] = v / totals[c] * idf[r];
        }
    }
    FeatureMatrix::new(out, FeatureKind::TfIdf)
}

/// Rank-`t` embedding: row `i` is `sigma_i * v_i^T`, so each column embeds one region.
pub fn svd_features(f: &FeatureMatrix, t: usize) -> Result<FeatureMatrix> {
    let max = f.dims().min(f.regions());
    if t == 0 || t > max {
        return Err(Error::InvalidArgument(format!("svd rank {t} outside [1, {max}]")));
    }
    let d = linalg::svd(&f.data);
    let mut out = d.vt.rows(0, t).into_owned();
    for i in 0..t {
        out.row_mut(i).scale_mut(d.s[i]);
    }
    FeatureMatrix::new(out, FeatureKind::SvdPoi)
}
