//! Geohash cells and the dense region grid built from them.
//!
//! Cells are addressed by the standard base-32 Geohash string. A [`GridIndex`]
//! enumerates every cell of one level that intersects a bounding box and maps
//! each to a dense column index, row-major from the north-west corner.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BASE32: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";
pub const MAX_LEVEL: usize = 12;
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

fn decode_char(c: u8) -> Option<u64> {
    BASE32.iter().position(|&b| b == c).map(|p| p as u64)
}

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidArgument(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidArgument(format!("longitude {lon} outside [-180, 180]")));
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self> {
        let vals = [min_lat, min_lon, max_lat, max_lon];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("bbox has non-finite bounds".into()));
        }
        if !(min_lat < max_lat && min_lon < max_lon) {
            return Err(Error::InvalidArgument(format!(
                "empty bbox: lat [{min_lat}, {max_lat}], lon [{min_lon}, {max_lon}]"
            )));
        }
        if min_lat < -90.0 || max_lat > 90.0 || min_lon < -180.0 || max_lon > 180.0 {
            return Err(Error::InvalidArgument("bbox outside WGS84 range".into()));
        }
        Ok(BBox {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        })
    }

    /// Closed containment.
    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat && p.lat <= self.max_lat && p.lon >= self.min_lon && p.lon <= self.max_lon
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: (self.min_lat + self.max_lat) / 2.0,
            lon: (self.min_lon + self.max_lon) / 2.0,
        }
    }

    /// Positive-area intersection.
    pub fn intersects(&self, other: &BBox) -> bool {
        self.min_lat < other.max_lat
            && other.min_lat < self.max_lat
            && self.min_lon < other.max_lon
            && other.min_lon < self.max_lon
    }

    /// East-west and north-south extent in meters, measured along the center latitude and meridian.
    pub fn dimensions_m(&self) -> (f64, f64) {
        let mid = (self.min_lat + self.max_lat) / 2.0;
        let west = GeoPoint { lat: mid, lon: self.min_lon };
        let east = GeoPoint { lat: mid, lon: self.max_lon };
        let south = GeoPoint { lat: self.min_lat, lon: self.min_lon };
        let north = GeoPoint { lat: self.max_lat, lon: self.min_lon };
        (haversine_m(west, east), haversine_m(south, north))
    }
}

fn bit_split(level: usize) -> (u32, u32) {
    let total = 5 * level as u32;
    (total.div_ceil(2), total / 2)
}

fn check_level(level: usize) -> Result<()> {
    if (1..=MAX_LEVEL).contains(&level) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("geohash level {level} outside [1, {MAX_LEVEL}]")))
    }
}

/// Index of the half-open dyadic interval containing `x`, found by repeated bisection.
fn bisect_index(x: f64, mut lo: f64, mut hi: f64, bits: u32) -> u64 {
    let mut idx = 0u64;
    for _ in 0..bits {
        let mid = (lo + hi) / 2.0;
        idx <<= 1;
        if x >= mid {
            idx |= 1;
            lo = mid;
        } else {
            hi = mid;
        }
    }
    idx
}

fn interleave(lon_idx: u64, lat_idx: u64, level: usize) -> u64 {
    let (lon_bits, lat_bits) = bit_split(level);
    let total = lon_bits + lat_bits;
    let mut bits = 0u64;
    let (mut li, mut ai) = (lon_bits, lat_bits);
    for b in 0..total {
        bits <<= 1;
        if b % 2 == 0 {
            li -= 1;
            bits |= (lon_idx >> li) & 1;
        } else {
            ai -= 1;
            bits |= (lat_idx >> ai) & 1;
        }
    }
    bits
}

fn deinterleave(bits: u64, level: usize) -> (u64, u64) {
    let total = 5 * level as u32;
    let (mut lon_idx, mut lat_idx) = (0u64, 0u64);
    for b in 0..total {
        let bit = (bits >> (total - 1 - b)) & 1;
        if b % 2 == 0 {
            lon_idx = (lon_idx << 1) | bit;
        } else {
            lat_idx = (lat_idx << 1) | bit;
        }
    }
    (lon_idx, lat_idx)
}

/// A Geohash cell. The level is the code length.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId(String);

impl CellId {
    pub fn parse(code: &str) -> Result<Self> {
        if code.is_empty() || code.len() > MAX_LEVEL {
            return Err(Error::InvalidArgument(format!(
                "geohash `{code}` must have 1..={MAX_LEVEL} characters"
            )));
        }
        if let Some(bad) = code.bytes().find(|&b| decode_char(b).is_none()) {
            return Err(Error::InvalidArgument(format!(
                "geohash `{code}` has invalid character `{}`",
                bad as char
            )));
        }
        Ok(CellId(code.to_owned()))
    }

    fn from_indices(lon_idx: u64, lat_idx: u64, level: usize) -> Self {
        let bits = interleave(lon_idx, lat_idx, level);
        let code = (0..level)
            .map(|i| BASE32[((bits >> (5 * (level - 1 - i))) & 31) as usize] as char)
            .collect();
        CellId(code)
    }

    pub fn code(&self) -> &str {
        &self.0
    }

    pub fn level(&self) -> usize {
        self.0.len()
    }

    fn indices(&self) -> (u64, u64) {
        let bits = self
            .0
            .bytes()
            .fold(0u64, |acc, c| (acc << 5) | decode_char(c).expect("validated at construction"));
        deinterleave(bits, self.level())
    }

    /// The cell's bounding box. Lower edges are inclusive.
    pub fn bbox(&self) -> BBox {
        let (lon_idx, lat_idx) = self.indices();
        let (lon_bits, lat_bits) = bit_split(self.level());
        let dlon = 360.0 / (1u64 << lon_bits) as f64;
        let dlat = 180.0 / (1u64 << lat_bits) as f64;
        BBox {
            min_lat: -90.0 + lat_idx as f64 * dlat,
            max_lat: -90.0 + (lat_idx + 1) as f64 * dlat,
            min_lon: -180.0 + lon_idx as f64 * dlon,
            max_lon: -180.0 + (lon_idx + 1) as f64 * dlon,
        }
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellId::parse(s)
    }
}

pub fn encode(p: GeoPoint, level: usize) -> Result<CellId> {
    check_level(level)?;
    let (lon_bits, lat_bits) = bit_split(level);
    let lon_idx = bisect_index(p.lon, -180.0, 180.0, lon_bits);
    let lat_idx = bisect_index(p.lat, -90.0, 90.0, lat_bits);
    Ok(CellId::from_indices(lon_idx, lat_idx, level))
}

pub fn decode(code: &str) -> Result<BBox> {
    Ok(CellId::parse(code)?.bbox())
}

/// Dense index over all cells of one level intersecting a bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct GridIndex {
    bbox: BBox,
    level: usize,
    rows: usize,
    cols: usize,
    cells: Vec<CellId>,
    index: HashMap<CellId, usize>,
}

/// All level-`level` cells intersecting `bbox`, row-major from the north-west corner.
pub fn enumerate_cells(bbox: BBox, level: usize) -> Result<GridIndex> {
    check_level(level)?;
    BBox::new(bbox.min_lat, bbox.min_lon, bbox.max_lat, bbox.max_lon)?;
    let (lon_bits, lat_bits) = bit_split(level);
    let dlon = 360.0 / (1u64 << lon_bits) as f64;
    let dlat = 180.0 / (1u64 << lat_bits) as f64;

    let lat_lo = bisect_index(bbox.min_lat, -90.0, 90.0, lat_bits);
    let mut lat_hi = bisect_index(bbox.max_lat, -90.0, 90.0, lat_bits);
    if -90.0 + lat_hi as f64 * dlat >= bbox.max_lat {
        lat_hi -= 1;
    }
    let lon_lo = bisect_index(bbox.min_lon, -180.0, 180.0, lon_bits);
    let mut lon_hi = bisect_index(bbox.max_lon, -180.0, 180.0, lon_bits);
    if -180.0 + lon_hi as f64 * dlon >= bbox.max_lon {
        lon_hi -= 1;
    }

    let rows = (lat_hi - lat_lo + 1) as usize;
    let cols = (lon_hi - lon_lo + 1) as usize;
    let mut cells = Vec::with_capacity(rows * cols);
    for lat_idx in (lat_lo..=lat_hi).rev() {
        for lon_idx in lon_lo..=lon_hi {
            cells.push(CellId::from_indices(lon_idx, lat_idx, level));
        }
    }
    let index = cells.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    Ok(GridIndex {
        bbox,
        level,
        rows,
        cols,
        cells,
        index,
    })
}

impl GridIndex {
    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Grid shape as (rows, cols); row 0 is the northern edge.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cells(&self) -> &[CellId] {
        &self.cells
    }

    pub fn cell(&self, column: usize) -> &CellId {
        &self.cells[column]
    }

    pub fn index_of(&self, cell: &CellId) -> Option<usize> {
        self.index.get(cell).copied()
    }

    /// The region map: column of the cell containing `p`, if that cell is in the grid.
    pub fn locate(&self, p: GeoPoint) -> Option<usize> {
        encode(p, self.level).ok().and_then(|c| self.index_of(&c))
    }

    /// Same-level adjacent cells present in the grid, row-major (NW, N, NE, W, E, SW, S, SE).
    pub fn neighbors8(&self, cell: &CellId) -> Result<Vec<CellId>> {
        if self.index_of(cell).is_none() {
            return Err(Error::InvalidArgument(format!("cell {cell} is not in the grid")));
        }
        let b = cell.bbox();
        let c = b.center();
        let (dlat, dlon) = (b.max_lat - b.min_lat, b.max_lon - b.min_lon);
        let mut out = Vec::with_capacity(8);
        for dy in [1.0, 0.0, -1.0] {
            for dx in [-1.0, 0.0, 1.0] {
                if dy == 0.0 && dx == 0.0 {
                    continue;
                }
                let (lat, lon) = (c.lat + dy * dlat, c.lon + dx * dlon);
                if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                    continue;
                }
                let n = encode(GeoPoint { lat, lon }, self.level)?;
                if self.index.contains_key(&n) {
                    out.push(n);
                }
            }
        }
        Ok(out)
    }

    /// Column indices of [`GridIndex::neighbors8`] for every column.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        self.cells
            .iter()
            .map(|c| {
                self.neighbors8(c)
                    .expect("grid cell")
                    .iter()
                    .map(|n| self.index[n])
                    .collect()
            })
            .collect()
    }

    /// `cells.csv`: column_index, geohash, min_lat, min_lon, max_lat, max_lon.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["column_index", "geohash", "min_lat", "min_lon", "max_lat", "max_lon"])?;
        for (i, c) in self.cells.iter().enumerate() {
            let b = c.bbox();
            wtr.write_record([
                i.to_string(),
                c.to_string(),
                b.min_lat.to_string(),
                b.min_lon.to_string(),
                b.max_lat.to_string(),
                b.max_lon.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("cells.csv", e))?;
        Ok(())
    }

    /// Rebuilds the grid from a `cells.csv` manifest, checking it against a fresh enumeration.
    pub fn read_csv<R: Read>(r: R, bbox: BBox, level: usize) -> Result<Self> {
        let grid = enumerate_cells(bbox, level)?;
        let mut rdr = csv::Reader::from_reader(r);
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec?;
            let col: usize = rec[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad column index `{}`", &rec[0])))?;
            let cell = CellId::parse(&rec[1])?;
            if grid.index_of(&cell) != Some(col) {
                return Err(Error::Data(format!("cells.csv row {col} ({cell}) does not match the grid")));
            }
            n += 1;
        }
        if n != grid.len() {
            return Err(Error::Data(format!("cells.csv has {n} rows, grid has {}", grid.len())));
        }
        Ok(grid)
    }
}
