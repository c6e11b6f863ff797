//! Seeded synthetic city with planted functional zones.
//!
//! Zones are Voronoi blobs on a geohash grid. POIs are drawn from per-zone
//! category distributions in a random subset of regions, and users move
//! between zones according to an hourly zone-to-zone rate table, producing
//! GPS stays at region centers with small jitter.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::activity::HOURS_PER_DAY;
use crate::error::{Error, Result};
use crate::geo::{enumerate_cells, BBox, GeoPoint, GridIndex, EARTH_RADIUS_M};
use crate::io;
use crate::poi::{CategoryTable, DEFAULT_CATEGORIES};

/// Monday 2024-01-01 00:00 UTC.
pub const DEFAULT_START: i64 = 1_704_067_200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCitySpec {
    pub width: usize,
    pub height: usize,
    pub level: usize,
    /// South-west corner, snapped down to the level's cell boundary.
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub zones: usize,
    pub seeds_per_zone: usize,
    /// Category weights per zone; an all-zero row plants no POIs.
    pub poi_weights: Vec<Vec<f64>>,
    /// Mean POI count of an observed region (at least one is always placed).
    pub poi_mean: f64,
    /// `trip_rates[from][to][hour]`: hourly rate of moving between zones.
    pub trip_rates: Vec<Vec<Vec<f64>>>,
    /// Relative probability of a user living in each zone.
    pub home_weights: Vec<f64>,
    pub observation_rate: f64,
    pub users: usize,
    /// Weekdays simulated, starting at `start`.
    pub days: usize,
    pub start: i64,
    pub sample_minutes: u32,
    pub jitter_m: f64,
    pub seed: u64,
}

fn cat(name: &str) -> usize {
    DEFAULT_CATEGORIES.iter().position(|c| *c == name).expect("default category")
}

impl SynthCitySpec {
    /// Four zones: commercial, work/education, outer, and a residential zone without POIs.
    pub fn four_zone(width: usize, height: usize, users: usize, observation_rate: f64, seed: u64) -> Self {
        const COMMERCIAL: usize = 0;
        const WORK: usize = 1;
        const OUTER: usize = 2;
        const RESIDENTIAL: usize = 3;
        let n_cat = DEFAULT_CATEGORIES.len();
        let weights = |pairs: &[(&str, f64)]| {
            let mut w = vec![0.0; n_cat];
            for (name, v) in pairs {
                w[cat(name)] = *v;
            }
            w
        };
        let poi_weights = vec![
            weights(&[
                ("fast food", 6.0),
                ("coffee bar", 5.0),
                ("eateries", 6.0),
                ("shopping mall", 3.0),
                ("shopping center", 3.0),
                ("theater", 2.0),
                ("personal care", 2.0),
                ("electronics store", 1.0),
            ]),
            weights(&[
                ("financial service", 6.0),
                ("tutoring school", 5.0),
                ("shipping store", 3.0),
                ("machinery", 2.0),
                ("coffee bar", 1.0),
                ("hotel", 2.0),
            ]),
            weights(&[
                ("park/lake(camping site)", 5.0),
                ("fuel", 4.0),
                ("auto service", 3.0),
                ("auto dealers", 2.0),
                ("home improvement", 3.0),
                ("retirement", 2.0),
                ("grocery", 2.0),
            ]),
            vec![0.0; n_cat],
        ];
        let mut rates = vec![vec![vec![0.0; HOURS_PER_DAY]; 4]; 4];
        let mut set = |from: usize, to: usize, hour: usize, rate: f64| rates[from][to][hour] = rate;
        set(RESIDENTIAL, WORK, 7, 0.5);
        set(OUTER, WORK, 7, 0.6);
        set(RESIDENTIAL, WORK, 8, 0.8);
        set(OUTER, WORK, 8, 0.8);
        set(WORK, COMMERCIAL, 12, 0.6);
        set(COMMERCIAL, WORK, 13, 1.5);
        set(WORK, OUTER, 16, 0.3);
        set(WORK, RESIDENTIAL, 17, 0.8);
        set(OUTER, RESIDENTIAL, 18, 0.4);
        set(RESIDENTIAL, COMMERCIAL, 19, 0.4);
        set(OUTER, COMMERCIAL, 19, 0.3);
        set(COMMERCIAL, RESIDENTIAL, 21, 1.0);
        set(COMMERCIAL, OUTER, 21, 1.0);
        SynthCitySpec {
            width,
            height,
            level: 6,
            origin_lat: 35.15625,
            origin_lon: -78.75,
            zones: 4,
            seeds_per_zone: 2,
            poi_weights,
            poi_mean: 5.0,
            trip_rates: rates,
            home_weights: vec![0.0, 0.0, 0.35, 0.65],
            observation_rate,
            users,
            days: 10,
            start: DEFAULT_START,
            sample_minutes: 20,
            jitter_m: 40.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("synthetic grid needs positive width and height".into());
        }
        if self.zones == 0 || self.seeds_per_zone == 0 {
            return bad("need at least one zone and one seed per zone".into());
        }
        if self.zones * self.seeds_per_zone > self.width * self.height {
            return bad("more zone seeds than grid cells".into());
        }
        if !(self.observation_rate > 0.0 && self.observation_rate <= 1.0) {
            return bad(format!("observation rate must lie in (0, 1], got {}", self.observation_rate));
        }
        if self.poi_weights.len() != self.zones || self.poi_weights.iter().any(|w| w.len() != DEFAULT_CATEGORIES.len()) {
            return bad("poi weights must be zones x categories".into());
        }
        let rates_ok = self.trip_rates.len() == self.zones
            && self
                .trip_rates
                .iter()
                .all(|row| row.len() == self.zones && row.iter().all(|h| h.len() == HOURS_PER_DAY));
        if !rates_ok {
            return bad("trip rates must be zones x zones x 24".into());
        }
        let all_rates = self.trip_rates.iter().flatten().flatten();
        let all_weights = self.poi_weights.iter().flatten().chain(&self.home_weights);
        if all_rates.chain(all_weights).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("rates and weights must be finite and nonnegative".into());
        }
        if self.home_weights.len() != self.zones || self.home_weights.iter().sum::<f64>() <= 0.0 {
            return bad("home weights must cover every zone and not all be zero".into());
        }
        if !(self.poi_mean >= 1.0) || !(self.jitter_m >= 0.0) || self.sample_minutes == 0 {
            return bad("poi_mean must be at least 1, jitter nonnegative, sampling interval positive".into());
        }
        Ok(())
    }

    /// The bounding box spanned by the grid.
    pub fn bbox(&self) -> Result<BBox> {
        let lat_bits = 5 * self.level / 2;
        let lon_bits = 5 * self.level - lat_bits;
        let dlat = 180.0 / (1u64 << lat_bits) as f64;
        let dlon = 360.0 / (1u64 << lon_bits) as f64;
        let lat0 = -90.0 + ((self.origin_lat + 90.0) / dlat).floor() * dlat;
        let lon0 = -180.0 + ((self.origin_lon + 180.0) / dlon).floor() * dlon;
        BBox::new(lat0, lon0, lat0 + self.height as f64 * dlat, lon0 + self.width as f64 * dlon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpsRow {
    pub user: usize,
    pub p: GeoPoint,
    pub t: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoiRow {
    pub p: GeoPoint,
    pub category: usize,
}

#[derive(Debug, Clone)]
pub struct SynthCity {
    pub grid: GridIndex,
    /// Planted zone per grid column.
    pub truth: Vec<usize>,
    pub gps: Vec<GpsRow>,
    pub pois: Vec<PoiRow>,
    /// Regions that received at least one POI.
    pub observed: Vec<bool>,
    pub categories: CategoryTable,
}

fn voronoi(spec: &SynthCitySpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let seeds: Vec<(f64, f64, usize)> = (0..spec.zones * spec.seeds_per_zone)
        .map(|i| {
            (
                rng.random_range(0.0..spec.height as f64),
                rng.random_range(0.0..spec.width as f64),
                i % spec.zones,
            )
        })
        .collect();
    let mut out = Vec::with_capacity(spec.width * spec.height);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
            let nearest = seeds
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                    let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one seed");
            out.push(nearest.2);
        }
    }
    out
}

fn weighted_index(weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return Some(i);
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0)
}

/// `center` displaced by a uniform draw from the disk of radius `radius_m`.
fn jitter(center: GeoPoint, radius_m: f64, rng: &mut ChaCha8Rng) -> GeoPoint {
    let d = radius_m * rng.random::<f64>().sqrt();
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let dlat = (d * theta.sin() / EARTH_RADIUS_M).to_degrees();
    let dlon = (d * theta.cos() / (EARTH_RADIUS_M * center.lat().to_radians().cos())).to_degrees();
    GeoPoint::new(center.lat() + dlat, center.lon() + dlon).expect("small offset stays valid")
}

const DAY_START_HOUR: i64 = 5;
const FIRST_MOVE_HOUR: usize = 6;
const DAY_END_HOUR: i64 = 23;
const RETURN_HOUR: usize = 22;

struct Stay {
    region: usize,
    arrive: i64,
    leave: i64,
}

fn emit_stay(stay: &Stay, user: usize, centers: &[GeoPoint], spec: &SynthCitySpec, rng: &mut ChaCha8Rng, out: &mut Vec<GpsRow>) {
    let step = spec.sample_minutes as i64 * 60;
    let mut t = stay.arrive;
    loop {
        out.push(GpsRow {
            user,
            p: jitter(centers[stay.region], spec.jitter_m, rng),
            t,
        });
        if t == stay.leave {
            break;
        }
        t = (t + step).min(stay.leave);
    }
}

/// Simulates the city. Output order is deterministic for a given spec.
pub fn gen_synthetic_city(spec: &SynthCitySpec) -> Result<SynthCity> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = enumerate_cells(spec.bbox()?, spec.level)?;
    debug_assert_eq!(grid.shape(), (spec.height, spec.width));
    let truth = voronoi(spec, &mut rng);
    let r = grid.len();
    let centers: Vec<GeoPoint> = (0..r).map(|i| grid.cell(i).bbox().center()).collect();
    let mut members = vec![Vec::new(); spec.zones];
    for (i, &z) in truth.iter().enumerate() {
        members[z].push(i);
    }

    let mut pois = Vec::new();
    let mut observed = vec![false; r];
    let extra = if spec.poi_mean > 1.0 {
        Some(Poisson::new(spec.poi_mean - 1.0).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    for i in 0..r {
        if !rng.random_bool(spec.observation_rate) {
            continue;
        }
        let w = &spec.poi_weights[truth[i]];
        if w.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let n = 1 + extra.as_ref().map_or(0, |d| d.sample(&mut rng) as usize);
        let cell = grid.cell(i).bbox();
        for _ in 0..n {
            let category = weighted_index(w, &mut rng).expect("positive weights");
            let lat = rng.random_range(cell.min_lat..cell.max_lat);
            let lon = rng.random_range(cell.min_lon..cell.max_lon);
            pois.push(PoiRow {
                p: GeoPoint::new(lat, lon)?,
                category,
            });
        }
        observed[i] = true;
    }

    let populated: Vec<f64> = spec
        .home_weights
        .iter()
        .zip(&members)
        .map(|(w, m)| if m.is_empty() { 0.0 } else { *w })
        .collect();
    let mut gps = Vec::new();
    for user in 0..spec.users {
        let home_zone = weighted_index(&populated, &mut rng)
            .ok_or_else(|| Error::Config("no populated zone can host homes".into()))?;
        let home = *members[home_zone].choose(&mut rng).expect("populated zone");
        for day in 0..spec.days {
            let week = (day / 5) as i64;
            let midnight = spec.start + (week * 7 + (day % 5) as i64) * 86_400;
            let mut stay = Stay {
                region: home,
                arrive: midnight + DAY_START_HOUR * 3600,
                leave: 0,
            };
            for hour in FIRST_MOVE_HOUR..=RETURN_HOUR {
                let zone = truth[stay.region];
                let dest = if hour == RETURN_HOUR {
                    (stay.region != home).then_some(home)
                } else {
                    let rates = spec.trip_rates[zone].iter().map(|h| h[hour]).collect::<Vec<_>>();
                    let total: f64 = rates.iter().sum();
                    if total > 0.0 && rng.random_bool(1.0 - (-total).exp()) {
                        let to = weighted_index(&rates, &mut rng).expect("positive total");
                        if to == home_zone {
                            Some(home)
                        } else {
                            members[to].choose(&mut rng).copied()
                        }
                    } else {
                        None
                    }
                };
                let Some(dest) = dest.filter(|&d| d != stay.region) else {
                    continue;
                };
                let leave = midnight + hour as i64 * 3600 + rng.random_range(0..1500);
                let travel = rng.random_range(300..600);
                stay.leave = leave;
                emit_stay(&stay, user, &centers, spec, &mut rng, &mut gps);
                stay = Stay {
                    region: dest,
                    arrive: leave + travel,
                    leave: 0,
                };
            }
            stay.leave = midnight + DAY_END_HOUR * 3600;
            emit_stay(&stay, user, &centers, spec, &mut rng, &mut gps);
        }
    }
    Ok(SynthCity {
        grid,
        truth,
        gps,
        pois,
        observed,
        categories: CategoryTable::default(),
    })
}

impl SynthCity {
    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Writes `gps.csv`, `pois.csv`, `categories.csv`, and `truth_labels.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_writer(io::create(&dir.join("gps.csv"))?);
        w.write_record(["user_id", "lat", "lon", "timestamp"])?;
        for row in &self.gps {
            w.write_record([
                format!("u{}", row.user),
                format!("{:.7}", row.p.lat()),
                format!("{:.7}", row.p.lon()),
                row.t.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("gps.csv"), e))?;

        let mut w = csv::Writer::from_writer(io::create(&dir.join("pois.csv"))?);
        w.write_record(["lat", "lon", "category"])?;
        for row in &self.pois {
            w.write_record([
                format!("{:.7}", row.p.lat()),
                format!("{:.7}", row.p.lon()),
                self.categories.name(row.category).to_owned(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("pois.csv"), e))?;

        self.categories.write_csv(io::create(&dir.join("categories.csv"))?)?;
        write_labels(&dir.join("truth_labels.csv"), &self.grid, &self.truth)
    }
}

/// Settings that recover the planted zones of [`SynthCitySpec::four_zone`]
/// cities: spectral HAP scaling with a constant step, a weaker `Z ≈ UᵀA`
/// coupling, and unit-norm region features for the CRF.
pub const SYNTH_FIT_SETTINGS: &str = "\
hap_scaling = spectral
alpha0 = 0.03
rho = 1
max_iter = 4000
lambda2 = 0.1
feature = latent_v
feature_scaling = l2
method = crf
beta = 1
";

/// A ready-to-run config for a city written with [`SynthCity::write`] into the same directory.
pub fn synthetic_config_text(spec: &SynthCitySpec) -> Result<String> {
    let b = spec.bbox()?;
    Ok(format!(
        "gps = gps.csv\npois = pois.csv\ncategories = categories.csv\noutput = out\n\
         bbox = {},{},{},{}\nlevel = {}\nc = {}\nseed = {}\n{SYNTH_FIT_SETTINGS}",
        b.min_lat, b.min_lon, b.max_lat, b.max_lon, spec.level, spec.zones, spec.seed
    ))
}

/// `geohash,column_index,label`, one row per grid column.
pub fn write_labels(path: &Path, grid: &GridIndex, labels: &[usize]) -> Result<()> {
    if labels.len() != grid.len() {
        return Err(Error::Shape(format!("{} labels for {} regions", labels.len(), grid.len())));
    }
    let mut w = csv::Writer::from_writer(io::create(path)?);
    w.write_record(["geohash", "column_index", "label"])?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([grid.cell(i).code(), &i.to_string(), &l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a labels file back into column order.
pub fn read_labels(path: &Path, grid: &GridIndex) -> Result<Vec<usize>> {
    let mut rdr = csv::Reader::from_reader(io::open(path)?);
    let mut labels = vec![None; grid.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let (Some(code), Some(label)) = (rec.get(0), rec.get(2)) else {
            return Err(Error::Data(format!("{}: short row", path.display())));
        };
        let cell = code.parse()?;
        let i = grid
            .index_of(&cell)
            .ok_or_else(|| Error::Data(format!("{}: cell {code} not in grid", path.display())))?;
        let l = label
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("{}: bad label `{label}`", path.display())))?;
        labels[i] = Some(l);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Data(format!("{}: no label for column {i}", path.display()))))
        .collect()
}
