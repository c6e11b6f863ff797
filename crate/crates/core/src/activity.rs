//! GPS trajectories, stay-point (human activity) detection, and the hourly
//! human-activity-pattern matrix built from consecutive activities.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDateTime, TimeZone, Timelike, Utc, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_m, GeoPoint, GridIndex};
use crate::sparse::SparseMatrix;

pub const HOURS_PER_DAY: usize = 24;
pub const DEFAULT_STAY_RADIUS_M: f64 = 200.0;
pub const DEFAULT_STAY_SECONDS: i64 = 1200;

/// Fixed UTC offset used to bucket timestamps into local hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timezone(FixedOffset);

impl Timezone {
    pub fn utc() -> Self {
        Timezone(FixedOffset::east_opt(0).unwrap())
    }

    pub fn offset(&self) -> FixedOffset {
        self.0
    }

    fn local(&self, t: i64) -> DateTime<FixedOffset> {
        self.0.timestamp_opt(t, 0).single().expect("fixed offsets are unambiguous")
    }

    pub fn hour_of(&self, t: i64) -> usize {
        self.local(t).hour() as usize
    }

    pub fn weekday_of(&self, t: i64) -> Weekday {
        self.local(t).weekday()
    }
}

impl Default for Timezone {
    fn default() -> Self {
        Timezone::utc()
    }
}

impl FromStr for Timezone {
    type Err = Error;

    /// Accepts `UTC`, `Z`, or `+HH:MM` / `-HH:MM`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("utc") || s == "Z" {
            return Ok(Timezone::utc());
        }
        let bad = || Error::Config(format!("timezone `{s}` is not UTC or a +HH:MM offset"));
        let (sign, rest) = match s.as_bytes().first() {
            Some(b'+') => (1, &s[1..]),
            Some(b'-') => (-1, &s[1..]),
            _ => return Err(bad()),
        };
        let (h, m) = rest.split_once(':').unwrap_or((rest, "0"));
        let h: i32 = h.parse().map_err(|_| bad())?;
        let m: i32 = m.parse().map_err(|_| bad())?;
        if h > 23 || m > 59 {
            return Err(bad());
        }
        FixedOffset::east_opt(sign * (h * 3600 + m * 60))
            .map(Timezone)
            .ok_or_else(bad)
    }
}

impl fmt::Display for Timezone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let secs = self.0.local_minus_utc();
        if secs == 0 {
            return f.write_str("UTC");
        }
        let sign = if secs < 0 { '-' } else { '+' };
        let secs = secs.abs();
        write!(f, "{sign}{:02}:{:02}", secs / 3600, (secs % 3600) / 60)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajPoint {
    pub p: GeoPoint,
    /// UTC epoch seconds.
    pub t: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub user_id: String,
    pub points: Vec<TrajPoint>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GpsData {
    /// One trajectory per user, ordered by user id, each time-sorted.
    pub trajectories: Vec<Trajectory>,
    pub rows: usize,
    pub malformed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimeFormat {
    Epoch,
    Iso,
}

fn detect_time_format(s: &str) -> Option<TimeFormat> {
    if s.trim().parse::<i64>().is_ok() {
        Some(TimeFormat::Epoch)
    } else if parse_iso(s).is_some() {
        Some(TimeFormat::Iso)
    } else {
        None
    }
}

fn parse_iso(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|dt| Utc.from_utc_datetime(&dt).timestamp())
}

fn parse_time(s: &str, fmt: TimeFormat) -> Option<i64> {
    match fmt {
        TimeFormat::Epoch => s.trim().parse().ok(),
        TimeFormat::Iso => parse_iso(s),
    }
}

/// Reads `user_id,lat,lon,timestamp` rows into per-user time-sorted trajectories.
///
/// The timestamp format (epoch seconds or ISO-8601) is fixed by the first row
/// whose timestamp parses. Malformed rows are skipped and counted; more than
/// half malformed aborts.
pub fn parse_gps<R: Read>(input: R) -> Result<GpsData> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("gps csv is missing column `{name}`")))
    };
    let (c_user, c_lat, c_lon, c_t) = (col("user_id")?, col("lat")?, col("lon")?, col("timestamp")?);

    let mut fmt = None;
    let mut by_user: BTreeMap<String, Vec<TrajPoint>> = BTreeMap::new();
    let (mut rows, mut malformed) = (0usize, 0usize);
    for rec in rdr.records() {
        let rec = rec?;
        rows += 1;
        let parsed = (|| {
            let user = rec.get(c_user).filter(|u| !u.is_empty())?;
            let lat: f64 = rec.get(c_lat)?.parse().ok()?;
            let lon: f64 = rec.get(c_lon)?.parse().ok()?;
            let ts = rec.get(c_t)?;
            if fmt.is_none() {
                fmt = detect_time_format(ts);
            }
            let t = parse_time(ts, fmt?)?;
            let p = GeoPoint::new(lat, lon).ok()?;
            Some((user.to_owned(), TrajPoint { p, t }))
        })();
        match parsed {
            Some((user, pt)) => by_user.entry(user).or_default().push(pt),
            None => malformed += 1,
        }
    }
    if rows > 0 && malformed * 2 > rows {
        return Err(Error::Data(format!(
            "{malformed} of {rows} gps rows are malformed; expected columns user_id,lat,lon,timestamp"
        )));
    }
    let trajectories = by_user
        .into_iter()
        .map(|(user_id, mut points)| {
            points.sort_by_key(|p| p.t);
            Trajectory { user_id, points }
        })
        .collect();
    Ok(GpsData {
        trajectories,
        rows,
        malformed,
    })
}

/// Drops points falling on Saturday or Sunday in the given timezone.
pub fn retain_weekdays(data: &mut GpsData, tz: Timezone) {
    for traj in &mut data.trajectories {
        traj.points
            .retain(|p| !matches!(tz.weekday_of(p.t), Weekday::Sat | Weekday::Sun));
    }
    data.trajectories.retain(|t| !t.points.is_empty());
}

/// A stay: the user remained within the stay radius of an anchor point for at least the stay duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumanActivity {
    pub centroid: GeoPoint,
    pub t_arrive: i64,
    pub t_leave: i64,
}

/// Anchor-based stay-point scan over a time-sorted trajectory.
///
/// From anchor `k`, the span extends over every following point within
/// `radius_m` of the anchor. The span is an activity when its duration reaches
/// `min_stay_s`. The next anchor is the first point beyond the radius.
pub fn detect_activities(traj: &[TrajPoint], radius_m: f64, min_stay_s: i64) -> Vec<HumanActivity> {
    let mut out = Vec::new();
    let n = traj.len();
    let mut k = 0;
    while k < n {
        let anchor = traj[k].p;
        let mut m = k;
        while m + 1 < n && haversine_m(anchor, traj[m + 1].p) <= radius_m {
            m += 1;
        }
        if traj[m].t - traj[k].t >= min_stay_s {
            let len = (m - k + 1) as f64;
            let lat = traj[k..=m].iter().map(|p| p.p.lat()).sum::<f64>() / len;
            let lon = traj[k..=m].iter().map(|p| p.p.lon()).sum::<f64>() / len;
            out.push(HumanActivity {
                centroid: GeoPoint::new(lat.clamp(-90.0, 90.0), lon.clamp(-180.0, 180.0)).expect("mean of valid points"),
                t_arrive: traj[k].t,
                t_leave: traj[m].t,
            });
        }
        k = m + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActivityKind {
    Leaving,
    Arriving,
}

impl ActivityKind {
    fn block(self) -> usize {
        match self {
            ActivityKind::Leaving => 0,
            ActivityKind::Arriving => 1,
        }
    }
}

/// One origin/destination record of a trip between consecutive activities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivityInfo {
    pub origin: usize,
    pub dest: usize,
    pub time: i64,
    pub kind: ActivityKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivityInfos {
    pub infos: Vec<ActivityInfo>,
    /// Trips skipped because an endpoint lies outside the grid.
    pub dropped_trips: usize,
}

/// Pairs consecutive activities of each user into leaving and arriving records.
pub fn to_activity_infos(per_user: &[Vec<HumanActivity>], grid: &GridIndex) -> ActivityInfos {
    let mut out = ActivityInfos::default();
    for acts in per_user {
        for pair in acts.windows(2) {
            let (from, to) = (&pair[0], &pair[1]);
            match (grid.locate(from.centroid), grid.locate(to.centroid)) {
                (Some(origin), Some(dest)) => {
                    out.infos.push(ActivityInfo {
                        origin,
                        dest,
                        time: from.t_leave,
                        kind: ActivityKind::Leaving,
                    });
                    out.infos.push(ActivityInfo {
                        origin,
                        dest,
                        time: to.t_arrive,
                        kind: ActivityKind::Arriving,
                    });
                }
                _ => out.dropped_trips += 1,
            }
        }
    }
    out
}

/// Hourly trip counts: rows are (kind, local hour, origin) with the leaving
/// block first, columns are destination regions.
#[derive(Debug, Clone, PartialEq)]
pub struct HapMatrix {
    pub data: SparseMatrix,
    pub periods: usize,
    pub regions: usize,
    pub timezone: Timezone,
}

#[derive(Debug, Serialize, Deserialize)]
struct HapSidecar {
    rows: usize,
    r: usize,
    s: usize,
    kinds: Vec<String>,
    timezone: String,
}

impl HapMatrix {
    pub fn row_index(regions: usize, kind: ActivityKind, hour: usize, origin: usize) -> usize {
        (kind.block() * HOURS_PER_DAY + hour) * regions + origin
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        let coo = dir.join("hap.coo");
        let f = std::fs::File::create(&coo).map_err(|e| Error::io(&coo, e))?;
        self.data
            .write_coo(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(&coo, e))?;
        let side = HapSidecar {
            rows: self.data.nrows(),
            r: self.regions,
            s: self.periods,
            kinds: vec!["leaving".into(), "arriving".into()],
            timezone: self.timezone.to_string(),
        };
        crate::io::write_json(&dir.join("hap.json"), &side)
    }

    pub fn read(dir: &std::path::Path) -> Result<Self> {
        let side: HapSidecar = crate::io::read_json(&dir.join("hap.json"))?;
        let coo = dir.join("hap.coo");
        let f = std::fs::File::open(&coo).map_err(|e| Error::io(&coo, e))?;
        let data = SparseMatrix::read_coo(std::io::BufReader::new(f), side.rows, side.r)?;
        Ok(HapMatrix {
            data,
            periods: side.s,
            regions: side.r,
            timezone: side.timezone.parse()?,
        })
    }
}

pub fn build_hap_matrix(infos: &[ActivityInfo], regions: usize, tz: Timezone) -> Result<HapMatrix> {
    let trips = infos
        .iter()
        .map(|a| {
            if a.origin >= regions || a.dest >= regions {
                return Err(Error::InvalidArgument(format!(
                    "activity info region ({}, {}) outside {regions} regions",
                    a.origin, a.dest
                )));
            }
            let row = HapMatrix::row_index(regions, a.kind, tz.hour_of(a.time), a.origin);
            Ok((row, a.dest, 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = SparseMatrix::from_triplets(2 * HOURS_PER_DAY * regions, regions, trips)?;
    Ok(HapMatrix {
        data,
        periods: HOURS_PER_DAY,
        regions,
        timezone: tz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{decode, enumerate_cells};
    use proptest::prelude::*;

    fn tp(lat: f64, lon: f64, t: i64) -> TrajPoint {
        TrajPoint {
            p: GeoPoint::new(lat, lon).unwrap(),
            t,
        }
    }

    /// Direct transcription of the stay definition: for every anchor choice
    /// reachable by the scan, collect the maximal within-radius run.
    fn brute_force_stays(traj: &[TrajPoint], dr: f64, tr: i64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut k = 0;
        while k < traj.len() {
            let m = (k..traj.len())
                .take_while(|&i| (k..=i).all(|j| haversine_m(traj[k].p, traj[j].p) <= dr))
                .last()
                .unwrap();
            if traj[m].t - traj[k].t >= tr {
                out.push((k, m));
            }
            k = m + 1;
        }
        out
    }

    #[test]
    fn parse_sorts_and_groups() {
        let csv = "user_id,lat,lon,timestamp\nu1,35.0,-78.0,300\nu1,35.0,-78.0,100\nu1,35.0,-78.0,200\n";
        let d = parse_gps(csv.as_bytes()).unwrap();
        assert_eq!(d.trajectories.len(), 1);
        let ts: Vec<i64> = d.trajectories[0].points.iter().map(|p| p.t).collect();
        assert_eq!(ts, vec![100, 200, 300]);
        assert_eq!(d.malformed, 0);
    }

    #[test]
    fn parse_empty_and_bad_rows() {
        let d = parse_gps("user_id,lat,lon,timestamp\n".as_bytes()).unwrap();
        assert!(d.trajectories.is_empty());
        let csv = "user_id,lat,lon,timestamp\nu1,91.0,-78.0,1\nu1,35.0,-78.0,2\nu2,35.0,-78.0,3\n";
        let d = parse_gps(csv.as_bytes()).unwrap();
        assert_eq!(d.malformed, 1);
        assert_eq!(d.rows, 3);
        let csv = "user_id,lat,lon,timestamp\nu1,x,-78.0,1\nu1,35.0,-78.0,2\nu1,35.0,,3\n";
        assert!(matches!(parse_gps(csv.as_bytes()), Err(Error::Data(_))));
        assert!(parse_gps("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn parse_iso_timestamps() {
        let csv = "user_id,lat,lon,timestamp\nu,35,-78,2018-03-15T13:30:00Z\nu,35,-78,2018-03-15T08:30:00-05:00\nu,35,-78,2018-03-15 13:31:00\nu,35,-78,1521120600\n";
        let d = parse_gps(csv.as_bytes()).unwrap();
        assert_eq!(d.malformed, 1, "epoch value in an ISO file is malformed");
        let ts: Vec<i64> = d.trajectories[0].points.iter().map(|p| p.t).collect();
        assert_eq!(ts, vec![1521120600, 1521120600, 1521120660]);
    }

    #[test]
    fn timezone_parsing() {
        let tz: Timezone = "-05:00".parse().unwrap();
        assert_eq!(tz.to_string(), "-05:00");
        assert_eq!(tz.hour_of(1521120600), 8);
        assert_eq!("UTC".parse::<Timezone>().unwrap(), Timezone::utc());
        assert!("EST".parse::<Timezone>().is_err());
        assert!("+25:00".parse::<Timezone>().is_err());
    }

    #[test]
    fn single_point_is_not_an_activity() {
        assert!(detect_activities(&[tp(35.0, -78.0, 0)], 200.0, 1200).is_empty());
        assert!(detect_activities(&[], 200.0, 1200).is_empty());
    }

    #[test]
    fn identical_points_make_one_activity() {
        let pts: Vec<_> = (0..5).map(|i| tp(35.5, -78.5, i * 600)).collect();
        let acts = detect_activities(&pts, 200.0, 1200);
        assert_eq!(acts.len(), 1);
        assert_eq!(acts[0].centroid, GeoPoint::new(35.5, -78.5).unwrap());
        assert_eq!((acts[0].t_arrive, acts[0].t_leave), (0, 2400));
    }

    #[test]
    fn short_stay_then_jump() {
        // 3 points within ~30 m over 30 minutes, then 5 km away
        let pts = vec![
            tp(35.0, -78.0, 0),
            tp(35.0002, -78.0, 900),
            tp(35.0, -78.0002, 1800),
            tp(35.045, -78.0, 2400),
        ];
        let acts = detect_activities(&pts, 200.0, 1200);
        assert_eq!(brute_force_stays(&pts, 200.0, 1200), vec![(0, 2)]);
        assert_eq!(acts.len(), 1);
        assert_eq!((acts[0].t_arrive, acts[0].t_leave), (0, 1800));
        assert!((acts[0].centroid.lat() - 35.0000666666).abs() < 1e-8);
    }

    fn arb_traj() -> impl Strategy<Value = Vec<TrajPoint>> {
        proptest::collection::vec((0u8..4, -300i32..300, -300i32..300, 60i64..900), 0..40).prop_map(|steps| {
            let mut t = 0;
            steps
                .into_iter()
                .map(|(site, dy, dx, dt)| {
                    t += dt;
                    let base = 35.0 + site as f64 * 0.02;
                    tp(base + dy as f64 * 1e-6, -78.0 + dx as f64 * 1e-6, t)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn scan_matches_definition(traj in arb_traj()) {
            let acts = detect_activities(&traj, 200.0, 1200);
            let spans = brute_force_stays(&traj, 200.0, 1200);
            prop_assert_eq!(acts.len(), spans.len());
            for (a, (k, m)) in acts.iter().zip(&spans) {
                prop_assert_eq!(a.t_arrive, traj[*k].t);
                prop_assert_eq!(a.t_leave, traj[*m].t);
            }
            for w in acts.windows(2) {
                prop_assert!(w[0].t_leave < w[1].t_arrive);
            }
            for a in &acts {
                prop_assert!(a.t_arrive <= a.t_leave);
            }
        }

        #[test]
        fn appending_far_point_keeps_history(traj in arb_traj()) {
            let acts = detect_activities(&traj, 200.0, 1200);
            if let Some(last) = traj.last() {
                let mut ext = traj.clone();
                ext.push(tp(10.0, 10.0, last.t + 60));
                let ext_acts = detect_activities(&ext, 200.0, 1200);
                prop_assert_eq!(&ext_acts[..acts.len()], &acts[..]);
            }
        }
    }

    fn small_grid() -> GridIndex {
        enumerate_cells(decode("dnr").unwrap(), 4).unwrap()
    }

    fn act_in(g: &GridIndex, col: usize, t_a: i64, t_l: i64) -> HumanActivity {
        HumanActivity {
            centroid: g.cell(col).bbox().center(),
            t_arrive: t_a,
            t_leave: t_l,
        }
    }

    #[test]
    fn trip_becomes_leaving_and_arriving() {
        let g = small_grid();
        let t_l = 13 * 3600 + 1800;
        let t_a = 13 * 3600 + 55 * 60;
        let acts = vec![vec![act_in(&g, 4, 0, t_l), act_in(&g, 9, t_a, t_a + 3600)]];
        let out = to_activity_infos(&acts, &g);
        assert_eq!(
            out.infos,
            vec![
                ActivityInfo { origin: 4, dest: 9, time: t_l, kind: ActivityKind::Leaving },
                ActivityInfo { origin: 4, dest: 9, time: t_a, kind: ActivityKind::Arriving },
            ]
        );
        assert!(to_activity_infos(&[vec![act_in(&g, 4, 0, 10)]], &g).infos.is_empty());
    }

    #[test]
    fn outside_origin_is_dropped() {
        let g = small_grid();
        let outside = HumanActivity {
            centroid: GeoPoint::new(0.0, 0.0).unwrap(),
            t_arrive: 0,
            t_leave: 10,
        };
        let out = to_activity_infos(&[vec![outside, act_in(&g, 3, 100, 200)]], &g);
        assert!(out.infos.is_empty());
        assert_eq!(out.dropped_trips, 1);
    }

    #[test]
    fn hap_single_entry() {
        let info = ActivityInfo {
            origin: 0,
            dest: 1,
            time: 13 * 3600 + 1800,
            kind: ActivityKind::Leaving,
        };
        let hap = build_hap_matrix(&[info], 2, Timezone::utc()).unwrap();
        assert_eq!(hap.data.shape(), (96, 2));
        assert_eq!(hap.data.nnz(), 1);
        assert_eq!(hap.data.get(13 * 2, 1), 1.0);
        assert_eq!(hap.data.sum(), 1.0);

        let empty = build_hap_matrix(&[], 3, Timezone::utc()).unwrap();
        assert_eq!(empty.data.shape(), (144, 3));
        assert_eq!(empty.data.nnz(), 0);
    }

    #[test]
    fn hap_uses_local_hour() {
        let info = ActivityInfo { origin: 1, dest: 1, time: 13 * 3600, kind: ActivityKind::Arriving };
        let hap = build_hap_matrix(&[info], 2, "-05:00".parse().unwrap()).unwrap();
        assert_eq!(hap.data.get(HapMatrix::row_index(2, ActivityKind::Arriving, 8, 1), 1), 1.0);
        assert!(build_hap_matrix(&[info], 1, Timezone::utc()).is_err());
    }

    proptest! {
        #[test]
        fn hap_counts_are_order_free(
            raw in proptest::collection::vec((0usize..5, 0usize..5, 0i64..200_000, any::<bool>()), 0..60),
            rot in 0usize..60,
        ) {
            let infos: Vec<ActivityInfo> = raw.iter().map(|&(o, d, t, l)| ActivityInfo {
                origin: o, dest: d, time: t,
                kind: if l { ActivityKind::Leaving } else { ActivityKind::Arriving },
            }).collect();
            let a = build_hap_matrix(&infos, 5, Timezone::utc()).unwrap();
            let mut shuffled = infos.clone();
            if !shuffled.is_empty() {
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
            }
            let b = build_hap_matrix(&shuffled, 5, Timezone::utc()).unwrap();
            prop_assert_eq!(a.data.sum(), infos.len() as f64);
            prop_assert_eq!(a, b);
        }
    }
}
