//! Stage orchestration and artifact persistence.
//!
//! Stages run in order `segment → ingest-gps → ingest-poi → fit → cluster →
//! annotate`. Each writes its artifacts into the output directory and records
//! a fingerprint of the settings and upstream artifacts it consumed in
//! `manifest.json`. A stage whose fingerprint and output hashes still match is
//! reused instead of recomputed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::activity::{build_hap_matrix, detect_activities, parse_gps, retain_weekdays, to_activity_infos, HapMatrix};
use crate::annotate::{ranked_report, render_text_table, write_report_csv, zone_profiles};
use crate::cluster::{crf_fit, kmeans_restarts, Adjacency, ClusterMethod, CrfOptions};
use crate::config::{HapScaling, PipelineConfig};
use crate::error::{Error, Result};
use crate::fusion::{fit, FusionInput, LatentFactors};
use crate::geo::{enumerate_cells, GridIndex};
use crate::geojson::{export_geojson, DEFAULT_PALETTE};
use crate::io;
use crate::poi::{
    build_poi_matrix, parse_pois, raw_features, svd_features, tfidf_transform, CategoryTable, FeatureKind,
    FeatureMatrix, PoiMatrix,
};
use crate::synth::{read_labels, write_labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Segment,
    IngestGps,
    IngestPoi,
    Fit,
    Cluster,
    Annotate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Segment,
        Stage::IngestGps,
        Stage::IngestPoi,
        Stage::Fit,
        Stage::Cluster,
        Stage::Annotate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Segment => "segment",
            Stage::IngestGps => "ingest-gps",
            Stage::IngestPoi => "ingest-poi",
            Stage::Fit => "fit",
            Stage::Cluster => "cluster",
            Stage::Annotate => "annotate",
        }
    }

    /// Files (relative to the output directory) the stage produces.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Segment => &["cells.csv"],
            Stage::IngestGps => &["hap.coo", "hap.json"],
            Stage::IngestPoi => &["poi.coo", "poi.json"],
            Stage::Fit => &[
                "factors/U.bin",
                "factors/V.bin",
                "factors/Q.bin",
                "factors/Z.bin",
                "factors/A.bin",
                "factors/W.bin",
                "factors/factors.json",
                "trace.csv",
            ],
            Stage::Cluster => &["labels.csv", "model.json", "zones.geojson"],
            Stage::Annotate => &["report.csv", "report.txt", "profiles.json"],
        }
    }

    /// Config keys the stage depends on.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Stage::Segment => &["bbox", "level"],
            Stage::IngestGps => &["stay_radius_m", "stay_seconds", "timezone", "weekdays_only"],
            Stage::IngestPoi => &[],
            Stage::Fit => &[
                "mask",
                "hap_scaling",
                "lambda1",
                "lambda2",
                "lambda3",
                "lambda4",
                "lambda5",
                "k",
                "alpha0",
                "rho",
                "epsilon",
                "max_iter",
                "init_std",
                "update",
                "seed",
            ],
            Stage::Cluster => &[
                "method",
                "feature",
                "feature_scaling",
                "c",
                "beta",
                "svd_t",
                "icm_schedule",
                "crf_max_rounds",
                "kmeans_max_iter",
                "restarts",
                "seed",
            ],
            Stage::Annotate => &["c"],
        }
    }

    fn upstream(self, feature: FeatureKind) -> Vec<Stage> {
        match self {
            Stage::Segment => vec![],
            Stage::IngestGps | Stage::IngestPoi => vec![Stage::Segment],
            Stage::Fit => vec![Stage::IngestGps, Stage::IngestPoi],
            Stage::Cluster => {
                if needs_fit(feature) {
                    vec![Stage::Segment, Stage::IngestPoi, Stage::Fit]
                } else {
                    vec![Stage::Segment, Stage::IngestPoi]
                }
            }
            Stage::Annotate => vec![Stage::IngestPoi, Stage::Cluster],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Whether the feature kind is read from fitted factors.
pub fn needs_fit(feature: FeatureKind) -> bool {
    matches!(feature, FeatureKind::LatentV | FeatureKind::LatentZ)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub seconds: f64,
    /// Output file → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub stats: Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Reused,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    manifest: Manifest,
    force: bool,
}

impl Pipeline {
    /// Prepares the output directory and writes the config used into it.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.output.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let manifest_path = out.join("manifest.json");
        let mut manifest: Manifest = if manifest_path.exists() {
            io::read_json(&manifest_path).unwrap_or_default()
        } else {
            Manifest::default()
        };
        manifest.config_hash = cfg.hash();
        let cfg_path = out.join("config.txt");
        std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        Ok(Pipeline {
            cfg,
            out,
            manifest,
            force: false,
        })
    }

    /// Recompute stages even when their artifacts are current.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Every stage in order; `fit` is skipped when the feature kind does not use it.
    pub fn run_all(&mut self) -> Result<()> {
        for stage in Stage::ALL {
            if stage == Stage::Fit && !needs_fit(self.cfg.feature) {
                log::info!("skipping fit: feature {} does not use latent factors", self.cfg.feature);
                continue;
            }
            self.run_stage(stage)?;
        }
        Ok(())
    }

    /// Runs one stage, or reuses its artifacts when nothing it depends on changed.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome> {
        let fingerprint = self.fingerprint(stage).map_err(|e| e.in_stage(stage.name()))?;
        if !self.force && self.is_current(stage, &fingerprint) {
            log::info!("{stage}: artifacts current, reusing");
            return Ok(StageOutcome::Reused);
        }
        log::info!("{stage}: running");
        let started = Instant::now();
        let stats = self.execute(stage).map_err(|e| e.in_stage(stage.name()))?;
        let seconds = started.elapsed().as_secs_f64();
        let mut outputs = BTreeMap::new();
        for name in stage.outputs() {
            outputs.insert(name.to_string(), io::sha256_file(&self.out.join(name))?);
        }
        self.manifest.stages.insert(
            stage.name().to_owned(),
            StageRecord {
                fingerprint,
                seconds,
                outputs,
                stats,
            },
        );
        io::write_json(&self.out.join("manifest.json"), &self.manifest)?;
        log::info!("{stage}: done in {seconds:.2}s");
        Ok(StageOutcome::Ran)
    }

    fn is_current(&self, stage: Stage, fingerprint: &str) -> bool {
        let Some(rec) = self.manifest.stages.get(stage.name()) else {
            return false;
        };
        rec.fingerprint == fingerprint
            && stage.outputs().iter().all(|name| {
                let recorded = rec.outputs.get(*name);
                let actual = io::sha256_file(&self.out.join(name)).ok();
                recorded.is_some() && recorded == actual.as_ref()
            })
    }

    fn fingerprint(&self, stage: Stage) -> Result<String> {
        let text = self.cfg.to_text();
        let mut parts = vec![format!("stage={}", stage.name())];
        for line in text.lines() {
            let key = line.split(" = ").next().unwrap_or("");
            if stage.keys().contains(&key) {
                parts.push(line.to_owned());
            }
        }
        match stage {
            Stage::IngestGps => parts.push(format!("gps={}", io::sha256_file(&self.cfg.gps)?)),
            Stage::IngestPoi => {
                parts.push(format!("pois={}", io::sha256_file(&self.cfg.pois)?));
                if let Some(c) = &self.cfg.categories {
                    parts.push(format!("categories={}", io::sha256_file(c)?));
                }
            }
            _ => {}
        }
        for up in stage.upstream(self.cfg.feature) {
            let rec = self.manifest.stages.get(up.name()).ok_or_else(|| {
                Error::Data(format!("stage `{up}` has not been run in {}", self.out.display()))
            })?;
            for (name, hash) in &rec.outputs {
                parts.push(format!("{name}={hash}"));
            }
        }
        Ok(io::sha256_bytes(parts.join("\n").as_bytes()))
    }

    fn execute(&self, stage: Stage) -> Result<Value> {
        match stage {
            Stage::Segment => self.segment(),
            Stage::IngestGps => self.ingest_gps(),
            Stage::IngestPoi => self.ingest_poi(),
            Stage::Fit => self.fit(),
            Stage::Cluster => self.cluster(),
            Stage::Annotate => self.annotate(),
        }
    }

    pub fn load_grid(&self) -> Result<GridIndex> {
        GridIndex::read_csv(io::open(&self.out.join("cells.csv"))?, self.cfg.bbox(), self.cfg.level)
    }

    pub fn load_poi(&self) -> Result<PoiMatrix> {
        PoiMatrix::read(&self.out)
    }

    pub fn load_hap(&self) -> Result<HapMatrix> {
        HapMatrix::read(&self.out)
    }

    pub fn load_factors(&self) -> Result<LatentFactors> {
        LatentFactors::read(&self.out.join("factors"))
    }

    pub fn load_labels(&self) -> Result<Vec<usize>> {
        read_labels(&self.out.join("labels.csv"), &self.load_grid()?)
    }

    fn segment(&self) -> Result<Value> {
        let grid = enumerate_cells(self.cfg.bbox(), self.cfg.level)?;
        grid.write_csv(io::create(&self.out.join("cells.csv"))?)?;
        let (rows, cols) = grid.shape();
        let (w, h) = grid.cell(0).bbox().dimensions_m();
        Ok(json!({ "regions": grid.len(), "rows": rows, "cols": cols, "cell_width_m": w, "cell_height_m": h }))
    }

    fn ingest_gps(&self) -> Result<Value> {
        let grid = self.load_grid()?;
        let mut data = parse_gps(io::open(&self.cfg.gps)?)?;
        let rows_read = data.rows;
        if self.cfg.weekdays_only {
            retain_weekdays(&mut data, self.cfg.timezone);
        }
        let per_user: Vec<_> = data
            .trajectories
            .par_iter()
            .map(|t| detect_activities(&t.points, self.cfg.stay_radius_m, self.cfg.stay_seconds))
            .collect();
        let activities: usize = per_user.iter().map(Vec::len).sum();
        let infos = to_activity_infos(&per_user, &grid);
        let hap = build_hap_matrix(&infos.infos, grid.len(), self.cfg.timezone)?;
        hap.write(&self.out)?;
        Ok(json!({
            "gps_rows": rows_read,
            "malformed_rows": data.malformed,
            "users": data.trajectories.len(),
            "activities": activities,
            "trips": infos.infos.len() / 2,
            "dropped_trips": infos.dropped_trips,
            "hap_rows": hap.data.nrows(),
            "hap_nnz": hap.data.nnz(),
            "hap_sparsity": hap.data.sparsity(),
        }))
    }

    fn categories(&self) -> Result<CategoryTable> {
        match &self.cfg.categories {
            Some(path) => CategoryTable::read_csv(io::open(path)?),
            None => Ok(CategoryTable::default()),
        }
    }

    fn ingest_poi(&self) -> Result<Value> {
        let grid = self.load_grid()?;
        let table = self.categories()?;
        let parsed = parse_pois(io::open(&self.cfg.pois)?, &table)?;
        if !parsed.rejected.is_empty() {
            log::warn!("rejected {} POIs with unknown categories", parsed.rejected_count());
        }
        let poi = build_poi_matrix(&parsed.records, &grid, &table)?;
        poi.write(&self.out)?;
        Ok(json!({
            "pois": parsed.records.len(),
            "malformed_rows": parsed.malformed,
            "rejected": parsed.rejected,
            "observed_regions": poi.observed_count(),
            "observed_fraction": poi.observed_count() as f64 / poi.regions() as f64,
            "poi_nnz": poi.counts.nnz(),
            "poi_sparsity": poi.counts.sparsity(),
        }))
    }

    /// The fusion inputs as the fit stage sees them, including any HAP rescaling.
    pub fn fusion_input(&self) -> Result<(FusionInput, f64)> {
        let poi = self.load_poi()?;
        let hap = self.load_hap()?;
        let scale = match self.cfg.hap_scaling {
            HapScaling::None => 1.0,
            HapScaling::Spectral => {
                let s = hap.data.spectral_norm(200);
                if s > 0.0 {
                    1.0 / s
                } else {
                    1.0
                }
            }
        };
        let t = if scale == 1.0 { hap.data } else { hap.data.map_values(|v| v * scale) };
        Ok((FusionInput::new(poi.dense(), poi.mask(self.cfg.mask), t)?, scale))
    }

    fn fit(&self) -> Result<Value> {
        let (input, scale) = self.fusion_input()?;
        let mut h = self.cfg.hyper.clone();
        h.seed = self.cfg.seed;
        let (factors, trace) = fit(&input, &h)?;
        factors.write(&self.out.join("factors"))?;
        trace.write_csv(io::create(&self.out.join("trace.csv"))?)?;
        let last = trace.records.last().map(|r| r.terms.total());
        Ok(json!({
            "iterations": trace.iterations,
            "stop_reason": trace.stop_reason.to_string(),
            "initial_objective": trace.records[0].terms.total(),
            "final_objective": last,
            "hap_scale": scale,
        }))
    }

    /// Region features selected by the config, one column per region.
    pub fn features(&self) -> Result<FeatureMatrix> {
        let poi = self.load_poi()?;
        match self.cfg.feature {
            FeatureKind::RawPoi => Ok(raw_features(&poi)),
            FeatureKind::TfIdf => tfidf_transform(&poi),
            FeatureKind::SvdPoi => {
                let tfidf = tfidf_transform(&poi)?;
                let t = self.cfg.svd_t.min(tfidf.dims().min(tfidf.regions()));
                svd_features(&tfidf, t)
            }
            FeatureKind::LatentV => FeatureMatrix::new(self.load_factors()?.v, FeatureKind::LatentV),
            FeatureKind::LatentZ => FeatureMatrix::new(self.load_factors()?.z, FeatureKind::LatentZ),
        }
    }

    fn cluster(&self) -> Result<Value> {
        let grid = self.load_grid()?;
        let features = self.features()?;
        if features.regions() != grid.len() {
            return Err(Error::Shape(format!(
                "{} feature columns for {} regions",
                features.regions(),
                grid.len()
            )));
        }
        let data = self.cfg.feature_scaling.apply(&features.data);
        let (labels, model, stats) = cluster_features(&data, &grid, &self.cfg)?;
        write_labels(&self.out.join("labels.csv"), &grid, &labels)?;
        io::write_json(&self.out.join("model.json"), &model)?;
        let geo = export_geojson(&labels, &grid, &DEFAULT_PALETTE)?;
        io::write_json(&self.out.join("zones.geojson"), &geo)?;
        Ok(stats)
    }

    fn annotate(&self) -> Result<Value> {
        let poi = self.load_poi()?;
        let labels = self.load_labels()?;
        let profiles = zone_profiles(&labels, &poi, self.cfg.c)?;
        let reports = ranked_report(&profiles, &poi.categories);
        write_report_csv(&reports, io::create(&self.out.join("report.csv"))?)?;
        let text = render_text_table(&reports);
        let path = self.out.join("report.txt");
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        io::write_json(&self.out.join("profiles.json"), &profiles)?;
        let annotatable = profiles.iter().filter(|p| p.is_annotatable()).count();
        if annotatable < 2 {
            log::warn!("fewer than 2 zones carry POI information; no difference scores");
        }
        Ok(json!({ "zones": profiles.len(), "annotatable_zones": annotatable }))
    }
}

/// Clusters feature columns with the configured method. Returns labels, a
/// JSON description of the fitted model, and run statistics.
pub fn cluster_features(data: &DMatrix<f64>, grid: &GridIndex, cfg: &PipelineConfig) -> Result<(Vec<usize>, Value, Value)> {
    match cfg.method {
        ClusterMethod::Kmeans => {
            let km = kmeans_restarts(data, cfg.c, cfg.seed, cfg.kmeans_max_iter, cfg.restarts)?;
            let model = json!({ "method": "kmeans", "c": cfg.c, "centroids": km.centroids });
            let stats = json!({ "method": "kmeans", "iterations": km.iterations, "inertia": km.inertia });
            Ok((km.labels, model, stats))
        }
        ClusterMethod::Crf => {
            let adj = Adjacency::from_grid(grid);
            let opts = CrfOptions {
                max_rounds: cfg.crf_max_rounds,
                kmeans_max_iter: cfg.kmeans_max_iter,
                schedule: cfg.icm_schedule,
                restarts: cfg.restarts,
                ..CrfOptions::default()
            };
            let fit = crf_fit(data, &adj, cfg.c, cfg.beta, cfg.seed, &opts)?;
            let mut model = fit.model.to_json();
            model["method"] = json!("crf");
            let stats = json!({
                "method": "crf",
                "rounds": fit.rounds,
                "init_energy": fit.init_energy,
                "final_energy": fit.final_energy,
            });
            Ok((fit.model.labels, model, stats))
        }
    }
}
