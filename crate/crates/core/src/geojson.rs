//! Zone maps as GeoJSON polygons.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geo::GridIndex;

pub const DEFAULT_PALETTE: [&str; 12] = [
    "#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#ffff33", "#a65628", "#f781bf", "#999999", "#66c2a5",
    "#fc8d62", "#8da0cb",
];

/// One rectangle feature per region with `geohash`, `column_index`, `label`
/// and `color` properties. Colors cycle when labels outnumber the palette.
pub fn export_geojson(labels: &[usize], grid: &GridIndex, palette: &[&str]) -> Result<Value> {
    if labels.len() != grid.len() {
        return Err(Error::Shape(format!("{} labels for {} regions", labels.len(), grid.len())));
    }
    if palette.is_empty() {
        return Err(Error::InvalidArgument("empty palette".into()));
    }
    let features: Vec<Value> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let cell = grid.cell(i);
            let b = cell.bbox();
            // exterior ring, counterclockwise, closed
            let ring = [
                [b.min_lon, b.min_lat],
                [b.max_lon, b.min_lat],
                [b.max_lon, b.max_lat],
                [b.min_lon, b.max_lat],
                [b.min_lon, b.min_lat],
            ];
            json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": [ring] },
                "properties": {
                    "geohash": cell.code(),
                    "column_index": i,
                    "label": label,
                    "color": palette[label % palette.len()],
                },
            })
        })
        .collect();
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}
