//! GeoJSON output of per-sample OOD probabilities.

use std::collections::HashMap;

use serde_json::{json, Value};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::io::ScoreRow;

/// One `Point` feature per scored sample, coordinates `[lon, lat]`.
/// `threshold` decides `ood_label` (`proba >= threshold`).
pub fn emit_geojson(scores: &[ScoreRow], records: &[SampleRecord], threshold: f64) -> Result<Value> {
    let by_id: HashMap<&str, &SampleRecord> =
        records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut features = Vec::with_capacity(scores.len());
    for s in scores {
        let rec = by_id
            .get(s.sample_id.as_str())
            .ok_or_else(|| Error::MissingCoordinates(s.sample_id.clone()))?;
        let (Some(lat), Some(lon)) = (rec.lat, rec.lon) else {
            return Err(Error::MissingCoordinates(s.sample_id.clone()));
        };
        features.push(json!({
            "type": "Feature",
            "geometry": { "type": "Point", "coordinates": [lon, lat] },
            "properties": {
                "sample_id": s.sample_id,
                "ood_proba": s.score,
                "ood_label": u8::from(s.score >= threshold),
                "role": rec.role.as_str(),
            }
        }));
    }
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;

    fn rec(id: &str, lat: Option<f64>, lon: Option<f64>) -> SampleRecord {
        SampleRecord {
            lat,
            lon,
            ..SampleRecord::new(id, Role::Wild, 0)
        }
    }

    fn score(id: &str, p: f64) -> ScoreRow {
        ScoreRow {
            sample_id: id.into(),
            score: p,
            label: None,
        }
    }

    #[test]
    fn point_order_and_threshold() {
        let g = emit_geojson(&[score("a", 0.7)], &[rec("a", Some(10.0), Some(20.0))], 0.5).unwrap();
        let f = &g["features"][0];
        assert_eq!(g["type"], "FeatureCollection");
        assert_eq!(f["geometry"]["coordinates"], json!([20.0, 10.0]));
        assert_eq!(f["properties"]["ood_label"], 1);
        assert_eq!(f["properties"]["role"], "WILD");

        let g = emit_geojson(&[score("a", 0.5)], &[rec("a", Some(0.0), Some(0.0))], 0.5).unwrap();
        assert_eq!(g["features"][0]["properties"]["ood_label"], 1);
    }

    #[test]
    fn missing_latitude() {
        let err = emit_geojson(&[score("a", 0.1)], &[rec("a", None, Some(3.0))], 0.5).unwrap_err();
        assert!(matches!(err, Error::MissingCoordinates(id) if id == "a"));
    }
}
