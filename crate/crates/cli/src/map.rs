//! Choropleth output: the input polygons joined by region id with predicted
//! RR and absolute percentage error per month.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Map, Value};
use stcast_core::forecast::absolute_percentage_error;
use stcast_core::{Month, RiskPanel};

use crate::config::Windows;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapPeriod {
    /// The test months, from the forecast.
    Test,
    /// January to December of a training year, from the fitted posterior.
    Year(i32),
}

impl MapPeriod {
    pub fn label(self) -> String {
        match self {
            MapPeriod::Test => "test".into(),
            MapPeriod::Year(y) => y.to_string(),
        }
    }

    pub fn months(self, w: &Windows) -> Vec<Month> {
        match self {
            MapPeriod::Test => w.test.months().collect(),
            MapPeriod::Year(y) => (1..=12).map(|m| Month::new(y, m).expect("valid month")).collect(),
        }
    }
}

impl FromStr for MapPeriod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "test" {
            return Ok(MapPeriod::Test);
        }
        s.parse()
            .map(MapPeriod::Year)
            .map_err(|_| format!("period must be `test` or a year, got `{s}`"))
    }
}

/// Region id -> geometry object from a polygon FeatureCollection.
pub fn read_geometry(path: &Path) -> Result<BTreeMap<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| CliError::io(path, "not a FeatureCollection"))?;
    let mut out = BTreeMap::new();
    for f in features {
        let region = f
            .pointer("/properties/region")
            .and_then(Value::as_str)
            .ok_or_else(|| CliError::io(path, "feature without a `region` property"))?;
        out.insert(region.to_string(), f.get("geometry").cloned().unwrap_or(Value::Null));
    }
    Ok(out)
}

fn number(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

/// One feature per modeled region, in region order. Fails on the first
/// region absent from `geometry`.
pub fn build_map(
    geometry: &BTreeMap<String, Value>,
    regions: &[String],
    months: &[Month],
    predicted: &BTreeMap<(String, Month), f64>,
    observed: &RiskPanel,
    model_id: &str,
    config_hash: &str,
) -> Result<Value, CliError> {
    let mut features = Vec::with_capacity(regions.len());
    for (i, region) in regions.iter().enumerate() {
        let geom = geometry
            .get(region)
            .ok_or_else(|| CliError::Data(format!("region `{region}` is missing from the geometry file")))?;
        let mut props = Map::new();
        props.insert("region".into(), json!(region));
        for &m in months {
            let pred = predicted.get(&(region.clone(), m)).copied();
            let obs = observed.month_index(m).map(|t| observed.get(i, t));
            let ape = match (obs, pred) {
                (Some(o), Some(p)) => absolute_percentage_error(&[o], &[p])[0],
                _ => None,
            };
            props.insert(format!("rr_mean_{m}"), pred.map_or(Value::Null, number));
            props.insert(format!("ape_{m}"), ape.map_or(Value::Null, number));
        }
        features.push(json!({ "type": "Feature", "properties": props, "geometry": geom }));
    }
    Ok(json!({
        "type": "FeatureCollection",
        "model_id": model_id,
        "config_hash": config_hash,
        "features": features,
    }))
}

pub fn write_map(path: &Path, map: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(map).expect("map serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapFeature {
    pub region: String,
    /// Property name -> value; `None` where undefined.
    pub values: BTreeMap<String, Option<f64>>,
}

pub fn read_map(path: &Path) -> Result<Vec<MapFeature>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| CliError::io(path, "not a FeatureCollection"))?;
    features
        .iter()
        .map(|f| {
            let props = f
                .get("properties")
                .and_then(Value::as_object)
                .ok_or_else(|| CliError::io(path, "feature without properties"))?;
            let region = props
                .get("region")
                .and_then(Value::as_str)
                .ok_or_else(|| CliError::io(path, "feature without a region"))?
                .to_string();
            let values = props
                .iter()
                .filter(|(k, _)| k.as_str() != "region")
                .map(|(k, v)| (k.clone(), v.as_f64()))
                .collect();
            Ok(MapFeature { region, values })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Value {
        json!({ "type": "Polygon", "coordinates": [[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]] })
    }

    #[test]
    fn period_parsing() {
        assert_eq!("test".parse::<MapPeriod>(), Ok(MapPeriod::Test));
        assert_eq!("2004".parse::<MapPeriod>(), Ok(MapPeriod::Year(2004)));
        assert!("spring".parse::<MapPeriod>().is_err());
    }

    #[test]
    fn features_carry_values_and_nulls() {
        let first = Month::new(2006, 1).unwrap();
        let months: Vec<Month> = (0..3).map(|k| first.offset(k)).collect();
        let regions = vec!["A".to_string(), "B".to_string()];
        let observed = RiskPanel::new(2, first, 3, vec![1.0, 2.0, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let geometry: BTreeMap<String, Value> =
            [("A".into(), square()), ("B".into(), square()), ("C".into(), square())].into();
        let mut pred = BTreeMap::new();
        for r in &regions {
            for &m in &months {
                pred.insert((r.clone(), m), 1.5);
            }
        }
        let map = build_map(&geometry, &regions, &months, &pred, &observed, "m", "h").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.geojson");
        write_map(&path, &map).unwrap();
        let back = read_map(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].values.len(), 6);
        assert_eq!(back[0].values["rr_mean_2006-01"], Some(1.5));
        assert!((back[0].values["ape_2006-01"].unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(back[1].values["ape_2006-02"], None);
        assert_eq!(back[1].values["rr_mean_2006-02"], Some(1.5));

        let partial: BTreeMap<String, Value> = [("A".into(), square())].into();
        let err = build_map(&partial, &regions, &months, &pred, &observed, "m", "h").unwrap_err();
        assert!(matches!(err, CliError::Data(ref m) if m.contains("`B`")));
    }
}
