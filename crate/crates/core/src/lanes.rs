//! Lane sets and their JSON file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::bezier::ControlPolygon;
use crate::camera::CameraModel;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Mode {
    pub fn dim(self) -> usize {
        match self {
            Mode::TwoD => 2,
            Mode::ThreeD => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TwoD => "2d",
            Mode::ThreeD => "3d",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(Mode::TwoD),
            "3d" => Ok(Mode::ThreeD),
            other => Err(invalid(format!("mode must be \"2d\" or \"3d\", got {other:?}"))),
        }
    }
}

/// One lane: a cubic curve with a category and optionally a confidence and
/// dense points.
#[derive(Clone, Debug, PartialEq)]
pub struct Lane {
    pub category: usize,
    pub score: Option<f64>,
    pub control_points: ControlPolygon,
    pub points: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneSet {
    pub scene_id: String,
    pub mode: Mode,
    pub camera: Option<CameraModel>,
    pub lanes: Vec<Lane>,
}

impl LaneSet {
    pub fn new(scene_id: impl Into<String>, mode: Mode, camera: Option<CameraModel>, lanes: Vec<Lane>) -> Result<Self> {
        let set = Self {
            scene_id: scene_id.into(),
            mode,
            camera,
            lanes,
        };
        for (i, lane) in set.lanes.iter().enumerate() {
            if lane.control_points.dim() != mode.dim() || lane.control_points.len() != 4 {
                return Err(invalid(format!(
                    "lane {i}: expected 4 control points of dimension {}",
                    mode.dim()
                )));
            }
        }
        Ok(set)
    }

    pub fn to_json(&self) -> Value {
        let lanes: Vec<Value> = self
            .lanes
            .iter()
            .map(|l| {
                let mut m = Map::new();
                m.insert("category".into(), json!(l.category));
                if let Some(s) = l.score {
                    m.insert("score".into(), json!(s));
                }
                m.insert("control_points".into(), json!(l.control_points.to_vecs()));
                if let Some(p) = &l.points {
                    m.insert("points".into(), json!(p));
                }
                Value::Object(m)
            })
            .collect();
        let mut m = Map::new();
        m.insert("scene_id".into(), json!(self.scene_id));
        m.insert("mode".into(), json!(self.mode.as_str()));
        if let Some(c) = &self.camera {
            m.insert("camera".into(), serde_json::to_value(c).expect("camera serialises"));
        }
        m.insert("lanes".into(), Value::Array(lanes));
        Value::Object(m)
    }

    /// Parses a lane-set document; errors name `path` and a JSON pointer.
    pub fn from_json(v: &Value, path: &str) -> Result<Self> {
        let p = Parser { path };
        let obj = p.object(v, "")?;
        let scene_id = p.string(p.field(obj, "", "scene_id")?, "/scene_id")?.to_string();
        let mode: Mode = p
            .string(p.field(obj, "", "mode")?, "/mode")?
            .parse()
            .map_err(|e: Error| p.err("/mode", e.to_string()))?;
        let camera = match obj.get("camera") {
            None | Some(Value::Null) => None,
            Some(c) => {
                let cam: CameraModel = serde_json::from_value(c.clone()).map_err(|e| p.err("/camera", e.to_string()))?;
                cam.validate().map_err(|e| p.err("/camera", e.to_string()))?;
                Some(cam)
            }
        };
        let lanes_v = p.array(p.field(obj, "", "lanes")?, "/lanes")?;
        let mut lanes = Vec::with_capacity(lanes_v.len());
        for (i, lv) in lanes_v.iter().enumerate() {
            let at = format!("/lanes/{i}");
            let lo = p.object(lv, &at)?;
            let cat_v = p.field(lo, &at, "category")?;
            let category = cat_v
                .as_u64()
                .ok_or_else(|| p.err(&format!("{at}/category"), "expected a non-negative integer"))?
                as usize;
            let score = match lo.get("score") {
                None | Some(Value::Null) => None,
                Some(s) => Some(
                    s.as_f64()
                        .ok_or_else(|| p.err(&format!("{at}/score"), "expected a number"))?,
                ),
            };
            let cp_at = format!("{at}/control_points");
            let cps = p.points(p.field(lo, &at, "control_points")?, &cp_at, mode.dim())?;
            if cps.len() != 4 {
                return Err(p.err(&cp_at, format!("expected 4 control points, got {}", cps.len())));
            }
            let control_points = ControlPolygon::new(&cps).map_err(|e| p.err(&cp_at, e.to_string()))?;
            let points = match lo.get("points") {
                None | Some(Value::Null) => None,
                Some(pv) => Some(p.points(pv, &format!("{at}/points"), mode.dim())?),
            };
            lanes.push(Lane {
                category,
                score,
                control_points,
                points,
            });
        }
        Ok(Self {
            scene_id,
            mode,
            camera,
            lanes,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path.display().to_string();
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: name.clone(),
            pointer: String::new(),
            detail: e.to_string(),
        })?;
        Self::from_json(&v, &name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }
}

struct Parser<'a> {
    path: &'a str,
}

impl Parser<'_> {
    fn err(&self, pointer: &str, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            pointer: pointer.to_string(),
            detail: detail.into(),
        }
    }

    fn object<'v>(&self, v: &'v Value, at: &str) -> Result<&'v Map<String, Value>> {
        v.as_object().ok_or_else(|| self.err(at, "expected an object"))
    }

    fn array<'v>(&self, v: &'v Value, at: &str) -> Result<&'v Vec<Value>> {
        v.as_array().ok_or_else(|| self.err(at, "expected an array"))
    }

    fn string<'v>(&self, v: &'v Value, at: &str) -> Result<&'v str> {
        v.as_str().ok_or_else(|| self.err(at, "expected a string"))
    }

    fn field<'v>(&self, obj: &'v Map<String, Value>, at: &str, key: &str) -> Result<&'v Value> {
        obj.get(key)
            .ok_or_else(|| self.err(&format!("{at}/{key}"), "missing field"))
    }

    fn points(&self, v: &Value, at: &str, dim: usize) -> Result<Vec<Vec<f64>>> {
        self.array(v, at)?
            .iter()
            .enumerate()
            .map(|(i, pv)| {
                let pat = format!("{at}/{i}");
                let coords = self.array(pv, &pat)?;
                if coords.len() != dim {
                    return Err(self.err(&pat, format!("expected {dim} coordinates, got {}", coords.len())));
                }
                coords
                    .iter()
                    .enumerate()
                    .map(|(j, c)| {
                        c.as_f64()
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| self.err(&format!("{pat}/{j}"), "expected a finite number"))
                    })
                    .collect()
            })
            .collect()
    }
}
