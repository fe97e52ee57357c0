//! Building footprints over a bounded metric world of 1 m cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::GridLocation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapClass {
    InsideBuilding,
    OutsideBuilding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildingBox {
    pub min_x_m: f64,
    pub min_y_m: f64,
    pub max_x_m: f64,
    pub max_y_m: f64,
}

impl BuildingBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x_m && x <= self.max_x_m && y >= self.min_y_m && y <= self.max_y_m
    }

    /// Euclidean distance from a point to the box (0 inside).
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.min_x_m - x).max(0.0).max(x - self.max_x_m);
        let dy = (self.min_y_m - y).max(0.0).max(y - self.max_y_m);
        dx.hypot(dy)
    }

    pub fn intersects(&self, other: &BuildingBox) -> bool {
        self.min_x_m <= other.max_x_m
            && other.min_x_m <= self.max_x_m
            && self.min_y_m <= other.max_y_m
            && other.min_y_m <= self.max_y_m
    }
}

/// Reference point for projecting latitude/longitude into the local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoReference {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildingMap {
    width: u32,
    height: u32,
    buildings: Vec<BuildingBox>,
    reference: Option<GeoReference>,
    inside: Vec<bool>,
}

impl BuildingMap {
    pub fn new(width_cells: u32, height_cells: u32, buildings: Vec<BuildingBox>) -> Result<Self> {
        if width_cells == 0 || height_cells == 0 {
            return Err(Error::invalid("world must be at least one cell"));
        }
        if width_cells > u16::MAX as u32 || height_cells > u16::MAX as u32 {
            return Err(Error::invalid("world larger than 65535 cells per side"));
        }
        for (i, b) in buildings.iter().enumerate() {
            if !(b.min_x_m <= b.max_x_m && b.min_y_m <= b.max_y_m) {
                return Err(Error::invalid(format!("building {i} has min > max")));
            }
            if b.min_x_m < 0.0
                || b.min_y_m < 0.0
                || b.max_x_m > width_cells as f64
                || b.max_y_m > height_cells as f64
            {
                return Err(Error::invalid(format!("building {i} leaves the world bounds")));
            }
        }
        let mut inside = vec![false; (width_cells * height_cells) as usize];
        for y in 0..height_cells {
            for x in 0..width_cells {
                let (cx, cy) = GridLocation::new(x, y).center();
                inside[(y * width_cells + x) as usize] =
                    buildings.iter().any(|b| b.contains(cx, cy));
            }
        }
        Ok(BuildingMap {
            width: width_cells,
            height: height_cells,
            buildings,
            reference: None,
            inside,
        })
    }

    pub fn empty(width_cells: u32, height_cells: u32) -> Result<Self> {
        Self::new(width_cells, height_cells, Vec::new())
    }

    pub fn with_reference(mut self, reference: GeoReference) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn num_cells(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn buildings(&self) -> &[BuildingBox] {
        &self.buildings
    }

    pub fn reference(&self) -> Option<GeoReference> {
        self.reference
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }

    pub fn contains_point(&self, x_m: f64, y_m: f64) -> bool {
        x_m >= 0.0 && y_m >= 0.0 && x_m <= self.width as f64 && y_m <= self.height as f64
    }

    pub(crate) fn cell_index(&self, l: GridLocation) -> usize {
        (l.y * self.width + l.x) as usize
    }

    /// Inside/outside class of a cell, from its center point.
    pub fn map_class(&self, l: GridLocation) -> Result<MapClass> {
        if l.x >= self.width || l.y >= self.height {
            return Err(Error::invalid(format!(
                "cell ({}, {}) outside {}x{} world",
                l.x, l.y, self.width, self.height
            )));
        }
        Ok(self.class_unchecked(l))
    }

    pub(crate) fn class_unchecked(&self, l: GridLocation) -> MapClass {
        if self.inside[self.cell_index(l)] {
            MapClass::InsideBuilding
        } else {
            MapClass::OutsideBuilding
        }
    }

    pub fn is_inside(&self, l: GridLocation) -> bool {
        l.x < self.width && l.y < self.height && self.inside[self.cell_index(l)]
    }

    /// Distance from a point to the nearest building, `f64::INFINITY` if none.
    pub fn distance_to_nearest(&self, x_m: f64, y_m: f64) -> f64 {
        self.buildings
            .iter()
            .map(|b| b.distance(x_m, y_m))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_file(&self) -> MapFile {
        MapFile {
            world: WorldSpec {
                width_m: self.width as f64,
                height_m: self.height as f64,
                cell_m: 1.0,
            },
            buildings: self
                .buildings
                .iter()
                .map(|b| BoxSpec {
                    min: [b.min_x_m, b.min_y_m],
                    max: [b.max_x_m, b.max_y_m],
                })
                .collect(),
            reference: self.reference,
        }
    }

    pub fn from_file(file: MapFile) -> Result<Self> {
        let w = &file.world;
        if (w.cell_m - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("cell_m must be 1.0, got {}", w.cell_m)));
        }
        if w.width_m.fract() != 0.0 || w.height_m.fract() != 0.0 || w.width_m < 1.0 || w.height_m < 1.0
        {
            return Err(Error::Config("world size must be a positive whole number of meters".into()));
        }
        let buildings = file
            .buildings
            .iter()
            .map(|b| BuildingBox {
                min_x_m: b.min[0],
                min_y_m: b.min[1],
                max_x_m: b.max[0],
                max_y_m: b.max[1],
            })
            .collect();
        let map = BuildingMap::new(w.width_m as u32, w.height_m as u32, buildings)?;
        Ok(match file.reference {
            Some(r) => map.with_reference(r),
            None => map,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("map serializes")
    }
}

/// On-disk map layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub world: WorldSpec,
    pub buildings: Vec<BoxSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<GeoReference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub width_m: f64,
    pub height_m: f64,
    pub cell_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(min: (f64, f64), max: (f64, f64)) -> BuildingBox {
        BuildingBox {
            min_x_m: min.0,
            min_y_m: min.1,
            max_x_m: max.0,
            max_y_m: max.1,
        }
    }

    #[test]
    fn interior_cell_is_inside() {
        let map = BuildingMap::new(20, 20, vec![boxed((0.0, 0.0), (10.0, 10.0))]).unwrap();
        assert_eq!(
            map.map_class(GridLocation::new(5, 5)).unwrap(),
            MapClass::InsideBuilding
        );
    }

    #[test]
    fn far_cell_is_outside() {
        let map = BuildingMap::new(100, 100, vec![boxed((0.0, 0.0), (10.0, 10.0))]).unwrap();
        assert_eq!(
            map.map_class(GridLocation::new(50, 50)).unwrap(),
            MapClass::OutsideBuilding
        );
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let map = BuildingMap::empty(4, 4).unwrap();
        assert!(map.map_class(GridLocation::new(4, 0)).is_err());
    }

    #[test]
    fn cell_centers_never_touch_integer_edges() {
        // With integer-meter boxes, half-meter centers can never sit on an edge.
        for y in 0..20u32 {
            for x in 0..20u32 {
                let (cx, cy) = GridLocation::new(x, y).center();
                for edge in 0..=20 {
                    assert_ne!(cx, edge as f64);
                    assert_ne!(cy, edge as f64);
                }
            }
        }
        let b = boxed((3.0, 3.0), (7.0, 9.0));
        let map = BuildingMap::new(20, 20, vec![b]).unwrap();
        let inside = (0..20u32)
            .flat_map(|y| (0..20u32).map(move |x| GridLocation::new(x, y)))
            .filter(|&l| map.is_inside(l))
            .count();
        assert_eq!(inside, 4 * 6);
    }

    #[test]
    fn json_roundtrip() {
        let map = BuildingMap::new(30, 40, vec![boxed((1.0, 2.0), (5.0, 6.0))])
            .unwrap()
            .with_reference(GeoReference {
                lat: 47.65,
                lon: -122.3,
            });
        let back = BuildingMap::from_json(&map.to_json()).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn rejects_box_outside_world() {
        assert!(BuildingMap::new(10, 10, vec![boxed((5.0, 5.0), (11.0, 6.0))]).is_err());
    }
}
