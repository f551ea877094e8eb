//! Scenes, change events, rendering and templated captions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bridge::vocab::normalize;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Building,
    Road,
    Tree,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 3] = [ObjectKind::Building, ObjectKind::Road, ObjectKind::Tree];

    pub fn word(self) -> &'static str {
        match self {
            ObjectKind::Building => "building",
            ObjectKind::Road => "road",
            ObjectKind::Tree => "tree",
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            ObjectKind::Building => [0.86, 0.84, 0.88],
            ObjectKind::Road => [0.22, 0.22, 0.24],
            ObjectKind::Tree => [0.12, 0.52, 0.16],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Location {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl Location {
    pub const ALL: [Location; 5] = [
        Location::TopLeft,
        Location::TopRight,
        Location::BottomLeft,
        Location::BottomRight,
        Location::Center,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Location::TopLeft => "top-left",
            Location::TopRight => "top-right",
            Location::BottomLeft => "bottom-left",
            Location::BottomRight => "bottom-right",
            Location::Center => "center",
        }
    }

    /// Slot center `(row, col)` in units of an eighth of the image side.
    fn anchor(self) -> (usize, usize) {
        match self {
            Location::TopLeft => (2, 2),
            Location::TopRight => (2, 6),
            Location::BottomLeft => (6, 2),
            Location::BottomRight => (6, 6),
            Location::Center => (4, 4),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub location: Location,
    /// Color multiplier in [0.85, 1].
    pub intensity: f64,
    /// Roads only: drawn at double width.
    pub wide: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

pub const MAX_OBJECTS: usize = 4;

impl Scene {
    pub fn at(&self, location: Location) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.location == location)
    }

    fn free_slots(&self) -> Vec<Location> {
        Location::ALL.into_iter().filter(|l| self.at(*l).is_none()).collect()
    }

    /// Random scene with up to `MAX_OBJECTS - 1` objects so an addition always fits.
    pub fn random(rng: &mut Rng) -> Scene {
        let count = rng.below(MAX_OBJECTS);
        let mut slots = Location::ALL.to_vec();
        rng.shuffle(&mut slots);
        let objects = slots[..count]
            .iter()
            .map(|&location| SceneObject {
                kind: ObjectKind::ALL[rng.below(3)],
                location,
                intensity: rng.uniform_range(0.85, 1.0),
                wide: false,
            })
            .collect();
        Scene { objects }
    }

    /// `[size, size, 3]` image in [0, 1]. `texture` is a per-pair noise field
    /// shared by both dates so only the change differs.
    pub fn render(&self, size: usize, texture: &[f64]) -> Tensor {
        let base = [0.62, 0.50, 0.36];
        let mut data = vec![0.0; size * size * 3];
        for p in 0..size * size {
            for c in 0..3 {
                data[p * 3 + c] = base[c] + texture[p];
            }
        }
        let unit = size as f64 / 32.0;
        for o in &self.objects {
            let (ar, ac) = o.location.anchor();
            let (cy, cx) = ((ar * size) as f64 / 8.0, (ac * size) as f64 / 8.0);
            let color = o.kind.color().map(|v| v * o.intensity);
            for y in 0..size {
                for x in 0..size {
                    let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let inside = match o.kind {
                        ObjectKind::Building => py.abs() <= 3.0 * unit && px.abs() <= 3.0 * unit,
                        ObjectKind::Tree => py * py + px * px <= (3.0 * unit).powi(2),
                        ObjectKind::Road => {
                            let half = if o.wide { 2.0 } else { 1.0 } * unit;
                            py.abs() <= half && px.abs() <= 7.0 * unit
                        }
                    };
                    if inside {
                        data[(y * size + x) * 3..][..3].copy_from_slice(&color);
                    }
                }
            }
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(vec![size, size, 3], data).expect("image shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Add,
    Remove,
    WidenRoad,
    None,
}

impl ChangeKind {
    pub const ALL: [ChangeKind; 4] = [ChangeKind::Add, ChangeKind::Remove, ChangeKind::WidenRoad, ChangeKind::None];

    pub fn as_str(self) -> &'static str {
        match self {
            ChangeKind::Add => "add",
            ChangeKind::Remove => "remove",
            ChangeKind::WidenRoad => "widen_road",
            ChangeKind::None => "none",
        }
    }
}

impl std::fmt::Display for ChangeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub kind: ChangeKind,
    /// Absent exactly for `none`.
    pub target: Option<(ObjectKind, Location)>,
}

impl ChangeEvent {
    pub const NONE: ChangeEvent = ChangeEvent {
        kind: ChangeKind::None,
        target: None,
    };

    /// Draws an event applicable to `scene`; about a quarter are `none`.
    pub fn random(scene: &Scene, rng: &mut Rng) -> ChangeEvent {
        if rng.uniform() < 0.25 {
            return ChangeEvent::NONE;
        }
        let mut options = Vec::new();
        if scene.objects.len() < MAX_OBJECTS {
            for l in scene.free_slots() {
                for k in ObjectKind::ALL {
                    options.push(ChangeEvent {
                        kind: ChangeKind::Add,
                        target: Some((k, l)),
                    });
                }
            }
        }
        for o in &scene.objects {
            options.push(ChangeEvent {
                kind: ChangeKind::Remove,
                target: Some((o.kind, o.location)),
            });
            if o.kind == ObjectKind::Road && !o.wide {
                options.push(ChangeEvent {
                    kind: ChangeKind::WidenRoad,
                    target: Some((ObjectKind::Road, o.location)),
                });
            }
        }
        // options is never empty: a scene has at most MAX_OBJECTS - 1 objects
        options[rng.below(options.len())]
    }

    pub fn apply(&self, scene: &Scene, rng: &mut Rng) -> Scene {
        let mut next = scene.clone();
        match (self.kind, self.target) {
            (ChangeKind::Add, Some((kind, location))) => next.objects.push(SceneObject {
                kind,
                location,
                intensity: rng.uniform_range(0.85, 1.0),
                wide: false,
            }),
            (ChangeKind::Remove, Some((_, location))) => next.objects.retain(|o| o.location != location),
            (ChangeKind::WidenRoad, Some((_, location))) => {
                for o in next.objects.iter_mut().filter(|o| o.location == location) {
                    o.wide = true;
                }
            }
            _ => {}
        }
        next
    }
}

const ADD: [&str; 5] = [
    "a {obj} is built at the {loc}",
    "a new {obj} appears in the {loc}",
    "the {loc} area now has a {obj}",
    "a {obj} has been constructed at the {loc}",
    "at the {loc} a {obj} was built",
];
const REMOVE: [&str; 5] = [
    "the {obj} at the {loc} is removed",
    "a {obj} disappears from the {loc}",
    "the {loc} {obj} is gone",
    "a {obj} has been demolished at the {loc}",
    "at the {loc} the {obj} was removed",
];
const WIDEN: [&str; 5] = [
    "the road at the {loc} is widened",
    "the {loc} road becomes wider",
    "a road is broadened at the {loc}",
    "the road in the {loc} has been expanded",
    "at the {loc} the road was widened",
];
const NO_CHANGE: [&str; 5] = [
    "there is no change",
    "nothing has changed",
    "the scene remains the same",
    "no change is visible",
    "the two images are identical",
];

pub const TEMPLATES_PER_KIND: usize = 5;

fn templates(kind: ChangeKind) -> &'static [&'static str; 5] {
    match kind {
        ChangeKind::Add => &ADD,
        ChangeKind::Remove => &REMOVE,
        ChangeKind::WidenRoad => &WIDEN,
        ChangeKind::None => &NO_CHANGE,
    }
}

/// Caption for `event` using template `variant` (mod 5).
pub fn caption(event: &ChangeEvent, variant: usize) -> String {
    let t = templates(event.kind)[variant % TEMPLATES_PER_KIND];
    match event.target {
        Some((obj, loc)) => t.replace("{obj}", obj.word()).replace("{loc}", loc.word()),
        None => t.to_string(),
    }
}

/// All five paraphrases of `event`.
pub fn captions(event: &ChangeEvent) -> Vec<String> {
    (0..TEMPLATES_PER_KIND).map(|v| caption(event, v)).collect()
}

/// Every event the generator can produce.
pub fn all_events() -> Vec<ChangeEvent> {
    let mut out = vec![ChangeEvent::NONE];
    for loc in Location::ALL {
        for obj in ObjectKind::ALL {
            out.push(ChangeEvent {
                kind: ChangeKind::Add,
                target: Some((obj, loc)),
            });
            out.push(ChangeEvent {
                kind: ChangeKind::Remove,
                target: Some((obj, loc)),
            });
        }
        out.push(ChangeEvent {
            kind: ChangeKind::WidenRoad,
            target: Some((ObjectKind::Road, loc)),
        });
    }
    out
}

/// Every caption string the templates can produce.
pub fn all_captions() -> Vec<String> {
    all_events().iter().flat_map(captions).collect()
}

/// Recovers the event a caption describes, if it matches a template.
pub fn parse_caption(text: &str) -> Option<ChangeEvent> {
    let text = normalize(text);
    all_events()
        .into_iter()
        .find(|e| captions(e).iter().any(|c| normalize(c) == text))
}
