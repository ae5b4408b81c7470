//! Attribute scenes and their deterministic rasterization.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{DataError, Image};

macro_rules! attribute_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).expect("listed variant")
            }

            pub fn parse(text: &str) -> Option<Self> {
                match text { $($text => Some($name::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

attribute_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross" });
attribute_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow", White => "white" });
attribute_enum!(Size { Small => "small", Large => "large" });
attribute_enum!(Position { Center => "center", Top => "top", Bottom => "bottom", Left => "left", Right => "right" });
attribute_enum!(Background { Black => "black", Gray => "gray" });
attribute_enum!(Attribute {
    Shape => "shape",
    Color => "color",
    Size => "size",
    Position => "position",
    Background => "background",
});

impl Attribute {
    /// Number of values the attribute can take.
    pub fn cardinality(self) -> usize {
        match self {
            Attribute::Shape => Shape::ALL.len(),
            Attribute::Color => Color::ALL.len(),
            Attribute::Size => Size::ALL.len(),
            Attribute::Position => Position::ALL.len(),
            Attribute::Background => Background::ALL.len(),
        }
    }

    /// Value names in index order.
    pub fn value_names(self) -> Vec<&'static str> {
        match self {
            Attribute::Shape => Shape::ALL.iter().map(|v| v.as_str()).collect(),
            Attribute::Color => Color::ALL.iter().map(|v| v.as_str()).collect(),
            Attribute::Size => Size::ALL.iter().map(|v| v.as_str()).collect(),
            Attribute::Position => Position::ALL.iter().map(|v| v.as_str()).collect(),
            Attribute::Background => Background::ALL.iter().map(|v| v.as_str()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub position: Position,
    pub background: Background,
}

/// Number of distinct scenes.
pub const SCENE_COUNT: usize = 4 * 5 * 2 * 5 * 2;

impl SceneSpec {
    pub fn get(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Shape => self.shape.index(),
            Attribute::Color => self.color.index(),
            Attribute::Size => self.size.index(),
            Attribute::Position => self.position.index(),
            Attribute::Background => self.background.index(),
        }
    }

    pub fn value_name(&self, attr: Attribute) -> &'static str {
        attr.value_names()[self.get(attr)]
    }

    pub fn with(mut self, attr: Attribute, value: usize) -> Self {
        match attr {
            Attribute::Shape => self.shape = Shape::ALL[value],
            Attribute::Color => self.color = Color::ALL[value],
            Attribute::Size => self.size = Size::ALL[value],
            Attribute::Position => self.position = Position::ALL[value],
            Attribute::Background => self.background = Background::ALL[value],
        }
        self
    }

    /// Mixed-radix index in `0..SCENE_COUNT`.
    pub fn index(&self) -> usize {
        Attribute::ALL
            .iter()
            .fold(0, |acc, &a| acc * a.cardinality() + self.get(a))
    }

    pub fn from_index(mut index: usize) -> Self {
        assert!(index < SCENE_COUNT, "scene index {index} out of range");
        let mut spec = SceneSpec {
            shape: Shape::Circle,
            color: Color::Red,
            size: Size::Small,
            position: Position::Center,
            background: Background::Black,
        };
        for &a in Attribute::ALL.iter().rev() {
            spec = spec.with(a, index % a.cardinality());
            index /= a.cardinality();
        }
        spec
    }

    /// Attributes on which two scenes differ.
    pub fn diff(&self, other: &SceneSpec) -> Vec<Attribute> {
        Attribute::ALL
            .iter()
            .copied()
            .filter(|&a| self.get(a) != other.get(a))
            .collect()
    }
}

pub fn color_rgb(c: Color) -> [u8; 3] {
    match c {
        Color::Red => [220, 40, 40],
        Color::Green => [40, 200, 60],
        Color::Blue => [50, 80, 230],
        Color::Yellow => [230, 220, 40],
        Color::White => [245, 245, 245],
    }
}

pub fn background_rgb(b: Background) -> [u8; 3] {
    match b {
        Background::Black => [0, 0, 0],
        Background::Gray => [110, 110, 110],
    }
}

pub const MIN_RENDER_SIZE: usize = 8;
pub const MAX_RENDER_SIZE: usize = 64;

fn check_size(size: usize) -> Result<(), DataError> {
    if !(MIN_RENDER_SIZE..=MAX_RENDER_SIZE).contains(&size) || size % 4 != 0 {
        return Err(DataError::UnsupportedSize(size));
    }
    Ok(())
}

/// Pixel-center membership test for the scene's foreground object.
fn covers(spec: &SceneSpec, size: usize, x: usize, y: usize) -> bool {
    let s = size as f64;
    let (fx, fy) = match spec.position {
        Position::Center => (0.5, 0.5),
        Position::Top => (0.5, 0.25),
        Position::Bottom => (0.5, 0.75),
        Position::Left => (0.25, 0.5),
        Position::Right => (0.75, 0.5),
    };
    let r = match spec.size {
        Size::Small => 0.125 * s,
        Size::Large => 0.22 * s,
    };
    let dx = x as f64 + 0.5 - fx * s;
    let dy = y as f64 + 0.5 - fy * s;
    match spec.shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
        Shape::Cross => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Row-major foreground mask at `size × size`.
pub fn foreground_mask(spec: &SceneSpec, size: usize) -> Result<Vec<bool>, DataError> {
    check_size(size)?;
    Ok((0..size * size)
        .map(|i| covers(spec, size, i % size, i / size))
        .collect())
}

pub fn render(spec: &SceneSpec, size: usize) -> Result<Image, DataError> {
    let mask = foreground_mask(spec, size)?;
    let mut img = Image::filled(size, size, background_rgb(spec.background));
    let fg = color_rgb(spec.color);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        img.set_pixel(i % size, i / size, fg);
    }
    Ok(img)
}

/// Per-patch flag: does the patch contain any foreground pixel.
pub fn foreground_patches(spec: &SceneSpec, size: usize, patch: usize) -> Result<Vec<bool>, DataError> {
    let mask = foreground_mask(spec, size)?;
    if patch == 0 || size % patch != 0 {
        return Err(DataError::UnsupportedSize(size));
    }
    let grid = size / patch;
    let mut out = vec![false; grid * grid];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % size, i / size);
        out[(y / patch) * grid + x / patch] = true;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, color: Color) -> SceneSpec {
        SceneSpec {
            shape,
            color,
            size: Size::Large,
            position: Position::Center,
            background: Background::Black,
        }
    }

    #[test]
    fn index_round_trip_covers_all_scenes() {
        for i in 0..SCENE_COUNT {
            assert_eq!(SceneSpec::from_index(i).index(), i);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = spec(Shape::Circle, Color::Red);
        assert_eq!(render(&s, 32).unwrap().pixels, render(&s, 32).unwrap().pixels);
    }

    #[test]
    fn color_change_touches_only_foreground() {
        let a = render(&spec(Shape::Triangle, Color::Red), 32).unwrap();
        let b = render(&spec(Shape::Triangle, Color::Blue), 32).unwrap();
        let mask = foreground_mask(&spec(Shape::Triangle, Color::Red), 32).unwrap();
        let mut changed = 0;
        for (i, &fg) in mask.iter().enumerate() {
            let (x, y) = (i % 32, i / 32);
            if fg {
                assert_ne!(a.pixel(x, y), b.pixel(x, y));
                changed += 1;
            } else {
                assert_eq!(a.pixel(x, y), b.pixel(x, y));
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn corner_is_background() {
        for bg in Background::ALL {
            let mut s = spec(Shape::Square, Color::White);
            s.background = *bg;
            s.size = Size::Large;
            let img = render(&s, 32).unwrap();
            assert_eq!(img.pixel(0, 0), &background_rgb(*bg));
            assert_eq!(img.pixel(31, 31), &background_rgb(*bg));
        }
    }

    #[test]
    fn rendering_is_injective() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..SCENE_COUNT {
            let img = render(&SceneSpec::from_index(i), 32).unwrap();
            assert!(seen.insert(img.pixels), "scene {i} collides");
        }
    }

    #[test]
    fn unsupported_sizes() {
        let s = spec(Shape::Cross, Color::Green);
        assert!(matches!(render(&s, 4), Err(DataError::UnsupportedSize(4))));
        assert!(matches!(render(&s, 30), Err(DataError::UnsupportedSize(30))));
        assert!(matches!(render(&s, 128), Err(DataError::UnsupportedSize(128))));
        assert!(render(&s, 8).is_ok());
    }

    #[test]
    fn foreground_patches_nonempty() {
        for i in 0..SCENE_COUNT {
            let p = foreground_patches(&SceneSpec::from_index(i), 32, 8).unwrap();
            assert!(p.iter().any(|&b| b));
            assert!(p.iter().any(|&b| !b));
        }
    }
}
