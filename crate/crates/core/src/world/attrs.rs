//! Closed attribute vocabularies of the tabletop world.

use serde::{Deserialize, Serialize};

macro_rules! word_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(
    /// Object, container and obstacle identifiers.
    Shape {
        Block => "block",
        Flower => "flower",
        Heart => "heart",
        Star => "star",
        Cross => "cross",
        Triangle => "triangle",
        Hexagon => "hexagon",
        LetterT => "letter-t",
        LetterL => "letter-l",
        LetterV => "letter-v",
        Bowl => "bowl",
        Pan => "pan",
        Pallet => "pallet",
        Box => "box",
        Line => "line",
    }
);

word_enum!(
    Color {
        Red => "red",
        Green => "green",
        Blue => "blue",
        Yellow => "yellow",
        Purple => "purple",
        Orange => "orange",
        Cyan => "cyan",
        Pink => "pink",
    }
);

word_enum!(
    Texture {
        Plain => "plain",
        PolkaDot => "polka-dot",
        Striped => "striped",
        Checkered => "checkered",
        Diagonal => "diagonal",
        Grid => "grid",
    }
);

word_enum!(
    /// Ordinal directions; rows grow southward, columns eastward.
    Direction {
        North => "north",
        South => "south",
        East => "east",
        West => "west",
        Northeast => "northeast",
        Northwest => "northwest",
        Southeast => "southeast",
        Southwest => "southwest",
    }
);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Object,
    Container,
    Obstacle,
}

impl Shape {
    pub fn kind(self) -> ShapeKind {
        match self {
            Shape::Bowl | Shape::Pan | Shape::Pallet | Shape::Box => ShapeKind::Container,
            Shape::Line => ShapeKind::Obstacle,
            _ => ShapeKind::Object,
        }
    }

    pub fn is_container(self) -> bool {
        self.kind() == ShapeKind::Container
    }

    pub fn of_kind(kind: ShapeKind) -> Vec<Shape> {
        Shape::ALL.iter().copied().filter(|s| s.kind() == kind).collect()
    }
}

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [235, 215, 40],
            Color::Purple => [150, 60, 190],
            Color::Orange => [245, 140, 30],
            Color::Cyan => [40, 205, 215],
            Color::Pink => [245, 135, 195],
        }
    }
}

impl Direction {
    /// (row, col) offset of the neighbouring cell.
    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::North => (-1, 0),
            Direction::South => (1, 0),
            Direction::East => (0, 1),
            Direction::West => (0, -1),
            Direction::Northeast => (-1, 1),
            Direction::Northwest => (-1, -1),
            Direction::Southeast => (1, 1),
            Direction::Southwest => (1, -1),
        }
    }
}

/// Angles a rotation task may request.
pub const ANGLES: [u16; 11] = [30, 60, 90, 120, 150, 180, 210, 240, 270, 300, 330];

/// Color and texture of an object; orientation is carried by the object itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Chars {
    pub color: Color,
    pub texture: Texture,
}

impl Chars {
    pub fn new(color: Color, texture: Texture) -> Self {
        Self { color, texture }
    }

    /// "red" or "red polka-dot"; plain texture is never spelled out.
    pub fn words(self) -> Vec<&'static str> {
        let mut w = vec![self.color.word()];
        if self.texture != Texture::Plain {
            w.push(self.texture.word());
        }
        w
    }
}
