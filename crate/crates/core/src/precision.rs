use serde::{Deserialize, Serialize};

/// Precision variant of a layer's resident weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Precision {
    Full,
    Q8,
    Q4,
    Q3,
}

impl Precision {
    pub const ALL: [Precision; 4] = [Precision::Full, Precision::Q8, Precision::Q4, Precision::Q3];

    /// Quantization bit width, `None` for full precision.
    pub fn bits(self) -> Option<u32> {
        match self {
            Precision::Full => None,
            Precision::Q8 => Some(8),
            Precision::Q4 => Some(4),
            Precision::Q3 => Some(3),
        }
    }

    pub fn from_bits(bits: u32) -> Option<Precision> {
        match bits {
            8 => Some(Precision::Q8),
            4 => Some(Precision::Q4),
            3 => Some(Precision::Q3),
            _ => None,
        }
    }

    pub fn is_quantized(self) -> bool {
        self != Precision::Full
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Precision::Full => "FULL",
            Precision::Q8 => "Q8",
            Precision::Q4 => "Q4",
            Precision::Q3 => "Q3",
        };
        f.write_str(s)
    }
}

/// One value per precision variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerPrecision<T> {
    pub full: T,
    pub q8: T,
    pub q4: T,
    pub q3: T,
}

impl<T: Copy> PerPrecision<T> {
    pub fn get(&self, precision: Precision) -> T {
        match precision {
            Precision::Full => self.full,
            Precision::Q8 => self.q8,
            Precision::Q4 => self.q4,
            Precision::Q3 => self.q3,
        }
    }

    /// Values ordered from highest to lowest precision.
    pub fn descending(&self) -> [T; 4] {
        [self.full, self.q8, self.q4, self.q3]
    }
}
