//! Binary label convention: real = 0, fake = 1.

/// Class label of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    /// The other class.
    #[inline]
    pub fn flip(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.index())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_an_involution() {
        for l in [Label::Real, Label::Fake] {
            assert_eq!(l.flip().flip(), l);
            assert_ne!(l.flip(), l);
        }
    }

    #[test]
    fn flip_matches_one_minus_y() {
        for l in [Label::Real, Label::Fake] {
            assert_eq!(l.flip().index(), 1 - l.index());
        }
    }
}
