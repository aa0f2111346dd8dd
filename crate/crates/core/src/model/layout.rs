use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Recurrence,
    SparseAttention,
}

impl LayerKind {
    fn code(self) -> char {
        match self {
            LayerKind::Recurrence => 'R',
            LayerKind::SparseAttention => 'A',
        }
    }
}

/// Ordered layer kinds of a stack.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerLayout {
    pub kinds: Vec<LayerKind>,
}

impl LayerLayout {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn attention_indices(&self) -> Vec<usize> {
        self.indices_of(LayerKind::SparseAttention)
    }

    pub fn recurrence_indices(&self) -> Vec<usize> {
        self.indices_of(LayerKind::Recurrence)
    }

    fn indices_of(&self, kind: LayerKind) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| (k == kind).then_some(i))
            .collect()
    }
}

/// One character per layer: `R` recurrence, `A` sparse attention.
impl fmt::Display for LayerLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.kinds.iter().try_for_each(|k| write!(f, "{}", k.code()))
    }
}

impl FromStr for LayerLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kinds = s
            .trim()
            .chars()
            .map(|c| match c {
                'R' => Ok(LayerKind::Recurrence),
                'A' => Ok(LayerKind::SparseAttention),
                other => Err(Error::Input(format!("unknown layer code `{other}` in layout"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if kinds.is_empty() {
            return Err(Error::InvalidConfig("layout must have at least one layer".into()));
        }
        Ok(LayerLayout { kinds })
    }
}

/// Spreads `round(n_layers · attn_ratio)` attention layers evenly: with
/// `period = round(n_layers / n_attn)`, layer `i` is attention iff
/// `(i + 1) % period == 0`.
pub fn build_layout(n_layers: usize, attn_ratio: f64) -> Result<LayerLayout> {
    if n_layers == 0 {
        return Err(Error::InvalidConfig("model needs at least one layer".into()));
    }
    if !(0.0..=1.0).contains(&attn_ratio) {
        return Err(Error::InvalidConfig(format!("attn_ratio {attn_ratio} outside [0, 1]")));
    }
    let n_attn = (n_layers as f64 * attn_ratio).round() as usize;
    let kinds = if n_attn == 0 {
        vec![LayerKind::Recurrence; n_layers]
    } else {
        let period = ((n_layers as f64 / n_attn as f64).round() as usize).max(1);
        (0..n_layers)
            .map(|i| {
                if (i + 1) % period == 0 {
                    LayerKind::SparseAttention
                } else {
                    LayerKind::Recurrence
                }
            })
            .collect()
    };
    Ok(LayerLayout { kinds })
}

/// Insertion indices (into the base stack) that expand an `n_base`-layer
/// stack by `ratio`: one new attention block right after every base layer the
/// layout rule marks.
pub fn expansion_positions(n_base: usize, ratio: f64) -> Result<Vec<usize>> {
    Ok(build_layout(n_base, ratio)?
        .attention_indices()
        .into_iter()
        .map(|i| i + 1)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_ratio_on_twelve_layers() {
        let l = build_layout(12, 0.25).unwrap();
        assert_eq!(l.attention_indices(), vec![3, 7, 11]);
        assert_eq!(l.to_string(), "RRRARRRARRRA");
    }

    #[test]
    fn ratio_endpoints() {
        let l = build_layout(12, 0.0).unwrap();
        assert!(l.attention_indices().is_empty());
        let l = build_layout(12, 1.0).unwrap();
        assert!(l.recurrence_indices().is_empty());
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(build_layout(0, 0.5).is_err());
        assert!(build_layout(4, 1.5).is_err());
        assert!(build_layout(4, -0.1).is_err());
    }

    #[test]
    fn layout_text_round_trips() {
        let l = build_layout(8, 0.25).unwrap();
        assert_eq!(l.to_string().parse::<LayerLayout>().unwrap(), l);
        assert!("RXA".parse::<LayerLayout>().is_err());
    }

    #[test]
    fn expansion_positions_follow_layout() {
        assert_eq!(expansion_positions(12, 0.25).unwrap(), vec![4, 8, 12]);
        assert!(expansion_positions(12, 0.0).unwrap().is_empty());
    }
}
